"""Linear state-space baseline from a least-squares ARX fit.

The difference equation::

    y[k+1] = sum_{i<p} a_i y[k-i] + sum_{j<r} b_j u[k-j]

is realised in block observer canonical form with ``L = max(p, r)`` blocks
of size ``n``::

    x_1[k+1] = a_0 x_1[k] + x_2[k] + b_0 u[k]
    ...
    x_L[k+1] = a_{L-1} x_1[k]      + b_{L-1} u[k]
    y[k]     = x_1[k]

so ``C_L = [I 0 ... 0]`` picks the current output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lifted_model import simulate_linear
from .lifting import Trial
from .regression import _matrix_list, pseudoinverse


class RankDeficientError(ValueError):
    pass


@dataclass
class LinearSSModel:
    a: np.ndarray  # (p, n, n)
    b: np.ndarray  # (r, n, m)
    sample_period: float = 0.1
    kind: str = "linear-ss"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.A_L, self.B_L, self.C_L = observer_canonical(self.a, self.b)

    @property
    def p(self) -> int:
        return self.a.shape[0]

    @property
    def r(self) -> int:
        return self.b.shape[0]

    @property
    def blocks(self) -> int:
        return max(self.p, self.r)

    @property
    def output_dim(self) -> int:
        return self.a.shape[1]

    @property
    def input_dim(self) -> int:
        return self.b.shape[2]

    @property
    def state_dim(self) -> int:
        return self.A_L.shape[0]

    @property
    def output_lags(self) -> int:
        return self.blocks - 1

    @property
    def input_lags(self) -> int:
        return self.blocks - 1

    def matrices(self, projected: bool = True):
        return self.A_L, self.B_L, self.C_L

    def padded(self):
        L, n, m = self.blocks, self.output_dim, self.input_dim
        a = np.zeros((L, n, n))
        b = np.zeros((L, n, m))
        a[: self.p] = self.a
        b[: self.r] = self.b
        return a, b

    def initial_state(self, y_hist, u_hist) -> np.ndarray:
        """State at ``k`` from ``y[k-L+1..k]`` and ``u[k-L+1..k-1]`` (chronological)."""
        L, n, m = self.blocks, self.output_dim, self.input_dim
        y_hist = np.asarray(y_hist, dtype=float).reshape(-1, n)
        u_hist = np.asarray(u_hist, dtype=float).reshape(-1, m)
        if len(y_hist) != L or len(u_hist) != L - 1:
            raise ValueError(f"need {L} outputs and {L - 1} inputs of history")
        a, b = self.padded()
        x = np.zeros((L, n))
        x[0] = y_hist[-1]
        # x_j[k] = sum_{i=j}^{L-1} a_i y[k-1-i+j] + b_i u[k-1-i+j]   (0-based j >= 1)
        for j in range(1, L):
            for i in range(j, L):
                lag = 1 + i - j  # samples back from k
                x[j] += a[i] @ y_hist[L - 1 - lag] + b[i] @ u_hist[L - 1 - lag]
        return x.ravel()

    def to_dict(self) -> dict:
        return {"kind": "linear-ss", "sample_period": self.sample_period,
                "output_lags": self.p, "input_lags": self.r,
                "a": [_matrix_list(ai) for ai in self.a],
                "b": [_matrix_list(bj) for bj in self.b],
                "A_L": _matrix_list(self.A_L), "B_L": _matrix_list(self.B_L),
                "C_L": _matrix_list(self.C_L)}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSSModel":
        if d.get("kind") != "linear-ss":
            raise ValueError(f"not a linear-ss model: kind={d.get('kind')!r}")
        return cls(np.array(d["a"], dtype=float), np.array(d["b"], dtype=float),
                   float(d["sample_period"]))


def observer_canonical(a: np.ndarray, b: np.ndarray):
    p, n, _ = a.shape
    r, _, m = b.shape
    L = max(p, r)
    A = np.zeros((L * n, L * n))
    B = np.zeros((L * n, m))
    for i in range(L):
        if i < p:
            A[i * n:(i + 1) * n, :n] = a[i]
        if i < r:
            B[i * n:(i + 1) * n] = b[i]
        if i + 1 < L:
            A[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = np.eye(n)
    C = np.zeros((n, L * n))
    C[:, :n] = np.eye(n)
    return A, B, C


def arx_regressors(trial: Trial, p: int, r: int):
    """Rows ``[y[k], ..., y[k-p+1], u[k], ..., u[k-r+1]]`` and targets ``y[k+1]``."""
    w = max(p, r) - 1
    ks = np.arange(w, len(trial) - 1)
    Phi = np.hstack([trial.x[ks - i] for i in range(p)] + [trial.u[ks - j] for j in range(r)])
    return Phi, trial.x[ks + 1]


def fit_arx(trials: list[Trial] | Trial, output_lags: int = 2, input_lags: int = 2,
            sample_period: float | None = None) -> LinearSSModel:
    """Least-squares ARX fit realised in observer canonical form."""
    if isinstance(trials, Trial):
        trials = [trials]
    p, r = output_lags, input_lags
    if p < 1 or r < 1:
        raise ValueError("output_lags and input_lags must be >= 1")
    parts = [arx_regressors(tr, p, r) for tr in trials if len(tr) > max(p, r)]
    if not parts:
        raise ValueError("trials too short for the requested lags")
    Phi = np.vstack([x for x, _ in parts])
    Y = np.vstack([y for _, y in parts])
    s = np.linalg.svd(Phi, compute_uv=False)
    rank = int(np.sum(s > np.finfo(float).eps * max(Phi.shape) * s[0])) if s.size else 0
    if rank < Phi.shape[1]:
        raise RankDeficientError(
            f"ARX regressor matrix has rank {rank} < {Phi.shape[1]} columns; "
            "collect more (or more exciting) data"
        )
    theta = pseudoinverse(Phi) @ Y  # (p n + r m, n)
    n = Y.shape[1]
    m = trials[0].u.shape[1]
    a = np.array([theta[i * n:(i + 1) * n].T for i in range(p)])
    off = p * n
    b = np.array([theta[off + j * m: off + (j + 1) * m].T for j in range(r)])
    if sample_period is None:
        t = trials[0].t
        sample_period = float(t[1] - t[0]) if len(t) > 1 else 0.1
    return LinearSSModel(a, b, sample_period)


def rollout_linear(model: LinearSSModel, y_hist, u_hist, inputs) -> np.ndarray:
    """Outputs ``y[0..H]`` starting from a history window."""
    A, B, C = model.matrices()
    return simulate_linear(A, B, C, model.initial_state(y_hist, u_hist), inputs)[0]


def arx_simulate(model: LinearSSModel, y_hist, u_hist, inputs) -> np.ndarray:
    """Run the ARX difference equation directly (reference for the realisation)."""
    L = model.blocks
    a, b = model.padded()
    ys = [np.asarray(v, dtype=float) for v in np.asarray(y_hist, dtype=float)]
    u_hist = np.asarray(u_hist, dtype=float).reshape(L - 1, model.input_dim)
    us = [np.asarray(v, dtype=float) for v in u_hist]
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.input_dim)
    out = [ys[-1]]
    for u in inputs:
        us.append(u)
        y_next = sum(a[i] @ ys[-1 - i] for i in range(L)) + sum(b[j] @ us[-1 - j] for j in range(L))
        ys.append(y_next)
        out.append(y_next)
    return np.array(out)

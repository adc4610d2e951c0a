"""Monomial lifting, delay embedding and snapshot data matrices.

The lifted vector always starts with the embedded coordinates themselves,
so that the output matrix of a lifted model is ``C = [I 0]``. The remaining
observables are the constant monomial followed by the monomials of degree
2 through ``max_degree`` in graded lexicographic order::

    psi(xi) = [xi_1, ..., xi_q, 1, xi_1**2, xi_1*xi_2, ..., xi_q**D]

Trajectory data is handled as a list of :class:`Trial` objects. Snapshot
pairs are never formed across two trials.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_INT64_MAX = 2**63 - 1


def monomial_count(q: int, max_degree: int) -> int:
    """Number of monomials of total degree ``<= max_degree`` in ``q`` variables.

    Raises
    ------
    OverflowError
        If the count does not fit a signed 64-bit integer.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    if max_degree < 0:
        raise ValueError(f"max_degree must be >= 0, got {max_degree}")
    count = math.comb(q + max_degree, max_degree)
    if count > _INT64_MAX:
        raise OverflowError(
            f"monomial count C({q}+{max_degree}, {max_degree}) exceeds int64"
        )
    return count


@dataclass(frozen=True)
class BasisSpec:
    """Monomial dictionary on a ``embedded_dim``-dimensional domain."""

    embedded_dim: int
    max_degree: int

    def __post_init__(self):
        if self.embedded_dim < 1:
            raise ValueError("embedded_dim must be positive")
        if self.max_degree < 1:
            # degree-1 terms are required for the coordinate-projection property
            raise ValueError("max_degree must be >= 1")

    @property
    def size(self) -> int:
        return monomial_count(self.embedded_dim, self.max_degree)

    def exponents(self) -> np.ndarray:
        """Exponent tuples in canonical order, shape ``(N, q)``."""
        return _plan(self.embedded_dim, self.max_degree)[0].copy()

    def to_dict(self) -> dict:
        return {"embedded_dim": self.embedded_dim, "max_degree": self.max_degree,
                "family": "monomial"}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        if d.get("family", "monomial") != "monomial":
            raise ValueError(f"unsupported basis family {d['family']!r}")
        return cls(int(d["embedded_dim"]), int(d["max_degree"]))


_PLANS: dict[tuple[int, int], tuple[np.ndarray, list[tuple[int, int]]]] = {}


def _plan(q: int, max_degree: int):
    """Exponents plus a (parent column, variable) recipe for every column.

    Each monomial of degree >= 2 is its degree ``d - 1`` parent times one
    variable, so a whole basis is evaluated with one multiply per column.
    """
    key = (q, max_degree)
    if key in _PLANS:
        return _PLANS[key]
    combos: list[tuple[int, ...]] = [(i,) for i in range(q)] + [()]
    for d in range(2, max_degree + 1):
        combos.extend(itertools.combinations_with_replacement(range(q), d))
    index = {c: i for i, c in enumerate(combos)}
    recipe = []
    exps = np.zeros((len(combos), q), dtype=np.int64)
    for i, c in enumerate(combos):
        for v in c:
            exps[i, v] += 1
        if len(c) >= 2:
            recipe.append((index[c[:-1]], c[-1]))
        else:
            recipe.append((-1, c[0] if c else -1))
    _PLANS[key] = (exps, recipe)
    return _PLANS[key]


def lift(basis: BasisSpec, xi: np.ndarray) -> np.ndarray:
    """Evaluate the lifting function.

    ``xi`` may be a single embedded vector of shape ``(q,)`` or a batch of
    shape ``(K, q)``; the result has shape ``(N,)`` or ``(K, N)``.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    X = np.atleast_2d(xi)
    if X.ndim != 2 or X.shape[1] != basis.embedded_dim:
        raise ValueError(
            f"expected embedded dimension {basis.embedded_dim}, got shape {xi.shape}"
        )
    _, recipe = _plan(basis.embedded_dim, basis.max_degree)
    out = np.empty((X.shape[0], len(recipe)))
    for col, (parent, var) in enumerate(recipe):
        if parent >= 0:
            np.multiply(out[:, parent], X[:, var], out=out[:, col])
        elif var >= 0:
            out[:, col] = X[:, var]
        else:
            out[:, col] = 1.0
    return out[0] if single else out


@dataclass(frozen=True)
class DelaySpec:
    state_dim: int
    input_dim: int
    state_delays: int = 0
    input_delays: int = 0
    sample_period: float = 0.1

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 0:
            raise ValueError("state_dim must be >= 1 and input_dim >= 0")
        if self.state_delays < 0 or self.input_delays < 0:
            raise ValueError("delay counts must be non-negative")
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")

    @property
    def embedded_dim(self) -> int:
        return self.state_dim * (self.state_delays + 1) + self.input_dim * self.input_delays

    @property
    def window(self) -> int:
        """Number of past samples needed before the first snapshot."""
        return max(self.state_delays, self.input_delays)

    def embed(self, x_hist: np.ndarray, u_hist: np.ndarray) -> np.ndarray:
        """Stack ``[x[k], ..., x[k-d], u[k-1], ..., u[k-d_u]]``.

        ``x_hist`` holds ``x[k-d..k]`` and ``u_hist`` holds ``u[k-d_u..k-1]``,
        both in chronological order.
        """
        x_hist = np.asarray(x_hist, dtype=float).reshape(-1, self.state_dim)
        u_hist = np.asarray(u_hist, dtype=float).reshape(-1, self.input_dim)
        if len(x_hist) != self.state_delays + 1 or len(u_hist) != self.input_delays:
            raise ValueError("history length does not match delay spec")
        return np.concatenate([x_hist[::-1].ravel(), u_hist[::-1].ravel()])

    def to_dict(self) -> dict:
        return {"state_dim": self.state_dim, "input_dim": self.input_dim,
                "state_delays": self.state_delays, "input_delays": self.input_delays,
                "sample_period": self.sample_period}

    @classmethod
    def from_dict(cls, d: dict) -> "DelaySpec":
        return cls(int(d["state_dim"]), int(d["input_dim"]), int(d["state_delays"]),
                   int(d["input_delays"]), float(d["sample_period"]))


@dataclass
class Trial:
    """One uniformly sampled experiment: times ``t``, outputs ``x``, inputs ``u``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    name: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.t), -1)
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.t), -1)

    def __len__(self):
        return len(self.t)

    def slice(self, start: int, stop: int | None = None) -> "Trial":
        return Trial(self.t[start:stop], self.x[start:stop], self.u[start:stop],
                     self.name, self.seed)

    def split(self, holdout_fraction: float) -> tuple["Trial", "Trial"]:
        """Split into a leading training part and a trailing held-out part."""
        n_hold = int(round(len(self) * holdout_fraction))
        cut = len(self) - n_hold
        return self.slice(0, cut), self.slice(cut)


def check_uniform(t: np.ndarray, sample_period: float, rtol: float = 1e-6) -> None:
    dt = np.diff(np.asarray(t, dtype=float))
    if dt.size and np.max(np.abs(dt - sample_period)) > rtol * sample_period + 1e-12:
        worst = int(np.argmax(np.abs(dt - sample_period)))
        raise ValueError(
            f"non-uniform sampling: dt[{worst}]={dt[worst]!r}, expected {sample_period!r}"
        )


@dataclass
class SnapshotSet:
    """Delay-embedded snapshot triples ``(a[k], b[k], u[k])`` stored row-wise."""

    a: np.ndarray
    b: np.ndarray
    u: np.ndarray
    trial: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    trial_names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.a)


def build_delay_snapshots(trials: list[Trial] | Trial, delays: DelaySpec) -> SnapshotSet:
    """Assemble snapshot pairs from one or more trials without bridging them."""
    if isinstance(trials, Trial):
        trials = [trials]
    n, m, d, du = delays.state_dim, delays.input_dim, delays.state_delays, delays.input_delays
    w = delays.window
    A, Bs, Us, ids, steps = [], [], [], [], []
    for ti, tr in enumerate(trials):
        if tr.x.shape[1] != n or tr.u.shape[1] != m:
            raise ValueError(
                f"trial {tr.name or ti}: expected {n} states and {m} inputs, "
                f"got {tr.x.shape[1]} and {tr.u.shape[1]}"
            )
        L = len(tr)
        if L < w + 2:
            raise ValueError(
                f"trial {tr.name or ti} has {L} samples; embedding window needs {w + 2}"
            )
        check_uniform(tr.t, delays.sample_period)
        ks = np.arange(w, L - 1)
        # column blocks: x[k - j] for j = 0..d, then u[k - 1 - j] for j = 0..du-1
        a = np.hstack([tr.x[ks - j] for j in range(d + 1)]
                      + [tr.u[ks - 1 - j] for j in range(du)])
        b = np.hstack([tr.x[ks + 1 - j] for j in range(d + 1)]
                      + [tr.u[ks - j] for j in range(du)])
        A.append(a.reshape(len(ks), -1))
        Bs.append(b.reshape(len(ks), -1))
        Us.append(tr.u[ks])
        ids.append(np.full(len(ks), ti))
        steps.append(ks)
    return SnapshotSet(np.vstack(A), np.vstack(Bs), np.vstack(Us),
                       np.concatenate(ids), np.concatenate(steps),
                       [tr.name for tr in trials])


@dataclass
class DataMatrices:
    Psi_a: np.ndarray
    Psi_b: np.ndarray
    Gamma_alpha: np.ndarray
    Gamma_beta: np.ndarray
    u: np.ndarray

    @property
    def n_snapshots(self) -> int:
        return self.Psi_a.shape[0]


def assemble_matrices(basis: BasisSpec, snapshots: SnapshotSet) -> DataMatrices:
    if len(snapshots) == 0:
        raise ValueError("no snapshots")
    Psi_a = lift(basis, snapshots.a)
    Psi_b = lift(basis, snapshots.b)
    u = np.asarray(snapshots.u, dtype=float)
    return DataMatrices(Psi_a, Psi_b, np.hstack([Psi_a, u]), np.hstack([Psi_b, u]), u)


# --- trial CSV files -------------------------------------------------------

def write_trial_csv(path: str | Path, trial: Trial, comments: dict | None = None) -> None:
    path = Path(path)
    n, m = trial.x.shape[1], trial.u.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
    meta = dict(comments or {})
    if trial.seed is not None:
        meta.setdefault("seed", trial.seed)
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.hstack([trial.t[:, None], trial.x, trial.u]):
            w.writerow([repr(float(v)) for v in row])


def read_trial_csv(path: str | Path) -> Trial:
    path = Path(path)
    meta = {}
    rows = []
    header = None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            if not line.strip():
                continue
            if header is None:
                header = line.strip().split(",")
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    if header is None or header[0] != "t":
        raise ValueError(f"{path}: missing 't,x1..xn,u1..um' header")
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("u"))
    data = np.array(rows, dtype=float).reshape(-1, 1 + n + m)
    seed = int(meta["seed"]) if "seed" in meta else None
    return Trial(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:], path.stem, seed)


def read_trials(directory: str | Path) -> list[Trial]:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no trial CSV files in {directory}")
    return [read_trial_csv(f) for f in files]

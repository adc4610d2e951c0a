"""Identification of lifted linear models from snapshot data.

The Koopman matrix ``U`` solves ``Gamma_alpha @ U ~= Gamma_beta`` either in
the least-squares sense or with an L1 penalty on every entry of ``U``. The
lifted model is read off the transpose::

    U.T = [[A, B],
           [O, I]]

and a projection ``P`` fitted on the one-step predictions pulls them back
toward the image of the lifting function, giving ``A_hat = P A`` and
``B_hat = P B``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .lifting import (
    BasisSpec,
    DataMatrices,
    DelaySpec,
    SnapshotSet,
    Trial,
    assemble_matrices,
    build_delay_snapshots,
    lift,
)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A matrix decomposition failed or produced non-finite values."""


# --- pseudoinverse ---------------------------------------------------------

def pseudoinverse(M: np.ndarray, rtol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the singular value decomposition.

    Singular values below ``rtol * s_max`` are treated as zero. The default
    ``rtol`` is ``eps * max(M.shape)``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError(
            f"pseudoinverse of {M.shape} matrix with "
            f"{int(np.sum(~np.isfinite(M)))} non-finite entries"
        )
    if M.size == 0:
        return np.zeros(M.T.shape)
    if rtol is None:
        rtol = np.finfo(float).eps * max(M.shape)
    try:
        Uu, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD failed for {M.shape} matrix (max |entry| {np.max(np.abs(M)):.3e}): {exc}"
        ) from exc
    cutoff = rtol * (s[0] if s.size else 0.0)
    s_inv = np.zeros_like(s)
    keep = s > cutoff
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ Uu.T


# --- Koopman matrix fits ---------------------------------------------------

@dataclass
class KoopmanMatrix:
    U: np.ndarray
    lam: float = 0.0
    converged: bool = True
    iterations: int = 0
    max_update: float = 0.0

    @property
    def density(self) -> float:
        return density(self.U)


def density(M: np.ndarray) -> float:
    """Fraction of exactly nonzero entries."""
    M = np.asarray(M)
    return float(np.count_nonzero(M)) / M.size if M.size else 0.0


def fit_least_squares(data: DataMatrices, rtol: float | None = None) -> KoopmanMatrix:
    """Minimum-norm least-squares Koopman matrix ``pinv(Gamma_alpha) @ Gamma_beta``."""
    if rtol is None:
        K, Np = data.Gamma_alpha.shape
        rtol = np.finfo(float).eps * max(K, Np)
    U = pseudoinverse(data.Gamma_alpha, rtol) @ data.Gamma_beta
    return KoopmanMatrix(U, 0.0)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(data: DataMatrices, U: np.ndarray, lam: float) -> float:
    R = data.Gamma_alpha @ U - data.Gamma_beta
    return float(np.sum(R * R) + lam * np.sum(np.abs(U)))


def _active_set_column(gram, cross_col, lam, u0, max_steps: int | None = None):
    """Solve one LASSO column exactly by a primal active-set method.

    Starting from the support and signs of ``u0``, the optimality
    conditions on a fixed signed support are linear,
    ``G_SS x = c_S - lam/2 s``. If the solution flips a sign the iterate
    moves only up to the first crossing and that coordinate leaves the
    support; otherwise the coordinate that most violates
    ``|c_j - G_j. x| <= lam/2`` enters. Returns ``None`` if a reduced Gram
    block is singular or the step budget runs out.
    """
    p = len(cross_col)
    half = 0.5 * lam
    u = np.array(u0, dtype=float)
    S = list(np.flatnonzero(u))
    signs = list(np.sign(u[S]))
    slack = 1e-12 * max(1.0, float(np.max(np.abs(cross_col), initial=0.0)))
    for _ in range(max_steps or 4 * p):
        if S:
            idx = np.array(S)
            sg = np.array(signs)
            try:
                # an inaccurate solve is caught by the next coordinate sweep
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                    xs = scipy.linalg.solve(gram[np.ix_(idx, idx)],
                                            cross_col[idx] - half * sg, assume_a="pos")
            except (np.linalg.LinAlgError, ValueError):
                return None
            if not np.all(np.isfinite(xs)):
                return None
            bad = np.sign(xs) != sg
            if bad.any():
                d = xs - u[idx]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = np.where(bad & (d != 0), -u[idx] / d, np.inf)
                t = np.where(t < 0, 0.0, t)
                k = int(np.argmin(t))
                u[idx] += min(float(t[k]), 1.0) * d
                u[idx[k]] = 0.0
                del S[k], signs[k]
                continue
            u[idx] = xs
        grad = cross_col - (gram[:, S] @ u[S] if S else 0.0)
        viol = np.abs(grad) - half
        viol[S] = -np.inf
        j = int(np.argmax(viol))
        if viol[j] <= slack:
            return u
        S.append(j)
        signs.append(float(np.sign(grad[j])))
    return None


def lasso_cd(gram: np.ndarray, cross: np.ndarray, lam: float, tol: float = 1e-6,
             max_iter: int = 10_000, U0: np.ndarray | None = None,
             refine_every: int = 10):
    """Cyclic coordinate descent for ``||X U - Y||_F^2 + lam * |U|_1``.

    Works on the Gram matrix ``X.T X`` and ``X.T Y`` only. Every column of
    ``U`` is an independent problem; columns are swept together (each
    coordinate update is vectorised over the still-active columns) and a
    column is frozen once its largest coordinate change in a sweep drops
    below ``tol``.

    Plain coordinate descent crawls when monomial features are nearly
    collinear. Every ``refine_every`` sweeps each active column is
    therefore also handed to an exact active-set solve started from its
    current support (see :func:`_active_set_column`); the next sweep then
    checks the result against the same ``tol`` criterion. ``refine_every=0`` disables this.

    Returns ``(U, converged, sweeps, max_update)`` where ``converged`` and
    ``sweeps`` are per column.
    """
    p, c = cross.shape
    U = np.zeros((p, c)) if U0 is None else np.array(U0, dtype=float)
    diag = np.diag(gram).copy()
    half = 0.5 * lam
    sweeps = np.zeros(c, dtype=int)
    converged = np.zeros(c, dtype=bool)
    last_update = np.full(c, np.inf)
    # zero-variance features can only take the value 0
    live = diag > 0
    U[~live] = 0.0
    active = np.arange(c)
    for it in range(1, max_iter + 1):
        Ua = U[:, active]
        delta = np.zeros(len(active))
        for j in np.flatnonzero(live):
            old = Ua[j].copy()
            rho = cross[j, active] - gram[j] @ Ua + diag[j] * old
            new = soft_threshold(rho, half) / diag[j]
            Ua[j] = new
            np.maximum(delta, np.abs(new - old), out=delta)
        U[:, active] = Ua
        sweeps[active] = it
        last_update[active] = delta
        done = delta < tol
        converged[active[done]] = True
        active = active[~done]
        if active.size == 0:
            break
        if refine_every and it % refine_every == 0 and it < max_iter:
            for col in active:
                x = _active_set_column(gram, cross[:, col], lam, U[:, col])
                if x is not None:
                    U[:, col] = x
    return U, converged, sweeps, float(np.max(last_update)) if c else 0.0


def fit_lasso(data: DataMatrices, lam: float, tol: float = 1e-6, max_iter: int = 10_000,
              warm_start: np.ndarray | None = None) -> KoopmanMatrix:
    """L1-regularised Koopman matrix by column-wise coordinate descent.

    Non-convergence does not raise; the result carries ``converged=False``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = data.Gamma_alpha
    gram = X.T @ X
    cross = X.T @ data.Gamma_beta
    U, conv, sweeps, max_upd = lasso_cd(gram, cross, lam, tol, max_iter, warm_start)
    if not conv.all():
        log.warning("lasso(lambda=%g): %d/%d columns did not converge in %d sweeps",
                    lam, int((~conv).sum()), conv.size, max_iter)
    return KoopmanMatrix(U, float(lam), bool(conv.all()), int(sweeps.max(initial=0)), max_upd)


# --- model extraction ------------------------------------------------------

def output_matrix(n: int, N: int) -> np.ndarray:
    C = np.zeros((n, N))
    C[:, :n] = np.eye(n)
    return C


def extract_model(U: KoopmanMatrix | np.ndarray, n: int, m: int):
    """Partition ``U.T`` into ``A`` (N x N), ``B`` (N x m) and build ``C``.

    The bottom block of ``U.T`` is discarded; see :func:`bottom_block_deviation`.
    """
    U = U.U if isinstance(U, KoopmanMatrix) else np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError(f"Koopman matrix must be square, got {U.shape}")
    N = U.shape[0] - m
    if N < n or N < 1:
        raise ValueError(f"lifted dimension {N} smaller than state dimension {n}")
    Ut = U.T
    A = Ut[:N, :N].copy()
    B = Ut[:N, N:].copy()
    return A, B, output_matrix(n, N)


def bottom_block_deviation(U: KoopmanMatrix | np.ndarray, m: int) -> float:
    """Max-abs distance of the bottom ``m`` rows of ``U.T`` from ``[O I]``."""
    U = U.U if isinstance(U, KoopmanMatrix) else np.asarray(U)
    N = U.shape[0] - m
    target = np.hstack([np.zeros((m, N)), np.eye(m)])
    return float(np.max(np.abs(U.T[N:] - target))) if m else 0.0


def fit_projection(A: np.ndarray, B: np.ndarray, data: DataMatrices,
                   rtol: float | None = None) -> np.ndarray:
    """Projection ``P = (pinv(Omega_a) @ Psi_b).T`` with ``Omega_a`` the one-step predictions."""
    Omega = data.Psi_a @ A.T + data.u @ B.T
    return (pseudoinverse(Omega, rtol) @ data.Psi_b).T


# --- models ----------------------------------------------------------------

def _matrix_list(M) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(M)]


@dataclass
class KoopmanModel:
    """Lifted linear model ``z+ = A_hat z + B_hat u``, ``y = C z``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    P: np.ndarray
    basis: BasisSpec
    delays: DelaySpec
    lam: float = 0.0
    density: float = 1.0
    A_hat: np.ndarray = None
    B_hat: np.ndarray = None
    scaling: np.ndarray | None = None
    kind: str = field(default="koopman", init=False)

    def __post_init__(self):
        if self.A_hat is None:
            self.A_hat = self.P @ self.A
        if self.B_hat is None:
            self.B_hat = self.P @ self.B

    @property
    def output_dim(self) -> int:
        return self.delays.state_dim

    @property
    def input_dim(self) -> int:
        return self.delays.input_dim

    @property
    def output_lags(self) -> int:
        return self.delays.state_delays

    @property
    def input_lags(self) -> int:
        return self.delays.input_delays

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    def matrices(self, projected: bool = True):
        if projected:
            return self.A_hat, self.B_hat, self.C
        return self.A, self.B, self.C

    def embed(self, y_hist: np.ndarray, u_hist: np.ndarray) -> np.ndarray:
        return self.delays.embed(y_hist, u_hist)

    def initial_state(self, y_hist: np.ndarray, u_hist: np.ndarray) -> np.ndarray:
        """Lifted state from ``y[k-d..k]`` and ``u[k-d_u..k-1]`` (chronological)."""
        return lift(self.basis, self.embed(y_hist, u_hist))

    def to_dict(self) -> dict:
        return {
            "kind": "koopman",
            "basis": self.basis.to_dict(),
            "delays": self.delays.to_dict(),
            "lambda": float(self.lam),
            "density": float(self.density),
            "A_hat": _matrix_list(self.A_hat),
            "B_hat": _matrix_list(self.B_hat),
            "C": _matrix_list(self.C),
            "A": _matrix_list(self.A),
            "B": _matrix_list(self.B),
            "P": _matrix_list(self.P),
            "scaling": None if self.scaling is None else [float(v) for v in self.scaling],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        if d.get("kind", "koopman") != "koopman":
            raise ValueError(f"not a Koopman model: kind={d.get('kind')!r}")
        arr = lambda key: np.array(d[key], dtype=float)  # noqa: E731
        B = arr("B")
        N = arr("A").shape[0]
        m = DelaySpec.from_dict(d["delays"]).input_dim
        B = B.reshape(N, m)
        return cls(arr("A"), B, arr("C"), arr("P"), BasisSpec.from_dict(d["basis"]),
                   DelaySpec.from_dict(d["delays"]), float(d["lambda"]), float(d["density"]),
                   arr("A_hat"), arr("B_hat").reshape(N, m),
                   None if d.get("scaling") is None else np.array(d["scaling"], dtype=float))


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_model(path: str | Path):
    d = json.loads(Path(path).read_text())
    kind = d.get("kind", "koopman")
    if kind == "koopman":
        return KoopmanModel.from_dict(d)
    if kind == "linear-ss":
        from .baseline import LinearSSModel
        return LinearSSModel.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


# --- Algorithm: identification with a lambda sweep -------------------------

@dataclass
class IdentifyConfig:
    max_degree: int = 2
    state_delays: int = 0
    input_delays: int = 0
    sample_period: float = 0.1
    lambdas: list[float] = field(default_factory=lambda: [0.0])
    tol: float = 1e-6
    max_iter: int = 10_000
    pinv_rtol: float | None = None
    holdout_fraction: float = 0.1
    held_out: bool = True
    horizon: int = 25
    stride: int = 25
    scale: bool = False


@dataclass
class SweepRow:
    lam: float
    density: float
    normalized_error: float
    converged: bool
    density_U: float = 1.0
    chosen: bool = False


def column_scales(Gamma: np.ndarray) -> np.ndarray:
    """Root-mean-square of each column; 1 for all-zero columns."""
    s = np.sqrt(np.mean(Gamma * Gamma, axis=0))
    s[s == 0] = 1.0
    return s


def fit_koopman(data: DataMatrices, lam: float, n: int, m: int, basis: BasisSpec,
                delays: DelaySpec, tol: float = 1e-6, max_iter: int = 10_000,
                pinv_rtol: float | None = None, scale: bool = False,
                warm_start: np.ndarray | None = None):
    """Steps 3-5 of the identification: regression, partition, projection.

    With ``scale=True`` the regression runs on ``Gamma / s`` column-wise and
    the result is mapped back, ``U = diag(1/s) U_s diag(s)``, so the stored
    model acts on raw lifted coordinates.
    """
    if scale:
        s = column_scales(data.Gamma_alpha)
        scaled = DataMatrices(data.Psi_a, data.Psi_b, data.Gamma_alpha / s,
                              data.Gamma_beta / s, data.u)
    else:
        s, scaled = None, data
    if lam == 0:
        km = fit_least_squares(scaled, pinv_rtol)
    else:
        km = fit_lasso(scaled, lam, tol, max_iter, warm_start)
    solved = km.U
    if s is not None:
        km = KoopmanMatrix((solved / s[:, None]) * s[None, :], km.lam, km.converged,
                           km.iterations, km.max_update)
    A, B, C = extract_model(km, n, m)
    log.debug("lambda=%g: bottom block deviation %.3e", lam, bottom_block_deviation(km, m))
    P = fit_projection(A, B, data, pinv_rtol)
    model = KoopmanModel(A, B, C, P, basis, delays, float(lam), km.density, scaling=s)
    return model, km, solved


def identify(config: IdentifyConfig, trials: list[Trial]):
    """Sweep the L1 weight and keep the model with the lowest prediction error.

    Training uses the leading ``1 - holdout_fraction`` of every trial; the
    trailing slice is used to score each candidate (or the training slices
    themselves when ``held_out`` is false).

    Returns ``(best_model, rows)`` with one :class:`SweepRow` per lambda.
    """
    from .lifted_model import evaluate_many

    if not trials:
        raise ValueError("no trials")
    if not config.lambdas:
        raise ValueError("empty lambda grid")
    n, m = trials[0].x.shape[1], trials[0].u.shape[1]
    delays = DelaySpec(n, m, config.state_delays, config.input_delays, config.sample_period)
    basis = BasisSpec(delays.embedded_dim, config.max_degree)
    train, score = [], []
    for tr in trials:
        if config.holdout_fraction > 0:
            a, b = tr.split(config.holdout_fraction)
        else:
            a, b = tr, tr
        train.append(a)
        score.append(b if config.held_out else a)
    snaps: SnapshotSet = build_delay_snapshots(train, delays)
    data = assemble_matrices(basis, snaps)
    log.info("identify: K=%d snapshots, N=%d observables, m=%d", len(snaps), basis.size, m)

    rows: list[SweepRow] = []
    models = []
    warm = None
    for lam in sorted(float(v) for v in config.lambdas):
        model, km, warm = fit_koopman(data, lam, n, m, basis, delays, config.tol,
                                      config.max_iter, config.pinv_rtol, config.scale,
                                      warm if lam > 0 else None)
        try:
            err = evaluate_many(model, score, config.horizon, config.stride).normalized_error
        except FloatingPointError:
            err = float("inf")
        if not np.isfinite(err):
            err = float("inf")
        rows.append(SweepRow(lam, density(model.A_hat), err, km.converged, km.density))
        models.append(model)
        log.info("lambda=%g density(A_hat)=%.3f error=%.4g converged=%s",
                 lam, rows[-1].density, err, km.converged)
    ok = [i for i, r in enumerate(rows) if r.converged and np.isfinite(r.normalized_error)]
    if not ok:
        diag = "; ".join(f"lambda={r.lam}: converged={r.converged}, error={r.normalized_error}"
                         for r in rows)
        raise RuntimeError(f"no usable candidate model ({diag})")
    best = min(ok, key=lambda i: rows[i].normalized_error)
    rows[best].chosen = True
    return models[best], rows


def write_sweep_csv(path: str | Path, rows: list[SweepRow]) -> None:
    with open(path, "w") as fh:
        fh.write("lambda,density,normalized_error,converged,chosen,density_U\n")
        for r in rows:
            fh.write(f"{r.lam!r},{r.density!r},{r.normalized_error!r},"
                     f"{str(r.converged).lower()},{str(r.chosen).lower()},{r.density_U!r}\n")


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            rec = dict(zip(header, line.strip().split(",")))
            rows.append(SweepRow(float(rec["lambda"]), float(rec["density"]),
                                 float(rec["normalized_error"]), rec["converged"] == "true",
                                 float(rec.get("density_U", "nan")),
                                 rec.get("chosen") == "true"))
    return rows

"""Dense (condensed) MPC quadratic programs and an ADMM solver.

Objective convention, for the stage-wise problem and the dense one alike::

    sum_{i=0}^{Nh}   z_i' G_i z_i + g_i' z_i
  + sum_{i=0}^{Nh-1} u_i' H_i u_i + h_i' u_i

    dense:  U' Q U + q' U + const      s.t.  A_in U <= b_in

Note the absence of a factor 1/2. The dual variables ``y`` returned by the
solver satisfy ``2 Q U + q + A_in' y = 0`` at optimality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

PSD_TOL = 1e-8


def symmetrize_psd(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return ``(M + M')/2``; reject eigenvalues below ``-PSD_TOL``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    S = 0.5 * (M + M.T)
    if S.size and np.linalg.eigvalsh(S)[0] < -PSD_TOL:
        raise ValueError(f"{name} is not positive semidefinite")
    return S


@dataclass
class MpcProblemSpec:
    """Stage-wise MPC program over horizon ``Nh``.

    ``G``/``g`` have ``Nh + 1`` entries (stage 0 through terminal);
    ``H``/``h`` and the constraint lists ``E``/``F``/``b`` have ``Nh``.
    Constraint lists may be empty for an unconstrained problem.
    """

    A: np.ndarray
    B: np.ndarray
    G: list
    H: list
    g: list
    h: list
    E: list = field(default_factory=list)
    F: list = field(default_factory=list)
    b: list = field(default_factory=list)
    C: np.ndarray | None = None
    validate: bool = True

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        N, m = self.B.shape
        Nh = len(self.H)
        if self.A.shape != (N, N):
            raise ValueError(f"A has shape {self.A.shape}, expected {(N, N)}")
        if len(self.G) != Nh + 1 or len(self.g) != Nh + 1 or len(self.h) != Nh:
            raise ValueError("need Nh+1 state costs and Nh input costs")
        if self.validate:
            self.G = [symmetrize_psd(Gi, f"G[{i}]") for i, Gi in enumerate(self.G)]
            self.H = [symmetrize_psd(Hi, f"H[{i}]") for i, Hi in enumerate(self.H)]
        for i, Gi in enumerate(self.G):
            if np.shape(Gi) != (N, N) or np.shape(self.g[i]) != (N,):
                raise ValueError(f"stage {i}: state cost dimensions do not match N={N}")
        for i, Hi in enumerate(self.H):
            if np.shape(Hi) != (m, m) or np.shape(self.h[i]) != (m,):
                raise ValueError(f"stage {i}: input cost dimensions do not match m={m}")
        if self.E or self.F or self.b:
            if not (len(self.E) == len(self.F) == len(self.b) == Nh):
                raise ValueError("constraint lists must have Nh entries each")
            for i in range(Nh):
                c = len(self.b[i])
                if np.shape(self.E[i]) != (c, N) or np.shape(self.F[i]) != (c, m):
                    raise ValueError(f"stage {i}: constraint dimensions inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.H)

    def objective(self, z0, U) -> float:
        """Stage-wise objective along the model recursion."""
        N, m = self.B.shape
        U = np.asarray(U, dtype=float).reshape(self.horizon, m)
        z = np.asarray(z0, dtype=float)
        total = 0.0
        for i in range(self.horizon):
            total += z @ self.G[i] @ z + self.g[i] @ z + U[i] @ self.H[i] @ U[i] + self.h[i] @ U[i]
            z = self.A @ z + self.B @ U[i]
        return float(total + z @ self.G[-1] @ z + self.g[-1] @ z)

    def violation(self, z0, U) -> float:
        N, m = self.B.shape
        U = np.asarray(U, dtype=float).reshape(self.horizon, m)
        z = np.asarray(z0, dtype=float)
        worst = 0.0
        for i in range(self.horizon):
            if self.b:
                worst = max(worst, float(np.max(self.E[i] @ z + self.F[i] @ U[i] - self.b[i],
                                                initial=0.0)))
            z = self.A @ z + self.B @ U[i]
        return worst


@dataclass
class DenseQp:
    Q: np.ndarray
    q: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    const: float = 0.0
    Phi: np.ndarray | None = None    # stacked z_i = Phi_i z0 + Gam_i U
    Gam: np.ndarray | None = None
    z0: np.ndarray | None = None

    @property
    def n_var(self) -> int:
        return len(self.q)

    def objective(self, U) -> float:
        U = np.asarray(U, dtype=float)
        return float(U @ self.Q @ U + self.q @ U + self.const)

    def states(self, U) -> np.ndarray:
        """Recover ``z[0..Nh]`` as rows."""
        N = len(self.z0)
        return (self.Phi @ self.z0 + self.Gam @ np.asarray(U, dtype=float)).reshape(-1, N)

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "q": self.q.tolist(), "A_in": self.A_in.tolist(),
                "b_in": self.b_in.tolist(), "const": self.const}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseQp":
        n = len(d["q"])
        return cls(np.array(d["Q"], dtype=float).reshape(n, n), np.array(d["q"], dtype=float),
                   np.array(d["A_in"], dtype=float).reshape(-1, n),
                   np.array(d["b_in"], dtype=float), float(d["const"]))


class Condenser:
    """Eliminates the lifted states of an MPC program.

    Everything that depends only on the model, the quadratic weights and
    the constraint matrices is built once; :meth:`condense` then only
    forms the terms that depend on ``z0``, ``g``, ``h`` and ``b``. This is
    what makes a receding-horizon loop cheap for a large lifted dimension.
    """

    def __init__(self, A, B, G, H, E=(), F=()):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        N, m = B.shape
        Nh = len(H)
        self.N, self.m, self.Nh = N, m, Nh
        # Phi_i = A^i,  Gam_i = [A^{i-1} B, ..., B, 0, ...]
        powers = [np.eye(N)]
        for _ in range(Nh):
            powers.append(A @ powers[-1])
        AkB = [B]
        for _ in range(Nh - 1):
            AkB.append(A @ AkB[-1])
        Gam = np.zeros(((Nh + 1) * N, Nh * m))
        for i in range(1, Nh + 1):
            for j in range(i):
                Gam[i * N:(i + 1) * N, j * m:(j + 1) * m] = AkB[i - 1 - j]
        self.Phi = np.vstack(powers)
        self.Gam = Gam
        Q = scipy.linalg.block_diag(*H) if Nh else np.zeros((0, 0))
        lin = np.zeros((Nh * m, N))
        for i in range(1, Nh + 1):
            Gi = np.asarray(G[i], dtype=float)
            Gam_i = Gam[i * N:(i + 1) * N, : i * m]
            GG = Gi @ Gam_i
            Q[: i * m, : i * m] += Gam_i.T @ GG
            lin[: i * m] += 2.0 * GG.T @ powers[i]
        self.Q = 0.5 * (Q + Q.T)
        self.lin = lin
        self.G = [np.asarray(Gi, dtype=float) for Gi in G]
        self.powers = powers
        self.E = [np.asarray(Ei, dtype=float) for Ei in E]
        if self.E:
            rows = []
            for i in range(Nh):
                Fi = np.asarray(F[i], dtype=float)
                Sel = np.zeros((Fi.shape[0], Nh * m))
                Sel[:, i * m:(i + 1) * m] = Fi
                rows.append(self.E[i] @ Gam[i * N:(i + 1) * N] + Sel)
            self.A_in = np.vstack(rows)
            self.EPhi = np.vstack([self.E[i] @ powers[i] for i in range(Nh)])
        else:
            self.A_in = np.zeros((0, Nh * m))
            self.EPhi = np.zeros((0, N))

    @classmethod
    def from_spec(cls, spec: MpcProblemSpec) -> "Condenser":
        return cls(spec.A, spec.B, spec.G, spec.H, spec.E, spec.F)

    def condense(self, z0, g, h, b=()) -> DenseQp:
        z0 = np.asarray(z0, dtype=float)
        if z0.shape != (self.N,):
            raise ValueError(f"z0 must have shape ({self.N},), got {z0.shape}")
        gbar = np.concatenate([np.asarray(gi, dtype=float) for gi in g])
        q = self.lin @ z0 + self.Gam.T @ gbar
        q = q + (np.concatenate([np.asarray(hi, dtype=float) for hi in h]) if self.Nh else 0.0)
        free = self.Phi @ z0
        const = 0.0
        for i in range(self.Nh + 1):
            zi = free[i * self.N:(i + 1) * self.N]
            const += float(zi @ self.G[i] @ zi + g[i] @ zi)
        if len(self.A_in):
            b_in = np.concatenate([np.asarray(bi, dtype=float) for bi in b]) - self.EPhi @ z0
        else:
            b_in = np.zeros(0)
        return DenseQp(self.Q, q, self.A_in, b_in, const, self.Phi, self.Gam, z0)


def condense(spec: MpcProblemSpec, z0) -> DenseQp:
    """Dense QP in the stacked inputs ``U = [u_0; ...; u_{Nh-1}]``."""
    return Condenser.from_spec(spec).condense(z0, spec.g, spec.h, spec.b)


# --- solver ----------------------------------------------------------------

@dataclass
class QpSolution:
    u: np.ndarray
    y: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str
    rho: float = 1.0
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        return {"u": self.u.tolist(), "y": self.y.tolist(), "objective": self.objective,
                "primal_residual": self.primal_residual, "dual_residual": self.dual_residual,
                "iterations": self.iterations, "status": self.status}


@dataclass
class SolverSettings:
    tol: float = 1e-6
    max_iter: int = 4000
    rho: float = 1.0
    alpha: float = 1.6
    sigma: float = 1e-6
    adaptive_rho: bool = False
    adaptive_interval: int = 25
    check_every: int = 25
    polish: bool = True
    infeasible_tol: float = 1e-7


def kkt_residuals(qp: DenseQp, u, y) -> dict:
    """Stationarity, primal feasibility, dual feasibility and complementarity (inf-norms)."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    slack = qp.A_in @ u - qp.b_in
    return {
        "stationarity": float(np.max(np.abs(2 * qp.Q @ u + qp.q + qp.A_in.T @ y), initial=0.0)),
        "primal": float(np.max(slack, initial=0.0)),
        "dual": float(np.max(-y, initial=0.0)),
        "complementarity": float(np.max(np.abs(y * slack), initial=0.0)),
    }


def kkt_ok(qp: DenseQp, u, y, tol: float) -> bool:
    return max(kkt_residuals(qp, u, y).values()) <= tol


class _KktFactor:
    """Cached factorisation of ``P + sigma I + rho A'A``."""

    def __init__(self, P, A, sigma, rho):
        self.rho = rho
        M = P + sigma * np.eye(P.shape[0]) + rho * A.T @ A
        self.cho = scipy.linalg.cho_factor(M)

    def solve(self, rhs):
        return scipy.linalg.cho_solve(self.cho, rhs)


def _kkt_solve(P, g, Aw, r):
    """Solve ``[[P, Aw'], [Aw, 0]] [p; lam] = [-g; r]`` (lstsq if singular)."""
    n, k = P.shape[0], len(r)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = Aw.T
    K[n:, :n] = Aw
    rhs = np.concatenate([-g, r])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _independent_rows(A, order) -> list:
    """Greedy subset of ``order`` whose rows of ``A`` are linearly independent."""
    basis, keep = [], []
    for i in order:
        r = A[i] - sum((v @ A[i]) * v for v in basis)
        norm = np.linalg.norm(r)
        if norm > 1e-9 * max(np.linalg.norm(A[i]), 1e-300):
            basis.append(r / norm)
            keep.append(int(i))
    return keep


def _polish(qp: DenseQp, P, y, z, x, tol, max_steps: int | None = None):
    """Finish an ADMM iterate with a primal active-set method.

    The working set starts from the constraints ADMM believes active, taken
    by decreasing multiplier and skipping linearly dependent rows. Each
    step solves the equality-constrained subproblem on the working set and
    moves toward its minimiser as far as the other constraints allow. A
    blocking constraint joins the working set; after an unblocked step the
    subproblem multipliers are examined and the most negative one leaves.
    A point is returned only after it passes the full KKT check at ``tol``
    scaled by the magnitude of the problem data (at least 1).
    """
    A, b = qp.A_in, qp.b_in
    tol = tol * max(1.0, float(np.max(np.abs(qp.q), initial=0.0)),
                    float(np.max(np.abs(P), initial=0.0)))
    W = _independent_rows(A, [i for i in np.argsort(-y, kind="stable") if y[i] > b[i] - z[i]])
    x = np.array(x, dtype=float)
    for _ in range(max_steps or 2 * (len(b) + qp.n_var)):
        grad = P @ x + qp.q
        p, lam = _kkt_solve(P, grad, A[W], b[W] - A[W] @ x)
        Ap = A @ p
        slack = b - A @ x
        mask = Ap > 1e-14
        mask[W] = False
        if mask.any():
            ratios = np.maximum(slack[mask], 0.0) / Ap[mask]
            k = int(np.argmin(ratios))
            if ratios[k] < 1.0:
                x = x + ratios[k] * p
                W.append(int(np.flatnonzero(mask)[k]))
                continue
        x = x + p
        if W and lam.min() < -tol:
            del W[int(np.argmin(lam))]
            continue
        y_new = np.zeros(len(b))
        y_new[W] = np.maximum(lam, 0.0)
        if kkt_ok(qp, x, y_new, tol):
            return x, y_new
        return None
    return None


def solve_qp(qp: DenseQp, tol: float | None = None, max_iter: int | None = None,
             settings: SolverSettings | None = None, warm_u=None, warm_y=None) -> QpSolution:
    """Minimise ``U'QU + q'U`` subject to ``A_in U <= b_in`` by ADMM.

    The splitting follows the operator-splitting QP scheme with constraint
    copy ``z = A_in U``, relaxation ``alpha`` and penalty ``rho``. At every
    convergence check the constraints the iterate believes active seed a
    short primal active-set refinement (:func:`_polish`); its result is
    accepted only if it passes the full KKT check at ``tol``, relative to
    the data scale when that exceeds 1.
    """
    s = settings or SolverSettings()
    tol = s.tol if tol is None else tol
    max_iter = s.max_iter if max_iter is None else max_iter
    n = qp.n_var
    Q = symmetrize_psd(qp.Q, "Q")
    P = 2.0 * Q
    A, b = qp.A_in, qp.b_in
    c = len(b)
    if c == 0:
        u = np.linalg.lstsq(P, -qp.q, rcond=None)[0]
        res = float(np.max(np.abs(P @ u + qp.q), initial=0.0))
        status = "optimal" if res <= tol else "max-iter"
        return QpSolution(u, np.zeros(0), qp.objective(u), 0.0, res, 0, status, polished=True)

    x = np.zeros(n) if warm_u is None else np.array(warm_u, dtype=float)
    y = np.zeros(c) if warm_y is None else np.array(warm_y, dtype=float)
    z = np.minimum(A @ x, b)
    rho = s.rho
    fac = _KktFactor(P, A, s.sigma, rho)
    y_prev = y.copy()
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        rhs = s.sigma * x - qp.q + A.T @ (rho * z - y)
        x_t = fac.solve(rhs)
        z_t = A @ x_t
        x = s.alpha * x_t + (1 - s.alpha) * x
        v = s.alpha * z_t + (1 - s.alpha) * z
        z_new = np.minimum(v + y / rho, b)
        y_prev = y
        y = y + rho * (v - z_new)
        z = z_new
        if it % s.check_every and it != max_iter:
            continue
        r_prim = float(np.max(np.abs(A @ x - z)))
        r_dual = float(np.max(np.abs(P @ x + qp.q + A.T @ y)))
        if s.polish:
            pol = _polish(qp, P, y, z, x, tol)
            if pol is not None:
                u, yy = pol
                kk = kkt_residuals(qp, u, yy)
                return QpSolution(u, yy, qp.objective(u), kk["primal"], kk["stationarity"],
                                  it, "optimal", rho, True)
        if r_prim <= tol and r_dual <= tol:
            return QpSolution(x, y, qp.objective(x), r_prim, r_dual, it, "optimal", rho)
        dy = y - y_prev
        ndy = float(np.max(np.abs(dy)))
        if ndy > s.infeasible_tol:
            # certificate for one-sided rows: dy >= 0, A'dy = 0, b'dy < 0
            if (np.min(dy) >= -s.infeasible_tol * ndy
                    and np.max(np.abs(A.T @ dy)) <= s.infeasible_tol * ndy
                    and b @ np.maximum(dy, 0) < -s.infeasible_tol * ndy):
                return QpSolution(x, y, qp.objective(x), r_prim, r_dual, it, "infeasible", rho)
        if s.adaptive_rho and it % s.adaptive_interval == 0:
            scale_p = r_prim / max(np.max(np.abs(A @ x)), np.max(np.abs(z)), 1e-12)
            scale_d = r_dual / max(np.max(np.abs(P @ x)), np.max(np.abs(A.T @ y)),
                                   np.max(np.abs(qp.q)), 1e-12)
            new_rho = float(np.clip(rho * np.sqrt(scale_p / max(scale_d, 1e-12)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                fac = _KktFactor(P, A, s.sigma, rho)
    return QpSolution(x, y, qp.objective(x), r_prim, r_dual, it, "max-iter", rho)


def save_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), indent=1))

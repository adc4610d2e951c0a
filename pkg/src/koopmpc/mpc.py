"""Receding-horizon tracking control with lifted or baseline linear models."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plants as plants_mod
from .plants import PlantDivergenceError, PlantSpec
from .qp import Condenser, MpcProblemSpec, QpSolution, SolverSettings, solve_qp


@dataclass
class ControllerConfig:
    horizon: int = 25
    w_terminal: float = 100.0
    w_running: float = 0.1
    u_min: float = 0.0
    u_max: float = 10.0
    input_reg: float = 1e-6
    sample_period: float = 0.1
    constrain_inputs: bool = True
    warm_start: bool = True
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.w_terminal < 0 or self.w_running < 0 or self.input_reg < 0:
            raise ValueError("weights must be non-negative")
        if isinstance(self.solver, dict):
            self.solver = SolverSettings(**self.solver)


def _box_constraints(N: int, m: int, u_min: float, u_max: float):
    E = np.zeros((2 * m, N))
    F = np.vstack([np.eye(m), -np.eye(m)])
    b = np.concatenate([np.full(m, u_max), np.full(m, -u_min)])
    return E, F, b


def build_tracking_problem(config: ControllerConfig, model, r_window) -> MpcProblemSpec:
    """Output tracking cost ``w_i |C z_i - r_i|^2`` written in lifted coordinates.

    ``G_i = w_i C'C`` and ``g_i = -2 w_i C' r_i`` with ``w_i = w_running`` for
    ``i < Nh`` and ``w_terminal`` at ``i = Nh``; ``H_i = input_reg * I``.
    """
    A, B, C = model.matrices()
    N, m = B.shape
    Nh = config.horizon
    r = np.asarray(r_window, dtype=float).reshape(Nh + 1, C.shape[0])
    CtC = C.T @ C
    w = [config.w_running] * Nh + [config.w_terminal]
    G = [wi * CtC for wi in w]
    g = [-2.0 * wi * C.T @ ri for wi, ri in zip(w, r)]
    H = [config.input_reg * np.eye(m)] * Nh
    h = [np.zeros(m)] * Nh
    E, F, b = [], [], []
    if config.constrain_inputs:
        Ei, Fi, bi = _box_constraints(N, m, config.u_min, config.u_max)
        E, F, b = [Ei] * Nh, [Fi] * Nh, [bi] * Nh
    return MpcProblemSpec(A, B, G, H, g, h, E, F, b, C=C)


class MpcController:
    """Stateful K-MPC / L-MPC controller.

    The condensed Hessian and constraint matrix depend only on the model and
    the weights, so they are built once; each tick forms the linear term
    from the current lifted state and reference window.
    """

    def __init__(self, config: ControllerConfig, model):
        self.config = config
        self.model = model
        A, B, C = model.matrices()
        self.C = C
        N, m = B.shape
        self.N, self.m = N, m
        spec = build_tracking_problem(config, model, np.zeros((config.horizon + 1, C.shape[0])))
        self.spec = spec
        self.condenser = Condenser.from_spec(spec)
        self._w = np.array([config.w_running] * config.horizon + [config.w_terminal])
        self._prev: QpSolution | None = None

    def reset(self):
        self._prev = None

    def dense_qp(self, z0, r_window):
        r = np.asarray(r_window, dtype=float).reshape(self.config.horizon + 1, -1)
        g = [-2.0 * wi * (self.C.T @ ri) for wi, ri in zip(self._w, r)]
        return self.condenser.condense(z0, g, self.spec.h, self.spec.b)

    def solve(self, z0, r_window) -> QpSolution:
        qp = self.dense_qp(z0, r_window)
        warm_u = warm_y = None
        if self.config.warm_start and self._prev is not None:
            m = self.m
            warm_u = np.concatenate([self._prev.u[m:], self._prev.u[-m:]])
            if len(self._prev.y):
                c = len(self._prev.y) // self.config.horizon
                warm_y = np.concatenate([self._prev.y[c:], self._prev.y[-c:]])
        sol = solve_qp(qp, settings=self.config.solver, warm_u=warm_u, warm_y=warm_y)
        self._prev = sol
        return sol

    def step(self, y_hist, u_hist, r_window):
        """Lift the measured history, solve, and return ``(u[0], solution)``."""
        z0 = self.model.initial_state(y_hist, u_hist)
        sol = self.solve(z0, r_window)
        u0 = sol.u[: self.m]
        if self.config.constrain_inputs:
            u0 = np.clip(u0, self.config.u_min, self.config.u_max)
        return u0, sol


def mpc_step(config: ControllerConfig, model, y_hist, u_hist, r_window) -> np.ndarray:
    """One stateless controller evaluation; returns the first optimal input."""
    return MpcController(config, model).step(y_hist, u_hist, r_window)[0]


# --- references ------------------------------------------------------------

@dataclass
class TrackingTask:
    name: str
    reference: np.ndarray
    sample_period: float

    @property
    def duration(self) -> float:
        return len(self.reference) * self.sample_period

    def window(self, k: int, horizon: int) -> np.ndarray:
        """``r[k..k+horizon]``, holding the last sample past the end."""
        idx = np.minimum(np.arange(k, k + horizon + 1), len(self.reference) - 1)
        return self.reference[idx]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            n = self.reference.shape[1]
            fh.write("t," + ",".join(f"r{i + 1}" for i in range(n)) + "\n")
            for k, r in enumerate(self.reference):
                fh.write(",".join(repr(float(v)) for v in (k * self.sample_period, *r)) + "\n")


def _shape_vertices(shape: str, scale: float) -> np.ndarray:
    if shape == "star":
        ang = np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.382)
        pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    elif shape == "pacman":
        mouth = np.deg2rad(35.0)
        ang = np.linspace(mouth, 2 * np.pi - mouth, 181)
        pts = np.vstack([[0.0, 0.0], np.column_stack([np.cos(ang), np.sin(ang)])])
    elif shape == "block-m":
        pts = np.array([[-1, -1], [-1, 1], [-0.55, 1], [0, 0.25], [0.55, 1], [1, 1],
                        [1, -1], [0.6, -1], [0.6, 0.35], [0, -0.35], [-0.6, 0.35],
                        [-0.6, -1]], dtype=float)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return scale * pts


def _start_nearest_origin(pts: np.ndarray) -> np.ndarray:
    """Reorder a closed polygon so it starts at its point closest to the origin."""
    best, best_d = None, np.inf
    for i in range(len(pts)):
        p, q = pts[i], pts[(i + 1) % len(pts)]
        seg = q - p
        t = np.clip(-(p @ seg) / (seg @ seg), 0.0, 1.0) if seg @ seg > 0 else 0.0
        c = p + t * seg
        if c @ c < best_d - 1e-15:
            best, best_d = (i, t, c), c @ c
    i, t, c = best
    rest = [pts[(i + 1 + j) % len(pts)] for j in range(len(pts))]
    if t >= 1.0:
        rest = rest[1:]
    elif t <= 0.0:
        rest = rest[:-1]
    return np.vstack([c] + rest + [c])


def _resample_closed(poly: np.ndarray, n_samples: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = s[-1] * np.arange(n_samples) / max(n_samples - 1, 1)
    out = np.column_stack([np.interp(target, s, poly[:, j]) for j in range(poly.shape[1])])
    out[-1] = poly[-1]
    return out


def make_reference(shape: str, scale: float, duration: float, T_s: float,
                   center=(0.0, 0.0), name: str | None = None) -> TrackingTask:
    """Closed path traversed at constant speed, starting nearest the origin."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration / T_s))
    center = np.asarray(center, dtype=float)
    if shape == "circle":
        phase = 0.0
        if np.linalg.norm(center) > 0:
            phase = np.arctan2(-center[1], -center[0])
        ang = phase + 2 * np.pi * np.arange(n) / max(n - 1, 1)
        ang[-1] = phase
        ref = center + scale * np.column_stack([np.cos(ang), np.sin(ang)])
    elif shape == "setpoint":
        ref = np.tile(center + np.array([scale, 0.0]), (n, 1))
    else:
        poly = _start_nearest_origin(_shape_vertices(shape, scale) + center)
        ref = _resample_closed(poly, n)
    return TrackingTask(name or shape, ref, T_s)


# --- closed loop -----------------------------------------------------------

@dataclass
class ClosedLoopLog:
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    r: np.ndarray
    status: list
    solve_ms: np.ndarray
    x_true: np.ndarray
    task: str = ""
    controller: str = ""
    failure: str | None = None

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.y - self.r, axis=1)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if len(self.t) else float("nan")

    @property
    def std_error(self) -> float:
        return float(np.std(self.errors)) if len(self.t) else float("nan")

    @property
    def true_errors(self) -> np.ndarray:
        return np.linalg.norm(self.x_true - self.r, axis=1)

    def summary(self, timing: bool = True) -> dict:
        out = {"task": self.task, "controller": self.controller,
               "mean_error": self.mean_error, "std_error": self.std_error,
               "mean_true_error": float(np.mean(self.true_errors)) if len(self.t) else None,
               "ticks": int(len(self.t)),
               "non_optimal_ticks": int(sum(s != "optimal" for s in self.status)),
               "failure": self.failure}
        if timing:
            out["solve_ms_p95"] = float(np.percentile(self.solve_ms, 95)) if len(self.t) else None
        return out

    def to_csv(self, path: str | Path) -> None:
        n, m = self.y.shape[1], self.u.shape[1]
        cols = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                + [f"r{i + 1}" for i in range(n)] + ["error", "status", "solve_ms"])
        err = self.errors
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(len(self.t)):
                vals = [self.t[k], *self.y[k], *self.u[k], *self.r[k], err[k]]
                fh.write(",".join(repr(float(v)) for v in vals)
                         + f",{self.status[k]},{float(self.solve_ms[k])!r}\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "ClosedLoopLog":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        num = np.array([[float(v) for v in row[:1 + 2 * n + m]] for row in rows]).reshape(
            -1, 1 + 2 * n + m)
        y = num[:, 1:1 + n]
        return cls(num[:, 0], y, num[:, 1 + n:1 + n + m], num[:, 1 + n + m:],
                   [row[-2] for row in rows], np.array([float(row[-1]) for row in rows]),
                   np.full_like(y, np.nan))


def run_closed_loop(plant: PlantSpec, config: ControllerConfig, model, task: TrackingTask,
                    seed: int | None = None, x0=None, controller_name: str = "") -> ClosedLoopLog:
    """Algorithm loop: measure, lift, solve, apply the first input for one period.

    The history used for the delay embedding is bootstrapped by repeating
    the first measurement and assuming zero past inputs.
    """
    rng = np.random.default_rng(seed)
    T_s = config.sample_period
    ctrl = MpcController(config, model)
    d = model.output_lags
    du = model.input_lags
    x = np.array(plant.x0 if x0 is None else x0, dtype=float)
    y = plant.measure(x, rng)
    y_hist = np.tile(y, (d + 1, 1))
    u_hist = np.zeros((du, model.input_dim))
    T = len(task.reference)
    t_log, y_log, u_log, r_log, st_log, ms_log, x_log = [], [], [], [], [], [], []
    failure = None
    for k in range(T):
        r_win = task.window(k, config.horizon)
        t0 = time.perf_counter()
        u, sol = ctrl.step(y_hist, u_hist, r_win)
        ms = 1e3 * (time.perf_counter() - t0)
        t_log.append(k * T_s)
        y_log.append(y)
        u_log.append(u)
        r_log.append(r_win[0])
        st_log.append(sol.status)
        ms_log.append(ms)
        x_log.append(plant.output(x))
        try:
            x, y = plants_mod.step(plant, x, u, T_s, rng)
        except PlantDivergenceError as exc:
            failure = str(exc)
            break
        y_hist = np.vstack([y_hist[1:], y])
        if du:
            u_hist = np.vstack([u_hist[1:], u])
    return ClosedLoopLog(np.array(t_log), np.array(y_log), np.array(u_log), np.array(r_log),
                         st_log, np.array(ms_log), np.array(x_log), task.name,
                         controller_name, failure)


def write_summary(path: str | Path, logs: list[ClosedLoopLog], timing: bool = True) -> None:
    Path(path).write_text(json.dumps([lg.summary(timing) for lg in logs], indent=1))

"""Simulation of identified linear predictors and prediction-error metrics.

Any model exposing ``matrices(projected)``, ``initial_state(y_hist, u_hist)``,
``output_lags``, ``input_lags``, ``output_dim`` and ``input_dim`` can be
evaluated here; both :class:`~koopmpc.regression.KoopmanModel` and
:class:`~koopmpc.baseline.LinearSSModel` do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lifting import Trial, lift


class ModelDivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"lifted state became non-finite at step {step}")
        self.step = step


def simulate_linear(A, B, C, z0, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Iterate ``z[j+1] = A z[j] + B u[j]``; return outputs ``C z[0..H]`` and states."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    H = inputs.shape[0] if inputs.size else 0
    Z = np.empty((H + 1, len(z0)))
    Z[0] = z0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(H):
            Z[j + 1] = A @ Z[j] + B @ inputs[j]
            if not np.all(np.isfinite(Z[j + 1])):
                raise ModelDivergenceError(j + 1)
    return Z @ C.T, Z


def rollout(model, embedding, inputs, projected: bool = True, relift: bool = False,
            return_states: bool = False):
    """Predict outputs ``y[0..H]`` of a Koopman model from a delay embedding.

    The lifted state is ``psi(embedding)`` at ``j = 0`` only; afterwards the
    linear recursion runs on its own. ``relift=True`` instead re-embeds and
    re-lifts the predicted output at every step.
    """
    A, B, C = model.matrices(projected)
    embedding = np.asarray(embedding, dtype=float)
    if embedding.shape != (model.basis.embedded_dim,):
        raise ValueError(
            f"embedding must have shape ({model.basis.embedded_dim},), got {embedding.shape}"
        )
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.input_dim)
    z0 = lift(model.basis, embedding)
    if not relift:
        Y, Z = simulate_linear(A, B, C, z0, inputs)
        return (Y, Z) if return_states else Y
    n, d, du = model.output_dim, model.output_lags, model.input_lags
    x_hist = embedding[: n * (d + 1)].reshape(d + 1, n)[::-1].copy()
    u_hist = embedding[n * (d + 1):].reshape(du, model.input_dim)[::-1].copy()
    z = z0
    Y, Z = [C @ z], [z]
    for j, u in enumerate(inputs):
        z_next = A @ z + B @ u
        y = C @ z_next
        if not np.all(np.isfinite(z_next)):
            raise ModelDivergenceError(j + 1)
        x_hist = np.vstack([x_hist[1:], y])
        if du:
            u_hist = np.vstack([u_hist[1:], u])
        z = model.initial_state(x_hist, u_hist)
        Y.append(y)
        Z.append(z_next)
    Y, Z = np.array(Y), np.array(Z)
    return (Y, Z) if return_states else Y


def rollout_from_history(model, y_hist, u_hist, inputs, projected: bool = True):
    """Outputs ``y[0..H]`` for any supported model starting from a history window."""
    A, B, C = model.matrices(projected)
    return simulate_linear(A, B, C, model.initial_state(y_hist, u_hist), inputs)[0]


@dataclass
class PredictionReport:
    """Multi-start prediction errors.

    Arrays have shape ``(S, H, n)`` (``(S, H)`` for times and errors) for
    ``S`` start indices and predicted steps ``1..H``.
    """

    t: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray
    pointwise_error: np.ndarray
    mean_error: float
    normalized_error: float

    @classmethod
    def from_arrays(cls, t, predicted, actual) -> "PredictionReport":
        predicted = np.asarray(predicted, dtype=float)
        actual = np.asarray(actual, dtype=float)
        err = np.linalg.norm(predicted - actual, axis=-1)
        mean_err = float(np.mean(err))
        scale = float(np.mean(np.linalg.norm(actual, axis=-1)))
        norm_err = mean_err / scale if scale > 0 else (0.0 if mean_err == 0 else np.inf)
        return cls(np.asarray(t, dtype=float), predicted, actual, err, mean_err, norm_err)

    @classmethod
    def concatenate(cls, reports: list["PredictionReport"]) -> "PredictionReport":
        return cls.from_arrays(np.concatenate([r.t for r in reports]),
                               np.concatenate([r.predicted for r in reports]),
                               np.concatenate([r.actual for r in reports]))

    @property
    def per_step_error(self) -> np.ndarray:
        return self.pointwise_error.mean(axis=0)

    def summary(self) -> dict:
        return {"mean_error": self.mean_error, "normalized_error": self.normalized_error,
                "starts": int(self.pointwise_error.shape[0]),
                "horizon": int(self.pointwise_error.shape[1]),
                "per_step_error": [float(v) for v in self.per_step_error]}

    def to_csv(self, path: str | Path) -> None:
        n = self.predicted.shape[-1]
        cols = (["t"] + [f"y_pred_{i + 1}" for i in range(n)]
                + [f"y_act_{i + 1}" for i in range(n)] + ["error"])
        flat = np.hstack([self.t.reshape(-1, 1), self.predicted.reshape(-1, n),
                          self.actual.reshape(-1, n), self.pointwise_error.reshape(-1, 1)])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in flat:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1))


def _windows(trial: Trial, model, horizon: int, stride: int):
    lag = max(model.output_lags, model.input_lags)
    starts = np.arange(lag, len(trial) - horizon, stride)
    if starts.size == 0:
        raise ValueError(
            f"trial {trial.name!r} with {len(trial)} samples is too short for "
            f"history {lag} + horizon {horizon}"
        )
    return starts


def evaluate_prediction(model, trial: Trial, horizon: int, stride: int = 1,
                        projected: bool = True, actual: np.ndarray | None = None
                        ) -> PredictionReport:
    """Roll the model ``horizon`` steps from every admissible start of a log.

    Logged inputs drive the model; logged outputs (or ``actual``, an
    alternative comparison trajectory of the same length) are the target.
    All starts are propagated together as one batched recursion.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    A, B, C = model.matrices(projected)
    starts = _windows(trial, model, horizon, stride)
    d, du = model.output_lags, model.input_lags
    Z = np.array([model.initial_state(trial.x[k - d:k + 1], trial.u[k - du:k])
                  for k in starts])
    target = trial.x if actual is None else np.asarray(actual, dtype=float)
    preds = np.empty((len(starts), horizon, C.shape[0]))
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(horizon):
            Z = Z @ A.T + trial.u[starts + j] @ B.T
            if not np.all(np.isfinite(Z)):
                raise ModelDivergenceError(j + 1)
            preds[:, j] = Z @ C.T
    idx = starts[:, None] + np.arange(1, horizon + 1)[None, :]
    return PredictionReport.from_arrays(trial.t[idx], preds, target[idx])


def evaluate_many(model, trials: list[Trial], horizon: int, stride: int = 1,
                  projected: bool = True) -> PredictionReport:
    return PredictionReport.concatenate(
        [evaluate_prediction(model, tr, horizon, stride, projected) for tr in trials])


def period_mean(x: np.ndarray, period_steps: int) -> np.ndarray:
    """Replace each sample by the mean over all samples at the same phase."""
    x = np.asarray(x, dtype=float)
    phase = np.arange(len(x)) % period_steps
    means = np.array([x[phase == p].mean(axis=0) for p in range(period_steps)])
    return means[phase]

"""Simulated plants, excitation signals and the stochasticity experiment.

Plants are continuous-time vector fields integrated with classical RK4
under a zero-order-hold input. Measurements are the designated output
coordinates plus independent Gaussian noise.

Two plants are provided:

``exact_lifting_plant``
    ``x1' = mu*x1``, ``x2' = kappa*(x2 - x1**2) + u``. The observables
    ``[x1, x2, x1**2]`` evolve linearly, so its sampled flow has an exact
    finite lifted representation.

``arm_surrogate_plant``
    An overdamped planar stand-in for the soft arm. Inertia is neglected,
    so the output position ``p`` follows a first-order law::

        p' = -k0 (1 + k1 |p|^2) p + sum_i f(u_i) d_i
        f(u) = F tanh(u / u_s)

    where ``d_i`` are unit vectors at 90, 210 and 330 degrees. The stiffness
    hardens with deflection and the actuator gain saturates smoothly, so
    the static input-to-position map flattens toward the workspace edge.
    Equal inputs cancel, so the rest position is the origin for any
    equal-input command.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lifting import Trial


class PlantDivergenceError(FloatingPointError):
    pass


@dataclass
class PlantSpec:
    name: str
    state_dim: int
    input_dim: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output_indices: tuple[int, ...]
    u_min: float | np.ndarray = -np.inf
    u_max: float | np.ndarray = np.inf
    noise_std: float = 0.0
    h: float = 0.01
    x0: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.asarray(self.u_min) < np.asarray(self.u_max)):
            raise ValueError("u_min must be < u_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.h > 0:
            raise ValueError("integrator step must be positive")
        if self.x0 is None:
            self.x0 = np.zeros(self.state_dim)

    @property
    def output_dim(self) -> int:
        return len(self.output_indices)

    def clip(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.u_min, self.u_max)

    def output(self, x) -> np.ndarray:
        return np.asarray(x)[list(self.output_indices)]

    def measure(self, x, rng: np.random.Generator | None) -> np.ndarray:
        y = self.output(x).astype(float)
        if self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return y


def rk4_step(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow(plant: PlantSpec, x, u, T_s: float) -> np.ndarray:
    """Integrate over one sample period with the input held constant."""
    if plant.h > T_s * (1 + 1e-12):
        raise ValueError(f"integrator step {plant.h} exceeds sample period {T_s}")
    n_sub = max(1, int(round(T_s / plant.h)))
    h = T_s / n_sub
    x = np.asarray(x, dtype=float)
    u = plant.clip(u)
    for _ in range(n_sub):
        x = rk4_step(plant.rhs, x, u, h)
    return x


def step(plant: PlantSpec, x, u, T_s: float, rng: np.random.Generator | None = None):
    """Advance one sample period; return ``(next_state, noisy_measurement)``."""
    x_next = flow(plant, x, u, T_s)
    if not np.all(np.isfinite(x_next)):
        raise PlantDivergenceError(f"plant {plant.name!r} state diverged: {x_next}")
    return x_next, plant.measure(x_next, rng)


def simulate(plant: PlantSpec, inputs: np.ndarray, T_s: float,
             rng: np.random.Generator | None = None, x0=None, name: str = "",
             seed: int | None = None) -> Trial:
    """Run the plant under ``inputs[0..T]``; log noisy outputs and applied inputs.

    The returned trial has ``T + 1`` samples: ``x[k]`` is the measurement
    taken just before ``u[k]`` is applied. The last input is logged but not
    integrated.
    """
    inputs = plant.clip(np.asarray(inputs, dtype=float).reshape(-1, plant.input_dim))
    x = np.array(plant.x0 if x0 is None else x0, dtype=float)
    ys = [plant.measure(x, rng)]
    for u in inputs[:-1]:
        x, y = step(plant, x, u, T_s, rng)
        ys.append(y)
    t = T_s * np.arange(len(inputs))
    return Trial(t, np.array(ys), inputs, name, seed)


# --- plants ----------------------------------------------------------------

def exact_lifting_plant(mu: float = -0.5, kappa: float = -1.0, noise_std: float = 0.0,
                        h: float = 0.01) -> PlantSpec:
    def rhs(x, u):
        return np.array([mu * x[0], kappa * (x[1] - x[0] ** 2) + u[0]])

    return PlantSpec("exact-lifting", 2, 1, rhs, (0, 1), noise_std=noise_std, h=h,
                     params={"mu": mu, "kappa": kappa})


def exact_lifting_generator(mu: float = -0.5, kappa: float = -1.0):
    """Continuous-time lifted matrices on ``[x1, x2, x1**2]``: ``z' = Ac z + Bc u``."""
    Ac = np.array([[mu, 0.0, 0.0],
                   [0.0, kappa, -kappa],
                   [0.0, 0.0, 2.0 * mu]])
    Bc = np.array([[0.0], [1.0], [0.0]])
    return Ac, Bc


ACTUATOR_ANGLES = np.deg2rad([90.0, 210.0, 330.0])


def arm_surrogate_plant(noise_std: float = 0.4, stiffness: float = 0.7,
                        hardening: float = 0.02, force: float = 20.0,
                        gain_scale: float = 20.0, h: float = 0.01) -> PlantSpec:
    """Planar three-actuator surrogate of the soft arm (outputs in cm, inputs in V).

    With the defaults the Gaussian measurement noise puts about 95% of the
    measured points within 1 cm of the noise-free trajectory.
    """
    D = np.vstack([np.cos(ACTUATOR_ANGLES), np.sin(ACTUATOR_ANGLES)])

    def rhs(x, u):
        stiff = stiffness * (1.0 + hardening * (x @ x))
        return -stiff * x + D @ (force * np.tanh(u / gain_scale))

    return PlantSpec("arm-surrogate", 2, 3, rhs, (0, 1), 0.0, 10.0, noise_std, h,
                     params={"noise_std": noise_std, "stiffness": stiffness,
                             "hardening": hardening, "force": force,
                             "gain_scale": gain_scale})


PLANTS = {"exact-lifting": exact_lifting_plant, "arm-surrogate": arm_surrogate_plant}


def make_plant(cfg: dict) -> PlantSpec:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in PLANTS:
        raise ValueError(f"unknown plant kind {kind!r}; choose from {sorted(PLANTS)}")
    return PLANTS[kind](**cfg)


# --- input signals ---------------------------------------------------------

def sinusoid_inputs(T: float, T_s: float, k) -> np.ndarray:
    """Three phase-shifted sinusoids ``6 sin(2 pi/T (k T_s - (i-1) T/3)) + 3``.

    Values are not clipped. ``k`` may be an array, giving shape ``(len(k), 3)``.
    """
    if not (T > 0 and T_s > 0):
        raise ValueError("T and T_s must be positive")
    k = np.asarray(k, dtype=float)
    shifts = np.arange(3) * T / 3.0
    return 6.0 * np.sin(2.0 * np.pi / T * (k[..., None] * T_s - shifts)) + 3.0


def random_ramp_table(rng: np.random.Generator, length: int, channels: int = 3,
                      low: float = 0.0, high: float = 10.0) -> np.ndarray:
    return rng.uniform(low, high, size=(channels, length))


def ramp_span(table: np.ndarray, T_u: float) -> float:
    return (np.asarray(table).shape[1] - 1) * T_u


def ramp_inputs(table: np.ndarray, T_u: float, t) -> np.ndarray:
    """Piecewise-linear ramps through the table columns, one per ``T_u`` seconds.

    Channel ``i`` (0-based) runs ahead by ``i T_u / 3``; past the last column
    a shifted channel holds the final table value.
    """
    table = np.asarray(table, dtype=float)
    L = table.shape[1]
    t = np.asarray(t, dtype=float)
    span = ramp_span(table, T_u)
    if np.any(t < 0) or np.any(t > span * (1 + 1e-12)):
        raise ValueError(f"t outside table span [0, {span}]")
    out = np.empty(t.shape + (table.shape[0],))
    for i in range(table.shape[0]):
        ti = np.minimum(t + i * T_u / 3.0, span)
        k = np.minimum(np.floor(ti / T_u).astype(int), L - 2)
        frac = ti / T_u - k
        out[..., i] = table[i, k] + (table[i, k + 1] - table[i, k]) * frac
    return out


# --- stochasticity characterisation ----------------------------------------

@dataclass
class NoiseReport:
    """Period-to-period spread of the output under periodic inputs."""

    mean_trajectories: dict[float, np.ndarray]
    deviations: np.ndarray
    distances: np.ndarray
    spread_std: float
    mean_distance: float
    max_distance: float
    fraction_within_2std: float

    @property
    def noise_floor(self) -> float:
        """Mean Euclidean distance of a measured point from the mean trajectory."""
        return self.mean_distance

    def summary(self) -> dict:
        return {"spread_std": self.spread_std, "mean_distance": self.mean_distance,
                "max_distance": self.max_distance, "noise_floor": self.noise_floor,
                "fraction_within_2std": self.fraction_within_2std,
                "periods": sorted(float(T) for T in self.mean_trajectories),
                "points": int(len(self.distances))}


def characterize_noise(plant: PlantSpec, periods: list[float], periods_per_T: int,
                       T_s: float, rng: np.random.Generator | None = None,
                       warmup_periods: int = 5) -> NoiseReport:
    """Superimpose output periods under sinusoidal inputs and measure the spread.

    For each period ``T`` the plant is driven for ``warmup_periods`` periods
    (discarded) and then ``periods_per_T`` more. Deviations are taken from
    the per-phase mean trajectory and pooled over all ``T``.
    """
    if periods_per_T < 2:
        raise ValueError("need at least 2 periods per T")
    means, devs = {}, []
    for T in periods:
        steps = int(round(T / T_s))
        if abs(steps * T_s - T) > 1e-9 * T:
            raise ValueError(f"period {T} is not a multiple of T_s={T_s}")
        total = steps * (warmup_periods + periods_per_T)
        u = sinusoid_inputs(T, T_s, np.arange(total + 1))
        tr = simulate(plant, u, T_s, rng)
        y = tr.x[steps * warmup_periods: steps * warmup_periods + steps * periods_per_T]
        y = y.reshape(periods_per_T, steps, -1)
        mean = y.mean(axis=0)
        means[float(T)] = mean
        devs.append((y - mean).reshape(-1, y.shape[-1]))
    dev = np.vstack(devs)
    dist = np.linalg.norm(dev, axis=1)
    std = float(np.std(dev))
    within = float(np.mean(np.abs(dev) <= 2 * std)) if std > 0 else 1.0
    return NoiseReport(means, dev, dist, std, float(dist.mean()), float(dist.max()), within)

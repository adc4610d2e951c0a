import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from koopmpc import plants
from koopmpc.lifting import BasisSpec, DelaySpec, assemble_matrices, build_delay_snapshots
from koopmpc.plants import PlantDivergenceError, PlantSpec
from koopmpc.regression import fit_koopman


def linear_plant(M, h=0.01, noise_std=0.0):
    M = np.asarray(M, dtype=float)
    return PlantSpec("linear", M.shape[0], 1, lambda x, u: M @ x, tuple(range(M.shape[0])),
                     noise_std=noise_std, h=h)


def test_step_matches_exponential():
    x, y = plants.step(linear_plant([[-1.0]]), np.array([1.0]), np.zeros(1), 0.1)
    assert x[0] == pytest.approx(np.exp(-0.1), abs=1e-8)
    assert y[0] == x[0]


def test_rk4_fourth_order_convergence(rng):
    M = rng.standard_normal((3, 3))
    x0 = rng.standard_normal(3)
    exact = scipy.linalg.expm(0.4 * M) @ x0
    errs = [np.abs(plants.flow(linear_plant(M, h), x0, np.zeros(1), 0.4) - exact).max()
            for h in (0.1, 0.05)]
    assert 12 < errs[0] / errs[1] < 20


@given(arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)))
def test_clip_idempotent(u):
    plant = plants.arm_surrogate_plant()
    once = plant.clip(u)
    np.testing.assert_array_equal(plant.clip(once), once)
    assert np.all((once >= 0) & (once <= 10))


def test_clip_is_noop_inside_box(rng):
    plant = plants.arm_surrogate_plant(noise_std=0.0)
    u = rng.uniform(0, 10, 3)
    np.testing.assert_array_equal(plant.clip(u), u)
    x0 = np.array([0.5, -0.2])
    np.testing.assert_array_equal(plants.flow(plant, x0, u, 0.1),
                                  plants.flow(plant, x0, plant.clip(u), 0.1))


def test_seeded_runs_are_reproducible():
    plant = plants.arm_surrogate_plant()
    u = plants.sinusoid_inputs(6.0, 0.1, np.arange(100))
    a = plants.simulate(plant, u, 0.1, np.random.default_rng(5))
    b = plants.simulate(plant, u, 0.1, np.random.default_rng(5))
    assert a.x.tobytes() == b.x.tobytes()


def test_distinct_seeds_decorrelate():
    plant = plants.arm_surrogate_plant()
    x = np.zeros(2)
    r1, r2 = np.random.default_rng(1), np.random.default_rng(2)
    a = np.array([plant.measure(x, r1) for _ in range(5000)]).ravel()
    b = np.array([plant.measure(x, r2) for _ in range(5000)]).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_plant_validation():
    f = lambda x, u: x  # noqa: E731
    with pytest.raises(ValueError):
        PlantSpec("bad", 1, 1, f, (0,), u_min=1.0, u_max=0.0)
    with pytest.raises(ValueError):
        PlantSpec("bad", 1, 1, f, (0,), noise_std=-1.0)
    with pytest.raises(ValueError):
        PlantSpec("bad", 1, 1, f, (0,), h=0.0)
    with pytest.raises(ValueError):
        plants.flow(linear_plant([[-1.0]], h=0.2), np.ones(1), np.zeros(1), 0.1)
    with pytest.raises(ValueError, match="unknown plant"):
        plants.make_plant({"kind": "robot"})


def test_divergence_is_reported():
    blowup = PlantSpec("blowup", 1, 1, lambda x, u: x ** 2, (0,), h=0.01)
    with pytest.raises(PlantDivergenceError), np.errstate(over="ignore", invalid="ignore"):
        for _ in range(10):
            plants.step(blowup, np.array([1e100]), np.zeros(1), 0.1)


def test_simulate_layout(rng):
    plant = plants.arm_surrogate_plant()
    u = rng.uniform(-5, 15, (21, 3))
    tr = plants.simulate(plant, u, 0.1, rng, name="t", seed=3)
    assert len(tr) == 21 and tr.seed == 3
    np.testing.assert_array_equal(tr.u, plant.clip(u))
    np.testing.assert_allclose(tr.t, 0.1 * np.arange(21))


# --- exact-lifting plant ---------------------------------------------------

def test_exact_plant_lifted_closure(rng):
    mu, kappa = -0.5, -1.0
    plant = plants.exact_lifting_plant(mu, kappa)
    x = rng.standard_normal(2)
    dx = plant.rhs(x, np.zeros(1))
    assert 2 * x[0] * dx[0] == pytest.approx(2 * mu * x[0] ** 2)
    Ac, Bc = plants.exact_lifting_generator(mu, kappa)
    z = np.array([x[0], x[1], x[0] ** 2])
    u = np.array([0.7])
    dz = np.array([dx[0], plant.rhs(x, u)[1], 2 * x[0] * dx[0]])
    np.testing.assert_allclose(Ac @ z + Bc @ u, dz, atol=1e-12)


def test_exact_plant_invariant_axis(rng):
    plant = plants.exact_lifting_plant()
    tr = plants.simulate(plant, rng.uniform(-2, 2, (50, 1)), 0.1, x0=np.array([0.0, 1.0]))
    np.testing.assert_array_equal(tr.x[:, 0], 0.0)


def test_exact_plant_identified_block_commutes(exact_trials):
    delays = DelaySpec(2, 1, 0, 0, 0.1)
    basis = BasisSpec(2, 2)
    data = assemble_matrices(basis, build_delay_snapshots(exact_trials, delays))
    model = fit_koopman(data, 0.0, 2, 1, basis, delays)[0]
    idx = [0, 1, 3]  # x1, x2, x1^2 in canonical order
    K = model.A[np.ix_(idx, idx)]
    Ad = scipy.linalg.expm(0.1 * plants.exact_lifting_generator()[0])
    assert np.abs(K @ Ad - Ad @ K).max() < 1e-6


# --- surrogate plant -------------------------------------------------------

def test_surrogate_equal_inputs_keep_equilibrium():
    plant = plants.arm_surrogate_plant(noise_std=0.0)
    for level in (0.0, 3.0, 10.0):
        x = plants.flow(plant, np.zeros(2), np.full(3, level), 0.1)
        np.testing.assert_allclose(x, 0.0, atol=1e-12)


def test_surrogate_zero_inputs_stay_at_origin():
    plant = plants.arm_surrogate_plant(noise_std=0.0)
    tr = plants.simulate(plant, np.zeros((30, 3)), 0.1)
    np.testing.assert_array_equal(tr.x, 0.0)


def test_surrogate_actuation_symmetry():
    plant = plants.arm_surrogate_plant(noise_std=0.0)
    rot = np.array([[np.cos(2 * np.pi / 3), -np.sin(2 * np.pi / 3)],
                    [np.sin(2 * np.pi / 3), np.cos(2 * np.pi / 3)]])
    x = np.array([0.4, -1.1])
    u = np.array([2.0, 7.0, 5.0])
    # rotating the state by 120 degrees and cycling the inputs commutes with the flow
    lhs = plants.flow(plant, rot @ x, np.roll(u, 1), 0.1)
    rhs = rot @ plants.flow(plant, x, u, 0.1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_surrogate_sinusoid_loop_closes():
    plant = plants.arm_surrogate_plant(noise_std=0.0)
    T, T_s = 8.0, 0.1
    steps = int(T / T_s)
    u = plants.sinusoid_inputs(T, T_s, np.arange(6 * steps + 1))
    y = plants.simulate(plant, u, T_s).x
    last = y[5 * steps:]
    size = np.ptp(last, axis=0).max()
    assert size > 1.0
    assert np.linalg.norm(last[-1] - last[0]) < 1e-3 * size


# --- input signals ---------------------------------------------------------

def test_sinusoid_examples():
    u = plants.sinusoid_inputs(6.0, 0.1, np.arange(60))
    assert u[0, 0] == pytest.approx(3.0)
    fine = plants.sinusoid_inputs(6.0, 0.001, np.arange(6000))
    assert fine.min() == pytest.approx(-3.0, abs=1e-5) and fine.max() == pytest.approx(9.0, abs=1e-5)
    # channel 2 lags channel 1 by a third of a period (20 samples)
    np.testing.assert_allclose(u[20:, 1], u[:-20, 0], atol=1e-12)
    np.testing.assert_allclose(u[40:, 2], u[:-40, 0], atol=1e-12)
    with pytest.raises(ValueError):
        plants.sinusoid_inputs(0.0, 0.1, 0)


def test_ramp_examples(rng):
    table = rng.uniform(0, 10, (3, 6))
    T_u = 5.0
    for k in range(5):
        assert plants.ramp_inputs(table, T_u, k * T_u)[0] == pytest.approx(table[0, k])
        assert plants.ramp_inputs(table, T_u, (k + 0.5) * T_u)[0] == pytest.approx(
            0.5 * (table[0, k] + table[0, k + 1]))
    with pytest.raises(ValueError):
        plants.ramp_inputs(table, T_u, 25.1)
    with pytest.raises(ValueError):
        plants.ramp_inputs(table, T_u, -0.1)


def test_ramp_channel_offsets(rng):
    table = np.tile(rng.uniform(0, 10, 8), (3, 1))
    T_u = 6.0
    t = np.linspace(0, 30, 301)
    u = plants.ramp_inputs(table, T_u, t)
    np.testing.assert_allclose(u[:, 1], plants.ramp_inputs(table, T_u, t + T_u / 3)[:, 0])


def test_ramp_outputs_stay_in_box():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T_u = rng.uniform(5, 10)
        table = plants.random_ramp_table(rng, 12)
        t = np.linspace(0, plants.ramp_span(table, T_u), 2000)
        u = plants.ramp_inputs(table, T_u, t)
        assert np.all((u >= 0) & (u <= 10))


# --- noise characterisation ------------------------------------------------

def test_noise_free_plant_has_zero_spread():
    rep = plants.characterize_noise(plants.arm_surrogate_plant(noise_std=0.0), [6.0], 3, 0.1)
    assert rep.spread_std == pytest.approx(0.0, abs=1e-9)


def test_noise_spread_matches_monte_carlo():
    sigma, P, T, T_s = 0.4, 6, 6.0, 0.1
    rep = plants.characterize_noise(plants.arm_surrogate_plant(noise_std=sigma), [T], P, T_s,
                                    np.random.default_rng(1))
    steps = int(T / T_s)
    mc_rng = np.random.default_rng(2)
    noise = sigma * mc_rng.standard_normal((10, P, steps, 2))
    oracle = np.std(noise - noise.mean(axis=1, keepdims=True))
    assert oracle == pytest.approx(sigma * np.sqrt(1 - 1 / P), rel=0.05)
    assert rep.spread_std == pytest.approx(oracle, rel=0.2)


def test_noise_report_two_std_fraction():
    rep = plants.characterize_noise(plants.arm_surrogate_plant(), [6.0, 8.0], 10, 0.1,
                                    np.random.default_rng(3))
    assert 0.93 < rep.fraction_within_2std < 0.97
    assert rep.max_distance >= rep.mean_distance == rep.noise_floor > 0
    assert set(rep.summary()) >= {"spread_std", "noise_floor", "fraction_within_2std"}
    with pytest.raises(ValueError):
        plants.characterize_noise(plants.arm_surrogate_plant(), [6.0], 1, 0.1)

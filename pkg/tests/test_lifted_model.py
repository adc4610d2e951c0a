import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopmpc import plants
from koopmpc.lifted_model import (
    ModelDivergenceError,
    PredictionReport,
    evaluate_prediction,
    period_mean,
    rollout,
    rollout_from_history,
    simulate_linear,
)
from koopmpc.lifting import BasisSpec, DelaySpec, Trial, assemble_matrices, build_delay_snapshots
from koopmpc.regression import KoopmanModel, fit_koopman, output_matrix

from .conftest import random_trial


def toy_model(A, B, P=None, n=2, d=0, du=0):
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    m = np.asarray(B).shape[1]
    delays = DelaySpec(n, m, d, du)
    basis = BasisSpec(delays.embedded_dim, 1)
    assert basis.size == N
    P = np.eye(N) if P is None else P
    return KoopmanModel(A, np.asarray(B, dtype=float), output_matrix(n, N), P, basis, delays)


@pytest.fixture(scope="module")
def exact_model(exact_trials):
    delays = DelaySpec(2, 1, 0, 0, 0.1)
    basis = BasisSpec(2, 2)
    data = assemble_matrices(basis, build_delay_snapshots(exact_trials, delays))
    return fit_koopman(data, 0.0, 2, 1, basis, delays)[0]


def test_rollout_identity_dynamics(rng):
    model = toy_model(np.eye(3), np.zeros((3, 1)))
    Y = rollout(model, np.array([0.3, -1.2]), rng.standard_normal((10, 1)))
    assert Y.shape == (11, 2)
    np.testing.assert_array_equal(Y, np.tile([0.3, -1.2], (11, 1)))


def test_rollout_zero_dynamics(rng):
    model = toy_model(np.zeros((3, 3)), np.zeros((3, 1)))
    Y = rollout(model, np.array([0.3, -1.2]), rng.standard_normal((5, 1)))
    np.testing.assert_array_equal(Y[0], [0.3, -1.2])
    np.testing.assert_array_equal(Y[1:], 0.0)


def test_rollout_divergence_names_step():
    model = toy_model(1e200 * np.eye(3), np.zeros((3, 1)))
    with pytest.raises(ModelDivergenceError) as info:
        rollout(model, np.array([1.0, 1.0]), np.zeros((5, 1)))
    assert info.value.step == 2 and "step 2" in str(info.value)


def test_rollout_embedding_mismatch():
    model = toy_model(np.eye(3), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        rollout(model, np.zeros(3), np.zeros((2, 1)))


def test_projection_identity_rollout_is_bitwise_unprojected(rng):
    A = rng.standard_normal((3, 3)) * 0.5
    B = rng.standard_normal((3, 1))
    model = toy_model(A, B)
    inputs = rng.standard_normal((20, 1))
    xi = rng.standard_normal(2)
    assert rollout(model, xi, inputs).tobytes() == rollout(model, xi, inputs,
                                                           projected=False).tobytes()


@given(st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_lifted_recursion_is_linear(alpha, seed):
    rng = np.random.default_rng(seed)
    A = 0.4 * rng.standard_normal((4, 4))
    B = rng.standard_normal((4, 2))
    C = output_matrix(2, 4)
    z0 = rng.standard_normal(4)
    u = rng.standard_normal((12, 2))
    _, Z = simulate_linear(A, B, C, z0, u)
    _, Z_scaled = simulate_linear(A, B, C, alpha * z0, alpha * u)
    np.testing.assert_allclose(Z_scaled, alpha * Z, rtol=1e-10, atol=1e-10)


def test_exact_plant_rollout_matches_simulation(exact_model):
    plant = plants.exact_lifting_plant()
    rng = np.random.default_rng(99)
    for _ in range(5):
        x0 = rng.uniform(-2, 2, 2)
        u = rng.uniform(-2, 2, (26, 1))
        truth = plants.simulate(plant, u, 0.1, x0=x0).x
        Y = rollout(exact_model, x0, u[:25])
        assert np.abs(Y - truth).max() < 1e-6


def test_relift_starts_from_the_same_point(exact_model, rng):
    u = rng.uniform(-1, 1, (10, 1))
    Y = rollout(exact_model, np.array([0.5, -0.5]), u, relift=True)
    Y0 = rollout(exact_model, np.array([0.5, -0.5]), u)
    assert Y.shape == Y0.shape
    np.testing.assert_allclose(Y, Y0, atol=1e-6)


def test_rollout_from_history(exact_model, rng):
    u = rng.uniform(-1, 1, (8, 1))
    np.testing.assert_array_equal(
        rollout_from_history(exact_model, np.array([[0.2, 0.1]]), np.zeros((0, 1)), u),
        rollout(exact_model, np.array([0.2, 0.1]), u))


# --- prediction reports ----------------------------------------------------

def test_report_examples():
    actual = np.array([[[3.0, 4.0], [0.0, 1.0]]])
    perfect = PredictionReport.from_arrays(np.zeros((1, 2)), actual, actual)
    assert perfect.mean_error == 0.0 and perfect.normalized_error == 0.0
    zero = PredictionReport.from_arrays(np.zeros((1, 2)), np.zeros_like(actual), actual)
    assert zero.normalized_error == pytest.approx(1.0)
    np.testing.assert_allclose(zero.pointwise_error, [[5.0, 1.0]])


@given(st.integers(0, 2**32 - 1))
def test_report_mean_is_mean_of_pointwise(seed):
    rng = np.random.default_rng(seed)
    pred, act = rng.standard_normal((2, 4, 6, 2))
    rep = PredictionReport.from_arrays(np.zeros((4, 6)), pred, act)
    assert np.all(rep.pointwise_error >= 0)
    assert rep.mean_error == pytest.approx(np.mean(rep.pointwise_error), rel=1e-14)
    assert rep.normalized_error == pytest.approx(
        rep.mean_error / np.mean(np.linalg.norm(act, axis=-1)), rel=1e-14)


def test_evaluate_prediction_matches_individual_rollouts(rng):
    A = 0.3 * rng.standard_normal((6, 6))
    B = rng.standard_normal((6, 1))
    model = toy_model(A, B, n=2, d=1, du=1)
    tr = random_trial(rng, 40, m=1)
    rep = evaluate_prediction(model, tr, horizon=5, stride=3)
    for s, k in enumerate(range(1, 40 - 5, 3)):
        xi = model.embed(tr.x[k - 1:k + 1], tr.u[k - 1:k])
        Y = rollout(model, xi, tr.u[k:k + 5])
        np.testing.assert_allclose(rep.predicted[s], Y[1:], rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(rep.actual[s], tr.x[k + 1:k + 6])
        np.testing.assert_array_equal(rep.t[s], tr.t[k + 1:k + 6])


def test_horizon_spans_two_and_a_half_seconds(rng):
    model = toy_model(np.eye(3), np.zeros((3, 1)))
    tr = random_trial(rng, 60, m=1)
    rep = evaluate_prediction(model, tr, horizon=25)
    assert rep.t[0, -1] - tr.t[0] == pytest.approx(2.5)


def test_evaluate_prediction_errors(rng):
    model = toy_model(np.eye(3), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="too short"):
        evaluate_prediction(model, random_trial(rng, 10, m=1), horizon=25)
    with pytest.raises(ValueError):
        evaluate_prediction(model, random_trial(rng, 10, m=1), horizon=0)


def test_report_csv(tmp_path, rng):
    rep = PredictionReport.from_arrays(np.arange(6.0).reshape(2, 3),
                                       rng.standard_normal((2, 3, 2)),
                                       rng.standard_normal((2, 3, 2)))
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,y_pred_1,y_pred_2,y_act_1,y_act_2,error"
    assert len(lines) == 7
    back = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back[:, -1], rep.pointwise_error.ravel())
    rep.write_summary(tmp_path / "r.json")
    assert "normalized_error" in (tmp_path / "r.json").read_text()


def test_period_mean():
    x = np.array([[1.0], [10.0], [3.0], [20.0]])
    np.testing.assert_array_equal(period_mean(x, 2), [[2.0], [15.0], [2.0], [15.0]])


def test_trial_is_used_unmodified(rng):
    model = toy_model(np.eye(3), np.zeros((3, 1)))
    tr = random_trial(rng, 30, m=1)
    copy = Trial(tr.t.copy(), tr.x.copy(), tr.u.copy())
    evaluate_prediction(model, tr, 5)
    np.testing.assert_array_equal(tr.x, copy.x)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopmpc.baseline import (
    LinearSSModel,
    RankDeficientError,
    arx_simulate,
    fit_arx,
    rollout_linear,
)
from koopmpc.lifted_model import PredictionReport, evaluate_prediction
from koopmpc.lifting import Trial
from koopmpc.regression import load_model, save_model


def random_arx(rng, p, r, n=2, m=3, scale=0.3):
    return (scale * rng.standard_normal((p, n, n)) / max(p, 1),
            rng.standard_normal((r, n, m)))


def arx_trial(rng, a, b, length=300, name="arx"):
    """Simulate the ARX difference equation from a zero history."""
    p, n, _ = a.shape
    r, _, m = b.shape
    u = rng.uniform(-1, 1, (length, m))
    y = np.zeros((length, n))
    for k in range(max(p, r) - 1, length - 1):
        y[k + 1] = (sum(a[i] @ y[k - i] for i in range(p))
                    + sum(b[j] @ u[k - j] for j in range(r)))
    return Trial(0.1 * np.arange(length), y, u, name)


def test_fit_recovers_exact_arx(rng):
    a, b = random_arx(rng, 2, 2)
    model = fit_arx([arx_trial(rng, a, b), arx_trial(rng, a, b)], 2, 2)
    np.testing.assert_allclose(model.a, a, atol=1e-8)
    np.testing.assert_allclose(model.b, b, atol=1e-8)
    assert model.state_dim == 4
    assert model.sample_period == pytest.approx(0.1)


def test_scalar_first_order_is_ordinary_least_squares(rng):
    u = rng.standard_normal((100, 1))
    y = np.zeros((100, 1))
    for k in range(99):
        y[k + 1] = 0.8 * y[k] + 0.5 * u[k] + 0.05 * rng.standard_normal()
    model = fit_arx(Trial(0.1 * np.arange(100), y, u), 1, 1)
    coef = np.linalg.lstsq(np.hstack([y[:-1], u[:-1]]), y[1:, 0], rcond=None)[0]
    np.testing.assert_allclose([model.a[0, 0, 0], model.b[0, 0, 0]], coef, atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_realisation_reproduces_difference_equation(p, r, seed):
    rng = np.random.default_rng(seed)
    a, b = random_arx(rng, p, r)
    model = LinearSSModel(a, b)
    L = model.blocks
    y_hist = rng.standard_normal((L, 2))
    u_hist = rng.standard_normal((L - 1, 3))
    inputs = rng.standard_normal((15, 3))
    np.testing.assert_allclose(rollout_linear(model, y_hist, u_hist, inputs),
                               arx_simulate(model, y_hist, u_hist, inputs), atol=1e-10)


def test_observer_canonical_structure(rng):
    a, b = random_arx(rng, 2, 2)
    model = LinearSSModel(a, b)
    np.testing.assert_array_equal(model.A_L[:2, 2:], np.eye(2))
    np.testing.assert_array_equal(model.A_L[2:, 2:], 0.0)
    np.testing.assert_array_equal(model.A_L[:, :2], np.vstack(a))
    np.testing.assert_array_equal(model.C_L, np.hstack([np.eye(2), np.zeros((2, 2))]))


def test_zero_history_and_inputs_give_zero_output(rng):
    model = LinearSSModel(*random_arx(rng, 2, 2))
    Y = rollout_linear(model, np.zeros((2, 2)), np.zeros((1, 3)), np.zeros((10, 3)))
    np.testing.assert_array_equal(Y, 0.0)


def test_exact_arx_prediction_error(rng):
    a, b = random_arx(rng, 2, 2)
    tr = arx_trial(rng, a, b)
    model = fit_arx(tr, 2, 2)
    rep = evaluate_prediction(model, tr, horizon=25, stride=5)
    assert isinstance(rep, PredictionReport)
    assert rep.mean_error < 1e-8


def test_rank_deficient_data(rng):
    tr = Trial(0.1 * np.arange(50), rng.standard_normal((50, 2)), np.zeros((50, 3)))
    with pytest.raises(RankDeficientError, match="more"):
        fit_arx(tr, 2, 2)


def test_argument_errors(rng):
    tr = Trial(0.1 * np.arange(50), rng.standard_normal((50, 2)), rng.standard_normal((50, 3)))
    with pytest.raises(ValueError):
        fit_arx(tr, 0, 2)
    with pytest.raises(ValueError):
        fit_arx(tr.slice(0, 2), 2, 2)
    with pytest.raises(ValueError):
        LinearSSModel(*random_arx(rng, 2, 2)).initial_state(np.zeros((1, 2)), np.zeros((1, 3)))


def test_serialization_round_trip(tmp_path, rng):
    model = LinearSSModel(*random_arx(rng, 2, 3))
    save_model(model, tmp_path / "lin.json")
    back = load_model(tmp_path / "lin.json")
    assert isinstance(back, LinearSSModel)
    np.testing.assert_array_equal(back.A_L, model.A_L)
    save_model(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_text() == (tmp_path / "lin.json").read_text()
    with pytest.raises(ValueError):
        LinearSSModel.from_dict({"kind": "koopman"})

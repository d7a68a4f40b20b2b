import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from kmpc.bounds import (
    CertifiedBounds,
    ProportionalityError,
    certify,
    estimate_lipschitz,
    estimate_proportional_constants,
    estimate_uniform_bound,
    fit_proportional_constants,
    grid_errors,
)
from kmpc.data import Box, ControlAffinePlant
from kmpc.surrogate import LinearModel, PlantModel

positive = st.floats(0.01, 10.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (25,), elements=positive), arrays(np.float64, (25,), elements=positive),
       arrays(np.float64, (25,), elements=st.floats(0.0, 5.0)))
def test_proportional_lp_matches_linprog(a, b, e):
    cx, cu = fit_proportional_constants(a, b, e)
    assert np.all(cx * a + cu * b >= e * (1 - 1e-12))
    ref = linprog([1.0, 1.0], A_ub=-np.stack([a, b], axis=1), b_ub=-e, bounds=[(0, None)] * 2,
                  method="highs")
    assert ref.status == 0
    assert cx + cu == pytest.approx(ref.fun, rel=1e-7, abs=1e-12)


def test_proportional_lp_by_hand():
    # e = |x| only: cheapest is c_x = 1, c_u = 0
    cx, cu = fit_proportional_constants([1.0, 2.0], [1.0, 0.5], [1.0, 2.0])
    assert (cx, cu) == pytest.approx((1.0, 0.0))
    # two binding points: solve [1 3; 3 1] c = [4; 4] -> (1, 1)
    cx, cu = fit_proportional_constants([1.0, 3.0], [3.0, 1.0], [4.0, 4.0])
    assert (cx, cu) == pytest.approx((1.0, 1.0))


def test_error_at_origin_is_not_proportional():
    with pytest.raises(ProportionalityError, match="origin"):
        fit_proportional_constants([0.0, 1.0], [0.0, 1.0], [0.1, 0.2])


def linear_plant(A, B):
    A = np.asarray(A)
    B = np.asarray(B)
    return ControlAffinePlant(lambda X: X @ A.T, lambda X: np.broadcast_to(B, (len(X),) + B.shape),
                              2, 1, Box.symmetric(1, 2), Box.symmetric(1, 2), Box.symmetric(1, 1))


def test_exact_model_has_zero_bounds():
    A = np.array([[1.0, 0.05], [-0.05, 1.0]])
    B = np.array([[0.0], [0.05]])
    plant = linear_plant(A, B)
    model = LinearModel(A, B)
    assert estimate_uniform_bound(plant, model, plant.state_box, plant.input_box, (11, 5)) == 0.0
    assert estimate_proportional_constants(plant, model, plant.state_box, plant.input_box, (11, 5)) == (0.0, 0.0)


def test_known_proportional_error():
    # model misses 0.1 * x entirely, so err = 0.1 |x| exactly
    A = np.eye(2)
    B = np.array([[0.0], [1.0]])
    plant = linear_plant(1.1 * A, B)
    model = LinearModel(A, B)
    cx, cu = estimate_proportional_constants(plant, model, plant.state_box, plant.input_box, (11, 5))
    assert cx == pytest.approx(0.1, rel=1e-12)
    assert cu == pytest.approx(0.0, abs=1e-12)
    eta = estimate_uniform_bound(plant, model, plant.state_box, plant.input_box, (11, 5), margin=0.0)
    assert eta == pytest.approx(0.1 * np.sqrt(2), rel=1e-12)


def test_lipschitz_of_linear_model_is_spectral_norm():
    A = np.array([[1.2, 0.3], [0.0, 0.7]])
    model = LinearModel(A, [[0.0], [1.0]])
    lbar, jac, sec = estimate_lipschitz(model, Box.symmetric(1, 2), Box.symmetric(1, 1), (7, 3), 0.05, 2000)
    norm = np.linalg.norm(A, 2)
    assert jac == pytest.approx(norm, rel=1e-8)
    assert sec <= norm + 1e-12
    assert lbar == pytest.approx(1.05 * norm, rel=1e-8)


def test_grid_errors_shape(plant):
    X, U, err = grid_errors(plant, PlantModel(plant), plant.state_box, plant.input_box, (5, 3))
    assert X.shape == (75, 2) and U.shape == (75, 1)
    np.testing.assert_array_equal(err, 0.0)
    Xo, _, _ = grid_errors(plant, PlantModel(plant), plant.state_box, plant.input_box, (5, 3), offset=True)
    assert len(Xo) == 16 * 2
    assert np.all(np.abs(Xo) < 1.9)


def test_certify_pi_model(plant, model352):
    b = certify(plant, model352)
    assert 0.025 <= b.eta <= 0.1
    assert b.proportional and b.c_x > 0
    assert b.violation_rate <= 0.01
    assert 1.70 <= b.lbar <= 2.84
    # the proportional bound never exceeds eta
    assert np.all(b.bound(np.array([0.0, 1.0, 10.0]), np.array([0.0, 1.0, 10.0])) <= b.eta)
    assert b.bound(0.0, 0.0) == 0.0
    assert CertifiedBounds.from_dict(b.to_dict()) == b


def test_certify_plain_model(plant, model352_plain):
    b = certify(plant, model352_plain, grid_steps=(21, 5), holdout_steps=(21, 5), n_pairs=500)
    assert not b.proportional
    assert "origin" in b.note
    assert np.all(b.bound(np.array([0.0, 2.0]), np.array([0.0, 0.0])) == b.eta)

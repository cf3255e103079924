import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flownorm.errors import InputError, NoConeError
from flownorm.flow import FlowField
from flownorm.residuals import WeightedSystem
from flownorm.robustnorm import (
    CorrespondenceGeometry,
    FlowNormParams,
    classify_1d,
    compose_weights,
    cos_theta0,
    flow_norm_factor,
    flow_norm_factors,
    huber_cost,
    huber_weight,
)


def geom(p_proj, p_flow, e, x, sigma=1.0):
    return CorrespondenceGeometry(np.array(p_proj, float), np.array(p_flow, float), e, np.array(x, float), sigma)


def test_params_validation():
    with pytest.raises(InputError):
        FlowNormParams(activation_radius_multiplier=0)
    with pytest.raises(InputError):
        FlowNormParams(min_weight=1.5)
    with pytest.raises(InputError):
        FlowNormParams(mode="other")


def test_cos_theta0_examples():
    assert cos_theta0(2.0, 0.0) == 1.0
    assert math.isclose(cos_theta0(2.0, math.sqrt(2)), math.sqrt(2) / 2)
    assert math.isclose(cos_theta0(2.0, math.sqrt(3)), 0.5)
    with pytest.raises(NoConeError):
        cos_theta0(1.0, 1.0)


def test_inside_disc_is_one():
    # 1.5 sigma away, descent direction pointing away
    assert flow_norm_factor(geom((0, 0), (1.5, 0), 1.0, (1, 0))) == 1.0


def test_descent_toward_flow_is_one():
    # e > 0 so the descent direction is -x = (+1, 0), straight at p°
    assert flow_norm_factor(geom((0, 0), (10, 0), 1.0, (-1, 0))) == 1.0


def test_perpendicular_with_vanishing_cone_is_half():
    # cos(theta0) -> 1 as sigma -> 0 relative to the distance; cos(theta) = 0
    s = flow_norm_factor(geom((0, 0), (1e6, 0), 1.0, (0, 1)), FlowNormParams(min_weight=0.0))
    assert math.isclose(s, 0.5, rel_tol=1e-9)


def test_opposite_direction_hits_floor():
    assert flow_norm_factor(geom((0, 0), (10, 0), 1.0, (1, 0))) == 0.01
    assert flow_norm_factor(geom((0, 0), (10, 0), 1.0, (1, 0)), FlowNormParams(min_weight=0.0)) == 0.0


def test_degenerate_inputs_are_one():
    assert flow_norm_factor(geom((0, 0), (10, 0), 0.0, (1, 0))) == 1.0
    assert flow_norm_factor(geom((0, 0), (10, 0), 3.0, (0, 0))) == 1.0


def test_sign_of_residual_flips_direction():
    a = flow_norm_factor(geom((0, 0), (10, 0), 1.0, (1, 0)))
    b = flow_norm_factor(geom((0, 0), (10, 0), -1.0, (1, 0)))
    assert a == 0.01 and b == 1.0


def test_factor_formula_matches_hand_computation():
    p_proj, p_flow, sigma = np.array([0.0, 0.0]), np.array([5.0, 0.0]), 1.0
    ang = math.radians(100)
    x = -np.array([math.cos(ang), math.sin(ang)])  # e > 0, descent is at 100 degrees from u
    c0 = math.sqrt(25 - 1) / 5
    expect = (math.cos(ang) + 1) / (c0 + 1)
    assert math.isclose(flow_norm_factor(geom(p_proj, p_flow, 2.0, x, sigma)), expect, rel_tol=1e-12)


def test_paper_literal_mode_can_exceed_one():
    lit = FlowNormParams(mode="paper-literal")
    # v = p' - p° = (-10, 0); x along v gives cos(theta) = 1 > cos(theta0), ratio > 1
    s = flow_norm_factor(geom((0, 0), (10, 0), 1.0, (-1, 0)), lit)
    assert s > 1.0
    s = flow_norm_factor(geom((0, 0), (10, 0), 1.0, (1, 0)), lit)
    assert s == 1.0


def test_sigma_must_be_positive():
    with pytest.raises(InputError):
        flow_norm_factor(geom((0, 0), (10, 0), 1.0, (1, 0), sigma=0.0))


unit = st.floats(-50, 50, allow_nan=False)


@given(unit, unit, unit, unit, st.floats(-100, 100), unit, unit, st.floats(1e-3, 10))
def test_factor_range(a, b, c, d, e, gx, gy, sigma):
    s = flow_norm_factors([[a, b]], [[c, d]], [e], [[gx, gy]], sigma)[0]
    assert 0.01 <= s <= 1.0


def test_huber_examples():
    assert huber_weight(4.5, 9.0) == 1.0
    assert huber_weight(18.0, 9.0) == 0.5
    assert huber_weight(0.0, 9.0) == 1.0
    np.testing.assert_allclose(huber_cost(np.array([3.0, 18.0]), 9.0), [9.0, 9.0 * (36 - 9)])


def _hand_system(level=0):
    e = np.array([2.0, -20.0, 5.0])
    proj = np.array([[50.0, 50.0], [80.0, 40.0], [120.0, 100.0]])
    src = np.array([[40.0, 50.0], [70.0, 40.0], [110.0, 100.0]])
    grad = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return WeightedSystem(
        residuals=e,
        jacobian=np.ones((3, 6)),
        weights=np.ones(3),
        valid=np.ones(3, bool),
        projected=proj,
        gradients=grad,
        source_pixels=src,
        point_index=np.arange(3),
        center_rows=np.arange(3),
        level=level,
    )


def _uniform_flow(vec, sigma=1.0):
    return FlowField(np.tile(np.array(vec, float), (112, 160, 1)), np.ones((112, 160), bool), sigma)


def test_compose_weights_hand_built_system():
    sys_ = _hand_system()
    flow = _uniform_flow((20.0, 0.0))
    out = compose_weights(sys_, flow, FlowNormParams(), 9.0, True)
    # independent per-element tables
    huber = [1.0, 9.0 / 20.0, 1.0]
    factors = []
    for i in range(3):
        p_o = sys_.source_pixels[i] + (20.0, 0.0)
        g = CorrespondenceGeometry(sys_.projected[i], p_o, sys_.residuals[i], sys_.gradients[i], 1.0)
        factors.append(flow_norm_factor(g))
    np.testing.assert_allclose(out.weights, np.array(huber) * np.array(factors), rtol=1e-15)
    np.testing.assert_allclose(out.huber_factors, huber)
    np.testing.assert_allclose(out.flow_factors, factors)


def test_compose_without_flownorm_is_pure_huber():
    sys_ = _hand_system()
    flow = _uniform_flow((20.0, 0.0))
    out = compose_weights(sys_, flow, FlowNormParams(), 9.0, False)
    np.testing.assert_array_equal(out.weights, huber_weight(sys_.residuals, 9.0))
    out = compose_weights(sys_, None, FlowNormParams(), 9.0, True)
    np.testing.assert_array_equal(out.weights, huber_weight(sys_.residuals, 9.0))


def test_compose_inside_discs_is_pure_huber():
    sys_ = _hand_system()
    flow = _uniform_flow((10.5, 0.0), sigma=1.0)  # every p° within 2 sigma of p'
    out = compose_weights(sys_, flow, FlowNormParams(), 9.0, True)
    np.testing.assert_array_equal(out.weights, huber_weight(sys_.residuals, 9.0))


def test_compose_masked_rows_stay_zero():
    sys_ = replace(_hand_system(), valid=np.array([True, False, True]))
    out = compose_weights(sys_, _uniform_flow((20.0, 0.0)), FlowNormParams(), 9.0, True)
    assert out.weights[1] == 0.0


def test_compose_uses_level_scaled_sigma():
    sys_ = _hand_system(level=2)
    flow = _uniform_flow((100.0, 0.0), sigma=20.0)
    out = compose_weights(sys_, flow, FlowNormParams(), 9.0, True)
    # level 2: flow 25 px puts p° 15 px from p', outside the 2 * 5 px disc; descent points away
    assert out.flow_factors[0] == 0.01
    # an unscaled 20 px sigma would have put p' inside a 40 px disc
    wide = compose_weights(sys_, _uniform_flow((100.0, 0.0), sigma=80.0), FlowNormParams(), 9.0, True)
    assert wide.flow_factors[0] == 1.0


def test_classify_1d_examples():
    assert classify_1d([(1.0, -1.0, 1.0)]) == [True]
    assert classify_1d([(1.0, 1.0, 1.0)]) == [False]
    assert classify_1d([(0.0, 1.0, 1.0)]) == [True]
    assert classify_1d([(1.0, 1.0, -1.0)]) == [True]

"""Squashing layer: exact values against a high-precision oracle,
analytic partials against finite differences, and the mathematical
properties of the map (bounds, monotonicity, gradient ordering)."""

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import psnet.tensor as T
from psnet.psn import (
    PsnMode,
    PsnParams,
    psn_apply,
    psn_forward,
    psn_from_mode,
    psn_partials,
    psn_value,
    sigmoid,
)
from psnet.tensor import Tensor, backward, grad_check

mp.mp.dps = 40


def oracle_value(x, alpha, beta, gamma) -> float:
    """Arbitrary-precision evaluation, rounded once to float64."""
    return float(alpha / (1 + mp.e ** (-mp.mpf(beta) * (mp.mpf(x) - gamma))))


def _ulps_apart(a: float, b: float) -> float:
    return abs(a - b) / np.spacing(max(abs(a), abs(b)))


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_saturation_without_nan(self):
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(1000.0) == 1.0
        assert sigmoid(40.0) <= 1.0 and np.isfinite(sigmoid(40.0))

    def test_value_at_one(self):
        # oracle: 1/(1+e^-1) = 0.73105857863000487925...
        assert _ulps_apart(sigmoid(1.0), 0.7310585786300049) <= 2

    def test_array_matches_scalar(self):
        xs = np.linspace(-30, 30, 101)
        out = sigmoid(xs)
        assert all(out[i] == sigmoid(float(x)) for i, x in enumerate(xs))


class TestForward:
    @pytest.mark.parametrize("alpha,beta,gamma", [(1.0, 20.0, 1.0), (2.0, 3.0, -0.5), (0.5, 1.0, 4.0)])
    def test_midpoint_exact(self, alpha, beta, gamma):
        assert psn_value(gamma, alpha, beta, gamma) == alpha / 2

    def test_fixed_row_midpoint(self):
        assert psn_value(1.0, 1.0, 20.0, 1.0) == 0.5

    def test_fixed_row_at_zero(self):
        # oracle: 1/(1+e^20) = 2.0611536181902035814e-9
        got = psn_value(0.0, 1.0, 20.0, 1.0)
        assert _ulps_apart(got, 2.0611536181902037e-9) <= 2

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
    def test_strict_bounds_over_huge_range(self, alpha):
        xs = np.concatenate([np.linspace(-1e6, 1e6, 2001), [0.0, 1.0]])
        out = np.asarray(psn_value(xs, alpha, 20.0, 1.0))
        assert (out > 0.0).all()
        assert (out < alpha).all()

    def test_monotone_increasing(self):
        xs = 1.0 + np.linspace(-30, 30, 301) / 20.0  # within the representable band
        out = np.asarray(psn_value(xs, 1.0, 20.0, 1.0))
        assert (np.diff(out) > 0).all()
        # saturated tails still never decrease
        wide = np.asarray(psn_value(np.linspace(-1e6, 1e6, 101), 1.0, 20.0, 1.0))
        assert (np.diff(wide) >= 0).all()

    def test_reduces_to_plain_sigmoid(self):
        xs = np.linspace(-40, 40, 10_000)
        f = np.asarray(psn_value(xs, 1.0, 1.0, 0.0))
        s = sigmoid(xs)
        assert (np.abs(f - s) <= np.spacing(np.maximum(np.abs(s), np.abs(f)))).all()

    def test_oracle_agreement_generic_points(self):
        for x, a, b, g in [(0.3, 1.0, 20.0, 1.0), (-2.7, 3.0, 0.5, -2.0), (1.4, 0.5, 1.0, 0.0)]:
            assert _ulps_apart(psn_value(x, a, b, g), oracle_value(x, a, b, g)) <= 4


class TestPartials:
    def test_peak_slope_exact(self):
        dx, _, _, _ = psn_partials(1.0, PsnParams(1.0, 20.0, 1.0))
        assert dx == 1.0 * 20.0 / 4
        dx, _, _, _ = psn_partials(-2.0, PsnParams(3.0, 0.5, -2.0))
        assert dx == 3.0 * 0.5 / 4

    def test_dbeta_zero_at_midpoint(self):
        _, _, db, _ = psn_partials(1.0, PsnParams(1.0, 20.0, 1.0))
        assert db == 0.0

    def test_dalpha_is_sigmoid(self):
        p = PsnParams(2.5, 3.0, 0.5)
        _, da, _, _ = psn_partials(1.7, p)
        assert da == sigmoid(3.0 * (1.7 - 0.5))

    def test_finite_difference_agreement(self):
        p = PsnParams(1.0, 20.0, 1.0)
        x, eps = 1.1, 1e-5
        analytic = psn_partials(x, p)
        numeric = (
            (psn_value(x + eps, 1, 20, 1) - psn_value(x - eps, 1, 20, 1)) / (2 * eps),
            (psn_value(x, 1 + eps, 20, 1) - psn_value(x, 1 - eps, 20, 1)) / (2 * eps),
            (psn_value(x, 1, 20 + eps, 1) - psn_value(x, 1, 20 - eps, 1)) / (2 * eps),
            (psn_value(x, 1, 20, 1 + eps) - psn_value(x, 1, 20, 1 - eps)) / (2 * eps),
        )
        for a, n in zip(analytic, numeric):
            assert abs(a - n) / max(abs(a), abs(n), 1e-12) < 1e-6

    def test_gradient_ordering(self):
        # closer to the midpoint -> strictly larger slope
        for alpha, beta, gamma in [(1.0, 20.0, 1.0), (3.0, 0.5, -2.0)]:
            p = PsnParams(alpha, beta, gamma)
            offsets = np.linspace(0.25, 30.0, 60) / beta
            slopes = [psn_partials(gamma + o, p)[0] for o in offsets]
            assert all(s1 > s2 for s1, s2 in zip(slopes, slopes[1:]))
            # both sides of the midpoint
            left = psn_partials(gamma - offsets[3], p)[0]
            right_farther = psn_partials(gamma + offsets[10], p)[0]
            assert left > right_farther


class TestModes:
    def test_fixed(self):
        p = psn_from_mode(PsnMode.FIXED)
        assert (p.alpha, p.beta, p.gamma) == (1.0, 20.0, 1.0)
        assert not (p.alpha_trainable or p.beta_trainable or p.gamma_trainable)

    def test_train_beta_gamma(self):
        p = psn_from_mode(PsnMode.TRAIN_BETA_GAMMA)
        assert (p.alpha, p.beta, p.gamma) == (1.0, 20.0, 1.0)
        assert not p.alpha_trainable and p.beta_trainable and p.gamma_trainable

    def test_disabled_has_no_params(self):
        assert psn_from_mode(PsnMode.DISABLED) is None

    @pytest.mark.parametrize(
        "mode,flags",
        [
            (PsnMode.TRAIN_ALPHA, (True, False, False)),
            (PsnMode.TRAIN_BETA, (False, True, False)),
            (PsnMode.TRAIN_GAMMA, (False, False, True)),
            (PsnMode.TRAIN_ALL, (True, True, True)),
        ],
    )
    def test_flag_table(self, mode, flags):
        p = psn_from_mode(mode)
        assert (p.alpha_trainable, p.beta_trainable, p.gamma_trainable) == flags

    def test_positivity_validation(self):
        with pytest.raises(ValueError):
            PsnParams(alpha=-1.0)
        with pytest.raises(ValueError):
            PsnParams(beta=0.0)


class TestAutodiffAgreement:
    def test_backward_matches_partials_bitwise(self):
        p = PsnParams(1.0, 20.0, 1.0)
        for x0 in (0.7, 1.0, 1.3, -4.0):
            x = Tensor(np.array([x0]), requires_grad=True)
            alpha = Tensor(np.array([p.alpha]), requires_grad=True)
            beta = Tensor(np.array([p.beta]), requires_grad=True)
            gamma = Tensor(np.array([p.gamma]), requires_grad=True)
            backward(T.sum_all(psn_apply(x, alpha, beta, gamma)))
            dx, da, db, dg = psn_partials(x0, p)
            assert x.grad[0] == dx
            assert alpha.grad[0] == da
            assert beta.grad[0] == db
            assert gamma.grad[0] == dg

    def test_tensor_op_gradcheck(self):
        rng = np.random.default_rng(9)
        x = Tensor(1.0 + rng.normal(scale=0.2, size=(3, 4)), requires_grad=True)
        alpha = Tensor(np.array([1.0]), requires_grad=True)
        beta = Tensor(np.array([20.0]), requires_grad=True)
        gamma = Tensor(np.array([1.0]), requires_grad=True)
        probe = Tensor(rng.normal(size=(3, 4)))
        err = grad_check(
            lambda: T.mean_all(T.mul(psn_apply(x, alpha, beta, gamma), probe)),
            [x, alpha, beta, gamma],
        )
        assert err < 1e-6

    def test_forward_uses_params(self):
        x = Tensor(np.array([[0.0, 1.0, 2.0]]))
        out = psn_forward(x, PsnParams(2.0, 1.0, 0.0))
        expected = np.asarray(psn_value(x.data, 2.0, 1.0, 0.0))
        assert (out.data == expected).all()
        assert out.shape == x.shape


@settings(max_examples=200, deadline=None)
@given(
    alpha=st.floats(0.01, 10.0),
    beta=st.floats(0.01, 50.0),
    gamma=st.floats(-10.0, 10.0),
    x=st.floats(-1e6, 1e6),
)
def test_bounded_for_any_parameters(alpha, beta, gamma, x):
    v = psn_value(x, alpha, beta, gamma)
    assert 0.0 < v < alpha


@settings(max_examples=100, deadline=None)
@given(
    beta=st.floats(0.1, 40.0),
    gamma=st.floats(-5.0, 5.0),
    t1=st.floats(0.01, 25.0),
    scale=st.floats(1.1, 5.0),
)
def test_slope_decays_away_from_midpoint(beta, gamma, t1, scale):
    p = PsnParams(1.0, beta, gamma)
    near = psn_partials(gamma + t1 / beta, p)[0]
    far = psn_partials(gamma + scale * t1 / beta, p)[0]
    assert near > far

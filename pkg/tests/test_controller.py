import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from sontagdelay.controller import (
    ControlConfig,
    control_input,
    dissipation_rate,
    feedback,
    sontag_k,
    sontag_kr,
)
from sontagdelay.state import HistorySegment


class TestExamples:
    def test_k_zero_b(self):
        np.testing.assert_array_equal(sontag_k(3.0, [0.0, 0.0]), [0.0, 0.0])

    def test_k(self):
        assert sontag_k(1.0, [1.0])[0] == pytest.approx(-2.4142136, abs=1e-7)
        assert sontag_k(-1.0, [1.0])[0] == pytest.approx(-0.4142136, abs=1e-7)

    def test_kr(self):
        np.testing.assert_array_equal(sontag_kr(1.0, [0.0], 0.5), [0.0])
        assert sontag_kr(1.0, [1.0], 0.5)[0] == sontag_k(1.0, [1.0])[0]
        assert sontag_kr(1.0, [0.25], 0.5)[0] == pytest.approx(-2.0019512, abs=1e-7)

    def test_control_input_modes(self, demo_clkf, demo_model):
        zero = HistorySegment.constant(0.0, 1.0, 0.01)
        one = HistorySegment.constant(1.0, 1.0, 0.01)
        for mode in ("sontag-k", "sontag-kr", "kr-plus-iss", "open-loop"):
            np.testing.assert_array_equal(control_input(demo_clkf, demo_model, zero, ControlConfig(mode)), [0.0])
        # a = -0.5, b = 1: -(-0.5 + sqrt(1.25)) - q
        u = control_input(demo_clkf, demo_model, one, ControlConfig("kr-plus-iss", q=1.0, r=0.5))
        assert u[0] == pytest.approx(-1.6180340, abs=1e-7)
        assert control_input(demo_clkf, demo_model, one, ControlConfig("open-loop"))[0] == 0.0

    def test_dissipation_rate(self):
        assert dissipation_rate(1.0, [1.0], sontag_k(1.0, [1.0]), [0.0]) == pytest.approx(-math.sqrt(2))
        assert dissipation_rate(2.5, [0.0], [7.0], [-3.0]) == 2.5
        assert dissipation_rate(0.0, [1.0], sontag_k(0.0, [1.0]), [0.0]) == pytest.approx(-1.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ControlConfig("bogus")
        with pytest.raises(ValueError):
            ControlConfig("kr-plus-iss", q=0.0)
        with pytest.raises(ValueError):
            ControlConfig("sontag-kr", r=-1.0)


finite = dict(allow_nan=False, allow_infinity=False)
a_vals = st.floats(-1e3, 1e3, **finite)
b_vecs = st.lists(st.floats(-1e3, 1e3, **finite), min_size=1, max_size=3).map(np.array)


@settings(max_examples=500, deadline=None)
@given(a_vals, b_vecs)
def test_sontag_identity(a, b):
    bb = b @ b
    assume(bb > 0)
    lhs = a + b @ sontag_k(a, b) + math.sqrt(a * a + bb * bb)
    assert abs(lhs) <= 1e-9 * (1 + abs(a) + bb)


@settings(max_examples=300, deadline=None)
@given(a_vals, b_vecs, st.floats(1e-6, 1e3))
def test_iss_term_adds_dissipation(a, b, q):
    cfg = ControlConfig("kr-plus-iss", q=q, r=0.5)
    lhs = dissipation_rate(a, b, feedback(a, b, cfg), 0 * b)
    rhs = a + b @ sontag_kr(a, b, 0.5) - q * (b @ b)
    assert lhs <= rhs + 1e-9 * (1 + abs(a) + abs(rhs))


@settings(max_examples=500, deadline=None)
@given(a_vals, b_vecs, st.floats(1e-3, 10))
def test_branches_agree_outside_r(a, b, r):
    assume(b @ b > r * r)
    np.testing.assert_array_equal(sontag_kr(a, b, r), sontag_k(a, b))


@settings(max_examples=500, deadline=None)
@given(st.floats(-1e3, 1.0, **finite), st.floats(1e-9, 0.5), st.integers(0, 2**32 - 1))
def test_modification_error(a_frac, bn, seed):
    r, p = 0.5, 1.0
    d = np.random.default_rng(seed).normal(size=2)
    b = bn * d / np.linalg.norm(d)
    a = a_frac * p * bn  # a <= p |b|
    assert b @ sontag_kr(a, b, r) <= 1e-12
    assert abs(b @ (sontag_kr(a, b, r) - sontag_k(a, b))) <= (2 * p + r) * bn + 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e6, 1e6, **finite), st.floats(-1e6, 1e6, **finite), st.floats(1e-6, 1e3))
def test_modified_outputs_are_finite(a, b, q):
    for mode in ("sontag-kr", "kr-plus-iss"):
        assert np.isfinite(feedback(a, [b], ControlConfig(mode, q=q, r=0.5))).all()


def test_numerator_is_stable_for_large_negative_a():
    # naive a + sqrt(a^2 + b^4) cancels to 0 here
    k = sontag_k(-1e8, [1e-2])
    assert k[0] == pytest.approx(-(1e-8 / 2e8) / 1e-4 * 1e-2, rel=1e-6)

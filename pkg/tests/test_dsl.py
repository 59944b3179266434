import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sontagdelay.dsl import (
    Binary,
    Const,
    DslError,
    EvalError,
    Integral,
    Power,
    StateRef,
    SVar,
    Unary,
    eval_scalar,
    parse_expr,
    parse_model,
    to_text,
)
from sontagdelay.state import HistorySegment


def model(f, g="1.0", n=1, m=1, delta=1.0):
    return parse_model(f"system {{ n={n} m={m} delta={delta} f = {f} g = {g} }}")


def const_seg(c, step=0.01, delta=1.0):
    return HistorySegment.constant(c, delta, step)


class TestParse:
    def test_demo(self):
        mdl = model("-x[0](0) + 0.5*x[0](-1.0)")
        assert mdl.discrete_delays == (0.0, 1.0)
        assert mdl.n == mdl.m == 1
        assert mdl.integrals == ()

    def test_delay_exceeds_delta(self):
        with pytest.raises(DslError, match="delay 2.0 exceeds delta 1.0"):
            model("x[0](-2.0)")

    def test_distributed_term(self):
        mdl = model("integral(s*x[0](s), s, -1.0, 0.0)")
        (node,) = mdl.integrals
        assert (node.lo, node.hi) == (-1.0, 0.0)
        assert node.body == Binary("*", SVar(), StateRef(0, None))

    def test_error_positions(self):
        with pytest.raises(DslError) as info:
            parse_model("system {\n n=1 m=1 delta=1.0\n f = x[0](0) + \n g = 1.0 }")
        (diag,) = info.value.diagnostics
        assert diag.line == 4

    @pytest.mark.parametrize(
        "text, message",
        [
            ("x[1](0)", "index"),
            ("x[0](0.5)", "future"),
            ("y + 1", "y"),
        ],
    )
    def test_rejects(self, text, message):
        with pytest.raises(DslError, match=message):
            model(text)

    def test_dimension_mismatch(self):
        with pytest.raises(DslError):
            model("[x[0](0), 1.0]")

    def test_comments_and_other_blocks_ignored(self):
        mdl = parse_model("# header\nclkf { P = [1.0] }\nsystem { n=1 m=1 delta=1.0 f = 0.0 g = 0.0 }")
        assert mdl.f == (Const(0.0),)


class TestEval:
    def test_f_constant_history(self):
        mdl = model("-x[0](0) + 0.5*x[0](-1.0)")
        np.testing.assert_allclose(mdl.eval_f(const_seg(1.0)), [-0.5])

    def test_f_linear_history(self):
        mdl = model("-x[0](0) + 0.5*x[0](-1.0)")
        seg = HistorySegment.from_function(lambda s: s, 1.0, 0.01)
        np.testing.assert_allclose(mdl.eval_f(seg), [-0.5])

    def test_f_distributed(self):
        mdl = model("integral(s*x[0](s), s, -1.0, 0.0)")
        assert abs(mdl.eval_f(const_seg(1.0, 1e-3))[0] + 0.5) <= 1e-6

    @pytest.mark.parametrize(
        "g, c, expected",
        [("1.0", 7.0, 1.0), ("x[0](0)", 2.0, 2.0), ("cos(x[0](-1.0))", 0.0, 1.0)],
    )
    def test_g(self, g, c, expected):
        out = model("0.0", g).eval_g(const_seg(c))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(expected)

    def test_g_shape(self):
        mdl = model("[0.0, 0.0]", "[1.0, 2.0, 3.0, 4.0]", n=2, m=2)
        np.testing.assert_array_equal(mdl.eval_g(const_seg([0.0, 0.0])), [[1, 2], [3, 4]])

    def test_division_by_zero_names_node(self):
        mdl = model("1.0 / x[0](0)")
        with pytest.raises(EvalError, match=r"1\.0 / x\[0\]\(0\.0\)"):
            mdl.eval_f(const_seg(0.0))
        assert mdl.division_nodes == ("1.0 / x[0](0.0)",)

    def test_quadrature_is_second_order(self):
        mdl = model("integral(s^2*x[0](s), s, -1.0, 0.0)")
        errs = []
        for h in (0.1, 0.05, 0.025):
            seg = HistorySegment.from_function(lambda s: s, 1.0, h)
            errs.append(abs(mdl.eval_f(seg)[0] + 0.25))
        for e1, e2 in zip(errs, errs[1:]):
            assert 3.5 <= e1 / e2 <= 4.5

    def test_eval_scalar(self):
        assert eval_scalar(parse_expr("1 + s^2", in_integral=True), -2.0) == 5.0
        with pytest.raises(EvalError):
            eval_scalar(parse_expr("x[0](0)"), 0.0)


class TestValidate:
    def test_ok(self):
        assert model("x[0](-0.5)").validate(0.25) == []

    def test_delay_off_grid(self):
        (msg,) = model("x[0](-0.3)").validate(0.25)
        assert "0.3" in msg

    def test_step_does_not_divide(self):
        (msg,) = model("0.0").validate(0.33)
        assert "0.33" in msg and "1.0" in msg


# -- invariants -----------------------------------------------------------------

numbers = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
leaves = st.one_of(
    numbers.map(Const),
    st.sampled_from([0.0, -0.25, -0.5, -1.0]).map(lambda a: StateRef(0, a)),
)


def _tree(children):
    return st.one_of(
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda t: Binary(*t)),
        st.tuples(st.sampled_from(["neg", "sin", "cos", "tanh", "abs", "sat"]), children).map(
            lambda t: Unary(*t)
        ),
        st.tuples(children, st.integers(1, 4)).map(lambda t: Power(*t)),
    )


integrand = st.tuples(numbers, st.integers(0, 3)).map(
    lambda t: Binary("*", Binary("*", Const(t[0]), Power(SVar(), t[1])), StateRef(0, None))
)
exprs = st.recursive(
    st.one_of(leaves, integrand.map(lambda b: Integral(b, -1.0, 0.0))), _tree, max_leaves=12
)


@settings(max_examples=300, deadline=None)
@given(exprs)
def test_print_parse_round_trip(node):
    assert parse_expr(to_text(node)) == node


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_linear_models_are_homogeneous(seed, c):
    mdl = model("[-x[0](0) + 0.5*x[1](-0.5), integral((1 - s^2)*x[0](s), s, -1.0, 0.0) - 3*x[1](-1.0)]",
                "[1.0, 0.0, 0.0, 1.0]", n=2, m=2)
    seg = HistorySegment(1.0, 0.05, np.random.default_rng(seed).normal(size=(21, 2)))
    np.testing.assert_allclose(mdl.eval_f(seg.scaled(c)), c * mdl.eval_f(seg), rtol=1e-12, atol=1e-12)

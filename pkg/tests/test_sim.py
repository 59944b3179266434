import math

import numpy as np
import pytest

from sontagdelay.controller import ControlConfig
from sontagdelay.dsl import parse_model
from sontagdelay.sim import (
    DisturbanceSpec,
    DivergenceError,
    SimConfig,
    SimConfigError,
    Trajectory,
    dissipation_residual,
    integrate,
    residual_radius,
)
from sontagdelay.state import HistorySegment

OPEN = ControlConfig("open-loop")


def scalar_model(f, g="1.0"):
    return parse_model(f"system {{ n=1 m=1 delta=1.0 f = {f} g = {g} }}")


def run(model, clkf, ctrl, h, T, c=1.0, dist=DisturbanceSpec(), **kw):
    hist = HistorySegment.constant(c, model.delta, h)
    return integrate(model, clkf, ctrl, SimConfig(h, T, hist, dist, **kw))


def value_at(traj, t):
    (i,) = np.flatnonzero(np.isclose(traj.times, t, rtol=0, atol=1e-9))
    return traj.states[i, 0]


class TestOracle:
    # x' = -x(t-1), x = 1 on [-1, 0]: method of steps gives 1 - t on [0, 1],
    # 1 - t + (t-1)^2/2 on [1, 2] and x(3) = -1/2 + int_0^1 (-u + u^2/2) du = -1/6.
    @pytest.fixture(scope="class")
    @staticmethod
    def traj():
        return run(scalar_model("-x[0](-1.0)"), None, OPEN, 1e-3, 3.0)

    def test_first_interval(self, traj):
        assert abs(value_at(traj, 1.0)) <= 1e-9

    def test_second_interval(self, traj):
        assert abs(value_at(traj, 2.0) + 0.5) <= 1e-9

    def test_third_interval(self, traj):
        assert abs(value_at(traj, 3.0) + 1 / 6) <= 1e-5

    def test_piecewise_polynomial(self, traj):
        t = traj.times
        mask = (t >= 1) & (t <= 2)
        np.testing.assert_allclose(traj.states[mask, 0], 1 - t[mask] + (t[mask] - 1) ** 2 / 2, atol=1e-12)

    def test_zero_rhs_is_constant(self):
        traj = run(scalar_model("0.0", "0.0"), None, OPEN, 0.05, 7.0, c=3.25)
        assert np.all(traj.states == 3.25)


class TestConfig:
    def test_step_larger_than_delay(self):
        with pytest.raises(SimConfigError, match="smallest delay"):
            run(scalar_model("x[0](-0.5)"), None, OPEN, 1.0, 2.0)

    def test_history_grid_mismatch(self):
        hist = HistorySegment.constant(1.0, 1.0, 0.1)
        with pytest.raises(SimConfigError, match="grid"):
            integrate(scalar_model("0.0"), None, OPEN, SimConfig(0.05, 1.0, hist))

    def test_closed_loop_needs_clkf(self):
        with pytest.raises(SimConfigError):
            run(scalar_model("0.0"), None, ControlConfig("sontag-k"), 0.1, 1.0)

    def test_disturbance_dimension(self):
        with pytest.raises(SimConfigError):
            run(scalar_model("0.0"), None, OPEN, 0.1, 1.0, dist=DisturbanceSpec("constant", (1.0, 2.0, 3.0)))


class TestDisturbance:
    def test_bounds(self):
        assert DisturbanceSpec().bound(2) == 0.0
        assert DisturbanceSpec("constant", (3.0, 4.0)).bound(2) == 5.0
        assert DisturbanceSpec("sinusoid", (0.5,)).bound(1) == 0.5
        assert DisturbanceSpec("uniform", (2.0,)).bound(4) == 4.0

    def test_values_respect_bound(self):
        rng = np.random.default_rng(0)
        for spec in (DisturbanceSpec("sinusoid", (0.5, 1.0), freq=3.0), DisturbanceSpec("uniform", (1.5,), seed=9)):
            for k in range(200):
                t = float(rng.uniform(0, 50))
                assert np.linalg.norm(spec.value(t, k, 2)) <= spec.bound(2) * (1 + 1e-12)

    def test_uniform_is_seeded(self):
        spec = DisturbanceSpec("uniform", (1.0,), seed=5)
        np.testing.assert_array_equal(spec.value(0.0, 17, 3), spec.value(9.0, 17, 3))


class TestResiduals:
    def test_equilibrium(self, demo_clkf, demo_model):
        traj = run(demo_model, demo_clkf, ControlConfig("kr-plus-iss"), 0.01, 3.0, c=0.0)
        assert dissipation_residual(traj) == 0.0
        assert np.all(traj.states == 0.0)

    def test_closed_loop_first_order(self, demo_clkf, demo_model):
        ctrl = ControlConfig("kr-plus-iss", q=1.0, r=0.5)
        res = [dissipation_residual(run(demo_model, demo_clkf, ctrl, h, 3.0)) for h in (4e-3, 2e-3)]
        assert 1.5 <= res[0] / res[1] <= 4

    def test_open_loop_residual_is_O_h(self, demo_clkf, demo_model):
        # the kink of x' at t = 0 reaches dV/dt through the delay, so even
        # without a held control the residual is first order
        r1, r2 = (dissipation_residual(run(demo_model, demo_clkf, OPEN, h, 3.0)) for h in (2e-2, 1e-2))
        C = 2 * r2 / 1e-2 - r1 / 2e-2  # leading coefficient of C h + D h^2
        for h in (5e-3, 2.5e-3):
            assert dissipation_residual(run(demo_model, demo_clkf, OPEN, h, 3.0)) <= C * h

    def test_needs_diagnostics(self):
        traj = run(scalar_model("0.0"), None, OPEN, 0.1, 1.0)
        with pytest.raises(ValueError):
            dissipation_residual(traj)

    def test_radius_exponential(self):
        t = np.linspace(0, 10, 1001)
        traj = Trajectory(t, np.exp(-t)[:, None], np.zeros((t.size, 1)), np.zeros((t.size, 1)))
        assert residual_radius(traj, 0.5) == pytest.approx(math.exp(-5), rel=1e-12)

    def test_radius_constant(self):
        t = np.linspace(0, 10, 101)
        traj = Trajectory(t, np.full((t.size, 1), -0.2), np.zeros((t.size, 1)), np.zeros((t.size, 1)))
        assert residual_radius(traj) == pytest.approx(0.2)


class TestRuns:
    def test_divergence_is_reported(self):
        with pytest.raises(DivergenceError) as info:
            run(scalar_model("x[0](-1.0)"), None, OPEN, 0.01, 100.0)
        exc = info.value
        assert 30 < exc.t < 100
        assert exc.trajectory is not None and np.isfinite(exc.trajectory.states).all()

    def test_deterministic(self, demo_clkf, demo_model):
        ctrl = ControlConfig("kr-plus-iss", q=10.0)
        dist = DisturbanceSpec("uniform", (0.5,), seed=3)
        a = run(demo_model, demo_clkf, ctrl, 0.01, 5.0, dist=dist)
        b = run(demo_model, demo_clkf, ctrl, 0.01, 5.0, dist=dist)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_continuation(self, demo_clkf, demo_model):
        ctrl = ControlConfig("kr-plus-iss", q=10.0)
        dist = DisturbanceSpec("sinusoid", (0.5,))
        full = run(demo_model, demo_clkf, ctrl, 0.01, 6.0, dist=dist)
        first = run(demo_model, demo_clkf, ctrl, 0.01, 2.5, dist=dist)
        second = integrate(demo_model, demo_clkf, ctrl, SimConfig(0.01, 3.5, first.terminal, dist, t0=2.5))
        np.testing.assert_allclose(second.times, full.times[250:], rtol=0, atol=1e-12)
        np.testing.assert_allclose(second.states, full.states[250:], rtol=0, atol=1e-12)

    def test_record_every(self, demo_clkf, demo_model):
        traj = run(demo_model, demo_clkf, ControlConfig(), 0.01, 5.0, record_every=7)
        assert len(traj) == math.floor(5.0 / (0.01 * 7)) + 1
        assert traj.times[1] == pytest.approx(0.07)

    def test_bounded_for_random_histories(self, demo_clkf, demo_model):
        rng = np.random.default_rng(11)
        ctrl = ControlConfig("kr-plus-iss", q=10.0)
        for _ in range(3):
            c = rng.normal(size=3)
            hist = HistorySegment.from_function(lambda s: c[0] + c[1] * np.sin(5 * s) + c[2] * s, 1.0, 0.01)
            hist = hist.scaled(float(rng.uniform(0, 10)) / max(hist.sup_norm(), 1e-12))
            traj = integrate(demo_model, demo_clkf, ctrl, SimConfig(0.01, 50.0, hist, DisturbanceSpec("sinusoid", (0.5,))))
            assert np.isfinite(traj.states).all()
            assert np.abs(traj.states[-1]).max() < 1.0

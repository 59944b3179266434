"""Method-of-steps RK4 integration of the disturbed closed loop.

    x'(t) = f(x_t) + g(x_t) (u(t) + d(t)),   x_0 = xi_0

The control is computed from x_t at the start of each step and held over the
step; delayed values at intermediate RK stages come from the stored history by
linear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clkf import ClkfSpec, eval_V, invariant_derivative
from .controller import ControlConfig, feedback
from .dsl import SystemModel, evaluate
from .state import HistorySegment, grid_count

DIVERGENCE_THRESHOLD = 1e12


class SimConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """The state left the representable range; ``trajectory`` holds the run so far."""

    def __init__(self, t: float, trajectory: Trajectory | None = None):
        super().__init__(f"divergence at t={t:.6g}")
        self.t = t
        self.trajectory = trajectory


@dataclass(frozen=True)
class DisturbanceSpec:
    """Actuator disturbance d(t).

    kind is one of ``zero``, ``constant`` (d = amplitude), ``sinusoid``
    (d = amplitude * sin(freq * t + phase)) or ``uniform`` (each component
    uniform in [-amplitude, amplitude], redrawn every integration step).
    """

    kind: str = "zero"
    amplitude: tuple[float, ...] = ()
    freq: float = 1.0
    phase: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "sinusoid", "uniform"):
            raise SimConfigError(f"unknown disturbance kind {self.kind!r}")
        object.__setattr__(self, "amplitude", tuple(float(v) for v in np.atleast_1d(self.amplitude)))
        if self.kind == "uniform" and (len(self.amplitude) != 1 or self.amplitude[0] < 0):
            raise SimConfigError("uniform disturbance takes one nonnegative amplitude")
        if self.kind in ("constant", "sinusoid") and not self.amplitude:
            raise SimConfigError(f"{self.kind} disturbance needs an amplitude")

    def check(self, m: int):
        if self.kind in ("constant", "sinusoid") and len(self.amplitude) not in (1, m):
            raise SimConfigError(f"disturbance amplitude has {len(self.amplitude)} entries, input dimension is {m}")

    def value(self, t: float, step_index: int, m: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(m)
        amp = np.broadcast_to(np.asarray(self.amplitude), (m,))
        if self.kind == "constant":
            return amp.copy()
        if self.kind == "sinusoid":
            return amp * math.sin(self.freq * t + self.phase)
        rng = np.random.default_rng([self.seed, step_index])
        return rng.uniform(-self.amplitude[0], self.amplitude[0], size=m)

    def bound(self, m: int) -> float:
        """Closed-form essential supremum of |d(t)|."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "uniform":
            return self.amplitude[0] * math.sqrt(m)
        return float(np.linalg.norm(np.broadcast_to(np.asarray(self.amplitude), (m,))))


@dataclass(frozen=True)
class SimConfig:
    step: float
    horizon: float
    initial_history: HistorySegment
    disturbance: DisturbanceSpec = DisturbanceSpec()
    record_every: int = 1
    # absolute time of the first step; lets a run continue from a terminal segment
    t0: float = 0.0


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    V: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    residual: np.ndarray | None = None
    terminal: HistorySegment | None = None
    step: float | None = None

    @property
    def b_norm(self) -> np.ndarray | None:
        return None if self.b is None else np.linalg.norm(self.b, axis=1)

    def __len__(self):
        return len(self.times)


class _StageView:
    """History view at time t + offset during an RK step.

    Lookups at or before t use the stored segment; the span (t, t + offset]
    (reached only by distributed terms) is interpolated towards the stage value.
    """

    def __init__(self, seg: HistorySegment, offset: float, value: np.ndarray):
        self.seg = seg
        self.offset = offset
        self.value = value
        self.delta = seg.delta
        self.step = seg.step

    def eval(self, tau):
        if isinstance(tau, float) or np.ndim(tau) == 0:
            if tau == 0:
                return self.value
            s = self.offset + tau
            if s <= 0:
                return self.seg.eval(s)
            return self.seg.current + (s / self.offset) * (self.value - self.seg.current)
        tau = np.asarray(tau, dtype=float)
        s = self.offset + tau
        past = self.seg.eval(np.minimum(s, 0.0))
        frac = (np.maximum(s, 0.0) / self.offset)[:, None]
        ahead = self.seg.current + frac * (self.value - self.seg.current)
        out = np.where((s > 0)[:, None], ahead, past)
        out[tau == 0] = self.value
        return out


def check_config(model: SystemModel, clkf: ClkfSpec | None, ctrl: ControlConfig, sim: SimConfig) -> int:
    """Validate the run setup; returns the number of integration steps."""
    h = sim.step
    problems = model.validate(h)
    if clkf is not None:
        if clkf.n != model.n:
            problems.append(f"CLKF dimension {clkf.n} differs from model n={model.n}")
        else:
            problems += clkf.validate(model.delta, h)
    elif ctrl.mode != "open-loop":
        problems.append(f"mode {ctrl.mode} needs a clkf")
    positive = [d for d in model.discrete_delays if d > 0]
    if positive and h > min(positive) * (1 + 1e-12):
        problems.append(f"step {h} exceeds the smallest delay {min(positive)}")
    seg = sim.initial_history
    if seg.dim != model.n:
        problems.append(f"initial history has dimension {seg.dim}, model needs n={model.n}")
    if abs(seg.delta - model.delta) > 1e-12 * model.delta or abs(seg.step - h) > 1e-12 * h:
        problems.append("initial history grid must match (delta, step) of the run")
    if sim.horizon < h:
        problems.append("horizon must be at least one step")
    if sim.record_every < 1:
        problems.append("record_every must be a positive integer")
    try:
        sim.disturbance.check(model.m)
    except SimConfigError as exc:
        problems.append(str(exc))
    if problems:
        raise SimConfigError("; ".join(problems))
    return int(math.floor(sim.horizon / h + 1e-9))


def integrate(model: SystemModel, clkf: ClkfSpec | None, ctrl: ControlConfig, sim: SimConfig) -> Trajectory:
    steps = check_config(model, clkf, ctrl, sim)
    n, m, h = model.n, model.m, sim.step
    window = grid_count(model.delta, h)
    G_shape = (n, m)
    buf = np.empty((window + steps + 1, n))
    buf[: window + 1] = sim.initial_history.samples
    U = np.zeros((steps + 1, m))
    D = np.zeros((steps + 1, m))
    have_diag = clkf is not None
    V = np.full(steps + 1, np.nan)
    A = np.full(steps + 1, np.nan)
    B = np.full((steps + 1, m), np.nan)
    dist = sim.disturbance

    def rhs(view, u, t, k):
        fx = evaluate(model.f, view)
        gx = evaluate(model.g, view).reshape(G_shape)
        return fx + gx @ (u + dist.value(t, k, m))

    last = steps
    for k in range(steps + 1):
        t = sim.t0 + k * h
        seg = HistorySegment(model.delta, h, buf[k : k + window + 1])
        x = seg.current
        fx = evaluate(model.f, seg)
        gx = evaluate(model.g, seg).reshape(G_shape)
        if have_diag:
            grad = x @ clkf.P
            a = float(grad @ fx) + invariant_derivative(clkf, seg)
            b = grad @ gx
            V[k], A[k], B[k] = eval_V(clkf, seg), a, b
            u = feedback(a, b, ctrl)
        else:
            u = np.zeros(m)
        d = dist.value(t, k, m)
        U[k], D[k] = u, d
        if k == steps:
            break
        k1 = fx + gx @ (u + d)
        k2 = rhs(_StageView(seg, h / 2, x + (h / 2) * k1), u, t + h / 2, k)
        k3 = rhs(_StageView(seg, h / 2, x + (h / 2) * k2), u, t + h / 2, k)
        k4 = rhs(_StageView(seg, h, x + h * k3), u, t + h, k)
        x_new = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        # NaN fails the comparison too
        if not np.abs(x_new).max() <= DIVERGENCE_THRESHOLD:
            last = k
            break
        buf[window + k + 1] = x_new

    traj = _assemble(buf, window, last, U, D, V, A, B, have_diag, sim, h)
    if last < steps:
        raise DivergenceError(sim.t0 + (last + 1) * h, traj)
    return traj


def _assemble(buf, window, last, U, D, V, A, B, have_diag, sim, h) -> Trajectory:
    states = buf[window : window + last + 1]
    residual = None
    if have_diag:
        residual = np.full(last + 1, np.nan)
        if last >= 2:
            dV = (V[2 : last + 1] - V[: last - 1]) / (2 * h)
            rate = A[1:last] + np.einsum("ij,ij->i", B[1:last], U[1:last] + D[1:last])
            residual[1:last] = np.abs(dV - rate)
    idx = np.arange(0, last + 1, sim.record_every)
    return Trajectory(
        times=sim.t0 + idx * h,
        states=states[idx].copy(),
        inputs=U[idx].copy(),
        disturbances=D[idx].copy(),
        V=V[idx].copy() if have_diag else None,
        a=A[idx].copy() if have_diag else None,
        b=B[idx].copy() if have_diag else None,
        residual=residual[idx] if have_diag else None,
        terminal=HistorySegment(sim.initial_history.delta, h, buf[last : last + window + 1]),
        step=h,
    )


def dissipation_residual(traj: Trajectory) -> float:
    """max over interior records of |centered dV/dt - (a + b(u + d))|."""
    if traj.residual is None:
        raise ValueError("trajectory has no CLKF diagnostics; integrate with a clkf")
    interior = traj.residual[np.isfinite(traj.residual)]
    return float(interior.max()) if interior.size else 0.0


def residual_radius(traj: Trajectory, settle_fraction: float = 0.5) -> float:
    """max |x(t)| over the trailing (1 - settle_fraction) of the run."""
    if not 0 < settle_fraction < 1:
        raise ValueError("settle_fraction must lie in (0, 1)")
    if len(traj.times) == 0:
        return 0.0
    t0, t1 = traj.times[0], traj.times[-1]
    start = t0 + settle_fraction * (t1 - t0)
    tail = traj.times >= start - 1e-12 * max(1.0, abs(t1))
    return float(np.linalg.norm(traj.states[tail], axis=1).max())

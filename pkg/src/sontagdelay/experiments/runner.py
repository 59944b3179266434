"""Batch experiments: single runs, q sweeps and the hypothesis falsifier."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..clkf import HypothesisReport, SamplerConfig, check_hypothesis, gamma_gain
from ..sim import DivergenceError, Trajectory, integrate, residual_radius
from .config import ExperimentConfig


class ConfigError(ValueError):
    pass


def theoretical_bound(clkf, q: float, r: float, d_bound: float) -> float:
    """gamma(sqrt(2/q) |d|_inf) + gamma(sqrt(2/q) (2p + r))."""
    scale = math.sqrt(2.0 / q)
    return gamma_gain(clkf, scale * d_bound) + gamma_gain(clkf, scale * (2 * clkf.p + r))


@dataclass
class RunResult:
    trajectory: Trajectory
    residual_radius: float
    bound: float | None  # only defined for kr-plus-iss
    diverged_at: float | None = None

    @property
    def bound_ok(self) -> bool | None:
        if self.diverged_at is not None:
            return False
        if self.bound is None:
            return None
        return self.residual_radius <= self.bound

    def summary(self) -> str:
        if self.diverged_at is not None:
            return f"divergence at t={self.diverged_at:.6g}"
        parts = [f"residual_radius={self.residual_radius:.6g}"]
        if self.bound is None:
            parts.append("bound=n/a")
        else:
            parts.append(f"bound={self.bound:.6g}")
            parts.append(f"bound_satisfied={'yes' if self.bound_ok else 'no'}")
        return " ".join(parts)


def run(cfg: ExperimentConfig) -> RunResult:
    ctrl = cfg.control()
    try:
        traj = integrate(cfg.model, cfg.clkf, ctrl, cfg.sim())
        diverged = None
    except DivergenceError as exc:
        traj, diverged = exc.trajectory, exc.t
    radius = residual_radius(traj, cfg.settings.settle) if diverged is None else math.inf
    bound = None
    if ctrl.mode == "kr-plus-iss":
        bound = theoretical_bound(cfg.clkf, ctrl.q, ctrl.r, cfg.settings.disturbance.bound(cfg.model.m))
    return RunResult(traj, radius, bound, diverged)


@dataclass(frozen=True)
class SweepRow:
    q: float
    residual_radius: float
    theoretical_bound: float
    diverged_at: float | None


def _sweep_row(cfg: ExperimentConfig) -> SweepRow:
    res = run(cfg)
    return SweepRow(cfg.settings.q, res.residual_radius, res.bound, res.diverged_at)


def sweep_q(cfg: ExperimentConfig, qs=None, jobs: int = 1) -> list[SweepRow]:
    """One independent run per q (same seed and history); rows in q order."""
    qs = tuple(cfg.settings.sweep if qs is None else qs)
    if len(qs) < 2:
        raise ConfigError("sweep needs >= 2 values")
    if any(b <= a for a, b in zip(qs, qs[1:])):
        raise ConfigError("sweep values must be strictly increasing")
    if cfg.settings.mode != "kr-plus-iss":
        raise ConfigError("q sweeps need mode kr-plus-iss")
    configs = [cfg.with_overrides(q=q) for q in qs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_row, configs))
    return [_sweep_row(c) for c in configs]


def falsify(cfg: ExperimentConfig, step: float | None = None) -> HypothesisReport:
    if cfg.clkf is None:
        raise ConfigError("falsify needs a clkf block")
    sampler = SamplerConfig(count=cfg.settings.samples, seed=cfg.settings.seed, step=step)
    return check_hypothesis(cfg.clkf, cfg.model, sampler)


# -- CSV -----------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def trajectory_header(n: int, m: int) -> list[str]:
    return (
        ["t"]
        + [f"x_{i}" for i in range(n)]
        + [f"u_{j}" for j in range(m)]
        + [f"d_{j}" for j in range(m)]
        + ["V", "a", "b_norm", "dissipation_residual"]
    )


def write_csv(traj: Trajectory, stream=None) -> str:
    """Write the trajectory table; returns the text when no stream is given."""
    out = stream or io.StringIO()
    n, m = traj.states.shape[1], traj.inputs.shape[1]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(trajectory_header(n, m))
    k = len(traj.times)
    nan = np.full(k, np.nan)
    V = nan if traj.V is None else traj.V
    a = nan if traj.a is None else traj.a
    bn = nan if traj.b is None else traj.b_norm
    res = nan if traj.residual is None else traj.residual
    for i in range(k):
        row = [traj.times[i], *traj.states[i], *traj.inputs[i], *traj.disturbances[i], V[i], a[i], bn[i], res[i]]
        w.writerow([_fmt(v) for v in row])
    return out.getvalue() if stream is None else ""


def read_csv(text: str) -> dict[str, np.ndarray]:
    """Columns of a trajectory CSV keyed by header name."""
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def write_sweep_csv(rows: list[SweepRow], stream=None) -> str:
    out = stream or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["q", "residual_radius", "theoretical_bound", "diverged_at"])
    for r in rows:
        w.writerow(
            [
                _fmt(r.q),
                _fmt(r.residual_radius),
                _fmt(r.theoretical_bound),
                "" if r.diverged_at is None else _fmt(r.diverged_at),
            ]
        )
    return out.getvalue() if stream is None else ""


def write_counterexamples_csv(report: HypothesisReport, stream=None) -> str:
    out = stream or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["condition", "sample_index", "family", "quantity", "value", "phi0_norm", "m2_norm", "sup_norm"])
    for cond, res in report.conditions.items():
        for wit in res.witnesses:
            seg = wit.segment
            for key, value in wit.values.items():
                w.writerow(
                    [
                        cond,
                        wit.sample_index,
                        wit.family,
                        key,
                        _fmt(value),
                        _fmt(np.linalg.norm(seg.current)),
                        _fmt(seg.m2_norm()),
                        _fmt(seg.sup_norm()),
                    ]
                )
    return out.getvalue() if stream is None else ""


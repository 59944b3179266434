"""Fast numerical checks behind ``sontagdelay selftest``."""

from __future__ import annotations

import math

import numpy as np

from .. import demos
from ..clkf import SamplerConfig, check_hypothesis
from ..controller import ControlConfig, sontag_k
from ..dsl import parse_model
from ..sim import SimConfig, integrate
from ..state import HistorySegment
from .config import read_config


def _sontag_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = rng.uniform(-1e3, 1e3)
        b = rng.uniform(-1e3, 1e3, size=2)
        bb = float(b @ b)
        err = abs(a + b @ sontag_k(a, b) + math.sqrt(a * a + bb * bb)) / (1 + abs(a) + bb)
        worst = max(worst, err)
    return worst <= 1e-9, f"max scaled error {worst:.2e}"


def _integrator_oracle():
    model = parse_model("system { n=1 m=1 delta=1.0 f = -x[0](-1.0) g = 1.0 }")
    h = 1e-3
    traj = integrate(model, None, ControlConfig("open-loop"), SimConfig(h, 3.0, HistorySegment.constant(1.0, 1.0, h)))
    x = traj.states[:, 0]
    errs = (abs(x[1000]), abs(x[2000] + 0.5), abs(x[3000] + 1 / 6))
    ok = errs[0] <= 1e-9 and errs[1] <= 1e-9 and errs[2] <= 1e-5
    return ok, "errors at t=1,2,3: " + ", ".join(f"{e:.1e}" for e in errs)


def _falsifier():
    cfg = read_config(demos.text("g_zero.dyn"))
    report = check_hypothesis(cfg.clkf, cfg.model, SamplerConfig(count=50))
    ok = report.conditions["ii"].status == "falsified"
    return ok, f"condition (ii) on the unactuated model: {report.conditions['ii'].status}"


def run_selftest():
    for name, check in [
        ("sontag identity", _sontag_identity),
        ("method-of-steps oracle", _integrator_oracle),
        ("falsifier", _falsifier),
    ]:
        passed, detail = check()
        yield name, passed, detail

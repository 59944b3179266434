"""Experiment files: one DSL file with ``system``, ``clkf`` and ``experiment`` blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..clkf import ClkfSpec, parse_clkf_block
from ..controller import MODES, ControlConfig
from ..dsl import (
    Const,
    Diagnostic,
    DslError,
    Parser,
    SystemModel,
    eval_scalar,
    format_number,
    to_text,
)
from ..sim import DisturbanceSpec, SimConfig, SimConfigError
from ..state import HistorySegment


@dataclass(frozen=True)
class ExperimentSettings:
    mode: str = "kr-plus-iss"
    q: float = 1.0
    r: float | None = None  # defaults to the clkf's r
    step: float = 0.01
    horizon: float = 10.0
    settle: float = 0.5
    record_every: int = 1
    history: tuple = (Const(1.0),)  # expressions in s, one per state component
    disturbance: DisturbanceSpec = DisturbanceSpec()
    sweep: tuple[float, ...] = ()
    seed: int = 0
    samples: int = 1000
    out: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: SystemModel
    clkf: ClkfSpec | None
    settings: ExperimentSettings = field(default_factory=ExperimentSettings)

    def with_overrides(self, **overrides) -> ExperimentConfig:
        """Replace scalar settings, ignoring None values (CLI flags not given)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        if not changes:
            return self
        return dataclasses.replace(self, settings=dataclasses.replace(self.settings, **changes))

    def control(self) -> ControlConfig:
        s = self.settings
        r = s.r if s.r is not None else (self.clkf.r if self.clkf is not None else 1.0)
        return ControlConfig(s.mode, s.q, r)

    def initial_history(self) -> HistorySegment:
        s = self.settings
        exprs = s.history if len(s.history) == self.model.n else s.history * self.model.n
        return HistorySegment.from_function(
            lambda tau: [eval_scalar(e, tau) for e in exprs], self.model.delta, s.step
        )

    def sim(self) -> SimConfig:
        s = self.settings
        return SimConfig(
            step=s.step,
            horizon=s.horizon,
            initial_history=self.initial_history(),
            disturbance=s.disturbance,
            record_every=s.record_every,
        )


# -- parsing -------------------------------------------------------------------

_SCALARS = {
    "q": float,
    "r": float,
    "step": float,
    "horizon": float,
    "settle": float,
    "record_every": int,
    "seed": int,
    "samples": int,
}


def _disturbance(p: Parser) -> DisturbanceSpec:
    kind_tok = p.ident()
    kind = kind_tok.text
    if kind == "zero":
        return DisturbanceSpec()
    if kind not in ("constant", "sinusoid", "uniform"):
        raise p.error(f"unknown disturbance {kind!r}", kind_tok)
    p.expect("(")
    args = {}
    while not p.at(")"):
        name = p.ident()
        p.expect("=")
        if name.text == "amplitude":
            args["amplitude"] = tuple(p.number_list()) if p.at("[") else (p.number(),)
        elif name.text in ("freq", "phase"):
            args[name.text] = p.number()
        elif name.text == "seed":
            args["seed"] = p.integer()
        else:
            raise p.error(f"unknown disturbance argument {name.text!r}", name)
        if not p.at(")"):
            p.expect(",")
    p.expect(")")
    try:
        return DisturbanceSpec(kind, **args)
    except SimConfigError as exc:
        raise p.error(str(exc), kind_tok) from None


def _history(p: Parser) -> tuple:
    p.state_free = True
    try:
        return tuple(p.vector(in_integral=True))
    finally:
        p.state_free = False


def parse_experiment_block(p: Parser) -> ExperimentSettings:
    p.expect("experiment")
    p.expect("{")
    values: dict = {}
    while not p.at("}"):
        key = p.ident()
        if key.text in values:
            raise p.error(f"{key.text} declared twice", key)
        p.expect("=")
        name = key.text
        if name in _SCALARS:
            tok = p.tok
            values[name] = p.integer() if _SCALARS[name] is int else p.number()
            if name in ("step", "horizon") and values[name] <= 0:
                raise p.error(f"{name} must be positive", tok)
            if name == "settle" and not 0 < values[name] < 1:
                raise p.error("settle must lie in (0, 1)", tok)
        elif name == "mode":
            tok = p.tok
            values[name] = p.string()
            if values[name] not in MODES:
                raise p.error(f"unknown mode {values[name]!r}; expected one of {', '.join(MODES)}", tok)
        elif name == "out":
            values[name] = p.string()
        elif name == "history":
            values[name] = _history(p)
        elif name == "disturbance":
            values[name] = _disturbance(p)
        elif name == "sweep":
            tok = p.tok
            qs = tuple(p.number_list())
            if any(b <= a for a, b in zip(qs, qs[1:])):
                raise p.error("sweep values must be strictly increasing", tok)
            values[name] = qs
        else:
            raise p.error(f"unknown experiment field {name!r}", key)
    p.expect("}")
    return ExperimentSettings(**values)


def read_config(text: str) -> ExperimentConfig:
    """Parse a complete experiment file."""
    p = Parser(text)
    model = clkf = settings = None
    while p.tok.kind != "eof":
        tok = p.tok
        if p.at("system"):
            if model is not None:
                raise p.error("more than one system block")
            model = p.system_block()
        elif p.at("clkf"):
            if clkf is not None:
                raise p.error("more than one clkf block")
            clkf = parse_clkf_block(p)
        elif p.at("experiment"):
            if settings is not None:
                raise p.error("more than one experiment block")
            settings = parse_experiment_block(p)
        else:
            raise p.error(f"unknown block {tok.text!r}; expected system, clkf or experiment")
    if model is None:
        raise DslError(Diagnostic(1, 1, "no system block found"))
    settings = settings or ExperimentSettings()
    diags = []
    if clkf is not None and clkf.n != model.n:
        diags.append(Diagnostic(1, 1, f"clkf dimension {clkf.n} differs from model n={model.n}"))
    if len(settings.history) not in (1, model.n):
        diags.append(Diagnostic(1, 1, f"history has {len(settings.history)} entries, expected 1 or n={model.n}"))
    if settings.mode != "open-loop" and clkf is None:
        diags.append(Diagnostic(1, 1, f"mode {settings.mode} needs a clkf block"))
    for problem in model.validate(settings.step):
        diags.append(Diagnostic(1, 1, problem))
    if clkf is not None:
        for problem in clkf.validate(model.delta, settings.step):
            diags.append(Diagnostic(1, 1, problem))
    if diags:
        raise DslError(diags)
    return ExperimentConfig(model, clkf, settings)


def _disturbance_text(d: DisturbanceSpec) -> str:
    if d.kind == "zero":
        return "zero"
    amp = "[" + ", ".join(format_number(v) for v in d.amplitude) + "]"
    if d.kind == "constant":
        return f"constant(amplitude={amp})"
    if d.kind == "sinusoid":
        return f"sinusoid(amplitude={amp}, freq={format_number(d.freq)}, phase={format_number(d.phase)})"
    return f"uniform(amplitude={format_number(d.amplitude[0])}, seed={d.seed})"


def settings_to_text(s: ExperimentSettings) -> str:
    lines = [
        "experiment {",
        f'    mode = "{s.mode}"',
        f"    q = {format_number(s.q)}",
    ]
    if s.r is not None:
        lines.append(f"    r = {format_number(s.r)}")
    lines += [
        f"    step = {format_number(s.step)}",
        f"    horizon = {format_number(s.horizon)}",
        f"    settle = {format_number(s.settle)}",
        f"    record_every = {s.record_every}",
        "    history = [" + ", ".join(to_text(e) for e in s.history) + "]",
        f"    disturbance = {_disturbance_text(s.disturbance)}",
    ]
    if s.sweep:
        lines.append("    sweep = [" + ", ".join(format_number(q) for q in s.sweep) + "]")
    lines += [f"    seed = {s.seed}", f"    samples = {s.samples}"]
    if s.out is not None:
        lines.append(f'    out = "{s.out}"')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig) -> str:
    parts = [cfg.model.to_text()]
    if cfg.clkf is not None:
        parts.append(cfg.clkf.to_text())
    parts.append(settings_to_text(cfg.settings))
    return "\n".join(parts)

"""Control Liapunov-Krasovskii functionals of quadratic-plus-integral form.

V(x, phi) = 1/2 x'Px + sum_j mu_j int_{-tau_j}^0 phi(s)'Q_j phi(s) ds

For this family the Driver-form components are available in closed form:

    a(phi) = phi(0)'P f(phi) + sum_j mu_j (phi(0)'Q_j phi(0) - phi(-tau_j)'Q_j phi(-tau_j))
    b(phi) = phi(0)'P g(phi)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsl import Diagnostic, DslError, Parser, SystemModel, format_number
from .state import HistorySegment, grid_count


class ClkfError(ValueError):
    pass


@dataclass(frozen=True)
class KInfFn:
    """Power law s -> coef * s**exponent (class K-infinity for coef, exponent > 0)."""

    coef: float
    exponent: float

    def __post_init__(self):
        if not (self.coef > 0 and self.exponent > 0):
            raise ClkfError(f"pow({self.coef}, {self.exponent}) is not of class K-infinity")

    def __call__(self, s):
        return self.coef * np.power(s, self.exponent)

    def inverse(self, s):
        return np.power(np.asarray(s) / self.coef, 1.0 / self.exponent)

    def to_text(self) -> str:
        return f"pow({format_number(self.coef)}, {format_number(self.exponent)})"


@dataclass(frozen=True, eq=False)
class IntegralTerm:
    tau: float
    Q: np.ndarray
    mu: float

    def __eq__(self, other):
        return (
            isinstance(other, IntegralTerm)
            and self.tau == other.tau
            and self.mu == other.mu
            and np.array_equal(self.Q, other.Q)
        )


def _sym_matrix(values, n, name) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.size != n * n:
        raise ClkfError(f"{name} has {a.size} entries, expected {n * n}")
    a = a.reshape(n, n)
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ClkfError(f"{name} is not symmetric")
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ClkfSpec:
    P: np.ndarray
    terms: tuple[IntegralTerm, ...]
    alpha1: KInfFn
    alpha2: KInfFn
    alpha3: KInfFn
    r: float
    p: float

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = P.shape[0]
        P = _sym_matrix(P, n, "P")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ClkfError("P is not positive definite") from None
        terms = []
        for j, t in enumerate(self.terms):
            Q = _sym_matrix(t.Q, n, f"Q of term {j}")
            if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.abs(Q).max()):
                raise ClkfError(f"Q of term {j} is not positive semidefinite")
            if not t.mu > 0:
                raise ClkfError(f"mu of term {j} must be positive")
            if not t.tau > 0:
                raise ClkfError(f"tau of term {j} must be positive")
            terms.append(IntegralTerm(float(t.tau), Q, float(t.mu)))
        if not self.r > 0:
            raise ClkfError("r must be positive")
        if not self.p >= 0:
            raise ClkfError("p must be nonnegative")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "terms", tuple(terms))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ClkfSpec):
            return NotImplemented
        return (
            np.array_equal(self.P, other.P)
            and self.terms == other.terms
            and (self.alpha1, self.alpha2, self.alpha3, self.r, self.p)
            == (other.alpha1, other.alpha2, other.alpha3, other.r, other.p)
        )

    def validate(self, delta: float, grid_step: float) -> list[str]:
        problems = []
        for t in self.terms:
            if t.tau > delta * (1 + 1e-12):
                problems.append(f"term delay {t.tau} exceeds delta {delta}")
            elif grid_count(t.tau, grid_step) is None:
                problems.append(f"step {grid_step} does not divide term delay {t.tau}")
        return problems

    def to_text(self) -> str:
        def mat(a):
            return "[" + ", ".join(format_number(v) for v in np.ravel(a)) + "]"

        lines = ["clkf {", f"    P = {mat(self.P)}"]
        for t in self.terms:
            lines.append(f"    term(tau={format_number(t.tau)}, mu={format_number(t.mu)}, Q={mat(t.Q)})")
        lines += [
            f"    alpha1 = {self.alpha1.to_text()}",
            f"    alpha2 = {self.alpha2.to_text()}",
            f"    alpha3 = {self.alpha3.to_text()}",
            f"    r = {format_number(self.r)}",
            f"    p = {format_number(self.p)}",
            "}",
        ]
        return "\n".join(lines) + "\n"


# -- functional and its Driver-form components --------------------------------


def _term_window(seg: HistorySegment, tau: float) -> np.ndarray:
    k = grid_count(tau, seg.step)
    if k is None or k >= seg.size:
        raise ClkfError(f"term delay {tau} is not representable on a grid of step {seg.step}")
    return seg.samples[-(k + 1):]


def eval_V(clkf: ClkfSpec, seg: HistorySegment, x=None) -> float:
    """V(x, phi); ``x`` defaults to phi(0)."""
    x = seg.current if x is None else np.asarray(x, dtype=float)
    value = 0.5 * x @ clkf.P @ x
    for t in clkf.terms:
        w = _term_window(seg, t.tau)
        quad = np.einsum("ij,jk,ik->i", w, t.Q, w)
        value += t.mu * np.trapezoid(quad, dx=seg.step)
    return float(value)


def invariant_derivative(clkf: ClkfSpec, seg: HistorySegment) -> float:
    """Right-hand derivative in h of V(phi(0), phi^h) at h = 0, closed form."""
    x0 = seg.current
    total = 0.0
    for t in clkf.terms:
        xd = _term_window(seg, t.tau)[0]
        total += t.mu * (x0 @ t.Q @ x0 - xd @ t.Q @ xd)
    return float(total)


def invariant_derivative_fd(clkf: ClkfSpec, seg: HistorySegment, h: float) -> float:
    """Forward difference (V(phi(0), phi^h) - V(phi(0), phi)) / h."""
    if not h > 0:
        raise ClkfError("h must be positive")
    return (eval_V(clkf, seg.shift_freeze(h)) - eval_V(clkf, seg)) / h


def grad_x(clkf: ClkfSpec, seg: HistorySegment) -> np.ndarray:
    """dV/dx at x = phi(0) (row vector)."""
    return seg.current @ clkf.P


def eval_a(clkf: ClkfSpec, model: SystemModel, seg: HistorySegment) -> float:
    return float(grad_x(clkf, seg) @ model.eval_f(seg)) + invariant_derivative(clkf, seg)


def eval_b(clkf: ClkfSpec, model: SystemModel, seg: HistorySegment) -> np.ndarray:
    return grad_x(clkf, seg) @ model.eval_g(seg)


def gamma_gain(clkf: ClkfSpec, s):
    """alpha1^-1 o alpha2 o alpha3^-1 (s^2)."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ClkfError("gamma_gain needs s >= 0")
    out = clkf.alpha1.inverse(clkf.alpha2(clkf.alpha3.inverse(s**2)))
    return float(out) if out.ndim == 0 else out


# -- hypothesis falsifier ------------------------------------------------------

CONDITIONS = ("i", "ii", "iii", "iv")
FAMILIES = ("constant", "smooth", "zero-at-origin", "spike", "small")

# b is treated as zero below this magnitude
B_ZERO = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    """Random segment families used to look for counterexamples.

    Families cycle by sample index: constants, random polynomial plus
    trigonometric modes, the same with phi(0) = 0, bumps centred at the term
    delays, and rescaled copies with amplitude down to ``1e-3``.
    """

    count: int = 1000
    seed: int = 0
    step: float | None = None
    coef_bound: float = 2.0
    max_degree: int = 3
    modes: int = 2
    max_freq: float = 6.0
    max_witnesses: int = 5


@dataclass(frozen=True)
class Evaluation:
    V: float
    a: float
    b: np.ndarray
    b_norm: float
    x0_norm: float
    m2: float


@dataclass
class Witness:
    condition: str
    sample_index: int
    family: str
    segment: HistorySegment
    values: dict

    def reverify(self, clkf: ClkfSpec, model: SystemModel) -> bool:
        """True if re-evaluation on the stored segment still violates the condition."""
        violated, _ = check_segment(clkf, model, self.segment)[self.condition]
        return violated


@dataclass
class ConditionResult:
    condition: str
    status: str = "untested"  # untested | pass-on-samples | falsified
    tested: int = 0
    witnesses: list[Witness] = field(default_factory=list)


@dataclass
class HypothesisReport:
    conditions: dict[str, ConditionResult]
    sample_count: int
    families: str
    empirical_p: float | None  # sup of a/|b| over samples with 0 < |b| <= r
    declared_p: float
    r: float

    @property
    def falsified(self) -> bool:
        return any(c.status == "falsified" for c in self.conditions.values())

    def render(self) -> str:
        labels = {
            "i": "(i)   alpha1(|phi(0)|) <= V <= alpha2(M2)",
            "ii": "(ii)  b = 0 => a <= 0",
            "iii": "(iii) a^2 + |b|^4 >= alpha3(M2)^2",
            "iv": "(iv)  a/|b| <= p on 0 < |b| <= r",
        }
        lines = [f"hypothesis check on {self.sample_count} samples ({self.families})"]
        for key in CONDITIONS:
            c = self.conditions[key]
            lines.append(f"{labels[key]}: {c.status} (tested on {c.tested})")
            for w in c.witnesses[:1]:
                vals = ", ".join(f"{k}={v:.6g}" for k, v in w.values.items())
                lines.append(f"      witness #{w.sample_index} [{w.family}]: {vals}")
        if self.empirical_p is None:
            lines.append(f"empirical sup a/|b| on 0<|b|<={self.r:g}: no samples in region")
        else:
            lines.append(
                f"empirical sup a/|b| on 0<|b|<={self.r:g}: {self.empirical_p:.6g} "
                f"(declared p = {self.declared_p:g})"
            )
        return "\n".join(lines)


def evaluate_components(clkf: ClkfSpec, model: SystemModel, seg: HistorySegment) -> Evaluation:
    b = eval_b(clkf, model, seg)
    return Evaluation(
        V=eval_V(clkf, seg),
        a=eval_a(clkf, model, seg),
        b=b,
        b_norm=float(np.linalg.norm(b)),
        x0_norm=float(np.linalg.norm(seg.current)),
        m2=seg.m2_norm(),
    )


def check_segment(clkf: ClkfSpec, model: SystemModel, seg: HistorySegment) -> dict:
    """Per condition: (violated, values). Conditions that do not apply give (False, None)."""
    e = evaluate_components(clkf, model, seg)
    scale = 1.0 + e.m2**2
    out = {}
    lower, upper = float(clkf.alpha1(e.x0_norm)), float(clkf.alpha2(e.m2))
    out["i"] = (
        lower > e.V + 1e-12 * (1 + abs(e.V)) or e.V > upper + 1e-12 * (1 + abs(upper)),
        {"alpha1": lower, "V": e.V, "alpha2": upper},
    )
    if e.b_norm < B_ZERO:
        out["ii"] = (e.a > 1e-12 * scale, {"a": e.a, "b_norm": e.b_norm})
    else:
        out["ii"] = (False, None)
    lhs = e.a**2 + e.b_norm**4
    rhs = float(clkf.alpha3(e.m2)) ** 2
    out["iii"] = (lhs < rhs * (1 - 1e-9), {"lhs": lhs, "rhs": rhs, "m2": e.m2})
    if 0 < e.b_norm <= clkf.r:
        ratio = e.a / e.b_norm
        out["iv"] = (ratio > clkf.p + 1e-12 * (1 + clkf.p), {"ratio": ratio, "a": e.a, "b_norm": e.b_norm})
    else:
        out["iv"] = (False, None)
    return out


def _random_smooth(rng, cfg: SamplerConfig, taus: np.ndarray, n: int, delta: float) -> np.ndarray:
    u = taus / delta  # in [-1, 0]
    coeffs = rng.uniform(-cfg.coef_bound, cfg.coef_bound, size=(cfg.max_degree + 1, n))
    out = np.polynomial.polynomial.polyval(u, coeffs).T
    for _ in range(cfg.modes):
        amp = rng.uniform(-cfg.coef_bound, cfg.coef_bound, size=n)
        freq = rng.uniform(0.0, cfg.max_freq, size=n)
        phase = rng.uniform(0.0, 2 * np.pi, size=n)
        out = out + amp * np.sin(np.outer(taus, freq) + phase)
    return out


def sample_segment(
    index: int, cfg: SamplerConfig, clkf: ClkfSpec, n: int, delta: float, step: float
) -> tuple[str, HistorySegment]:
    rng = np.random.default_rng([cfg.seed, index])
    family = FAMILIES[index % len(FAMILIES)]
    taus = np.linspace(-delta, 0.0, grid_count(delta, step) + 1)
    if family == "constant":
        values = np.tile(rng.uniform(-cfg.coef_bound, cfg.coef_bound, size=n), (taus.size, 1))
    elif family == "smooth":
        values = _random_smooth(rng, cfg, taus, n, delta)
    elif family == "zero-at-origin":
        values = _random_smooth(rng, cfg, taus, n, delta)
        values = values - values[-1]
    elif family == "spike":
        centres = [t.tau for t in clkf.terms] or [delta / 2]
        centre = -centres[rng.integers(len(centres))]
        width = 0.1 * delta * rng.uniform(0.2, 1.0)
        amp = rng.uniform(-cfg.coef_bound, cfg.coef_bound, size=n)
        values = np.outer(np.exp(-(((taus - centre) / width) ** 2)), amp)
        if rng.random() < 0.5:
            values = values - values[-1]
    else:
        values = _random_smooth(rng, cfg, taus, n, delta) * 10 ** rng.uniform(-3, 0)
    return family, HistorySegment(delta, step, values)


def default_step(model: SystemModel, clkf: ClkfSpec, target: int = 200) -> float:
    """Coarsest grid with at least ``target`` intervals aligned with every delay."""
    for k in range(target, 100 * target):
        step = model.delta / k
        if not model.validate(step) and not clkf.validate(model.delta, step):
            return step
    raise ClkfError("could not find a grid aligned with all delays; set the sampler step")


def check_hypothesis(clkf: ClkfSpec, model: SystemModel, sampler: SamplerConfig | None = None) -> HypothesisReport:
    """Look for violations of the four standing conditions on random segments.

    Passing only means no counterexample was found on the sample set.
    """
    cfg = sampler or SamplerConfig()
    if clkf.n != model.n:
        raise ClkfError(f"CLKF dimension {clkf.n} differs from model n={model.n}")
    step = cfg.step or default_step(model, clkf)
    problems = model.validate(step) + clkf.validate(model.delta, step)
    if problems:
        raise ClkfError("; ".join(problems))
    results = {c: ConditionResult(c) for c in CONDITIONS}
    emp_p = None
    for i in range(cfg.count):
        family, seg = sample_segment(i, cfg, clkf, model.n, model.delta, step)
        for cond, (violated, values) in check_segment(clkf, model, seg).items():
            if values is None:
                continue
            res = results[cond]
            res.tested += 1
            if cond == "iv":
                emp_p = values["ratio"] if emp_p is None else max(emp_p, values["ratio"])
            if violated and len(res.witnesses) < cfg.max_witnesses:
                res.witnesses.append(Witness(cond, i, family, seg, values))
    for res in results.values():
        if res.witnesses:
            res.status = "falsified"
        elif res.tested:
            res.status = "pass-on-samples"
    return HypothesisReport(
        conditions=results,
        sample_count=cfg.count,
        families=", ".join(FAMILIES),
        empirical_p=emp_p,
        declared_p=clkf.p,
        r=clkf.r,
    )


# -- DSL block -----------------------------------------------------------------


def _kinf(p: Parser) -> KInfFn:
    p.expect("pow")
    p.expect("(")
    coef = p.number()
    p.expect(",")
    exponent = p.number()
    p.expect(")")
    return KInfFn(coef, exponent)


def parse_clkf_block(p: Parser) -> ClkfSpec:
    head = p.expect("clkf")
    p.expect("{")
    fields: dict = {}
    terms = []
    while not p.at("}"):
        key = p.ident()
        if key.text == "term":
            p.expect("(")
            args = {}
            while not p.at(")"):
                name = p.ident()
                p.expect("=")
                args[name.text] = p.number_list() if name.text == "Q" else p.number()
                if not p.at(")"):
                    p.expect(",")
            p.expect(")")
            missing = {"tau", "mu", "Q"} - set(args)
            if missing:
                raise p.error(f"term is missing {', '.join(sorted(missing))}", key)
            terms.append((key, args))
            continue
        if key.text in fields:
            raise p.error(f"{key.text} declared twice", key)
        p.expect("=")
        if key.text == "P":
            fields["P"] = (key, p.number_list())
        elif key.text in ("alpha1", "alpha2", "alpha3"):
            tok = p.tok
            try:
                fields[key.text] = (key, _kinf(p))
            except ClkfError as exc:
                raise p.error(str(exc), tok) from None
        elif key.text in ("r", "p"):
            fields[key.text] = (key, p.number())
        else:
            raise p.error(f"unknown clkf field {key.text!r}", key)
    p.expect("}")
    missing = [k for k in ("P", "alpha1", "alpha2", "alpha3", "r", "p") if k not in fields]
    if missing:
        raise p.error(f"clkf block is missing {', '.join(missing)}", head)
    P = fields["P"][1]
    n = int(round(np.sqrt(len(P))))
    if n * n != len(P):
        raise p.error("P must be a square matrix", fields["P"][0])
    try:
        return ClkfSpec(
            P=np.reshape(P, (n, n)),
            terms=tuple(
                IntegralTerm(args["tau"], np.asarray(args["Q"]), args["mu"])
                for _, args in terms
            ),
            alpha1=fields["alpha1"][1],
            alpha2=fields["alpha2"][1],
            alpha3=fields["alpha3"][1],
            r=fields["r"][1],
            p=fields["p"][1],
        )
    except (ClkfError, ValueError) as exc:
        raise p.error(str(exc), head) from None


def parse_clkf(text: str) -> ClkfSpec:
    """Parse the ``clkf`` block of ``text``; other blocks are skipped."""
    p = Parser(text)
    spec = None
    while p.tok.kind != "eof":
        if p.at("clkf"):
            spec = parse_clkf_block(p)
        else:
            p.ident()
            p.skip_block()
    if spec is None:
        raise DslError(Diagnostic(1, 1, "no clkf block found"))
    return spec

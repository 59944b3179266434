"""Sontag-type feedback maps built from the Driver-form components a and b."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clkf import eval_a, eval_b

MODES = ("sontag-k", "sontag-kr", "kr-plus-iss", "open-loop")


@dataclass(frozen=True)
class ControlConfig:
    mode: str = "kr-plus-iss"
    q: float = 1.0
    r: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown controller mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.mode == "kr-plus-iss" and not self.q > 0:
            raise ValueError("q must be positive for kr-plus-iss")
        if self.mode in ("sontag-kr", "kr-plus-iss") and not self.r > 0:
            raise ValueError(f"r must be positive for {self.mode}")


def _numerator(a: float, bb: float) -> float:
    """a + sqrt(a^2 + bb^2) without overflow or cancellation."""
    h = math.hypot(a, bb)
    if a > 0:
        return a + h
    den = h - a
    # a <= 0: rationalize; den == 0 only when a == bb == 0
    return bb * (bb / den) if den > 0 else 0.0


def sontag_k(a: float, b) -> np.ndarray:
    """Sontag's universal formula; zero when b is exactly zero."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    bn = math.hypot(*b)
    if bn == 0.0:
        return np.zeros_like(b)
    # divide by |b| twice so |b|^2 cannot underflow
    return -(_numerator(a, bn * bn) / bn) * (b / bn)


def sontag_kr(a: float, b, r: float) -> np.ndarray:
    """Sontag's formula with denominator frozen at r^2 on |b| <= r."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    bb = float(b @ b)
    if bb > r * r:
        return sontag_k(a, b)
    if bb == 0.0:
        return np.zeros_like(b)
    return -(_numerator(a, bb) / (r * r)) * b


def feedback(a: float, b, cfg: ControlConfig) -> np.ndarray:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if cfg.mode == "open-loop":
        return np.zeros_like(b)
    if cfg.mode == "sontag-k":
        return sontag_k(a, b)
    if cfg.mode == "sontag-kr":
        return sontag_kr(a, b, cfg.r)
    return sontag_kr(a, b, cfg.r) - cfg.q * b


def control_input(clkf, model, seg, cfg: ControlConfig) -> np.ndarray:
    """u for the current segment; open-loop ignores clkf."""
    if cfg.mode == "open-loop":
        return np.zeros(model.m)
    return feedback(eval_a(clkf, model, seg), eval_b(clkf, model, seg), cfg)


def dissipation_rate(a: float, b, u, d) -> float:
    """Driver-form derivative of V along the disturbed closed loop: a + b(u + d)."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return float(a + b @ (np.atleast_1d(u) + np.atleast_1d(d)))

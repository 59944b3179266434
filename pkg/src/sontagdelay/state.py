"""History segments: the state x_t of a retarded system on a uniform grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# relative tolerance for grid alignment of delays and step sizes
GRID_RTOL = 1e-9


def grid_count(length: float, step: float) -> int | None:
    """Number of grid steps of size ``step`` in ``length``, or None if not aligned."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    k = round(length / step)
    if abs(k * step - length) > GRID_RTOL * max(1.0, abs(length)):
        return None
    return int(k)


class SegmentError(ValueError):
    """Raised for out-of-domain lookups or incompatible segments."""


@dataclass(frozen=True, eq=False)
class HistorySegment:
    """A continuous function [-delta, 0] -> R^n stored on a uniform grid.

    ``samples[k]`` is the value at ``-delta + k * step``; values between grid
    points are linearly interpolated.
    """

    delta: float
    step: float
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[1] < 1:
            raise SegmentError(f"samples must have shape (N+1, n), got {samples.shape}")
        if self.delta <= 0:
            raise SegmentError(f"delta must be positive, got {self.delta}")
        count = grid_count(self.delta, self.step)
        if count is None or count < 1:
            raise SegmentError(f"step {self.step} does not divide delta {self.delta}")
        if samples.shape[0] != count + 1:
            raise SegmentError(
                f"expected {count + 1} samples for delta={self.delta}, "
                f"step={self.step}; got {samples.shape[0]}"
            )
        if samples.flags.writeable:
            samples = samples.copy()
            samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_function(cls, fn, delta: float, step: float) -> HistorySegment:
        """Sample ``fn(tau)`` (returning a scalar or n-vector) on the grid."""
        count = grid_count(delta, step)
        if count is None:
            raise SegmentError(f"step {step} does not divide delta {delta}")
        taus = np.linspace(-delta, 0.0, count + 1)
        return cls(delta, step, np.array([np.atleast_1d(fn(t)) for t in taus], dtype=float))

    @classmethod
    def constant(cls, value, delta: float, step: float) -> HistorySegment:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        count = grid_count(delta, step)
        if count is None:
            raise SegmentError(f"step {step} does not divide delta {delta}")
        return cls(delta, step, np.tile(value, (count + 1, 1)))

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(-self.delta, 0.0, self.size)

    @property
    def current(self) -> np.ndarray:
        """phi(0)."""
        return self.samples[-1]

    def _positions(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        tol = GRID_RTOL * max(1.0, self.delta)
        if np.any(tau < -self.delta - tol) or np.any(tau > tol):
            raise SegmentError(f"tau outside [-{self.delta}, 0]: {tau}")
        pos = (tau + self.delta) / self.step
        snapped = np.rint(pos)
        return np.where(np.abs(pos - snapped) <= GRID_RTOL * max(1.0, self.size), snapped, pos)

    def eval(self, tau) -> np.ndarray:
        """Value at ``tau`` (scalar -> (n,), array of shape (k,) -> (k, n))."""
        if isinstance(tau, (float, int)):
            return self._eval_scalar(float(tau))
        pos = self._positions(tau)
        last = self.size - 1
        i0 = np.clip(np.floor(pos).astype(int), 0, last)
        frac = pos - i0
        i1 = np.minimum(i0 + 1, last)
        lo = self.samples[i0]
        hi = self.samples[i1]
        frac = np.asarray(frac)[..., None]
        # exact at grid points: frac == 0 selects lo untouched
        return np.where(frac == 0.0, lo, lo + frac * (hi - lo))

    def _eval_scalar(self, tau: float) -> np.ndarray:
        # hot path of the integrator; same semantics as the vectorized branch
        tol = GRID_RTOL * max(1.0, self.delta)
        if tau < -self.delta - tol or tau > tol:
            raise SegmentError(f"tau outside [-{self.delta}, 0]: {tau}")
        last = self.size - 1
        pos = (tau + self.delta) / self.step
        snapped = round(pos)
        if abs(pos - snapped) <= GRID_RTOL * max(1.0, self.size):
            return self.samples[min(max(snapped, 0), last)]
        i0 = min(max(math.floor(pos), 0), last - 1)
        frac = pos - i0
        lo = self.samples[i0]
        return lo + frac * (self.samples[i0 + 1] - lo)

    def sup_norm(self) -> float:
        scale = float(np.max(np.abs(self.samples)))
        if scale == 0.0 or not math.isfinite(scale):
            return scale
        return scale * float(np.max(np.linalg.norm(self.samples / scale, axis=1)))

    def m2_norm(self) -> float:
        # rescale by the sup norm so squaring neither overflows nor underflows
        scale = float(np.max(np.abs(self.samples)))
        if scale == 0.0 or not math.isfinite(scale):
            return scale
        sq = np.sum((self.samples / scale) ** 2, axis=1)
        return scale * float(np.sqrt(sq[-1] + np.trapezoid(sq, dx=self.step)))

    def norms(self) -> NormReport:
        return NormReport(self.sup_norm(), self.m2_norm())

    def shift_freeze(self, h: float) -> HistorySegment:
        """phi^h: shift left by h, then hold phi(0) on [-h, 0]."""
        if not 0.0 <= h < self.delta:
            raise SegmentError(f"shift {h} not in [0, {self.delta})")
        k = grid_count(h, self.step)
        if k is None:
            raise SegmentError(f"shift {h} is not a multiple of the grid step {self.step}")
        if k == 0:
            return self
        out = np.empty_like(self.samples)
        out[:-k] = self.samples[k:]
        out[-k:] = self.samples[-1]
        return HistorySegment(self.delta, self.step, out)

    def advance(self, new_samples) -> HistorySegment:
        """Slide the window forward by ``len(new_samples)`` grid steps."""
        new = np.asarray(new_samples, dtype=float)
        if new.ndim == 1:
            new = new[:, None] if self.dim == 1 else new[None, :]
        if new.ndim != 2 or new.shape[1] != self.dim:
            raise SegmentError(f"new samples have shape {new.shape}, segment dim is {self.dim}")
        k = new.shape[0]
        if k == 0 or k >= self.size:
            raise SegmentError(f"can advance by 1..{self.size - 1} samples, got {k}")
        return HistorySegment(self.delta, self.step, np.vstack([self.samples[k:], new]))

    def scaled(self, c: float) -> HistorySegment:
        return HistorySegment(self.delta, self.step, c * self.samples)

    def __eq__(self, other):
        if not isinstance(other, HistorySegment):
            return NotImplemented
        return (
            self.delta == other.delta
            and self.step == other.step
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class NormReport:
    sup_norm: float
    m2_norm: float

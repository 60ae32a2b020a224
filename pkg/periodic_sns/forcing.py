import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable

import numpy as np

from periodic_sns.sns_config import BASIS_NORM_SQ
from periodic_sns.spectral_core import ModeIndex, SpectralField, TruncationSpec, as_mode


@dataclass(frozen=True)
class ForcingTerm:
    mode: ModeIndex
    amplitude: float
    phase: float = 0.0
    # 1: A cos(2πt/T + φ); 0: the constant A cos(φ)
    harmonic: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", as_mode(self.mode))
        if self.harmonic not in (0, 1):
            raise ValueError(f"Forcing harmonic must be 0 or 1, got {self.harmonic}")
        if not (math.isfinite(self.amplitude) and math.isfinite(self.phase)):
            raise ValueError(f"Forcing term on {self.mode} has a non-finite amplitude or phase")


@dataclass(frozen=True)
class ForcingProfile:
    """
    f(t) = Σ A cos(2π h (t/T + shift) + φ) γ_k over the terms, T-periodic.

    `shift` is a fraction of the period and realises the hull translations
    t ↦ f(t + shift·T); on a time grid it must be a whole number of steps.
    """

    period: float = 1.0
    terms: tuple[ForcingTerm, ...] = ()
    shift: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if not self.period > 0 or not math.isfinite(self.period):
            raise ValueError(f"Forcing period must be positive, got {self.period!r}")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "shift", Fraction(self.shift) % 1)

    @classmethod
    def of(cls, period: float, terms: Iterable[tuple]) -> "ForcingProfile":
        """Terms given as (mode, amplitude[, phase[, harmonic]]) tuples."""
        built = []
        for term in terms:
            mode, amplitude, *rest = term
            built.append(ForcingTerm(as_mode(mode), float(amplitude), *rest))
        return cls(float(period), tuple(built))

    @property
    def is_zero(self) -> bool:
        return all(t.amplitude == 0 for t in self.terms)

    def _angle(self, t: float) -> float:
        return 2.0 * math.pi * (t / self.period + float(self.shift))

    def at(self, t: float, trunc: TruncationSpec) -> SpectralField:
        coeffs = np.zeros(trunc.dim)
        theta = self._angle(t)
        for term in self.terms:
            coeffs[trunc.position(term.mode)] += term.amplitude * math.cos(term.harmonic * theta + term.phase)
        return SpectralField(trunc, coeffs)

    def translated_by(self, fraction: Fraction) -> "ForcingProfile":
        return replace(self, shift=self.shift + Fraction(fraction))

    def translated(self, h_steps: int, steps_per_period: int) -> "ForcingProfile":
        return self.translated_by(Fraction(h_steps, steps_per_period))

    def grid_table(self, trunc: TruncationSpec, steps_per_period: int) -> np.ndarray:
        """
        f at t = m·T/P for 0 ≤ m < P, shape (P, dim). The phase is computed from
        the integer m so that profiles differing by a whole-step shift produce
        bit-identical rows.
        """
        lag = self.shift * steps_per_period
        if lag.denominator != 1:
            raise ValueError(f"Forcing shift {self.shift} of the period is not a whole number of grid steps")
        P = steps_per_period
        table = np.zeros((P, trunc.dim))
        m = (np.arange(P) + int(lag)) % P
        theta = 2.0 * math.pi * (m / P)
        for term in self.terms:
            table[:, trunc.position(term.mode)] += term.amplitude * np.cos(term.harmonic * theta + term.phase)
        return table

    def sup_norm(self) -> float:
        """
        sup_t ‖f(t)‖ in closed form. Per mode the coefficient is
        C + X cos θ + Y sin θ, so ‖f‖²/(2π²) is a degree-2 trigonometric
        polynomial in θ whose stationary points are the unit-circle roots of a
        quartic.
        """
        per_mode: dict[ModeIndex, list[float]] = {}
        for term in self.terms:
            acc = per_mode.setdefault(term.mode, [0.0, 0.0, 0.0])
            if term.harmonic == 0:
                acc[0] += term.amplitude * math.cos(term.phase)
            else:
                acc[1] += term.amplitude * math.cos(term.phase)
                acc[2] -= term.amplitude * math.sin(term.phase)
        if not per_mode:
            return 0.0

        C, X, Y = (np.array(v) for v in zip(*per_mode.values()))
        a0 = float(np.sum(C**2 + 0.5 * (X**2 + Y**2)))
        a1 = float(np.sum(2 * C * X))
        b1 = float(np.sum(2 * C * Y))
        a2 = float(np.sum(0.5 * (X**2 - Y**2)))
        b2 = float(np.sum(X * Y))

        def g(theta: np.ndarray) -> np.ndarray:
            return a0 + a1 * np.cos(theta) + b1 * np.sin(theta) + a2 * np.cos(2 * theta) + b2 * np.sin(2 * theta)

        # z² g'(θ) with z = e^{iθ}
        quartic = [b2 + 1j * a2, 0.5 * (b1 + 1j * a1), 0.0, 0.5 * (b1 - 1j * a1), b2 - 1j * a2]
        candidates = [0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi]
        if any(abs(c) > 0 for c in quartic):
            candidates.extend(np.angle(np.roots(quartic)).tolist())
        best = float(np.max(g(np.array(candidates))))
        return math.sqrt(BASIS_NORM_SQ * max(best, 0.0))

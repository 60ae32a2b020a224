"""
Bracket generation of the noise directions at a fixed truncation.

A₁ = {g_l}, A_{k+1} = A_k ∪ {B̃(h, g_l) : h ∈ A_k}. Because B̃ is bilinear only
the directions added at the previous level need to be bracketed again, so the
span is grown level by level from a "frontier" of new orthonormal directions.
"""

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
from sympy import Matrix, ZZ
from sympy.matrices.normalforms import hermite_normal_form, smith_normal_form

from periodic_sns.sns_config import BASIS_NORM_SQ, RANK_TOLERANCE
from periodic_sns.spectral_core import (
    ModeIndex,
    ModeLike,
    SpectralField,
    TruncationSpec,
    as_mode,
    bracket_coeffs,
)

FULL = "Full"
CASE1 = "Case1"
CASE2 = "Case2"
INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class ForcedModeSet:
    """Diagonal noise g_l = a_l γ_{k_l}; an empty set means no noise."""

    modes: tuple[ModeIndex, ...] = ()
    amplitudes: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        modes = tuple(as_mode(m) for m in self.modes)
        amplitudes = tuple(float(a) for a in self.amplitudes)
        if len(modes) != len(amplitudes):
            raise ValueError(f"Got {len(modes)} noise modes but {len(amplitudes)} amplitudes")
        if len(set(modes)) != len(modes):
            raise ValueError("Noise modes must be distinct")
        for mode, a in zip(modes, amplitudes):
            if not math.isfinite(a) or a <= 0:
                raise ValueError(f"Noise amplitude for mode {mode} must be positive and finite, got {a!r}")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "amplitudes", amplitudes)

    @classmethod
    def of(cls, modes: Iterable[ModeLike], amplitudes: Optional[Iterable[float]] = None) -> "ForcedModeSet":
        modes = tuple(as_mode(m) for m in modes)
        if amplitudes is None:
            amplitudes = (1.0,) * len(modes)
        return cls(modes, tuple(amplitudes))

    @classmethod
    def parse(cls, modes_text: str, amps_text: Optional[str] = None) -> "ForcedModeSet":
        modes = [ModeIndex.parse(chunk) for chunk in modes_text.split(";") if chunk.strip()]
        amps = None
        if amps_text:
            amps = [float(a) for a in amps_text.split(",") if a.strip()]
        return cls.of(modes, amps)

    @property
    def channels(self) -> int:
        return len(self.modes)

    def energy_input(self, k: int = 0) -> float:
        """B_k = Σ_l ‖g_l‖²_k, including the 2π² basis normalization."""
        return BASIS_NORM_SQ * sum(a * a * m.norm_sq**k for m, a in zip(self.modes, self.amplitudes))

    @property
    def B0(self) -> float:
        return self.energy_input(0)

    def matrix(self, trunc: TruncationSpec) -> np.ndarray:
        """Coefficient vectors of the g_l as rows (d × dim)."""
        G = np.zeros((self.channels, trunc.dim))
        for i, (mode, a) in enumerate(zip(self.modes, self.amplitudes)):
            G[i, trunc.position(mode)] = a
        return G

    def scaled(self, factor: float) -> "ForcedModeSet":
        return ForcedModeSet(self.modes, tuple(a * factor for a in self.amplitudes))


@dataclass(frozen=True)
class BracketReport:
    span_dims: tuple[int, ...]
    truncated_dim: int
    saturated_at: Optional[int] = None
    classification: str = INDETERMINATE
    degenerate_basis: Optional[tuple[ModeIndex, ...]] = None
    subgroup_generators: Optional[tuple[tuple[int, int], tuple[int, int]]] = None
    translation_periods: Optional[tuple[tuple[float, float], tuple[float, float]]] = None
    condition_A1: Optional[bool] = None
    condition_A2: Optional[bool] = None

    def to_document(self) -> dict:
        return {
            "span_dims": list(self.span_dims),
            "truncated_dim": self.truncated_dim,
            "saturated_at": self.saturated_at,
            "classification": self.classification,
            "condition_A1": self.condition_A1,
            "condition_A2": self.condition_A2,
            "degenerate_basis": None if self.degenerate_basis is None else [str(m) for m in self.degenerate_basis],
            "subgroup_generators": (
                None if self.subgroup_generators is None else [list(g) for g in self.subgroup_generators]
            ),
            "translation_periods": (
                None if self.translation_periods is None else [list(v) for v in self.translation_periods]
            ),
        }


@dataclass(frozen=True)
class ClosedFormBracket:
    field: SpectralField
    exact: dict[ModeIndex, Fraction] = field(default_factory=dict)
    dropped: tuple[ModeIndex, ...] = ()


def _require_nonempty(z0: ForcedModeSet) -> None:
    if not z0.modes:
        raise ValueError("The forced mode set is empty")


def check_condition_A1(z0: ForcedModeSet) -> bool:
    """At least two forced modes with different Euclidean norms."""
    _require_nonempty(z0)
    return len({m.norm_sq for m in z0.modes}) > 1


def _mode_matrix(modes: Sequence[ModeIndex]) -> Matrix:
    return Matrix([[m.k1 for m in modes], [m.k2 for m in modes]])


def _invariant_factors(modes: Sequence[ModeIndex]) -> list[int]:
    snf = smith_normal_form(_mode_matrix(modes), domain=ZZ)
    return [abs(int(snf[i, i])) for i in range(min(snf.shape)) if snf[i, i] != 0]


def check_condition_A2(z0: ForcedModeSet) -> bool:
    """Integer combinations of the forced modes generate Z² (invariant factors 1, 1)."""
    _require_nonempty(z0)
    return _invariant_factors(z0.modes) == [1, 1]


def _gauss_reduce(b1: tuple[int, int], b2: tuple[int, int]) -> tuple[tuple[int, int], tuple[int, int]]:
    def dot(u, v):
        return u[0] * v[0] + u[1] * v[1]

    while True:
        if dot(b1, b1) > dot(b2, b2):
            b1, b2 = b2, b1
        mu = round(Fraction(dot(b1, b2), dot(b1, b1)))
        if mu == 0:
            return b1, b2
        b2 = (b2[0] - mu * b1[0], b2[1] - mu * b1[1])


def subgroup_basis(modes: Sequence[ModeIndex]) -> Optional[tuple[tuple[int, int], tuple[int, int]]]:
    """Reduced basis of the subgroup of Z² generated by `modes`, None below rank 2."""
    if len(_invariant_factors(modes)) < 2:
        return None
    hnf = hermite_normal_form(_mode_matrix(modes))
    columns = [(int(hnf[0, j]), int(hnf[1, j])) for j in range(hnf.shape[1]) if hnf[0, j] != 0 or hnf[1, j] != 0]
    if len(columns) != 2:
        raise ValueError(f"Unexpected Hermite normal form for a rank-2 lattice: {hnf}")
    return _gauss_reduce(columns[0], columns[1])


def in_subgroup(mode: ModeIndex, basis: tuple[tuple[int, int], tuple[int, int]]) -> bool:
    (a, c), (b, d) = basis  # columns (a, c) and (b, d)
    det = a * d - b * c
    x1 = mode.k1 * d - mode.k2 * b
    x2 = a * mode.k2 - c * mode.k1
    return x1 % det == 0 and x2 % det == 0


def _exponential_expansion(mode: ModeIndex) -> list[tuple[tuple[int, int], tuple[Fraction, Fraction]]]:
    half = Fraction(1, 2)
    if mode.is_plus:
        # sin(k·x) = (−i/2) e^{ik·x} + (i/2) e^{−ik·x}
        return [(mode.as_tuple(), (Fraction(0), -half)), ((-mode).as_tuple(), (Fraction(0), half))]
    # cos(k·x) = (1/2) e^{ik·x} + (1/2) e^{−ik·x}
    return [(mode.as_tuple(), (half, Fraction(0))), ((-mode).as_tuple(), (half, Fraction(0)))]


def closed_form_mode_bracket(j: ModeLike, k: ModeLike, trunc: TruncationSpec) -> ClosedFormBracket:
    """
    Exact B̃(γ_j, γ_k). On plane waves B̃(e_a, e_b) = (a⊥·b)(|a|⁻² − |b|⁻²) e_{a+b}
    with a⊥ = (a2, −a1); the real basis functions are expanded into pairs of
    plane waves and folded back at the end.
    """
    j = as_mode(j)
    k = as_mode(k)
    spectrum: dict[tuple[int, int], list[Fraction]] = {}
    for a, (ar, ai) in _exponential_expansion(j):
        for b, (br, bi) in _exponential_expansion(k):
            cross = a[1] * b[0] - a[0] * b[1]
            if cross == 0:
                continue
            weight = cross * (Fraction(1, a[0] ** 2 + a[1] ** 2) - Fraction(1, b[0] ** 2 + b[1] ** 2))
            if weight == 0:
                continue
            q = (a[0] + b[0], a[1] + b[1])
            acc = spectrum.setdefault(q, [Fraction(0), Fraction(0)])
            acc[0] += weight * (ar * br - ai * bi)
            acc[1] += weight * (ar * bi + ai * br)

    exact: dict[ModeIndex, Fraction] = {}
    for q, (re, im) in spectrum.items():
        p = ModeIndex(*q)
        if not p.is_plus:
            continue
        if im != 0:
            exact[p] = -2 * im
        if re != 0:
            exact[-p] = 2 * re

    kept = [(m, v) for m, v in sorted(exact.items()) if trunc.contains(m)]
    dropped = tuple(m for m in sorted(exact) if not trunc.contains(m))
    coeffs = np.zeros(trunc.dim)
    for m, v in kept:
        coeffs[trunc.position(m)] = float(v)
    return ClosedFormBracket(SpectralField(trunc, coeffs), dict(kept), dropped)


def _extend_basis(
    basis: np.ndarray, candidates: np.ndarray, tol: float, floor: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gram–Schmidt (twice) of the candidates against the basis columns, in order.
    Candidates of norm at most `floor` are round-off and skipped.
    """
    columns = [basis[:, i] for i in range(basis.shape[1])]
    added = []
    for v in candidates:
        norm = np.linalg.norm(v)
        if norm <= floor:
            continue
        r = v.copy()
        for _ in range(2):
            if columns:
                Q = np.column_stack(columns)
                r -= Q @ (Q.T @ r)
        rnorm = np.linalg.norm(r)
        if rnorm > tol * norm:
            q = r / rnorm
            columns.append(q)
            added.append(q)
    dim = basis.shape[0]
    new_basis = np.column_stack(columns) if columns else np.zeros((dim, 0))
    new_dirs = np.array(added) if added else np.zeros((0, dim))
    return new_basis, new_dirs


def generate_bracket_spans(z0: ForcedModeSet, trunc: TruncationSpec, max_depth: int) -> BracketReport:
    if max_depth < 1:
        raise ValueError(f"max_depth must be positive, got {max_depth}")
    for mode in z0.modes:
        if not trunc.contains(mode):
            raise ValueError(f"Forced mode {mode} lies outside the truncation K={trunc.K}")

    G = z0.matrix(trunc)
    # Brackets of unit directions with G scale like the amplitudes
    floor = RANK_TOLERANCE * max(z0.amplitudes, default=0.0)
    basis, frontier = _extend_basis(np.zeros((trunc.dim, 0)), G, RANK_TOLERANCE)
    span_dims = [basis.shape[1]]
    saturated_at = None

    while len(span_dims) < max_depth + 1:
        if frontier.shape[0] == 0:
            span_dims.append(span_dims[-1])
        else:
            candidates = bracket_coeffs(trunc, frontier[:, None, :], G[None, :, :]).reshape(-1, trunc.dim)
            basis, frontier = _extend_basis(basis, candidates, RANK_TOLERANCE, floor)
            span_dims.append(basis.shape[1])
        if span_dims[-1] == span_dims[-2]:
            saturated_at = len(span_dims) - 1
            break

    classification = FULL if saturated_at is not None and span_dims[-1] == trunc.dim else INDETERMINATE
    return BracketReport(
        span_dims=tuple(span_dims),
        truncated_dim=trunc.dim,
        saturated_at=saturated_at,
        classification=classification,
    )


def _all_collinear(modes: Sequence[ModeIndex]) -> bool:
    first = modes[0]
    return all(first.k1 * m.k2 - first.k2 * m.k1 == 0 for m in modes[1:])


def classify_degeneracy(report: BracketReport, z0: ForcedModeSet, trunc: TruncationSpec) -> BracketReport:
    _require_nonempty(z0)
    flags = {"condition_A1": check_condition_A1(z0), "condition_A2": check_condition_A2(z0)}

    if report.saturated_at is not None and report.span_dims[-1] == trunc.dim:
        return replace(report, classification=FULL, degenerate_basis=None, **flags)

    if _all_collinear(z0.modes) or not flags["condition_A1"]:
        return replace(report, classification=CASE1, degenerate_basis=tuple(sorted(z0.modes)), **flags)

    basis = subgroup_basis(z0.modes)
    if basis is not None and not flags["condition_A2"]:
        periods = tuple(
            (2 * math.pi * g[0] / (g[0] ** 2 + g[1] ** 2), 2 * math.pi * g[1] / (g[0] ** 2 + g[1] ** 2)) for g in basis
        )
        members = tuple(m for m in trunc.modes if in_subgroup(m, basis))
        return replace(
            report,
            classification=CASE2,
            degenerate_basis=members,
            subgroup_generators=basis,
            translation_periods=periods,
            **flags,
        )

    return replace(report, classification=INDETERMINATE, **flags)


def analyze_brackets(z0: ForcedModeSet, trunc: TruncationSpec, max_depth: int = 12) -> BracketReport:
    return classify_degeneracy(generate_bracket_spans(z0, trunc, max_depth), z0, trunc)

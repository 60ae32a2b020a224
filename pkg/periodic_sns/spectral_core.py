"""
Truncated mean-zero fields on the torus [−π, π]² in the real Fourier basis

    γ_k(x) = sin(k·x)  for k in Z²₊ (k2 > 0, or k2 = 0 and k1 > 0),
    γ_k(x) = cos(k·x)  for k in Z²₋ = −Z²₊,

with ∫ γ_k² dx = 2π² for every k. A field is the vector of its coefficients over
the canonical mode set {k ≠ 0 : max(|k1|, |k2|) ≤ K}, listed in lexicographic
order of (k1, k2).

Products are evaluated pseudospectrally. Every mode pair p, −p (p in Z²₊) is
folded into one complex half-spectrum entry ĥ(p) = (b_{−p} − i a_p) / 2, so that
w(x) = Σ_p 2 Re(ĥ(p) e^{ip·x}); this is exactly what `numpy.fft.rfft2` stores.

Most helpers come in two flavours: the public ones take and return
`SpectralField` values, the `*_coeffs` ones work on raw coefficient arrays with
arbitrary leading (replica) axes so ensembles can be advanced in one FFT call.
"""

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from periodic_sns import counter_rng
from periodic_sns.sns_config import BASIS_NORM_SQ, C0_HILL_CLIMB_STEPS


@dataclass(frozen=True, order=True)
class ModeIndex:
    k1: int
    k2: int

    def __post_init__(self) -> None:
        if not isinstance(self.k1, (int, np.integer)) or not isinstance(self.k2, (int, np.integer)):
            raise ValueError(f"Mode components must be integers, got ({self.k1!r}, {self.k2!r})")
        object.__setattr__(self, "k1", int(self.k1))
        object.__setattr__(self, "k2", int(self.k2))
        if self.k1 == 0 and self.k2 == 0:
            raise ValueError("The zero mode is not part of the mean-zero state space")

    @property
    def is_plus(self) -> bool:
        """True on Z²₊, where γ_k is a sine."""
        return self.k2 > 0 or (self.k2 == 0 and self.k1 > 0)

    @property
    def norm_sq(self) -> int:
        return self.k1 * self.k1 + self.k2 * self.k2

    @property
    def sup_norm(self) -> int:
        return max(abs(self.k1), abs(self.k2))

    def plus_representative(self) -> "ModeIndex":
        return self if self.is_plus else -self

    def __neg__(self) -> "ModeIndex":
        return ModeIndex(-self.k1, -self.k2)

    def as_tuple(self) -> tuple[int, int]:
        return (self.k1, self.k2)

    def __str__(self) -> str:
        return f"({self.k1},{self.k2})"

    @classmethod
    def parse(cls, text: str) -> "ModeIndex":
        parts = [p.strip() for p in text.strip().strip("()").split(",")]
        if len(parts) != 2:
            raise ValueError(f"Cannot parse mode index from {text!r}")
        return cls(int(parts[0]), int(parts[1]))


ModeLike = Union[ModeIndex, tuple[int, int]]


def as_mode(mode: ModeLike) -> ModeIndex:
    return mode if isinstance(mode, ModeIndex) else ModeIndex(*mode)


@dataclass(frozen=True)
class TruncationSpec:
    K: int
    dealias: bool = True

    def __post_init__(self) -> None:
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"Truncation radius must be a positive integer, got {self.K!r}")

    @cached_property
    def modes(self) -> tuple[ModeIndex, ...]:
        return tuple(
            ModeIndex(k1, k2)
            for k1 in range(-self.K, self.K + 1)
            for k2 in range(-self.K, self.K + 1)
            if (k1, k2) != (0, 0)
        )

    @cached_property
    def _positions(self) -> dict[ModeIndex, int]:
        return {mode: i for i, mode in enumerate(self.modes)}

    @property
    def dim(self) -> int:
        return (2 * self.K + 1) ** 2 - 1

    def contains(self, mode: ModeLike) -> bool:
        return as_mode(mode).sup_norm <= self.K

    def position(self, mode: ModeLike) -> int:
        mode = as_mode(mode)
        try:
            return self._positions[mode]
        except KeyError as e:
            raise ValueError(f"Mode {mode} lies outside the truncation K={self.K}") from e

    @property
    def grid_size(self) -> int:
        if self.dealias:
            # Zero padding: products of |k|∞ ≤ K fields are alias-free on |k|∞ ≤ K
            n = 3 * self.K + 1
        else:
            n = 2 * self.K + 2
        return n + (n % 2)


class _GridOperators:
    """FFT plumbing between canonical coefficients and an N×N grid."""

    def __init__(self, K: int, N: int) -> None:
        trunc = TruncationSpec(K)
        self.K = K
        self.N = N
        self.dim = trunc.dim

        plus = [m for m in trunc.modes if m.is_plus]
        self.n_half = len(plus)
        self.sin_pos = np.array([trunc.position(p) for p in plus])
        self.cos_pos = np.array([trunc.position(-p) for p in plus])
        self.p1 = np.array([p.k1 for p in plus], dtype=np.float64)
        self.p2 = np.array([p.k2 for p in plus], dtype=np.float64)
        self.psq = self.p1**2 + self.p2**2

        self.rows = np.array([p.k1 % N for p in plus])
        self.cols = np.array([p.k2 for p in plus])
        axis = np.array([p.k2 == 0 for p in plus])
        self.axis_idx = np.nonzero(axis)[0]
        self.axis_rows = np.array([(-plus[i].k1) % N for i in self.axis_idx], dtype=int)

    def to_half(self, c: np.ndarray) -> np.ndarray:
        return 0.5 * (c[..., self.cos_pos] - 1j * c[..., self.sin_pos])

    def from_half(self, h: np.ndarray) -> np.ndarray:
        c = np.empty(h.shape[:-1] + (self.dim,), dtype=np.float64)
        c[..., self.sin_pos] = -2.0 * h.imag
        c[..., self.cos_pos] = 2.0 * h.real
        return c

    def to_grid(self, h: np.ndarray) -> np.ndarray:
        N = self.N
        spec = np.zeros(h.shape[:-1] + (N, N // 2 + 1), dtype=np.complex128)
        spec[..., self.rows, self.cols] = h * (N * N)
        # The k2 = 0 column must be Hermitian in k1 for a real inverse
        spec[..., self.axis_rows, 0] = np.conj(h[..., self.axis_idx]) * (N * N)
        return np.fft.irfft2(spec, s=(N, N), axes=(-2, -1))

    def from_grid(self, g: np.ndarray) -> np.ndarray:
        N = self.N
        spec = np.fft.rfft2(g, axes=(-2, -1))
        return spec[..., self.rows, self.cols] / (N * N)

    def velocity_half(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Biot–Savart: u = ∇⊥(−Δ)⁻¹w, symbol i k⊥/|k|² with k⊥ = (k2, −k1)."""
        psi = h / self.psq
        return 1j * self.p2 * psi, -1j * self.p1 * psi

    def advection_half(self, u_half: tuple[np.ndarray, np.ndarray], w_half: np.ndarray) -> np.ndarray:
        """Galerkin projection of u·∇w, everything in half-spectrum form."""
        u1 = self.to_grid(u_half[0])
        u2 = self.to_grid(u_half[1])
        wx = self.to_grid(1j * self.p1 * w_half)
        wy = self.to_grid(1j * self.p2 * w_half)
        return self.from_grid(u1 * wx + u2 * wy)


@lru_cache(maxsize=None)
def _ops(K: int, N: int) -> _GridOperators:
    return _GridOperators(K, N)


def grid_ops(trunc: TruncationSpec) -> _GridOperators:
    return _ops(trunc.K, trunc.grid_size)


@lru_cache(maxsize=None)
def wavenumber_sq(trunc: TruncationSpec) -> np.ndarray:
    """|k|² per canonical mode (read-only)."""
    ksq = np.array([m.norm_sq for m in trunc.modes], dtype=np.float64)
    ksq.setflags(write=False)
    return ksq


@dataclass(frozen=True, eq=False)
class SpectralField:
    trunc: TruncationSpec
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        c = np.array(self.coeffs, dtype=np.float64)
        if c.shape != (self.trunc.dim,):
            raise ValueError(f"Expected {self.trunc.dim} coefficients for K={self.trunc.K}, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("Field coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, trunc: TruncationSpec) -> "SpectralField":
        return cls(trunc, np.zeros(trunc.dim))

    @classmethod
    def basis(cls, trunc: TruncationSpec, mode: ModeLike, amplitude: float = 1.0) -> "SpectralField":
        return make_field(trunc, [(mode, amplitude)])

    def coefficient(self, mode: ModeLike) -> float:
        return float(self.coeffs[self.trunc.position(mode)])

    def support(self, atol: float = 0.0) -> list[ModeIndex]:
        return [m for m, c in zip(self.trunc.modes, self.coeffs) if abs(c) > atol]

    def _check_same(self, other: "SpectralField") -> None:
        if other.trunc != self.trunc:
            raise ValueError(f"Truncation mismatch: K={self.trunc.K} vs K={other.trunc.K}")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check_same(other)
        return SpectralField(self.trunc, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check_same(other)
        return SpectralField(self.trunc, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.trunc, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.trunc, -self.coeffs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpectralField):
            return NotImplemented
        return self.trunc == other.trunc and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class VelocityField:
    ux: SpectralField
    uy: SpectralField

    def divergence_residual(self) -> float:
        """max over modes of |k1 û1 + k2 û2| (complex symbols)."""
        ops = grid_ops(self.ux.trunc)
        div = ops.p1 * ops.to_half(self.ux.coeffs) + ops.p2 * ops.to_half(self.uy.coeffs)
        return float(np.max(np.abs(div), initial=0.0))


def make_field(trunc: TruncationSpec, entries: Iterable[tuple[ModeLike, float]]) -> SpectralField:
    coeffs = np.zeros(trunc.dim)
    seen: set[ModeIndex] = set()
    for mode, value in entries:
        mode = as_mode(mode)
        if not trunc.contains(mode):
            raise ValueError(f"Mode {mode} lies outside the truncation K={trunc.K}")
        if mode in seen:
            raise ValueError(f"Duplicate mode {mode}")
        if not math.isfinite(value):
            raise ValueError(f"Non-finite coefficient {value!r} for mode {mode}")
        seen.add(mode)
        coeffs[trunc.position(mode)] = value
    return SpectralField(trunc, coeffs)


def sobolev_norm_coeffs(trunc: TruncationSpec, c: np.ndarray, s: float) -> np.ndarray:
    if not math.isfinite(s):
        raise ValueError(f"Sobolev index must be finite, got {s!r}")
    weights = wavenumber_sq(trunc) ** s
    return np.sqrt(BASIS_NORM_SQ * np.sum(weights * c * c, axis=-1))


def sobolev_norm(w: SpectralField, s: float) -> float:
    """‖(−Δ)^{s/2} w‖ in L²(T²)."""
    return float(sobolev_norm_coeffs(w.trunc, w.coeffs, s))


def inner_product(u: SpectralField, w: SpectralField) -> float:
    u._check_same(w)  # pylint: disable=protected-access
    return float(BASIS_NORM_SQ * np.dot(u.coeffs, w.coeffs))


def biot_savart(w: SpectralField) -> VelocityField:
    ops = grid_ops(w.trunc)
    u1, u2 = ops.velocity_half(ops.to_half(w.coeffs))
    return VelocityField(SpectralField(w.trunc, ops.from_half(u1)), SpectralField(w.trunc, ops.from_half(u2)))


def curl(v: VelocityField) -> SpectralField:
    ops = grid_ops(v.ux.trunc)
    u1 = ops.to_half(v.ux.coeffs)
    u2 = ops.to_half(v.uy.coeffs)
    return SpectralField(v.ux.trunc, ops.from_half(1j * ops.p1 * u2 - 1j * ops.p2 * u1))


def nonlinear_coeffs(trunc: TruncationSpec, c: np.ndarray) -> np.ndarray:
    """B(Kw, w) on (batched) coefficient arrays."""
    ops = grid_ops(trunc)
    h = ops.to_half(c)
    return ops.from_half(ops.advection_half(ops.velocity_half(h), h))


def bracket_coeffs(trunc: TruncationSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """B̃(u, w) = −B(Ku, w) − B(Kw, u) on (batched) coefficient arrays."""
    ops = grid_ops(trunc)
    ha = ops.to_half(a)
    hb = ops.to_half(b)
    total = ops.advection_half(ops.velocity_half(ha), hb) + ops.advection_half(ops.velocity_half(hb), ha)
    return -ops.from_half(total)


def bracket_adjoint_coeffs(trunc: TruncationSpec, w: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """
    L²-adjoint of ξ ↦ B̃(w, ξ), applied to φ:

        (Kw)·∇φ − (−Δ)⁻¹ curl(φ ∇w)

    Exact for the truncated operator because the grid products are alias-free.
    """
    ops = grid_ops(trunc)
    hw = ops.to_half(w)
    hphi = ops.to_half(phi)
    transport = ops.advection_half(ops.velocity_half(hw), hphi)

    phi_grid = ops.to_grid(hphi)
    flux1 = ops.from_grid(phi_grid * ops.to_grid(1j * ops.p1 * hw))
    flux2 = ops.from_grid(phi_grid * ops.to_grid(1j * ops.p2 * hw))
    curl_flux = 1j * ops.p1 * flux2 - 1j * ops.p2 * flux1
    return ops.from_half(transport - curl_flux / ops.psq)


def nonlinear_term(w: SpectralField) -> SpectralField:
    """Galerkin projection of (Kw)·∇w onto the truncation."""
    return SpectralField(w.trunc, nonlinear_coeffs(w.trunc, w.coeffs))


def symmetrized_bracket(u: SpectralField, w: SpectralField) -> SpectralField:
    u._check_same(w)  # pylint: disable=protected-access
    return SpectralField(u.trunc, bracket_coeffs(u.trunc, u.coeffs, w.coeffs))


def spectral_tail_fraction_coeffs(trunc: TruncationSpec, c: np.ndarray) -> np.ndarray:
    shell = np.array([m.sup_norm == trunc.K for m in trunc.modes])
    total = np.sum(c * c, axis=-1)
    outer = np.sum(c[..., shell] ** 2, axis=-1)
    return np.divide(outer, total, out=np.zeros_like(total), where=total > 0)


def spectral_tail_fraction(w: SpectralField) -> float:
    """Share of ‖w‖² carried by the outer shell max(|k1|, |k2|) = K."""
    return float(spectral_tail_fraction_coeffs(w.trunc, w.coeffs))


def _l4_grid(trunc: TruncationSpec) -> _GridOperators:
    # A quartic of a |k|∞ ≤ K field has modes up to 4K; a grid of 4K + 2 points integrates it exactly
    return _ops(trunc.K, 4 * trunc.K + 2)


def ladyzhenskaya_ratio_coeffs(trunc: TruncationSpec, c: np.ndarray) -> np.ndarray:
    ops = _l4_grid(trunc)
    g = ops.to_grid(ops.to_half(c))
    l4_sq = np.sqrt((2.0 * math.pi) ** 2 * np.mean(g**4, axis=(-2, -1)))
    denom = sobolev_norm_coeffs(trunc, c, 1.0) * sobolev_norm_coeffs(trunc, c, 0.0)
    return np.divide(l4_sq, denom, out=np.zeros_like(l4_sq), where=denom > 0)


def ladyzhenskaya_ratio(w: SpectralField) -> float:
    """‖w‖²_{L⁴} / (‖w‖₁ ‖w‖), zero for the zero field."""
    return float(ladyzhenskaya_ratio_coeffs(w.trunc, w.coeffs))


def _c0_candidates(trunc: TruncationSpec, seed: int, sample_ids: np.ndarray) -> np.ndarray:
    dim = trunc.dim
    counters = (sample_ids[:, None] * dim + np.arange(dim)[None, :]).ravel()
    gauss = counter_rng.normals(seed, 0, counters).reshape(len(sample_ids), dim)
    # Random spectral slope per sample, from flat to steep
    slopes = 3.0 * counter_rng.uniforms(seed, 1, sample_ids)
    return gauss * wavenumber_sq(trunc)[None, :] ** (-0.5 * slopes[:, None])


def estimate_ladyzhenskaya_c0(trunc: TruncationSpec, samples: int, seed: int, chunk: int = 512) -> float:
    """
    Lower bound for the Ladyzhenskaya constant c₀ in ‖w‖²_{L⁴} ≤ c₀ ‖w‖₁ ‖w‖.

    Each random field is refined by its own hill climb whose perturbations are
    drawn from counter-based streams keyed by the sample index, so the running
    maximum can only grow when `samples` grows under a fixed seed.
    """
    if samples < 1:
        raise ValueError(f"At least one sample is required, got {samples}")

    best = 0.0
    for start in range(0, samples, chunk):
        ids = np.arange(start, min(samples, start + chunk), dtype=np.int64)
        fields = _c0_candidates(trunc, seed, ids)
        ratios = ladyzhenskaya_ratio_coeffs(trunc, fields)
        norms = np.linalg.norm(fields, axis=-1, keepdims=True)

        for step in range(C0_HILL_CLIMB_STEPS):
            counters = (ids[:, None] * trunc.dim + np.arange(trunc.dim)[None, :]).ravel()
            kick = counter_rng.normals(seed, 2 + step, counters).reshape(fields.shape)
            scale = 0.5 * 0.8**step / math.sqrt(trunc.dim)
            proposal = fields + scale * norms * kick
            proposal_ratios = ladyzhenskaya_ratio_coeffs(trunc, proposal)
            better = proposal_ratios > ratios
            fields = np.where(better[:, None], proposal, fields)
            ratios = np.where(better, proposal_ratios, ratios)

        best = max(best, float(np.max(ratios)))
    return best


def random_field(trunc: TruncationSpec, seed: int, stream: int = 0, norm: Optional[float] = None) -> SpectralField:
    """Gaussian coefficients from a counter-based stream, optionally rescaled to ‖w‖ = norm."""
    c = counter_rng.normals(seed, stream, np.arange(trunc.dim))
    if norm is not None:
        c *= norm / float(sobolev_norm_coeffs(trunc, c, 0.0))
    return SpectralField(trunc, c)


def stack(fields: Sequence[SpectralField]) -> np.ndarray:
    if not fields:
        raise ValueError("Cannot stack an empty list of fields")
    trunc = fields[0].trunc
    for f in fields:
        if f.trunc != trunc:
            raise ValueError("All fields must share one truncation")
    return np.stack([f.coeffs for f in fields])

"""
Tests for the truncated field layer.

Validates:
- Canonical mode enumeration and truncation bookkeeping
- Norms and pairings with the 2π² basis normalisation
- Biot–Savart / curl round trip and incompressibility
- Conservation properties of the Galerkin nonlinearity
- Exactness of the bracket adjoint
- Ladyzhenskaya ratio and the c₀ estimator
"""

import math

import numpy as np
import pytest

from periodic_sns.spectral_core import (
    ModeIndex,
    SpectralField,
    TruncationSpec,
    biot_savart,
    bracket_adjoint_coeffs,
    bracket_coeffs,
    curl,
    estimate_ladyzhenskaya_c0,
    inner_product,
    ladyzhenskaya_ratio,
    make_field,
    nonlinear_coeffs,
    nonlinear_term,
    random_field,
    sobolev_norm,
    spectral_tail_fraction,
    stack,
    wavenumber_sq,
)

SQRT_BASIS = math.sqrt(2.0) * math.pi


class TestModesAndTruncation:
    """Mode indices and the canonical enumeration."""

    def test_dimension(self):
        for K in (1, 2, 4):
            trunc = TruncationSpec(K)
            assert trunc.dim == (2 * K + 1) ** 2 - 1
            assert len(trunc.modes) == trunc.dim

    def test_lexicographic_order(self):
        modes = TruncationSpec(2).modes
        assert list(modes) == sorted(modes)
        assert modes[0] == ModeIndex(-2, -2)
        assert modes[-1] == ModeIndex(2, 2)
        assert (0, 0) not in [m.as_tuple() for m in modes]

    def test_zero_mode_rejected(self):
        with pytest.raises(ValueError, match="zero mode"):
            ModeIndex(0, 0)

    def test_plus_minus_split(self):
        assert ModeIndex(1, 0).is_plus
        assert ModeIndex(-1, 1).is_plus
        assert not ModeIndex(-1, 0).is_plus
        assert not ModeIndex(1, -1).is_plus
        assert (-ModeIndex(1, -1)).plus_representative() == ModeIndex(-1, 1)

    def test_parse(self):
        assert ModeIndex.parse("1,-2") == ModeIndex(1, -2)
        assert ModeIndex.parse("(3, 0)") == ModeIndex(3, 0)
        with pytest.raises(ValueError):
            ModeIndex.parse("1")

    def test_invalid_truncation(self):
        with pytest.raises(ValueError, match="positive integer"):
            TruncationSpec(0)

    def test_grid_size_is_alias_free(self):
        for K in (1, 2, 3, 4, 8):
            N = TruncationSpec(K).grid_size
            assert N >= 3 * K + 1
            assert N % 2 == 0
        assert TruncationSpec(4, dealias=False).grid_size == 10

    def test_position_outside_truncation(self):
        with pytest.raises(ValueError, match="outside the truncation"):
            TruncationSpec(2).position((3, 0))

    def test_make_field_rejects_duplicates(self):
        trunc = TruncationSpec(2)
        with pytest.raises(ValueError, match="Duplicate"):
            make_field(trunc, [((1, 0), 1.0), ((1, 0), 2.0)])


class TestNorms:
    """Sobolev norms and pairings."""

    def test_basis_norm(self):
        trunc = TruncationSpec(3)
        for mode in [(1, 0), (-1, 0), (2, -3), (0, 1)]:
            w = SpectralField.basis(trunc, mode)
            assert sobolev_norm(w, 0.0) == pytest.approx(SQRT_BASIS, rel=1e-14)

    def test_h1_norm_scales_with_wavenumber(self):
        trunc = TruncationSpec(3)
        w = SpectralField.basis(trunc, (1, 2), amplitude=3.0)
        assert sobolev_norm(w, 1.0) == pytest.approx(3.0 * math.sqrt(5.0) * SQRT_BASIS, rel=1e-14)
        assert sobolev_norm(w, -1.0) == pytest.approx(3.0 / math.sqrt(5.0) * SQRT_BASIS, rel=1e-14)

    def test_orthogonality(self):
        trunc = TruncationSpec(2)
        sin_x = SpectralField.basis(trunc, (1, 0))
        cos_x = SpectralField.basis(trunc, (-1, 0))
        assert inner_product(sin_x, cos_x) == 0.0
        assert inner_product(sin_x, sin_x) == pytest.approx(2.0 * math.pi**2)

    def test_truncation_mismatch(self):
        with pytest.raises(ValueError, match="Truncation mismatch"):
            _ = SpectralField.zeros(TruncationSpec(2)) + SpectralField.zeros(TruncationSpec(3))

    def test_fields_are_read_only(self):
        w = SpectralField.basis(TruncationSpec(2), (1, 1))
        with pytest.raises(ValueError):
            w.coeffs[0] = 1.0

    def test_non_finite_rejected(self):
        trunc = TruncationSpec(1)
        coeffs = np.zeros(trunc.dim)
        coeffs[0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            SpectralField(trunc, coeffs)

    def test_random_field_norm(self):
        trunc = TruncationSpec(4)
        w = random_field(trunc, seed=7, norm=2.5)
        assert sobolev_norm(w, 0.0) == pytest.approx(2.5, rel=1e-12)
        assert random_field(trunc, seed=7, norm=2.5) == w
        assert random_field(trunc, seed=7, stream=1, norm=2.5) != w

    def test_tail_fraction(self):
        trunc = TruncationSpec(3)
        assert spectral_tail_fraction(SpectralField.basis(trunc, (1, 1))) == 0.0
        assert spectral_tail_fraction(SpectralField.basis(trunc, (3, -1))) == 1.0
        assert spectral_tail_fraction(SpectralField.zeros(trunc)) == 0.0

    def test_stack(self):
        trunc = TruncationSpec(2)
        rows = stack([SpectralField.basis(trunc, (1, 0)), SpectralField.zeros(trunc)])
        assert rows.shape == (2, trunc.dim)
        with pytest.raises(ValueError):
            stack([])


class TestBiotSavart:
    """Velocity reconstruction from vorticity."""

    def test_sine_mode(self):
        trunc = TruncationSpec(2)
        v = biot_savart(SpectralField.basis(trunc, (1, 0)))
        # ψ = sin x, u = (∂yψ, −∂xψ) = (0, −cos x)
        assert np.allclose(v.ux.coeffs, 0.0, atol=1e-15)
        assert v.uy.coefficient((-1, 0)) == pytest.approx(-1.0)
        assert np.count_nonzero(np.abs(v.uy.coeffs) > 1e-15) == 1

    def test_curl_round_trip_and_divergence(self):
        trunc = TruncationSpec(4)
        w = random_field(trunc, seed=3)
        v = biot_savart(w)
        assert v.divergence_residual() < 1e-12
        assert np.allclose(curl(v).coeffs, w.coeffs, atol=1e-12)


class TestNonlinearity:
    """Galerkin nonlinearity and the symmetrised bracket."""

    def test_single_mode_is_steady(self):
        trunc = TruncationSpec(3)
        for mode in [(1, 0), (2, -1), (-3, 3)]:
            out = nonlinear_term(SpectralField.basis(trunc, mode, amplitude=2.0))
            assert np.max(np.abs(out.coeffs)) < 1e-12

    def test_energy_and_enstrophy_conserved(self):
        trunc = TruncationSpec(4)
        c = random_field(trunc, seed=11).coeffs
        b = nonlinear_coeffs(trunc, c)
        scale = float(np.linalg.norm(b) * np.linalg.norm(c))
        assert abs(b @ c) < 1e-12 * scale
        assert abs(b @ (c / wavenumber_sq(trunc))) < 1e-12 * scale

    def test_batched_matches_single(self):
        trunc = TruncationSpec(3)
        batch = np.stack([random_field(trunc, seed=5, stream=s).coeffs for s in range(3)])
        out = nonlinear_coeffs(trunc, batch)
        for r in range(3):
            assert np.allclose(out[r], nonlinear_coeffs(trunc, batch[r]), rtol=0, atol=1e-13)

    def test_bracket_is_symmetric(self):
        trunc = TruncationSpec(3)
        a = random_field(trunc, seed=1).coeffs
        b = random_field(trunc, seed=2).coeffs
        assert np.allclose(bracket_coeffs(trunc, a, b), bracket_coeffs(trunc, b, a), atol=1e-13)

    def test_bracket_of_field_with_itself(self):
        trunc = TruncationSpec(3)
        c = random_field(trunc, seed=4).coeffs
        assert np.allclose(bracket_coeffs(trunc, c, c), -2.0 * nonlinear_coeffs(trunc, c), atol=1e-12)

    def test_adjoint_is_exact_transpose(self):
        trunc = TruncationSpec(4)
        w = random_field(trunc, seed=21).coeffs
        xi = random_field(trunc, seed=22).coeffs
        phi = random_field(trunc, seed=23).coeffs
        lhs = bracket_coeffs(trunc, w, xi) @ phi
        rhs = xi @ bracket_adjoint_coeffs(trunc, w, phi)
        assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-13)


class TestLadyzhenskaya:
    """‖w‖²_{L⁴} ≤ c₀ ‖w‖₁ ‖w‖."""

    def test_ratio_of_sine(self):
        trunc = TruncationSpec(2)
        ratio = ladyzhenskaya_ratio(SpectralField.basis(trunc, (1, 0)))
        assert ratio == pytest.approx(math.sqrt(1.5) / (2.0 * math.pi), rel=1e-12)

    def test_ratio_is_scale_invariant(self):
        trunc = TruncationSpec(3)
        w = random_field(trunc, seed=9)
        assert ladyzhenskaya_ratio(w * 7.0) == pytest.approx(ladyzhenskaya_ratio(w), rel=1e-12)
        assert ladyzhenskaya_ratio(SpectralField.zeros(trunc)) == 0.0

    def test_estimate_is_deterministic_and_monotone(self):
        trunc = TruncationSpec(2)
        small = estimate_ladyzhenskaya_c0(trunc, 32, seed=5)
        assert small == estimate_ladyzhenskaya_c0(trunc, 32, seed=5)
        assert estimate_ladyzhenskaya_c0(trunc, 64, seed=5) >= small
        assert 0.0 < small < 2.0

    def test_estimate_needs_samples(self):
        with pytest.raises(ValueError, match="At least one sample"):
            estimate_ladyzhenskaya_c0(TruncationSpec(2), 0, seed=1)

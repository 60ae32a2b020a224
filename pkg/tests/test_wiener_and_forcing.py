"""
Tests for the counter-based noise source, the Wiener store and the periodic forcing.
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from periodic_sns.counter_rng import hash64, normals, raw_bits, uniforms
from periodic_sns.forcing import ForcingProfile, ForcingTerm
from periodic_sns.spectral_core import TruncationSpec, sobolev_norm
from periodic_sns.wiener import WienerStore, derive_wiener_store, replica_store, shift_wiener

SQRT_BASIS = math.sqrt(2.0) * math.pi


class TestCounterRng:
    """Stateless draws keyed by (seed, stream, counter)."""

    def test_draws_are_pure_functions_of_the_counter(self):
        full = normals(42, 3, np.arange(-50, 50))
        part = normals(42, 3, np.arange(10, 20))
        assert np.array_equal(full[60:70], part)

    def test_streams_and_seeds_differ(self):
        counters = np.arange(64)
        assert not np.array_equal(raw_bits(1, 0, counters), raw_bits(1, 1, counters))
        assert not np.array_equal(raw_bits(1, 0, counters), raw_bits(2, 0, counters))

    def test_uniforms_in_open_interval(self):
        u = uniforms(7, 0, np.arange(10_000))
        assert np.all(u > 0.0) and np.all(u < 1.0)

    def test_normal_moments(self):
        z = normals(2025, 0, np.arange(200_000))
        assert abs(float(np.mean(z))) < 0.02
        assert float(np.var(z)) == pytest.approx(1.0, abs=0.02)

    def test_hash64(self):
        assert hash64(1, 2) == hash64(1, 2)
        assert hash64(1, 2) != hash64(2, 1)
        assert 0 <= hash64(-1, 5) < 2**64
        assert len({hash64(0, r) for r in range(1000)}) == 1000


class TestWienerStore:
    """Two-sided increments with exact shifts."""

    def test_window_shape_and_variance(self):
        store = derive_wiener_store(11, 0.01, 3, -1000, 1000)
        dW = store.window(-1000, 1000)
        assert dW.shape == (2000, 3)
        assert float(np.var(dW)) == pytest.approx(0.01, rel=0.1)

    def test_extension_keeps_existing_values(self):
        store = derive_wiener_store(5, 0.1, 2, 0, 100)
        wider = store.extended(-100, 300)
        assert np.array_equal(store.window(0, 100), wider.window(0, 100))
        assert wider.covers(-100, 300)

    def test_shift_is_index_arithmetic(self):
        store = derive_wiener_store(5, 0.1, 2, 0, 500)
        shifted = shift_wiener(store, 123)
        assert np.array_equal(shifted.window(-123, 377), store.window(0, 500))
        assert shifted.increment(1, 0) == store.increment(1, 123)

    def test_out_of_range_window(self):
        store = derive_wiener_store(5, 0.1, 1, 0, 10)
        with pytest.raises(ValueError, match="outside the store range"):
            store.window(5, 11)
        with pytest.raises(ValueError, match="No channel"):
            store.increment(1, 0)

    def test_replica_stores_are_independent(self):
        a = replica_store(9, 0, 0.01, 1, 0, 100).increments
        b = replica_store(9, 1, 0.01, 1, 0, 100).increments
        assert not np.array_equal(a, b)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError, match="dt"):
            WienerStore(1, 0.0, 1, 0, 1)
        with pytest.raises(ValueError, match="Invalid index range"):
            WienerStore(1, 0.1, 1, 5, 1)


class TestForcing:
    """T-periodic forcing profiles."""

    def test_single_term_sup_norm(self):
        profile = ForcingProfile.of(1.0, [((1, 0), 3.0)])
        assert profile.sup_norm() == pytest.approx(3.0 * SQRT_BASIS, rel=1e-12)

    def test_rotating_profile_has_constant_norm(self):
        # A cos θ on one mode and A sin θ on another
        profile = ForcingProfile.of(2.0, [((1, 0), 2.0, 0.0), ((0, 1), 2.0, -math.pi / 2)])
        trunc = TruncationSpec(2)
        for t in np.linspace(0.0, 2.0, 9):
            assert sobolev_norm(profile.at(t, trunc), 0.0) == pytest.approx(2.0 * SQRT_BASIS, rel=1e-12)
        assert profile.sup_norm() == pytest.approx(2.0 * SQRT_BASIS, rel=1e-9)

    def test_constant_plus_harmonic(self):
        profile = ForcingProfile(1.0, (ForcingTerm((1, 1), 1.0, harmonic=0), ForcingTerm((1, 1), 0.5)))
        assert profile.sup_norm() == pytest.approx(1.5 * SQRT_BASIS, rel=1e-12)

    def test_sup_norm_bounds_sampled_values(self):
        profile = ForcingProfile.of(
            1.0, [((1, 0), 1.0, 0.3), ((1, 0), 0.7, 0.0, 0), ((0, 2), 0.4, 1.1), ((-1, 1), 0.9, -0.5)]
        )
        trunc = TruncationSpec(2)
        sampled = max(sobolev_norm(profile.at(t, trunc), 0.0) for t in np.linspace(0.0, 1.0, 2001))
        assert sampled <= profile.sup_norm() * (1 + 1e-12)
        assert sampled == pytest.approx(profile.sup_norm(), rel=1e-4)

    def test_zero_profile(self):
        assert ForcingProfile().is_zero
        assert ForcingProfile().sup_norm() == 0.0

    def test_translated_grid_table_is_a_bit_exact_roll(self):
        trunc = TruncationSpec(2)
        profile = ForcingProfile.of(1.0, [((1, 0), 1.0, 0.2), ((0, -1), 0.5, 0.0, 0)])
        table = profile.grid_table(trunc, 100)
        for h in (1, 37, 100, 307):
            shifted = profile.translated(h, 100).grid_table(trunc, 100)
            assert np.array_equal(shifted, np.roll(table, -h, axis=0))

    def test_fractional_shift_off_grid(self):
        profile = ForcingProfile(1.0, (ForcingTerm((1, 0), 1.0),), Fraction(1, 3))
        with pytest.raises(ValueError, match="whole number of grid steps"):
            profile.grid_table(TruncationSpec(1), 10)

    def test_invalid_terms(self):
        with pytest.raises(ValueError, match="harmonic"):
            ForcingTerm((1, 0), 1.0, harmonic=2)
        with pytest.raises(ValueError, match="period"):
            ForcingProfile(0.0)

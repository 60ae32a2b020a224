"""
Tests for the projected Malliavin matrix.
"""

import math

import numpy as np
import pytest

from periodic_sns.brackets import ForcedModeSet
from periodic_sns.dynamics import SolverConfig, jacobian_coeffs, simulate
from periodic_sns.forcing import ForcingProfile
from periodic_sns.malliavin_probe import (
    assembly_consistency,
    backward_adjoint,
    default_complement,
    forward_malliavin_gram,
    nondegeneracy_probe,
    projected_malliavin_gram,
    projection_directions,
)
from periodic_sns.spectral_core import ModeIndex, SpectralField, TruncationSpec, random_field
from periodic_sns.wiener import derive_wiener_store

FOUR_DIRECTIONS = ForcedModeSet.parse("1,0;-1,0;1,1;-1,-1", "0.5,0.5,0.5,0.5")
EQUAL_LENGTH = ForcedModeSet.parse("1,0;-1,0;0,1;0,-1", "0.5,0.5,0.5,0.5")


def config(noise: ForcedModeSet, nonlinear: bool = True, forcing_amp: float = 0.5) -> SolverConfig:
    terms = [((1, 1), forcing_amp, 0.0)] if forcing_amp else []
    return SolverConfig(
        nu=0.5,
        dt=0.01,
        trunc=TruncationSpec(2),
        noise=noise,
        forcing=ForcingProfile.of(0.1, terms),
        nonlinear=nonlinear,
    )


def trajectory(cfg: SolverConfig, n_steps: int = 50, seed: int = 3):
    store = derive_wiener_store(seed, cfg.dt, cfg.noise.channels, 0, n_steps)
    return simulate(random_field(cfg.trunc, seed=seed, norm=1.0), 0, n_steps, cfg, store)


class TestAdjoint:
    def test_is_the_transpose_of_the_jacobian(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg)
        xi = random_field(cfg.trunc, seed=20)
        phi = random_field(cfg.trunc, seed=21)
        forward = jacobian_coeffs(traj, xi.coeffs, 10, 50) @ phi.coeffs
        backward = xi.coeffs @ backward_adjoint(traj, phi, 50, 10).coeffs
        assert forward == pytest.approx(backward, rel=1e-10)

    def test_empty_window_is_identity(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg, n_steps=5)
        phi = random_field(cfg.trunc, seed=1)
        assert backward_adjoint(traj, phi, 3, 3) == phi

    def test_window_checks(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg, n_steps=5)
        phi = random_field(cfg.trunc, seed=1)
        with pytest.raises(ValueError, match="lies after"):
            backward_adjoint(traj, phi, 2, 4)
        with pytest.raises(ValueError, match="not covered"):
            backward_adjoint(traj, phi, 6, 0)


class TestGram:
    def test_linear_closed_form(self):
        cfg = config(FOUR_DIRECTIONS, nonlinear=False, forcing_amp=0.0)
        traj = trajectory(cfg, n_steps=100)
        report = projected_malliavin_gram(traj, 0, 100, [(1, 0), (1, 1), (0, 1)], cfg.noise)
        basis_sq = 2.0 * math.pi**2

        def expected(k_sq: int) -> float:
            lam = 0.5 * k_sq
            return 0.25 * basis_sq / (2.0 * lam) * (1.0 - math.exp(-2.0 * lam * 1.0))

        assert report.gram[0, 0] == pytest.approx(expected(1), rel=1e-4)
        assert report.gram[1, 1] == pytest.approx(expected(2), rel=1e-4)
        # (0, 1) carries no noise and the linear flow does not couple modes
        assert report.gram[2, 2] == 0.0
        assert report.gram[0, 1] == 0.0
        assert abs(report.min_eigenvalue) <= 1e-12 * report.trace
        assert report.psd_ok

    def test_symmetric_and_positive(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg)
        report = projected_malliavin_gram(traj, 0, 50, [(1, 0), (0, 1), (-1, 1), (2, 0)], cfg.noise)
        assert np.array_equal(report.gram, report.gram.T)
        assert report.asymmetry == 0.0
        assert report.psd_ok
        assert report.eigenvalues.shape == (4,)
        assert report.trace == pytest.approx(float(np.sum(report.eigenvalues)), rel=1e-12)

    def test_permuting_directions_permutes_entries(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg)
        modes = [(1, 0), (0, 1), (-1, 1)]
        a = projected_malliavin_gram(traj, 0, 50, modes, cfg.noise).gram
        b = projected_malliavin_gram(traj, 0, 50, modes[::-1], cfg.noise).gram
        assert np.allclose(a, b[::-1, ::-1], rtol=1e-13, atol=0.0)

    def test_forward_and_backward_assemblies_agree(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg)
        modes = [(1, 0), (0, 1), (-2, 1)]
        assert assembly_consistency(traj, 10, 50, modes, cfg.noise, stride=5) <= 1e-10
        forward = forward_malliavin_gram(traj, 10, 50, modes, cfg.noise, stride=5)
        assert forward.window == (10, 50)

    def test_invalid_arguments(self):
        cfg = config(FOUR_DIRECTIONS)
        traj = trajectory(cfg, n_steps=10)
        with pytest.raises(ValueError, match="Stride"):
            projected_malliavin_gram(traj, 0, 10, [(1, 0)], cfg.noise, stride=3)
        with pytest.raises(ValueError, match="outside the truncation"):
            projected_malliavin_gram(traj, 0, 10, [(3, 0)], cfg.noise)

    def test_projection_directions_are_unit(self):
        trunc = TruncationSpec(2)
        rows = projection_directions(trunc, [(1, 0), (0, -2)])
        norms = [math.sqrt(2.0 * math.pi**2 * float(r @ r)) for r in rows]
        assert norms == pytest.approx([1.0, 1.0])


class TestNondegeneracy:
    def test_case1_complement_is_invisible(self):
        cfg = config(EQUAL_LENGTH, forcing_amp=0.0)
        complement = default_complement(cfg)
        assert len(complement) == cfg.trunc.dim - 4
        assert ModeIndex(1, 0) not in complement
        traj = simulate(SpectralField.zeros(cfg.trunc), 0, 50, cfg, derive_wiener_store(1, cfg.dt, 4, 0, 50))
        report = projected_malliavin_gram(traj, 0, 50, [(1, 0), (0, 1)], cfg.noise, complement_modes=complement)
        assert report.complement_max_quadform <= 1e-12
        assert report.min_eigenvalue > 0

    def test_full_noise_has_no_default_complement(self):
        assert default_complement(config(FOUR_DIRECTIONS)) == ()
        assert default_complement(config(ForcedModeSet())) == ()

    def test_probe_over_samples(self):
        cfg = config(FOUR_DIRECTIONS)
        result = nondegeneracy_probe(cfg, 7, 3, [(1, 0), (-1, 0), (1, 1)], window_periods=2)
        assert result.min_eigenvalues.shape == (3,)
        assert np.all(result.min_eigenvalues > 0)
        assert result.degenerate_fraction == 0.0
        assert set(result.quantiles) == {"q00", "q05", "q50", "q95", "q100"}
        assert result.complement_ok is None and result.contract_ok

    def test_probe_flags_unforced_directions(self):
        cfg = config(FOUR_DIRECTIONS, nonlinear=False, forcing_amp=0.0)
        result = nondegeneracy_probe(cfg, 7, 2, [(1, 0), (0, 2)], window_periods=1)
        assert result.degenerate_fraction == 1.0

    def test_probe_case1(self):
        cfg = config(EQUAL_LENGTH, forcing_amp=0.0)
        result = nondegeneracy_probe(cfg, 11, 2, [(1, 0), (0, -1)], window_periods=1)
        assert result.complement_ok
        assert result.to_document()["samples"] == 2

    def test_probe_needs_samples(self):
        with pytest.raises(ValueError, match="At least one sample"):
            nondegeneracy_probe(config(FOUR_DIRECTIONS), 1, 0, [(1, 0)], window_periods=1)

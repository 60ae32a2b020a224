"""
Tests for the time integrator, the linearized flow and the periodic orbit solver.
"""

import math

import numpy as np
import pytest

import periodic_sns.dynamics as dynamics
from common.utils import BlowUpError, NonConvergenceError
from periodic_sns.brackets import ForcedModeSet
from periodic_sns.dynamics import (
    SolverConfig,
    propagate_jacobian,
    simulate,
    simulate_ensemble,
    simulate_pair_shared_noise,
    solve_deterministic_periodic,
    step,
    verify_translation_identity,
)
from periodic_sns.forcing import ForcingProfile
from periodic_sns.sns_config import BASIS_NORM_SQ
from periodic_sns.spectral_core import (
    SpectralField,
    TruncationSpec,
    random_field,
    sobolev_norm,
    sobolev_norm_coeffs,
    wavenumber_sq,
)
from periodic_sns.wiener import derive_wiener_store, replica_store

SQRT_BASIS = math.sqrt(2.0) * math.pi
FOUR_DIRECTIONS = ForcedModeSet.parse("1,0;-1,0;1,1;-1,-1", "0.5,0.5,0.5,0.5")


def forced_config(K: int = 3, nonlinear: bool = True) -> SolverConfig:
    forcing = ForcingProfile.of(0.1, [((1, 0), 1.0, 0.3), ((0, -2), 0.5, 0.0, 0)])
    return SolverConfig(
        nu=1.0, dt=0.01, trunc=TruncationSpec(K), noise=FOUR_DIRECTIONS, forcing=forcing, nonlinear=nonlinear
    )


class TestSolverConfig:
    def test_period_must_be_a_multiple_of_dt(self):
        with pytest.raises(ValueError, match="integer multiple"):
            SolverConfig(nu=1.0, dt=0.3, trunc=TruncationSpec(2))

    def test_modes_must_lie_in_the_truncation(self):
        with pytest.raises(ValueError, match="outside the truncation"):
            SolverConfig(nu=1.0, dt=0.1, trunc=TruncationSpec(2), noise=ForcedModeSet.parse("3,0"))
        with pytest.raises(ValueError, match="outside the truncation"):
            SolverConfig(nu=1.0, dt=0.1, trunc=TruncationSpec(2), forcing=ForcingProfile.of(1.0, [((0, 3), 1.0)]))

    def test_negative_viscosity(self):
        with pytest.raises(ValueError, match="Viscosity"):
            SolverConfig(nu=-1.0, dt=0.1, trunc=TruncationSpec(2))

    def test_document(self):
        doc = forced_config().to_document()
        assert doc["scheme"] == "exponential-euler-maruyama-midpoint"
        assert doc["noise_modes"][0] == [1, 0]
        assert doc["forcing"][1]["harmonic"] == 0
        assert forced_config().steps_per_period == 10


class TestSimulate:
    """Trajectories as pure functions of (w0, config, store)."""

    def test_replay_is_bit_identical(self):
        cfg = forced_config()
        store = derive_wiener_store(3, cfg.dt, 4, 0, 100)
        w0 = random_field(cfg.trunc, seed=1, norm=1.0)
        a = simulate(w0, 0, 100, cfg, store)
        b = simulate(w0, 0, 100, cfg, store)
        assert np.array_equal(a.frames, b.frames)
        assert a.frame(0) == w0
        assert a.n_steps == 100 and a.end_index == 100

    def test_split_run_matches_single_run(self):
        cfg = forced_config()
        store = derive_wiener_store(3, cfg.dt, 4, 0, 60)
        w0 = random_field(cfg.trunc, seed=2, norm=1.0)
        whole = simulate(w0, 0, 60, cfg, store)
        first = simulate(w0, 0, 25, cfg, store)
        second = simulate(first.frame(25), 25, 35, cfg, store)
        assert np.array_equal(whole.frames[25:], second.frames)

    def test_single_step_matches_simulate(self):
        cfg = forced_config()
        store = derive_wiener_store(3, cfg.dt, 4, 0, 10)
        w0 = random_field(cfg.trunc, seed=4, norm=1.0)
        assert step(w0, 7, cfg, store) == simulate(w0, 7, 1, cfg, store).frame(1)

    @pytest.mark.parametrize("h", [1, 10, 37])
    def test_translation_identity_is_exact(self, h):
        cfg = forced_config()
        store = derive_wiener_store(17, cfg.dt, 4, -50, 200)
        w0 = random_field(cfg.trunc, seed=5, norm=1.0)
        assert verify_translation_identity(cfg, store, w0, 0, h, 50) == 0.0

    def test_free_linear_decay(self):
        trunc = TruncationSpec(3)
        cfg = SolverConfig(nu=0.5, dt=0.01, trunc=trunc, nonlinear=False)
        w0 = random_field(trunc, seed=8)
        traj = simulate(w0, 0, 200, cfg, None)
        expected = w0.coeffs * np.exp(-0.5 * wavenumber_sq(trunc) * 2.0)
        assert np.allclose(traj.frames[-1], expected, rtol=1e-12, atol=0.0)

    def test_shared_noise_difference_decays_linearly(self):
        trunc = TruncationSpec(2)
        cfg = SolverConfig(nu=0.5, dt=0.01, trunc=trunc, noise=FOUR_DIRECTIONS, nonlinear=False)
        store = derive_wiener_store(1, cfg.dt, 4, 0, 100)
        w1 = SpectralField.basis(trunc, (1, 0))
        w2 = SpectralField.zeros(trunc)
        _, _, errors = simulate_pair_shared_noise(w1, w2, 0, 100, cfg, store)
        for n in (0, 50, 100):
            assert errors[n] == pytest.approx(SQRT_BASIS * math.exp(-0.5 * n * 0.01), rel=1e-10)

    def test_identical_starts_stay_identical(self):
        cfg = forced_config()
        store = derive_wiener_store(1, cfg.dt, 4, 0, 40)
        w0 = random_field(cfg.trunc, seed=9, norm=2.0)
        t1, t2, errors = simulate_pair_shared_noise(w0, w0, 0, 40, cfg, store)
        assert np.array_equal(t1.frames, t2.frames)
        assert max(errors) == 0.0

    def test_blow_up_is_reported(self):
        trunc = TruncationSpec(2)
        cfg = SolverConfig(nu=0.01, dt=0.1, trunc=trunc)
        w0 = random_field(trunc, seed=3, norm=1e200)
        with pytest.raises(BlowUpError) as info:
            simulate(w0, 0, 10, cfg, None)
        assert info.value.last_finite_index == 0

    def test_store_channel_mismatch(self):
        cfg = forced_config()
        with pytest.raises(ValueError, match="channels"):
            simulate(random_field(cfg.trunc, seed=1), 0, 5, cfg, derive_wiener_store(1, cfg.dt, 2, 0, 5))

    def test_trajectory_indexing(self):
        cfg = forced_config()
        traj = simulate(SpectralField.zeros(cfg.trunc), 5, 10, cfg, None)
        assert traj.at_index(5) == SpectralField.zeros(cfg.trunc)
        assert traj.times()[0] == pytest.approx(0.05)
        with pytest.raises(ValueError, match="outside the trajectory"):
            traj.at_index(16)


class TestInvariants:
    """Inviscid conservation and the Ornstein–Uhlenbeck second moment."""

    @staticmethod
    def _drift(trunc: TruncationSpec, frames: np.ndarray, s: float) -> float:
        values = sobolev_norm_coeffs(trunc, frames, s) ** 2
        return float(np.max(np.abs(values / values[0] - 1.0)))

    def _inviscid_run(self, K: int, n_steps: int) -> tuple[TruncationSpec, np.ndarray]:
        trunc = TruncationSpec(K)
        cfg = SolverConfig(nu=0.0, dt=1e-3, trunc=trunc)
        w0 = random_field(trunc, seed=21, norm=5.0)
        return trunc, simulate(w0, 0, n_steps, cfg, None).frames

    def test_inviscid_flow_keeps_both_quadratic_invariants(self):
        trunc, frames = self._inviscid_run(4, 1000)
        assert not np.allclose(frames[-1], frames[0])
        assert self._drift(trunc, frames, 0.0) <= 1e-8
        assert self._drift(trunc, frames, -1.0) <= 1e-8

    @pytest.mark.slow
    def test_inviscid_flow_keeps_both_quadratic_invariants_at_scale(self):
        trunc, frames = self._inviscid_run(8, 10_000)
        assert self._drift(trunc, frames, 0.0) <= 1e-8
        assert self._drift(trunc, frames, -1.0) <= 1e-8

    def test_ou_second_moment(self):
        nu, dt, amp, replicas = 0.5, 0.01, 1.0, 1000
        trunc = TruncationSpec(2)
        cfg = SolverConfig(nu=nu, dt=dt, trunc=trunc, noise=ForcedModeSet.parse("1,0", str(amp)), nonlinear=False)
        w0 = SpectralField.basis(trunc, (1, 0), 2.0)
        c0 = np.repeat(w0.coeffs[None, :], replicas, axis=0)
        stores = [replica_store(5, r, dt, 1, 0, 200) for r in range(replicas)]
        states = simulate_ensemble(c0, 0, 200, cfg, stores, record_every=50)
        for record, n in ((1, 50), (2, 100), (4, 200)):
            energy = sobolev_norm_coeffs(trunc, states[record], 0.0) ** 2
            # the step damps its own increment, so the noise sum runs over j = 1..n
            decays = np.exp(-2.0 * nu * dt * np.arange(1, n + 1))
            expected = BASIS_NORM_SQ * (4.0 * decays[-1] + amp**2 * dt * float(np.sum(decays)))
            stderr = float(np.std(energy, ddof=1)) / math.sqrt(replicas)
            assert abs(float(np.mean(energy)) - expected) <= 4.0 * stderr
            damping = math.exp(-2.0 * nu * n * dt)
            continuum = BASIS_NORM_SQ * (4.0 * damping + amp**2 * (1.0 - damping) / (2.0 * nu))
            assert expected == pytest.approx(continuum, rel=nu * dt)

    def test_unsettled_midpoint_is_reported(self, monkeypatch):
        cfg = forced_config()
        monkeypatch.setattr(dynamics, "MIDPOINT_MAX_ITER", 1)
        with pytest.raises(NonConvergenceError, match="did not settle at step 3"):
            simulate(random_field(cfg.trunc, seed=1, norm=1.0), 3, 5, cfg, None)


class TestEnsembles:
    def _ensemble(self, cfg: SolverConfig, n_rep: int):
        w0s = [random_field(cfg.trunc, seed=100, stream=r, norm=1.0) for r in range(n_rep)]
        stores = [replica_store(7, r, cfg.dt, 4, 0, 20) for r in range(n_rep)]
        return w0s, stores

    def test_replicas_match_single_runs(self):
        cfg = forced_config(K=2)
        w0s, stores = self._ensemble(cfg, 40)
        states = simulate_ensemble(w0s, 0, 20, cfg, stores, record_every=10)
        assert states.shape == (3, 40, cfg.trunc.dim)
        for r in (0, 31, 32, 39):
            single = simulate(w0s[r], 0, 20, cfg, stores[r])
            assert np.allclose(states[-1, r], single.frames[-1], rtol=0.0, atol=1e-12)

    def test_thread_count_does_not_change_results(self, monkeypatch):
        cfg = forced_config(K=2)
        w0s, stores = self._ensemble(cfg, 70)
        monkeypatch.setattr(dynamics, "THREADS", 1)
        serial = simulate_ensemble(w0s, 0, 20, cfg, stores)
        monkeypatch.setattr(dynamics, "THREADS", 4)
        threaded = simulate_ensemble(w0s, 0, 20, cfg, stores)
        assert np.array_equal(serial, threaded)

    def test_record_every_must_divide(self):
        cfg = forced_config(K=2)
        w0s, stores = self._ensemble(cfg, 2)
        with pytest.raises(ValueError, match="record_every"):
            simulate_ensemble(w0s, 0, 20, cfg, stores, record_every=3)


class TestJacobian:
    def test_matches_central_differences(self):
        cfg = forced_config()
        store = derive_wiener_store(2, cfg.dt, 4, 0, 20)
        w0 = random_field(cfg.trunc, seed=12, norm=1.0)
        xi = random_field(cfg.trunc, seed=13, norm=1.0)
        traj = simulate(w0, 0, 20, cfg, store)
        eps = 1e-6
        plus = simulate(w0 + xi * eps, 0, 20, cfg, store).frames[-1]
        minus = simulate(w0 - xi * eps, 0, 20, cfg, store).frames[-1]
        fd = (plus - minus) / (2 * eps)
        jac = propagate_jacobian(traj, xi, 0, 20).coeffs
        assert np.allclose(jac, fd, rtol=0.0, atol=1e-6 * float(np.max(np.abs(fd))))

    def test_window_outside_trajectory(self):
        cfg = forced_config()
        traj = simulate(SpectralField.zeros(cfg.trunc), 0, 5, cfg, None)
        with pytest.raises(ValueError, match="not covered"):
            propagate_jacobian(traj, SpectralField.zeros(cfg.trunc), 0, 6)


class TestPeriodicOrbit:
    def test_single_mode_constant_forcing(self):
        # B vanishes on a single mode, so the orbit is the Stokes steady state
        trunc = TruncationSpec(3)
        forcing = ForcingProfile.of(0.5, [((1, 2), 3.0, 0.0, 0)])
        cfg = SolverConfig(nu=1.0, dt=0.01, trunc=trunc, forcing=forcing)
        orbit = solve_deterministic_periodic(cfg, tol=1e-10, max_periods=200)
        assert orbit.converged
        assert orbit.at_index(0).coefficient((1, 2)) == pytest.approx(0.6, rel=1e-9)
        assert orbit.bound_ok

    def test_time_periodic_orbit(self):
        cfg = forced_config().without_noise()
        orbit = solve_deterministic_periodic(cfg, tol=1e-9, max_periods=500)
        assert orbit.converged
        P = cfg.steps_per_period
        again = simulate(orbit.at_index(0), 0, P, cfg, None)
        assert sobolev_norm(again.frame(P) - orbit.at_index(0), 0.0) < 1e-8
        assert orbit.at_index(3 * P + 4) == orbit.at_index(4)

    def test_non_convergence_is_reported(self):
        cfg = forced_config().without_noise()
        orbit = solve_deterministic_periodic(cfg, tol=1e-14, max_periods=1)
        assert not orbit.converged
        assert orbit.periods == 1

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            solve_deterministic_periodic(forced_config(), tol=0.0, max_periods=5)

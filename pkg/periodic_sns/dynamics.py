"""
Exponential Euler–Maruyama integration of the truncated vorticity equation

    dw + B(Kw, w) dt = νΔw dt + f dt + G dW.

With E = e^{−ν|k|²dt} and φ₁(z) = (e^z − 1)/z, one step reads, mode by mode,

    u  = E^{1/2} w,
    m  = u − (dt/2) B(Km, m),
    w' = E^{1/2} (2m − u) + dt φ₁(−ν|k|²dt) f(t_n) + E G ΔW_n.

The linear part, the forcing and the noise are the exponential Euler–Maruyama
terms. The advection is the implicit midpoint rule inside the integrating
factor: at ν = 0 the step keeps ‖w‖² and ‖w‖₋₁² exactly, since B is orthogonal
to both m and (−Δ)⁻¹m. The midpoint m is found by fixed-point iteration and
depends on w alone.

Forcing is read at the left endpoint from a per-period grid table and noise
from a `WienerStore`, so a trajectory is a pure function of
(w₀, config, store) and time shifts are exact index arithmetic.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from common.config import THREADS
from common.utils import BlowUpError, NonConvergenceError, log_progress, log_warning
from periodic_sns.brackets import ForcedModeSet
from periodic_sns.forcing import ForcingProfile
from periodic_sns.sns_config import (
    BASIS_NORM_SQ,
    MIDPOINT_MAX_ITER,
    MIDPOINT_TOL,
    REPLICA_CHUNK,
    SPECTRAL_TAIL_WARNING,
)
from periodic_sns.spectral_core import (
    SpectralField,
    TruncationSpec,
    bracket_adjoint_coeffs,
    bracket_coeffs,
    nonlinear_coeffs,
    sobolev_norm_coeffs,
    spectral_tail_fraction_coeffs,
    wavenumber_sq,
)
from periodic_sns.wiener import WienerStore, shift_wiener

SCHEME = "exponential-euler-maruyama-midpoint"

# Increments are fetched from the store this many steps at a time
_NOISE_CHUNK = 2048


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    dt: float
    trunc: TruncationSpec
    noise: ForcedModeSet = field(default_factory=ForcedModeSet)
    forcing: ForcingProfile = field(default_factory=ForcingProfile)
    nonlinear: bool = True

    def __post_init__(self) -> None:
        if not math.isfinite(self.nu) or self.nu < 0:
            raise ValueError(f"Viscosity must be finite and non-negative, got {self.nu!r}")
        if not math.isfinite(self.dt) or self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        ratio = self.forcing.period / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"Period {self.forcing.period} is not an integer multiple of dt={self.dt}")
        for term in self.forcing.terms:
            if not self.trunc.contains(term.mode):
                raise ValueError(f"Forcing mode {term.mode} lies outside the truncation K={self.trunc.K}")
        for mode in self.noise.modes:
            if not self.trunc.contains(mode):
                raise ValueError(f"Noise mode {mode} lies outside the truncation K={self.trunc.K}")

    @property
    def scheme(self) -> str:
        return SCHEME

    @property
    def period(self) -> float:
        return self.forcing.period

    @property
    def steps_per_period(self) -> int:
        return int(round(self.forcing.period / self.dt))

    @property
    def B0(self) -> float:
        return self.noise.B0

    def without_noise(self) -> "SolverConfig":
        return replace(self, noise=ForcedModeSet())

    def with_forcing(self, forcing: ForcingProfile) -> "SolverConfig":
        return replace(self, forcing=forcing)

    def to_document(self) -> dict:
        return {
            "nu": self.nu,
            "dt": self.dt,
            "trunc_K": self.trunc.K,
            "dealias": self.trunc.dealias,
            "nonlinear": self.nonlinear,
            "period": self.period,
            "scheme": SCHEME,
            "forcing": [
                {"mode": list(t.mode.as_tuple()), "amplitude": t.amplitude, "phase": t.phase, "harmonic": t.harmonic}
                for t in self.forcing.terms
            ],
            "forcing_shift": str(self.forcing.shift),
            "noise_modes": [list(m.as_tuple()) for m in self.noise.modes],
            "noise_amps": list(self.noise.amplitudes),
        }


def _fixed_point(
    update: Callable[[np.ndarray], np.ndarray], start: np.ndarray, scale: np.ndarray
) -> Optional[np.ndarray]:
    """
    Iterates x ← update(x) row by row until a row moves by at most
    MIDPOINT_TOL·scale (sup norm); converged rows are frozen, so a row ends as it
    would alone. Returns the first non-finite iterate as is, None when the
    iteration has not settled after MIDPOINT_MAX_ITER sweeps.
    """
    x = start
    active = np.ones(x.shape[:-1], dtype=bool)
    for _ in range(MIDPOINT_MAX_ITER):
        nxt = update(x)
        if not np.all(np.isfinite(nxt)):
            return nxt
        moved = np.max(np.abs(nxt - x), axis=-1)
        x = np.where(active[..., None], nxt, x)
        active &= moved > MIDPOINT_TOL * scale
        if not np.any(active):
            return x
    return None


class _Stepper:
    def __init__(self, cfg: SolverConfig) -> None:
        self.cfg = cfg
        self.P = cfg.steps_per_period
        z = -cfg.nu * wavenumber_sq(cfg.trunc) * cfg.dt
        self.decay = np.exp(z)
        self.half_decay = np.exp(0.5 * z)
        self.half_dt = 0.5 * cfg.dt
        with np.errstate(invalid="ignore", divide="ignore"):
            phi1 = np.where(z == 0.0, 1.0, np.expm1(z) / np.where(z == 0.0, 1.0, z))
        self.forcing_weight = cfg.dt * phi1
        self.G = cfg.noise.matrix(cfg.trunc)
        # E‖E G ΔW‖² / dt, the energy one step injects
        self.injection_rate = BASIS_NORM_SQ * float(np.sum((self.G * self.decay) ** 2))
        self.forcing_table = cfg.forcing.grid_table(cfg.trunc, self.P)
        self.forced = not cfg.forcing.is_zero

    def forcing_at(self, n: int) -> np.ndarray:
        return self.forcing_table[n % self.P]

    def midpoint(self, c: np.ndarray, n: int = 0) -> np.ndarray:
        """m = u − (dt/2) B(Km, m) with u = E^{1/2} c, for (batched) states."""
        trunc = self.cfg.trunc
        u = self.half_decay * c
        m = _fixed_point(
            lambda x: u - self.half_dt * nonlinear_coeffs(trunc, x),
            u - self.half_dt * nonlinear_coeffs(trunc, u),
            np.max(np.abs(u), axis=-1),
        )
        if m is None:
            raise NonConvergenceError(f"Midpoint iteration did not settle at step {n}; reduce dt")
        return m

    def advance(self, c: np.ndarray, n: int, dW: Optional[np.ndarray]) -> np.ndarray:
        if self.cfg.nonlinear:
            m = self.midpoint(c, n)
            out = self.half_decay * (2.0 * m - self.half_decay * c)
        else:
            out = self.decay * c
        if self.forced:
            out = out + self.forcing_weight * self.forcing_at(n)
        if dW is not None and self.G.shape[0]:
            out = out + self.decay * (dW @ self.G)
        return out

    def linearized(self, xi: np.ndarray, m: Optional[np.ndarray]) -> np.ndarray:
        """Derivative of the step at the state whose midpoint is m, applied to xi."""
        if not self.cfg.nonlinear:
            return self.decay * xi
        trunc = self.cfg.trunc
        v = self.half_decay * xi
        dm = _fixed_point(lambda x: v + self.half_dt * bracket_coeffs(trunc, m, x), v, np.max(np.abs(v), axis=-1))
        if dm is None:
            raise NonConvergenceError("Linearised midpoint iteration did not settle; reduce dt")
        return self.half_decay * (2.0 * dm - v)

    def linearized_adjoint(self, phi: np.ndarray, m: Optional[np.ndarray]) -> np.ndarray:
        """Transpose of `linearized` at the same midpoint."""
        if not self.cfg.nonlinear:
            return self.decay * phi
        trunc = self.cfg.trunc
        v = self.half_decay * phi
        y = _fixed_point(
            lambda x: v + self.half_dt * bracket_adjoint_coeffs(trunc, m, x), v, np.max(np.abs(v), axis=-1)
        )
        if y is None:
            raise NonConvergenceError("Adjoint midpoint iteration did not settle; reduce dt")
        return self.half_decay * (2.0 * y - v)

    def midpoints(self, frames: np.ndarray) -> Optional[np.ndarray]:
        """Midpoints of a stack of stored states, None for the linear equation."""
        return self.midpoint(frames) if self.cfg.nonlinear else None


@lru_cache(maxsize=64)
def scheme_stepper(cfg: SolverConfig) -> _Stepper:
    return _Stepper(cfg)


@dataclass(frozen=True, eq=False)
class Trajectory:
    config: SolverConfig
    start_index: int
    frames: np.ndarray

    def __post_init__(self) -> None:
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.trunc.dim or frames.shape[0] < 1:
            raise ValueError(f"Frames must have shape (n ≥ 1, {self.config.trunc.dim}), got {frames.shape}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_steps(self) -> int:
        return self.frames.shape[0] - 1

    @property
    def end_index(self) -> int:
        return self.start_index + self.n_steps

    def covers(self, n0: int, n1: int) -> bool:
        return self.start_index <= n0 <= n1 <= self.end_index

    def frame(self, i: int) -> SpectralField:
        return SpectralField(self.config.trunc, self.frames[i])

    def at_index(self, n: int) -> SpectralField:
        if not self.start_index <= n <= self.end_index:
            raise ValueError(f"Time index {n} outside the trajectory [{self.start_index}, {self.end_index}]")
        return self.frame(n - self.start_index)

    def times(self) -> np.ndarray:
        return (self.start_index + np.arange(self.frames.shape[0])) * self.config.dt


def _check_noise(cfg: SolverConfig, store: Optional[WienerStore]) -> None:
    if store is not None and cfg.noise.channels and store.channels != cfg.noise.channels:
        raise ValueError(f"Store has {store.channels} channels but the noise has {cfg.noise.channels}")


def _integrate(
    c0: np.ndarray,
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    noise: Callable[[int, int], Optional[np.ndarray]],
    observe: Callable[[int, np.ndarray], None],
) -> np.ndarray:
    """
    Advance the (batched) state `c0` over n_steps; `noise(n0, n1)` returns the
    increments of indices n0 ≤ n < n1 as (..., n1 − n0, d) or None, and
    `observe(n, c)` sees every state including the initial one.
    """
    stepper = scheme_stepper(cfg)
    c = np.array(c0, dtype=np.float64)
    observe(s_index, c)
    tail_warned = False
    n = s_index
    end = s_index + n_steps
    while n < end:
        n_chunk = min(_NOISE_CHUNK, end - n)
        dW = noise(n, n + n_chunk)
        for j in range(n_chunk):
            c_next = stepper.advance(c, n, None if dW is None else dW[..., j, :])
            if not np.all(np.isfinite(c_next)):
                raise BlowUpError("Non-finite state in the time integration", last_finite_index=n)
            c = c_next
            n += 1
            observe(n, c)
        if not tail_warned and np.any(spectral_tail_fraction_coeffs(cfg.trunc, c) > SPECTRAL_TAIL_WARNING):
            log_warning(f"Outer spectral shell above {SPECTRAL_TAIL_WARNING:g} of the enstrophy at step {n}")
            tail_warned = True
    return c


def _store_noise(cfg: SolverConfig, store: Optional[WienerStore]) -> Callable[[int, int], Optional[np.ndarray]]:
    _check_noise(cfg, store)
    if store is None or not cfg.noise.channels:
        return lambda n0, n1: None
    return store.window


def step(w: SpectralField, t_index: int, cfg: SolverConfig, store: Optional[WienerStore]) -> SpectralField:
    """One scheme step from time index t_index; `store=None` drops the noise."""
    if w.trunc != cfg.trunc:
        raise ValueError("Field and config truncations differ")
    dW = _store_noise(cfg, store)(t_index, t_index + 1)
    out = scheme_stepper(cfg).advance(w.coeffs, t_index, None if dW is None else dW[0])
    if not np.all(np.isfinite(out)):
        raise BlowUpError("Non-finite state in the time integration", last_finite_index=t_index)
    return SpectralField(cfg.trunc, out)


def simulate(
    w0: SpectralField, s_index: int, n_steps: int, cfg: SolverConfig, store: Optional[WienerStore]
) -> Trajectory:
    if w0.trunc != cfg.trunc:
        raise ValueError("Initial condition and config truncations differ")
    if n_steps < 0:
        raise ValueError(f"n_steps must be non-negative, got {n_steps}")
    frames = np.empty((n_steps + 1, cfg.trunc.dim))

    def observe(n: int, c: np.ndarray) -> None:
        frames[n - s_index] = c

    _integrate(w0.coeffs, s_index, n_steps, cfg, _store_noise(cfg, store), observe)
    return Trajectory(cfg, s_index, frames)


def evolve_coeffs(
    c0: np.ndarray,
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    store: Optional[WienerStore],
    observe: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Final (batched) state only; every batch member sees the same store."""
    noise = _store_noise(cfg, store)
    return _integrate(c0, s_index, n_steps, cfg, noise, observe or (lambda n, c: None))


def evolve_ensemble_coeffs(
    c0: np.ndarray,
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    stores: Optional[Sequence[WienerStore]],
    observe: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Like `evolve_coeffs`, but batch member r is driven by stores[r]."""
    if stores is None or not cfg.noise.channels:
        noise: Callable[[int, int], Optional[np.ndarray]] = lambda n0, n1: None
    else:
        if len(stores) != c0.shape[0]:
            raise ValueError(f"Got {len(stores)} stores for {c0.shape[0]} replicas")
        for store in stores:
            _check_noise(cfg, store)
        noise = lambda n0, n1: np.stack([store.window(n0, n1) for store in stores])
    return _integrate(c0, s_index, n_steps, cfg, noise, observe or (lambda n, c: None))


def _ensemble_chunk(
    c0: np.ndarray,
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    stores: Optional[Sequence[WienerStore]],
    record_every: int,
) -> np.ndarray:
    records = []

    def observe(n: int, c: np.ndarray) -> None:
        if (n - s_index) % record_every == 0:
            records.append(c.copy())

    evolve_ensemble_coeffs(c0, s_index, n_steps, cfg, stores, observe)
    return np.stack(records, axis=0)


def simulate_ensemble(
    w0s: Union[Sequence[SpectralField], np.ndarray],
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    stores: Optional[Sequence[WienerStore]],
    record_every: int = 1,
) -> np.ndarray:
    """
    Replica r starts from w0s[r] and is driven by stores[r]. Returns the states
    at s_index + j·record_every as an array (records, replicas, dim). Replicas
    are advanced in fixed-size chunks spread over TSNS_THREADS workers, so the
    numbers do not depend on the thread count.
    """
    if record_every < 1 or n_steps % record_every:
        raise ValueError(f"record_every={record_every} must be positive and divide n_steps={n_steps}")
    c0 = np.array([w.coeffs for w in w0s]) if not isinstance(w0s, np.ndarray) else np.asarray(w0s, dtype=np.float64)
    n_rep = c0.shape[0]
    if stores is not None and len(stores) != n_rep:
        raise ValueError(f"Got {len(stores)} stores for {n_rep} replicas")

    bounds = [(lo, min(n_rep, lo + REPLICA_CHUNK)) for lo in range(0, n_rep, REPLICA_CHUNK)]
    log_progress(f"Ensemble of {n_rep} replicas over {n_steps} steps in {len(bounds)} chunk(s)")

    def run(bound: tuple[int, int]) -> np.ndarray:
        lo, hi = bound
        return _ensemble_chunk(
            c0[lo:hi], s_index, n_steps, cfg, None if stores is None else stores[lo:hi], record_every
        )

    if THREADS > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=THREADS) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return np.concatenate(parts, axis=1)


def simulate_pair_shared_noise(
    w1: SpectralField,
    w2: SpectralField,
    s_index: int,
    n_steps: int,
    cfg: SolverConfig,
    store: Optional[WienerStore],
) -> tuple[Trajectory, Trajectory, list[float]]:
    if w1.trunc != cfg.trunc or w2.trunc != cfg.trunc:
        raise ValueError("Initial conditions and config truncations differ")
    frames = np.empty((n_steps + 1, 2, cfg.trunc.dim))

    def observe(n: int, c: np.ndarray) -> None:
        frames[n - s_index] = c

    evolve_coeffs(np.stack([w1.coeffs, w2.coeffs]), s_index, n_steps, cfg, store, observe)
    errors = sobolev_norm_coeffs(cfg.trunc, frames[:, 0] - frames[:, 1], 0.0)
    return (
        Trajectory(cfg, s_index, frames[:, 0]),
        Trajectory(cfg, s_index, frames[:, 1]),
        [float(e) for e in errors],
    )


def jacobian_coeffs(traj: Trajectory, xi: np.ndarray, from_index: int, to_index: int) -> np.ndarray:
    """J_{from,to} applied to (batched) coefficient arrays along the stored frames."""
    if from_index > to_index or not traj.covers(from_index, to_index):
        raise ValueError(
            f"Window [{from_index}, {to_index}] not covered by the trajectory [{traj.start_index}, {traj.end_index}]"
        )
    stepper = scheme_stepper(traj.config)
    out = np.array(xi, dtype=np.float64)
    if from_index == to_index:
        return out
    mids = stepper.midpoints(traj.frames[from_index - traj.start_index : to_index - traj.start_index])
    for j in range(to_index - from_index):
        out = stepper.linearized(out, None if mids is None else mids[j])
    return out


def propagate_jacobian(traj: Trajectory, xi0: SpectralField, from_index: int, to_index: int) -> SpectralField:
    """Linearized flow ∂ξ = νΔξ + B̃(w, ξ) with the scheme's own exponential step."""
    if xi0.trunc != traj.config.trunc:
        raise ValueError("Perturbation and trajectory truncations differ")
    return SpectralField(xi0.trunc, jacobian_coeffs(traj, xi0.coeffs, from_index, to_index))


@dataclass(frozen=True)
class PeriodicOrbit:
    trajectory: Trajectory
    residual: float
    periods: int
    converged: bool
    max_norm: float
    norm_bound: float

    @property
    def bound_ok(self) -> bool:
        return self.max_norm <= self.norm_bound * (1 + 1e-12) or self.norm_bound == math.inf

    def at_index(self, n: int) -> SpectralField:
        """z at any time index, using periodicity."""
        return self.trajectory.frame(n % self.trajectory.config.steps_per_period)


def solve_deterministic_periodic(cfg: SolverConfig, tol: float, max_periods: int) -> PeriodicOrbit:
    """
    Noise-free run from w = 0 at index 0 until two consecutive period samples
    agree within `tol`. Non-convergence is reported on the result, not raised.
    """
    if tol <= 0 or max_periods < 1:
        raise ValueError("tol and max_periods must be positive")
    P = cfg.steps_per_period
    w = SpectralField.zeros(cfg.trunc)
    last = None
    residual = math.inf
    periods = 0
    for periods in range(1, max_periods + 1):
        # Index 0 again each period: the forcing table is P-periodic
        last = simulate(w, 0, P, cfg, None)
        w = last.frame(P)
        residual = float(sobolev_norm_coeffs(cfg.trunc, last.frames[-1] - last.frames[0], 0.0))
        if residual < tol:
            break
    log_progress(f"Periodic orbit: residual {residual:.3e} after {periods} period(s)")

    f_sup = cfg.forcing.sup_norm()
    bound = f_sup / cfg.nu if cfg.nu > 0 else math.inf
    max_norm = float(np.max(sobolev_norm_coeffs(cfg.trunc, last.frames, 0.0)))
    return PeriodicOrbit(
        trajectory=last,
        residual=residual,
        periods=periods,
        converged=residual < tol,
        max_norm=max_norm,
        norm_bound=bound,
    )


def verify_translation_identity(
    cfg: SolverConfig,
    store: WienerStore,
    w0: SpectralField,
    s_index: int,
    h_steps: int,
    n_steps: int,
) -> float:
    """
    Max mode-wise difference between the run on [s + h, s + h + n] with
    (store, f) and the run on [s, s + n] with (θ_h store, σ(h) f). Zero when the
    scheme only reads grid values of the increments and the forcing.
    """
    shifted_cfg = cfg.with_forcing(cfg.forcing.translated(h_steps, cfg.steps_per_period))
    original = simulate(w0, s_index + h_steps, n_steps, cfg, store)
    shifted = simulate(w0, s_index, n_steps, shifted_cfg, shift_wiener(store, h_steps))
    return float(np.max(np.abs(original.frames - shifted.frames)))

"""
Regime quantities of the forced, noisy flow and the experiments that probe the
laminar regime: shared-noise synchronisation and the pullback construction of
the random periodic solution.
"""

import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from common.config import THREADS
from common.utils import log_progress, log_warning
from periodic_sns.counter_rng import hash64
from periodic_sns.dynamics import SolverConfig, Trajectory, evolve_coeffs, simulate, simulate_pair_shared_noise
from periodic_sns.sns_config import (
    AUX_STREAM_SALT,
    DEFAULT_C0_SAMPLES,
    DEFAULT_C0_SEED,
    DEFAULT_C0_TRUNCATION,
    FIT_DROP_FRACTION,
    PULLBACK_ONSET_TOL,
)
from periodic_sns.spectral_core import (
    SpectralField,
    TruncationSpec,
    estimate_ladyzhenskaya_c0,
    random_field,
    sobolev_norm_coeffs,
)
from periodic_sns.wiener import WienerStore, derive_wiener_store, shift_wiener

LAMINAR = "laminar"
MIXING_ONLY = "mixing_only"
UNRESOLVED = "unresolved"

CONFIGURED = "CONFIGURED"
ESTIMATED = "ESTIMATED"

# Errors below this share of their starting value count as synchronised to round-off
_ROUNDOFF_FLOOR = 1e-12


@dataclass(frozen=True)
class RegimeReport:
    c0: float
    c0_provenance: str
    G1: float
    G2: float
    alpha: float
    delta0: float
    classification: str
    # Only meaningful for alpha = 1: sign(δ₀) agrees with sign(1/c₀ − G₂)
    equivalence_ok: Optional[bool] = None

    def to_document(self) -> dict:
        return {
            "c0": self.c0,
            "c0_provenance": self.c0_provenance,
            "G1": self.G1,
            "G2": self.G2,
            "alpha": self.alpha,
            "delta0": self.delta0,
            "classification": self.classification,
            "equivalence_ok": self.equivalence_ok,
        }


@lru_cache(maxsize=1)
def default_c0() -> float:
    """Ladyzhenskaya constant estimate used when none is configured."""
    log_progress(
        f"Estimating c0 at K={DEFAULT_C0_TRUNCATION} from {DEFAULT_C0_SAMPLES} samples (configure c0 to skip this)"
    )
    return estimate_ladyzhenskaya_c0(TruncationSpec(DEFAULT_C0_TRUNCATION), DEFAULT_C0_SAMPLES, DEFAULT_C0_SEED)


def regime_from_quantities(
    nu: float, f_sup: float, b0: float, c0: float, alpha: float = 1.0, c0_provenance: str = CONFIGURED
) -> RegimeReport:
    """
    G₁ = ‖f‖∞/ν², G₂ = sqrt(G₁² + B₀/ν³) and
    δ₀ = ν − c₀²/((2 − α)ν²)·(‖f‖∞²/(αν) + B₀). α = 0 is admitted for f ≡ 0 only.
    """
    if not nu > 0:
        raise ValueError(f"Viscosity must be positive, got {nu!r}")
    if not c0 > 0:
        raise ValueError(f"c0 must be positive, got {c0!r}")
    if f_sup < 0 or b0 < 0:
        raise ValueError("‖f‖∞ and B0 must be non-negative")
    if alpha == 0:
        if f_sup != 0:
            raise ValueError("alpha = 0 requires a zero deterministic force")
        forcing_term = 0.0
    elif 0 < alpha <= 1:
        forcing_term = f_sup**2 / (alpha * nu)
    else:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")

    G1 = f_sup / nu**2
    G2 = math.sqrt(G1**2 + b0 / nu**3)
    delta0 = nu - c0**2 / ((2.0 - alpha) * nu**2) * (forcing_term + b0)

    if G2 < 1.0 / c0:
        classification = LAMINAR
    elif G1 < 1.0 / c0:
        classification = MIXING_ONLY
    else:
        classification = UNRESOLVED

    equivalence_ok = None
    if alpha == 1:
        equivalence_ok = (delta0 > 0) == (G2 < 1.0 / c0)
    return RegimeReport(c0, c0_provenance, G1, G2, float(alpha), delta0, classification, equivalence_ok)


def regime_report(cfg: SolverConfig, c0: Optional[float] = None, alpha: float = 1.0) -> RegimeReport:
    provenance = CONFIGURED
    if c0 is None:
        c0 = default_c0()
        provenance = ESTIMATED
    return regime_from_quantities(cfg.nu, cfg.forcing.sup_norm(), cfg.B0, c0, alpha, provenance)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    points: int
    roundoff_cutoff: bool = False
    degenerate: bool = False


def fit_log_error_slope(times: np.ndarray, errors: np.ndarray, fit_start: float) -> SlopeFit:
    """
    Least-squares slope of log‖e‖² against time on [fit_start, end]. A series
    that reaches the round-off floor is fitted on its prefix only.
    """
    errors = np.asarray(errors, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if errors[0] <= 0:
        return SlopeFit(math.nan, 0, degenerate=True)
    floor = _ROUNDOFF_FLOOR * errors[0]
    below = np.nonzero(errors <= floor)[0]
    cutoff = bool(below.size)
    end = int(below[0]) if cutoff else len(errors)
    window = np.arange(end)
    window = window[times[window] >= fit_start]
    if window.size < 2:
        if cutoff:
            # Synchronised before the window opens: fall back to the whole prefix
            window = np.arange(end)
        if window.size < 2:
            return SlopeFit(math.nan, int(window.size), cutoff, degenerate=True)
    slope, _ = np.polyfit(times[window], 2.0 * np.log(errors[window]), 1)
    return SlopeFit(float(slope), int(window.size), cutoff)


@dataclass(frozen=True)
class SyncResult:
    seeds: tuple[int, ...]
    fits: tuple[SlopeFit, ...]
    median_slope: float
    delta0: float
    classification: str

    @property
    def degenerate(self) -> bool:
        return all(f.degenerate for f in self.fits)

    @property
    def threshold(self) -> float:
        return -0.5 * self.delta0

    @property
    def contract_ok(self) -> bool:
        # Only the laminar regime carries a claim
        if self.classification != LAMINAR:
            return True
        return not math.isnan(self.median_slope) and self.median_slope <= self.threshold

    def to_document(self) -> dict:
        return {
            "median_slope": self.median_slope,
            "threshold": self.threshold,
            "delta0": self.delta0,
            "classification": self.classification,
            "degenerate": self.degenerate,
            "per_seed": [
                {"seed": s, "slope": f.slope, "points": f.points, "roundoff_cutoff": f.roundoff_cutoff}
                for s, f in zip(self.seeds, self.fits)
            ],
        }


def synchronization_experiment(
    cfg: SolverConfig,
    c0: Optional[float],
    seeds: Sequence[int],
    w1: SpectralField,
    w2: SpectralField,
    horizon: float,
    fit_start: Optional[float] = None,
    s_index: int = 0,
) -> SyncResult:
    """
    Two solutions from w1 and w2 driven by the same noise path, per seed; the
    slope of log‖w1(t) − w2(t)‖² is fitted on [fit_start, horizon] and the
    median over the seeds reported.
    """
    if not seeds:
        raise ValueError("At least one seed is required")
    report = regime_report(cfg, c0)
    if report.delta0 <= 0:
        log_warning(f"delta0 = {report.delta0:.4g} is not positive; no contraction is expected")
    n_steps = int(round(horizon / cfg.dt))
    if n_steps < 1:
        raise ValueError(f"Horizon {horizon} is shorter than one step")
    if fit_start is None:
        fit_start = FIT_DROP_FRACTION * horizon
    times = np.arange(n_steps + 1) * cfg.dt

    def run(seed: int) -> SlopeFit:
        store = None
        if cfg.noise.channels:
            store = derive_wiener_store(seed, cfg.dt, cfg.noise.channels, s_index, s_index + n_steps)
        _, _, errors = simulate_pair_shared_noise(w1, w2, s_index, n_steps, cfg, store)
        return fit_log_error_slope(times, np.array(errors), fit_start)

    log_progress(f"Synchronisation over {len(seeds)} seed(s), horizon {horizon:g}")
    if THREADS > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=THREADS) as pool:
            fits = tuple(pool.map(run, seeds))
    else:
        fits = tuple(run(s) for s in seeds)
    slopes = [f.slope for f in fits if not f.degenerate]
    median = statistics.median(slopes) if slopes else math.nan
    return SyncResult(tuple(int(s) for s in seeds), fits, median, report.delta0, report.classification)


@dataclass(frozen=True, eq=False)
class PullbackResult:
    w_star: Trajectory
    # cauchy_table[n − 1] = ‖w_n − w_{n+1}‖ at the probe time, n = 1 .. n_max − 1
    cauchy_table: list[float]
    fitted_ratio: float
    onset_index: Optional[int]
    failed: bool
    expected_ratio: Optional[float] = None
    iterates: np.ndarray = field(default=None, repr=False)

    @property
    def contract_ok(self) -> bool:
        if self.failed:
            return False
        if self.expected_ratio is None or math.isnan(self.fitted_ratio):
            return True
        return self.fitted_ratio <= self.expected_ratio

    def to_document(self) -> dict:
        return {
            "n_max": len(self.cauchy_table) + 1,
            "fitted_ratio": self.fitted_ratio,
            "expected_ratio": self.expected_ratio,
            "onset_index": self.onset_index,
            "failed": self.failed,
            "last_increment": self.cauchy_table[-1] if self.cauchy_table else None,
        }


def _fit_geometric_ratio(table: np.ndarray, scale: float) -> float:
    n = len(table)
    start = int(math.floor(FIT_DROP_FRACTION * n))
    idx = np.arange(start, n)
    idx = idx[table[idx] > _ROUNDOFF_FLOOR * max(scale, 1.0)]
    if idx.size < 3:
        return math.nan
    slope, _ = np.polyfit(idx.astype(np.float64), np.log(table[idx]), 1)
    return float(math.exp(slope))


def pullback_iterates(cfg: SolverConfig, store: Optional[WienerStore], n_max: int, t_probe_index: int) -> np.ndarray:
    """
    w(t_probe; t_probe − nT, 0) for n = 1..n_max as rows n − 1, all on the same
    noise path. Member n joins the batch, at zero, when its start time is reached.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be positive, got {n_max}")
    P = cfg.steps_per_period
    start = t_probe_index - n_max * P
    if store is not None and cfg.noise.channels and not store.covers(start, t_probe_index):
        raise ValueError(
            f"Store range [{store.n_min}, {store.n_max}) does not cover the pullback window [{start}, {t_probe_index})"
        )
    state = np.zeros((n_max, cfg.trunc.dim))
    for j in range(n_max, 0, -1):
        state[j - 1 :] = evolve_coeffs(state[j - 1 :], t_probe_index - j * P, P, cfg, store)
    return state


def pullback_periodic_solution(
    cfg: SolverConfig,
    store: Optional[WienerStore],
    n_max: int,
    t_probe_index: int,
    delta0: Optional[float] = None,
) -> PullbackResult:
    """
    Pullback iterates at t_probe, their Cauchy increments, and the last iterate
    continued over one period [t_probe, t_probe + T] as the numerical w*.
    With δ₀ given, the increments are expected to shrink at least like e^{−δ₀T/4}.
    """
    iterates = pullback_iterates(cfg, store, n_max, t_probe_index)
    table = sobolev_norm_coeffs(cfg.trunc, iterates[:-1] - iterates[1:], 0.0)
    scale = float(sobolev_norm_coeffs(cfg.trunc, iterates[-1], 0.0))
    ratio = _fit_geometric_ratio(table, scale)

    onset = None
    below = np.nonzero(table <= PULLBACK_ONSET_TOL)[0]
    if below.size:
        onset = int(below[0]) + 1

    failed = not math.isnan(ratio) and ratio >= 1.0
    if failed:
        log_warning(f"Pullback increments do not decrease (fitted ratio {ratio:.4g})")
    expected = math.exp(-delta0 * cfg.period / 4.0) if delta0 is not None and delta0 > 0 else None

    w_star = simulate(SpectralField(cfg.trunc, iterates[-1]), t_probe_index, cfg.steps_per_period, cfg, store)
    return PullbackResult(w_star, [float(x) for x in table], ratio, onset, failed, expected, iterates)


@dataclass(frozen=True)
class RandomPeriodicityResult:
    periodicity_residual: float
    forward_attraction: SlopeFit
    delta0: Optional[float] = None

    @property
    def forward_attraction_slope(self) -> float:
        return self.forward_attraction.slope

    @property
    def contract_ok(self) -> bool:
        if self.periodicity_residual > 1e-6:
            return False
        if self.delta0 is None or self.delta0 <= 0:
            return True
        return self.forward_attraction_slope <= -0.5 * self.delta0

    def to_document(self) -> dict:
        return {
            "periodicity_residual": self.periodicity_residual,
            "forward_attraction_slope": self.forward_attraction_slope,
            "forward_attraction_points": self.forward_attraction.points,
            "delta0": self.delta0,
        }


def random_periodicity_check(
    cfg: SolverConfig,
    store: Optional[WienerStore],
    n_max: int,
    t_index: int,
    attraction_periods: int,
    perturbation: float = 1.0,
    delta0: Optional[float] = None,
) -> RandomPeriodicityResult:
    """
    Compares w*(t + T, ω) with w*(t, θ_T ω), both from the same pullback recipe,
    then measures how fast w* + r·u (‖u‖ = 1) falls back onto w* under the same
    noise. The store must cover [t + T − n_max·T, t + (2 + attraction_periods)T).

    Both constructions run the same arithmetic on the same increments, so the
    residual is exactly 0.0. It checks the noise shift and the forcing index,
    not the Cauchy tail of the pullback.
    """
    P = cfg.steps_per_period
    later = pullback_iterates(cfg, store, n_max, t_index + P)[-1]
    shifted_store = None if store is None else shift_wiener(store, P)
    earlier = pullback_iterates(cfg, shifted_store, n_max, t_index)[-1]
    residual = float(sobolev_norm_coeffs(cfg.trunc, later - earlier, 0.0))

    seed = hash64(store.master_seed if store is not None else 0, AUX_STREAM_SALT)
    direction = random_field(cfg.trunc, seed, norm=1.0)
    w_star = SpectralField(cfg.trunc, later)
    n_steps = attraction_periods * P
    perturbed = w_star + direction * perturbation
    _, _, errors = simulate_pair_shared_noise(w_star, perturbed, t_index + P, n_steps, cfg, store)
    times = np.arange(n_steps + 1) * cfg.dt
    fit = fit_log_error_slope(times, np.array(errors), FIT_DROP_FRACTION * n_steps * cfg.dt)
    return RandomPeriodicityResult(residual, fit, delta0)

"""
Lyapunov-weighted metrics on the truncated phase space and the ergodic
experiments built on them: contraction of ensembles, laws of large numbers,
the CLT and weak irreducibility.

The path metric ρ_r(w1, w2) = inf over paths of ∫ V^r(path)|path'| is bracketed
rather than computed: the L² distance bounds it from below (V ≥ 1) and the
straight segment from above.
"""

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from common.utils import ConfigError, NonConvergenceError, UnsupportedSizeError, log_progress, log_warning
from periodic_sns.counter_rng import hash64
from periodic_sns.dynamics import (
    PeriodicOrbit,
    SolverConfig,
    evolve_coeffs,
    evolve_ensemble_coeffs,
    scheme_stepper,
    simulate_ensemble,
    solve_deterministic_periodic,
)
from periodic_sns.sns_config import (
    AUX_STREAM_SALT,
    BASIS_NORM_SQ,
    CLT_CENTERING_BURN_IN,
    CLT_CENTERING_PERIODS,
    DEFAULT_ETA_FRACTION,
    DEFAULT_QUAD_NODES,
    ENERGY_ROUNDOFF,
    REPLICA_CHUNK,
    WASSERSTEIN_EXACT_CAP,
)
from periodic_sns.spectral_core import (
    ModeIndex,
    ModeLike,
    SpectralField,
    TruncationSpec,
    as_mode,
    random_field,
    sobolev_norm_coeffs,
)
from periodic_sns.wiener import WienerStore, derive_wiener_store, replica_store

Ground = Literal["lower", "upper"]

# exp() overflows above this argument
_EXP_LIMIT = 709.0


@dataclass(frozen=True)
class MetricConfig:
    eta: float
    r: float = 1.0
    quad_nodes: int = DEFAULT_QUAD_NODES

    def __post_init__(self) -> None:
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"eta must be finite and non-negative, got {self.eta!r}")
        if not 0 < self.r <= 1:
            raise ValueError(f"r must lie in (0, 1], got {self.r!r}")
        if self.quad_nodes < 1:
            raise ValueError(f"quad_nodes must be positive, got {self.quad_nodes}")

    @staticmethod
    def eta_bound(cfg: SolverConfig) -> float:
        """Largest admissible η for cfg, 0.5·sqrt(ν/(4B₀)); unbounded without noise."""
        if cfg.B0 == 0:
            return math.inf
        return 0.5 * math.sqrt(cfg.nu / (4.0 * cfg.B0))

    @classmethod
    def default_for(cls, cfg: SolverConfig, r: float = 1.0) -> "MetricConfig":
        # Noise-free configs have no bound; fall back to the B₀ = 1 value
        b0 = cfg.B0 if cfg.B0 > 0 else 1.0
        return cls(eta=DEFAULT_ETA_FRACTION * math.sqrt(cfg.nu / (4.0 * b0)), r=r)

    def check_against(self, cfg: SolverConfig) -> None:
        bound = self.eta_bound(cfg)
        if self.eta > bound:
            raise ConfigError(f"eta={self.eta:g} exceeds the admissible bound {bound:g} for this configuration")


@dataclass(frozen=True)
class Observable:
    """
    Test function ψ on the truncated phase space. `clip` bounds any kind to
    [−clip, clip]; `clipped_enstrophy` is the enstrophy with a clip level.
    """

    name: str
    kind: Literal["mode_coefficient", "enstrophy", "clipped_enstrophy", "custom_low_mode_polynomial"]
    mode: Optional[ModeIndex] = None
    # Σ c · Π coeff(mode)^power
    polynomial: tuple[tuple[float, tuple[tuple[ModeIndex, int], ...]], ...] = ()
    clip: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind == "mode_coefficient":
            if self.mode is None:
                raise ValueError("A mode_coefficient observable needs a mode")
            object.__setattr__(self, "mode", as_mode(self.mode))
        elif self.kind == "clipped_enstrophy":
            if self.clip is None:
                raise ValueError("A clipped_enstrophy observable needs a clip level")
        elif self.kind == "custom_low_mode_polynomial":
            if not self.polynomial:
                raise ValueError("A polynomial observable needs at least one term")
            terms = tuple(
                (float(c), tuple((as_mode(m), int(p)) for m, p in monomial)) for c, monomial in self.polynomial
            )
            for _, monomial in terms:
                for _, p in monomial:
                    if p < 0:
                        raise ValueError(f"Polynomial powers must be non-negative, got {p}")
            object.__setattr__(self, "polynomial", terms)
        elif self.kind != "enstrophy":
            raise ValueError(f"Unknown observable kind {self.kind!r}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError(f"Clip level must be positive, got {self.clip!r}")

    @classmethod
    def mode_coefficient(cls, mode: ModeLike) -> "Observable":
        mode = as_mode(mode)
        return cls(f"coeff{mode}", "mode_coefficient", mode=mode)

    @classmethod
    def enstrophy(cls) -> "Observable":
        return cls("enstrophy", "enstrophy")

    @classmethod
    def clipped_enstrophy(cls, level: float) -> "Observable":
        return cls(f"enstrophy_clip{level:g}", "clipped_enstrophy", clip=float(level))

    @classmethod
    def low_mode_polynomial(cls, name: str, terms: Sequence[tuple[float, Sequence[tuple[ModeLike, int]]]]):
        return cls(name, "custom_low_mode_polynomial", polynomial=tuple((c, tuple(m)) for c, m in terms))

    @classmethod
    def parse(cls, text: str) -> "Observable":
        """`enstrophy`, `clipped_enstrophy:L` or `mode:k1,k2`, optionally followed by `@L` to clip."""
        body, _, clip = text.strip().partition("@")
        kind, _, arg = body.partition(":")
        try:
            if kind == "enstrophy" and not arg:
                psi = cls.enstrophy()
            elif kind == "clipped_enstrophy" and arg:
                psi = cls.clipped_enstrophy(float(arg))
            elif kind == "mode" and arg:
                psi = cls.mode_coefficient(ModeIndex.parse(arg))
            else:
                raise ValueError(f"Unknown observable {text!r}")
            return psi.clipped(float(clip)) if clip else psi
        except ValueError as e:
            raise ValueError(f"Cannot parse observable {text!r}: {e}") from e

    def clipped(self, level: float) -> "Observable":
        """ψ_L = max(−L, min(ψ, L))."""
        return Observable(f"{self.name}_clip{level:g}", self.kind, self.mode, self.polynomial, float(level))

    @property
    def bounded(self) -> bool:
        return self.clip is not None

    def evaluate(self, trunc: TruncationSpec, c: np.ndarray) -> np.ndarray:
        """ψ over the leading axes of a (batched) coefficient array."""
        c = np.asarray(c, dtype=np.float64)
        if self.kind == "mode_coefficient":
            values = c[..., trunc.position(self.mode)]
        elif self.kind in ("enstrophy", "clipped_enstrophy"):
            values = BASIS_NORM_SQ * np.sum(c * c, axis=-1)
        else:
            values = np.zeros(c.shape[:-1])
            for coeff, monomial in self.polynomial:
                term = np.full(c.shape[:-1], coeff)
                for mode, power in monomial:
                    term = term * c[..., trunc.position(mode)] ** power
                values = values + term
        if self.clip is not None:
            values = np.clip(values, -self.clip, self.clip)
        return np.asarray(values, dtype=np.float64)

    def __call__(self, w: SpectralField) -> float:
        return float(self.evaluate(w.trunc, w.coeffs))


@dataclass(frozen=True, eq=False)
class EnsembleSnapshot:
    fields: tuple[SpectralField, ...]
    time_index: int = 0
    provenance: Optional[str] = None

    def __post_init__(self) -> None:
        fields = tuple(self.fields)
        if not fields:
            raise ValueError("An ensemble snapshot needs at least one field")
        trunc = fields[0].trunc
        if any(f.trunc != trunc for f in fields):
            raise ValueError("All fields of a snapshot must share one truncation")
        object.__setattr__(self, "fields", fields)

    @classmethod
    def from_coeffs(
        cls, trunc: TruncationSpec, coeffs: np.ndarray, time_index: int = 0, provenance: Optional[str] = None
    ) -> "EnsembleSnapshot":
        return cls(tuple(SpectralField(trunc, row) for row in coeffs), time_index, provenance)

    @property
    def trunc(self) -> TruncationSpec:
        return self.fields[0].trunc

    @property
    def coeffs(self) -> np.ndarray:
        return np.stack([f.coeffs for f in self.fields])

    def __len__(self) -> int:
        return len(self.fields)


def lyapunov_V(w: SpectralField, eta: float) -> float:
    """V(w) = exp(η‖w‖²); returns +inf when the exponent overflows."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta!r}")
    exponent = eta * float(sobolev_norm_coeffs(w.trunc, w.coeffs, 0.0)) ** 2
    if exponent > _EXP_LIMIT:
        log_warning(f"Lyapunov weight overflow: η‖w‖² = {exponent:.3g}")
        return math.inf
    return math.exp(exponent)


def _segment_weight(start_sq: np.ndarray, cross: np.ndarray, diff_sq: np.ndarray, m: MetricConfig) -> np.ndarray:
    """∫₀¹ V^r(a + τ(b − a)) dτ by Gauss–Legendre from ‖a‖², ⟨a, b − a⟩ and ‖b − a‖²."""
    x, wts = np.polynomial.legendre.leggauss(m.quad_nodes)
    tau = 0.5 * (x + 1.0)
    path_sq = start_sq[..., None] + 2.0 * tau * cross[..., None] + tau**2 * diff_sq[..., None]
    exponent = m.r * m.eta * np.maximum(path_sq, 0.0)
    with np.errstate(over="ignore"):
        return 0.5 * np.sum(wts * np.exp(exponent), axis=-1)


def _rho_matrix(trunc: TruncationSpec, a: np.ndarray, b: np.ndarray, m: MetricConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ground costs (lower, upper) between every a_i and b_j."""
    lower = np.empty((a.shape[0], b.shape[0]))
    upper = np.empty_like(lower)
    for i, row in enumerate(a):
        diff = b - row
        diff_sq = BASIS_NORM_SQ * np.sum(diff * diff, axis=-1)
        cross = BASIS_NORM_SQ * (diff @ row)
        start_sq = np.full_like(diff_sq, BASIS_NORM_SQ * float(row @ row))
        dist = np.sqrt(diff_sq)
        lower[i] = dist
        upper[i] = dist * _segment_weight(start_sq, cross, diff_sq, m)
    return lower, upper


def rho_bounds(w1: SpectralField, w2: SpectralField, m: MetricConfig) -> tuple[float, float]:
    w1._check_same(w2)  # pylint: disable=protected-access
    lower, upper = _rho_matrix(w1.trunc, w1.coeffs[None, :], w2.coeffs[None, :], m)
    return float(lower[0, 0]), float(upper[0, 0])


def _check_sizes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"Ensembles must have equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > WASSERSTEIN_EXACT_CAP:
        raise UnsupportedSizeError(
            f"Exact assignment is capped at {WASSERSTEIN_EXACT_CAP} members per ensemble, got {a.shape[0]}"
        )


def _assignment_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def wasserstein_coeffs(trunc: TruncationSpec, a: np.ndarray, b: np.ndarray, m: MetricConfig, ground: Ground) -> float:
    _check_sizes(a, b)
    if ground not in ("lower", "upper"):
        raise ValueError(f"Unknown ground cost {ground!r}")
    lower, upper = _rho_matrix(trunc, a, b, m)
    return _assignment_cost(lower if ground == "lower" else upper)


def _wasserstein_pair(trunc: TruncationSpec, a: np.ndarray, b: np.ndarray, m: MetricConfig) -> tuple[float, float]:
    _check_sizes(a, b)
    lower, upper = _rho_matrix(trunc, a, b, m)
    return _assignment_cost(lower), _assignment_cost(upper)


def empirical_wasserstein(
    a: EnsembleSnapshot, b: EnsembleSnapshot, m: MetricConfig, ground: Ground = "lower"
) -> float:
    """W₁ between the empirical measures of two equal-size ensembles, by exact assignment."""
    if a.trunc != b.trunc:
        raise ValueError("Ensembles must share one truncation")
    return wasserstein_coeffs(a.trunc, a.coeffs, b.coeffs, m, ground)


def replica_stores(
    cfg: SolverConfig, master_seed: int, first: int, count: int, n0: int, n1: int
) -> Optional[list[WienerStore]]:
    """Stores of replicas first..first+count−1, or None for noise-free configs."""
    if not cfg.noise.channels:
        return None
    return [replica_store(master_seed, first + r, cfg.dt, cfg.noise.channels, n0, n1) for r in range(count)]


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if len(x) < 2:
        return math.nan, math.nan
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


@dataclass(frozen=True)
class MixingResult:
    # (period_index, lower_dist, upper_dist)
    decay_table: list[tuple[int, float, float]]
    # Same-law resampling floor, same columns
    floor_table: list[tuple[int, float, float]]
    gamma_hat: float
    intercept: float

    @property
    def decay_ratio(self) -> float:
        first = self.decay_table[0][2]
        return self.decay_table[-1][2] / first if first > 0 else math.nan

    @property
    def contract_ok(self) -> bool:
        return self.gamma_hat > 0

    def to_document(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat,
            "intercept": self.intercept,
            "decay_ratio": self.decay_ratio,
            "final_floor_upper": self.floor_table[-1][2],
        }


def mixing_decay_experiment(
    w1: SpectralField,
    w2: SpectralField,
    cfg: SolverConfig,
    master_seed: int,
    replicas: int,
    n_periods: int,
    m: MetricConfig,
    s_index: int = 0,
) -> MixingResult:
    """
    Evolves ensembles from δ_{w1} (replicas 0..R−1) and δ_{w2} (replicas R..2R−1)
    and a second δ_{w2} ensemble (2R..3R−1) giving the sampling floor. The rate
    γ̂ is a least-squares fit of log upper-distance against time.
    """
    if replicas < 1 or replicas > WASSERSTEIN_EXACT_CAP:
        raise UnsupportedSizeError(f"Replica count must lie in [1, {WASSERSTEIN_EXACT_CAP}], got {replicas}")
    if n_periods < 1:
        raise ValueError(f"n_periods must be positive, got {n_periods}")
    m.check_against(cfg)
    P = cfg.steps_per_period
    n_steps = n_periods * P
    n0, n1 = s_index, s_index + n_steps

    def run(w: SpectralField, first: int) -> np.ndarray:
        c0 = np.repeat(w.coeffs[None, :], replicas, axis=0)
        stores = replica_stores(cfg, master_seed, first, replicas, n0, n1)
        return simulate_ensemble(c0, s_index, n_steps, cfg, stores, record_every=P)

    log_progress(f"Mixing experiment: {replicas} replicas per ensemble, {n_periods} periods")
    states_a = run(w1, 0)
    states_b = run(w2, replicas)
    states_c = run(w2, 2 * replicas)

    decay, floor = [], []
    for k in range(n_periods + 1):
        decay.append((k, *_wasserstein_pair(cfg.trunc, states_a[k], states_b[k], m)))
        floor.append((k, *_wasserstein_pair(cfg.trunc, states_c[k], states_b[k], m)))

    times = np.array([k * cfg.period for k, _, d in decay if d > 0])
    logs = np.array([math.log(d) for _, _, d in decay if d > 0])
    slope, intercept = _fit_line(times, logs)
    return MixingResult(decay, floor, -slope, intercept)


@dataclass(frozen=True)
class WllnResult:
    mode: str
    average: float
    # Running averages: at each dt step (continuous) or after each period sample (chain)
    running: np.ndarray

    def to_document(self) -> dict:
        return {"mode": self.mode, "average": self.average, "samples": int(self.running.shape[0])}


def _single_store(cfg: SolverConfig, seed: int, n0: int, n1: int) -> Optional[WienerStore]:
    if not cfg.noise.channels:
        return None
    return derive_wiener_store(seed, cfg.dt, cfg.noise.channels, n0, n1)


def wlln_estimate(
    w0: SpectralField,
    cfg: SolverConfig,
    seed: int,
    psi: Observable,
    horizon_periods: int,
    mode: Literal["continuous", "periodic_chain"] = "continuous",
    s_index: int = 0,
) -> WllnResult:
    """
    Time average of ψ along one trajectory started at time index s_index.

    continuous: (1/t)∫ψ(w_r)dr by the trapezoid rule on the dt grid,
    periodic_chain: (1/N)Σ_{k<N} ψ(w at s + kT).
    """
    if horizon_periods < 1:
        raise ValueError(f"horizon_periods must be positive, got {horizon_periods}")
    P = cfg.steps_per_period
    trunc = cfg.trunc

    if mode == "periodic_chain":
        n_steps = (horizon_periods - 1) * P
        samples = []

        def observe_chain(n: int, c: np.ndarray) -> None:
            if (n - s_index) % P == 0:
                samples.append(float(psi.evaluate(trunc, c)))

        store = _single_store(cfg, seed, s_index, s_index + n_steps)
        evolve_coeffs(w0.coeffs, s_index, n_steps, cfg, store, observe_chain)
        values = np.array(samples)
        running = np.cumsum(values) / np.arange(1, len(values) + 1)
        return WllnResult(mode, float(running[-1]), running)

    if mode != "continuous":
        raise ValueError(f"Unknown averaging mode {mode!r}")
    n_steps = horizon_periods * P
    values = np.empty(n_steps + 1)

    def observe(n: int, c: np.ndarray) -> None:
        values[n - s_index] = float(psi.evaluate(trunc, c))

    store = _single_store(cfg, seed, s_index, s_index + n_steps)
    evolve_coeffs(w0.coeffs, s_index, n_steps, cfg, store, observe)
    integral = np.cumsum(0.5 * cfg.dt * (values[1:] + values[:-1]))
    running = integral / (cfg.dt * np.arange(1, n_steps + 1))
    return WllnResult(mode, float(running[-1]), running)


def batch_means_variance(series: Sequence[float], n_batches: Optional[int] = None) -> float:
    """
    Long-run variance σ² = lim n·Var(mean) of a stationary series by
    non-overlapping batch means; default batch size ⌊√n⌋.
    """
    y = np.asarray(series, dtype=np.float64)
    n = y.shape[0]
    if n_batches is None:
        size = int(math.floor(math.sqrt(n)))
        n_batches = n // size if size else 0
    else:
        size = n // n_batches if n_batches else 0
    if n_batches < 2 or size < 1:
        raise ValueError(f"Need at least two non-empty batches, got a series of length {n}")
    means = y[: n_batches * size].reshape(n_batches, size).mean(axis=1)
    return float(size * np.sum((means - means.mean()) ** 2) / (n_batches - 1))


@dataclass(frozen=True)
class CltResult:
    sigma2_hat: float
    ks_statistic: float
    samples: np.ndarray
    centering_mean: float
    batch_means_sigma2: float
    degenerate: bool

    @property
    def critical_value(self) -> float:
        return 1.36 / math.sqrt(len(self.samples))

    @property
    def contract_ok(self) -> bool:
        return not self.degenerate and self.ks_statistic <= self.critical_value

    def to_document(self) -> dict:
        return {
            "sigma2_hat": self.sigma2_hat,
            "ks_statistic": self.ks_statistic,
            "ks_critical_5pct": self.critical_value,
            "centering_mean": self.centering_mean,
            "batch_means_sigma2": self.batch_means_sigma2,
            "degenerate": self.degenerate,
            "replicas": int(len(self.samples)),
        }


def _centering_run(w0: SpectralField, cfg: SolverConfig, master_seed: int, psi: Observable, s_index: int):
    P = cfg.steps_per_period
    n_steps = (CLT_CENTERING_BURN_IN + CLT_CENTERING_PERIODS - 1) * P
    values = []

    def observe(n: int, c: np.ndarray) -> None:
        k = (n - s_index) // P
        if (n - s_index) % P == 0 and k >= CLT_CENTERING_BURN_IN:
            values.append(float(psi.evaluate(cfg.trunc, c)))

    store = _single_store(cfg, hash64(master_seed, AUX_STREAM_SALT), s_index, s_index + n_steps)
    evolve_coeffs(w0.coeffs, s_index, n_steps, cfg, store, observe)
    return np.array(values)


def clt_experiment(
    w0: SpectralField,
    cfg: SolverConfig,
    master_seed: int,
    psi: Observable,
    N: int,
    M_replicas: int,
    burn_in_periods: int,
    s_index: int = 0,
) -> CltResult:
    """
    Samples of N^{-1/2} Σ_{k<N} (ψ − μ̂)(w at s + (burn_in + k)T) over M
    independent replicas, compared to Normal(0, σ̂²) by the Kolmogorov–Smirnov
    statistic. μ̂ pools one long independent run with the replicas' own period
    samples; the long run alone would shift the samples by about √(N/512)
    standard deviations.
    """
    if N < 1 or M_replicas < 1 or burn_in_periods < 0:
        raise ValueError("N and M_replicas must be positive and burn_in_periods non-negative")
    P = cfg.steps_per_period
    chain = _centering_run(w0, cfg, master_seed, psi, s_index)
    try:
        bm_sigma2 = batch_means_variance(chain)
    except ValueError:
        bm_sigma2 = math.nan

    n_steps = (burn_in_periods + N - 1) * P
    sums = np.zeros(M_replicas)
    for lo in range(0, M_replicas, REPLICA_CHUNK):
        hi = min(M_replicas, lo + REPLICA_CHUNK)
        c0 = np.repeat(w0.coeffs[None, :], hi - lo, axis=0)
        stores = replica_stores(cfg, master_seed, lo, hi - lo, s_index, s_index + n_steps)
        acc = np.zeros(hi - lo)

        def observe(n: int, c: np.ndarray, acc=acc) -> None:
            k = (n - s_index) // P
            if (n - s_index) % P == 0 and k >= burn_in_periods:
                acc += psi.evaluate(cfg.trunc, c)

        evolve_ensemble_coeffs(c0, s_index, n_steps, cfg, stores, observe)
        sums[lo:hi] = acc
    mu_hat = float((np.sum(chain) + np.sum(sums)) / (len(chain) + M_replicas * N))
    samples = (sums - N * mu_hat) / math.sqrt(N)

    sigma2 = float(np.var(samples, ddof=1)) if M_replicas > 1 else 0.0
    scale = max(1.0, mu_hat * mu_hat)
    degenerate = not sigma2 > 1e-20 * scale
    if degenerate:
        log_warning(f"Degenerate CLT variance {sigma2:.3g} for observable {psi.name}")
        ks = math.nan
    else:
        ks = float(stats.kstest(samples, "norm", args=(0.0, math.sqrt(sigma2))).statistic)
    return CltResult(sigma2, ks, samples, mu_hat, bm_sigma2, degenerate)


@dataclass(frozen=True)
class IrreducibilityResult:
    hit_fraction: float
    distances: np.ndarray
    target_norm: float

    @property
    def contract_ok(self) -> bool:
        return self.hit_fraction > 0


def sphere_initial_conditions(trunc: TruncationSpec, radius: float, master_seed: int, count: int) -> np.ndarray:
    """Uniform directions on ‖w‖ = radius from normalised Gaussian coefficient vectors."""
    seed = hash64(master_seed, AUX_STREAM_SALT)
    return np.stack([random_field(trunc, seed, stream=r, norm=radius).coeffs for r in range(count)])


def irreducibility_probe(
    radius: float,
    target_tol: float,
    cfg: SolverConfig,
    master_seed: int,
    replicas: int,
    n_periods: int,
    s_index: int = 0,
    orbit: Optional[PeriodicOrbit] = None,
    orbit_tol: float = 1e-10,
    orbit_max_periods: int = 2000,
) -> IrreducibilityResult:
    """Fraction of replicas started on the sphere of radius R that end within σ of z(s)."""
    if radius <= 0 or target_tol <= 0:
        raise ValueError("radius and target_tol must be positive")
    if orbit is None:
        orbit = solve_deterministic_periodic(cfg.without_noise(), orbit_tol, orbit_max_periods)
    if not orbit.converged:
        raise NonConvergenceError(
            f"Deterministic periodic solution did not converge (residual {orbit.residual:.3e} after {orbit.periods})"
        )
    target = orbit.at_index(s_index).coeffs

    P = cfg.steps_per_period
    n_steps = n_periods * P
    c0 = sphere_initial_conditions(cfg.trunc, radius, master_seed, replicas)
    stores = replica_stores(cfg, master_seed, 0, replicas, s_index, s_index + n_steps)
    final = simulate_ensemble(c0, s_index, n_steps, cfg, stores, record_every=n_steps or 1)[-1]
    distances = sobolev_norm_coeffs(cfg.trunc, final - target, 0.0)
    hit = float(np.mean(distances <= target_tol))
    return IrreducibilityResult(hit, distances, float(sobolev_norm_coeffs(cfg.trunc, target, 0.0)))


@dataclass(frozen=True)
class EnergyBalanceResult:
    residual_mean: float
    residual_stderr: float
    mean_final_enstrophy: float
    # Summation round-off the residual may carry on top of its sampling error
    roundoff: float = 0.0
    # Mean of Σ (scheme increment − dt · continuous rate), an O(dt) diagnostic
    continuum_gap: float = 0.0

    @property
    def contract_ok(self) -> bool:
        return abs(self.residual_mean) <= 3.0 * self.residual_stderr + self.roundoff


def energy_balance_experiment(
    w0: SpectralField, cfg: SolverConfig, master_seed: int, replicas: int, n_steps: int, s_index: int = 0
) -> EnergyBalanceResult:
    """
    Monte-Carlo check of the Itô energy identity

        ‖w_t‖² = ‖w_s‖² + ∫ (−2ν‖w‖₁² + 2⟨f, w⟩ + B₀) dr + martingale,

    in the form the scheme satisfies exactly: each step is credited with its
    conditional mean increment ‖A(w_n)‖² − ‖w_n‖² + dt·q, where A is the
    noise-free step and q the energy rate the noise injects. The residual is
    then a martingale with mean zero. The gap to the left-endpoint sum of the
    continuous rate is reported next to it.
    """
    if replicas < 1 or n_steps < 1:
        raise ValueError("replicas and n_steps must be positive")
    trunc = cfg.trunc
    stepper = scheme_stepper(cfg)
    table = stepper.forcing_table
    P = stepper.P
    end = s_index + n_steps
    start_sq = float(sobolev_norm_coeffs(trunc, w0.coeffs, 0.0)) ** 2
    residuals = np.zeros(replicas)
    finals = np.zeros(replicas)
    gaps = np.zeros(replicas)
    for lo in range(0, replicas, REPLICA_CHUNK):
        hi = min(replicas, lo + REPLICA_CHUNK)
        c0 = np.repeat(w0.coeffs[None, :], hi - lo, axis=0)
        stores = replica_stores(cfg, master_seed, lo, hi - lo, s_index, end)
        credited = np.zeros(hi - lo)
        gap = np.zeros(hi - lo)

        def observe(n: int, c: np.ndarray, credited=credited, gap=gap) -> None:
            if n == end:
                return
            energy = sobolev_norm_coeffs(trunc, c, 0.0) ** 2
            increment = sobolev_norm_coeffs(trunc, stepper.advance(c, n, None), 0.0) ** 2 - energy
            increment += cfg.dt * stepper.injection_rate
            dissipation = 2.0 * cfg.nu * sobolev_norm_coeffs(trunc, c, 1.0) ** 2
            work = 2.0 * BASIS_NORM_SQ * (c @ table[n % P])
            credited += increment
            gap += increment - cfg.dt * (work - dissipation + cfg.B0)

        final = evolve_ensemble_coeffs(c0, s_index, n_steps, cfg, stores, observe)
        end_sq = sobolev_norm_coeffs(trunc, final, 0.0) ** 2
        residuals[lo:hi] = end_sq - start_sq - credited
        finals[lo:hi] = end_sq
        gaps[lo:hi] = gap
    stderr = float(np.std(residuals, ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
    mean_final = float(np.mean(finals))
    roundoff = ENERGY_ROUNDOFF * n_steps * max(1.0, start_sq, float(np.max(finals)))
    return EnergyBalanceResult(float(np.mean(residuals)), stderr, mean_final, roundoff, float(np.mean(gaps)))


@dataclass(frozen=True)
class MomentEnvelopeResult:
    # (time, sample mean of exp(η‖w‖²), exp(η e^{−νt}‖w₀‖²))
    rows: list[tuple[float, float, float]] = field(default_factory=list)
    fitted_C: float = math.nan
    overflow: bool = False


def exponential_moment_envelope(
    w0: SpectralField,
    cfg: SolverConfig,
    eta: float,
    master_seed: int,
    replicas: int,
    n_periods: int,
    s_index: int = 0,
) -> MomentEnvelopeResult:
    """Sample E exp(η‖w_t‖²) at period times against exp(η e^{−νt}‖w₀‖²); C is the largest ratio."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta!r}")
    MetricConfig(eta).check_against(cfg)
    P = cfg.steps_per_period
    n_steps = n_periods * P
    c0 = np.repeat(w0.coeffs[None, :], replicas, axis=0)
    stores = replica_stores(cfg, master_seed, 0, replicas, s_index, s_index + n_steps)
    states = simulate_ensemble(c0, s_index, n_steps, cfg, stores, record_every=P)
    start_sq = float(sobolev_norm_coeffs(cfg.trunc, w0.coeffs, 0.0)) ** 2

    rows = []
    overflow = False
    for k in range(n_periods + 1):
        t = k * cfg.period
        exponent = eta * sobolev_norm_coeffs(cfg.trunc, states[k], 0.0) ** 2
        if np.any(exponent > _EXP_LIMIT):
            overflow = True
            break
        mean = float(np.mean(np.exp(exponent)))
        envelope = math.exp(min(eta * math.exp(-cfg.nu * t) * start_sq, _EXP_LIMIT))
        rows.append((t, mean, envelope))
    fitted = max(mean / env for _, mean, env in rows) if rows else math.nan
    return MomentEnvelopeResult(rows, fitted, overflow)

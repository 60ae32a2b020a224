"""
Projected Malliavin matrix along stored trajectories.

For a direction ξ the quadratic form is

    ⟨M ξ, ξ⟩ = Σ_i ∫_τ^t ⟨g_i, U^{t,ξ}(r)⟩² dr,

where U^{t,ξ} solves the backward adjoint of the linearised flow with
U(t) = ξ. The backward sweep below is the transpose of the scheme's discrete
Jacobian, each midpoint solve settling to the fixed-point tolerance, so the
forward assembly (one Jacobian solve per node and channel) reproduces it to
that accuracy.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from common.utils import log_progress, log_warning
from periodic_sns.brackets import CASE1, ForcedModeSet, analyze_brackets
from periodic_sns.dynamics import SolverConfig, Trajectory, jacobian_coeffs, scheme_stepper, simulate
from periodic_sns.sns_config import BASIS_NORM_SQ
from periodic_sns.spectral_core import (
    ModeIndex,
    ModeLike,
    SpectralField,
    TruncationSpec,
    as_mode,
)
from periodic_sns.wiener import replica_store

# Gram matrices whose relative asymmetry exceeds this are reported
_ASYMMETRY_TOL = 1e-10


def _check_window(traj: Trajectory, tau_index: int, t_index: int) -> None:
    if tau_index > t_index:
        raise ValueError(f"Window start {tau_index} lies after its end {t_index}")
    if not traj.covers(tau_index, t_index):
        raise ValueError(
            f"Window [{tau_index}, {t_index}] not covered by the trajectory [{traj.start_index}, {traj.end_index}]"
        )


def _adjoint_sweep(traj: Trajectory, phi: np.ndarray, t_index: int, tau_index: int) -> np.ndarray:
    """U at every index tau..t for a batch of terminal values, shape (t − τ + 1, ..., dim)."""
    stepper = scheme_stepper(traj.config)
    out = np.empty((t_index - tau_index + 1,) + phi.shape)
    u = np.array(phi, dtype=np.float64)
    out[-1] = u
    if t_index == tau_index:
        return out
    mids = stepper.midpoints(traj.frames[tau_index - traj.start_index : t_index - traj.start_index])
    for n in range(t_index - 1, tau_index - 1, -1):
        u = stepper.linearized_adjoint(u, None if mids is None else mids[n - tau_index])
        out[n - tau_index] = u
    return out


def backward_adjoint(traj: Trajectory, phi: SpectralField, t_index: int, tau_index: int) -> SpectralField:
    """U^{t,φ}(τ), the transpose of the discrete Jacobian J_{τ,t} applied to φ."""
    if phi.trunc != traj.config.trunc:
        raise ValueError("Terminal value and trajectory truncations differ")
    _check_window(traj, tau_index, t_index)
    path = _adjoint_sweep(traj, phi.coeffs, t_index, tau_index)
    return SpectralField(phi.trunc, path[0])


def projection_directions(trunc: TruncationSpec, modes: Sequence[ModeLike]) -> np.ndarray:
    """γ_k/√(2π²) as coefficient rows; each has unit L² norm."""
    out = np.zeros((len(modes), trunc.dim))
    for a, mode in enumerate(modes):
        out[a, trunc.position(mode)] = 1.0 / math.sqrt(BASIS_NORM_SQ)
    return out


def _trapezoid_weights(n_nodes: int, h: float) -> np.ndarray:
    weights = np.full(n_nodes, h)
    if n_nodes == 1:
        return np.zeros(1)
    weights[0] = weights[-1] = 0.5 * h
    return weights


def _noise_loadings(trunc: TruncationSpec, noise: ForcedModeSet, vectors: np.ndarray) -> np.ndarray:
    """⟨g_i, v⟩ for every leading index of `vectors`, channels last."""
    cols = [trunc.position(m) for m in noise.modes]
    return BASIS_NORM_SQ * vectors[..., cols] * np.array(noise.amplitudes)


def _assemble(loadings: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Σ_n weight_n Σ_i L[n, a, i] L[n, b, i]. Each entry is reduced on its own so
    the matrix is exactly symmetric and permuting directions permutes entries.
    """
    p = loadings.shape[1]
    gram = np.empty((p, p))
    for a in range(p):
        per_node = np.sum(loadings[:, a : a + 1, :] * loadings, axis=-1)
        gram[a] = np.sum(per_node * weights[:, None], axis=0)
    return gram


@dataclass(frozen=True, eq=False)
class MalliavinReport:
    window: tuple[int, int]
    projection_modes: tuple[ModeIndex, ...]
    gram: np.ndarray
    min_eigenvalue: float
    eigenvalues: np.ndarray
    asymmetry: float
    complement_modes: tuple[ModeIndex, ...] = ()
    complement_max_quadform: Optional[float] = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.gram))

    @property
    def psd_ok(self) -> bool:
        return self.min_eigenvalue >= -1e-10 * max(self.trace, 0.0)

    def to_document(self) -> dict:
        return {
            "window": list(self.window),
            "projection_modes": [str(m) for m in self.projection_modes],
            "min_eigenvalue": self.min_eigenvalue,
            "trace": self.trace,
            "asymmetry": self.asymmetry,
            "complement_max_quadform": self.complement_max_quadform,
        }


def _finish_report(
    gram: np.ndarray,
    window: tuple[int, int],
    modes: tuple[ModeIndex, ...],
    complement_modes: tuple[ModeIndex, ...] = (),
    complement_values: Optional[np.ndarray] = None,
) -> MalliavinReport:
    scale = max(float(np.max(np.abs(gram))) if gram.size else 0.0, np.finfo(float).tiny)
    asymmetry = float(np.max(np.abs(gram - gram.T))) / scale if gram.size else 0.0
    if asymmetry > _ASYMMETRY_TOL:
        log_warning(f"Malliavin Gram asymmetry {asymmetry:.3g} before symmetrisation")
    gram = 0.5 * (gram + gram.T)
    eigenvalues = linalg.eigh(gram, eigvals_only=True) if gram.size else np.zeros(0)
    gram.setflags(write=False)
    complement_max = None
    if complement_values is not None and complement_values.size:
        complement_max = float(np.max(complement_values))
    return MalliavinReport(
        window=window,
        projection_modes=modes,
        gram=gram,
        min_eigenvalue=float(eigenvalues[0]) if eigenvalues.size else 0.0,
        eigenvalues=eigenvalues,
        asymmetry=asymmetry,
        complement_modes=complement_modes,
        complement_max_quadform=complement_max,
    )


def projected_malliavin_gram(
    traj: Trajectory,
    tau_index: int,
    t_index: int,
    projection_modes: Sequence[ModeLike],
    noise: ForcedModeSet,
    complement_modes: Optional[Sequence[ModeLike]] = None,
    stride: int = 1,
) -> MalliavinReport:
    """
    Backward assembly on the dt grid (or every `stride`-th node) with the
    trapezoid rule. Complement directions only get their diagonal quadratic form.
    """
    _check_window(traj, tau_index, t_index)
    trunc = traj.config.trunc
    if stride < 1 or (t_index - tau_index) % stride:
        raise ValueError(f"Stride {stride} must divide the window length {t_index - tau_index}")
    modes = tuple(as_mode(m) for m in projection_modes)
    extra = tuple(as_mode(m) for m in complement_modes or ())
    for mode in modes + extra + noise.modes:
        if not trunc.contains(mode):
            raise ValueError(f"Mode {mode} lies outside the truncation K={trunc.K}")

    directions = projection_directions(trunc, modes + extra)
    path = _adjoint_sweep(traj, directions, t_index, tau_index)[::stride]
    weights = _trapezoid_weights(path.shape[0], stride * traj.config.dt)
    loadings = _noise_loadings(trunc, noise, path)

    p = len(modes)
    gram = _assemble(loadings[:, :p, :], weights)
    complement_values = None
    if extra:
        complement_values = np.sum(weights[:, None] * np.sum(loadings[:, p:, :] ** 2, axis=-1), axis=0)
    return _finish_report(gram, (tau_index, t_index), modes, extra, complement_values)


def forward_malliavin_gram(
    traj: Trajectory,
    tau_index: int,
    t_index: int,
    projection_modes: Sequence[ModeLike],
    noise: ForcedModeSet,
    stride: int = 1,
) -> MalliavinReport:
    """Same matrix from forward Jacobians J_{r,t} g_i at every `stride`-th node r."""
    _check_window(traj, tau_index, t_index)
    if stride < 1 or (t_index - tau_index) % stride:
        raise ValueError(f"Stride {stride} must divide the window length {t_index - tau_index}")
    trunc = traj.config.trunc
    modes = tuple(as_mode(m) for m in projection_modes)
    G = noise.matrix(trunc)
    directions = projection_directions(trunc, modes)

    nodes = list(range(tau_index, t_index + 1, stride))
    # loadings[n, a, i] = ⟨J_{r_n,t} g_i, ξ_a⟩
    loadings = np.empty((len(nodes), len(modes), noise.channels))
    for j, r in enumerate(nodes):
        pushed = jacobian_coeffs(traj, G, r, t_index)
        loadings[j] = BASIS_NORM_SQ * (directions @ pushed.T)
    weights = _trapezoid_weights(len(nodes), stride * traj.config.dt)
    return _finish_report(_assemble(loadings, weights), (tau_index, t_index), modes)


def assembly_consistency(
    traj: Trajectory,
    tau_index: int,
    t_index: int,
    projection_modes: Sequence[ModeLike],
    noise: ForcedModeSet,
    stride: int,
) -> float:
    """Relative Frobenius difference of the backward and forward assemblies on one subgrid."""
    backward = projected_malliavin_gram(traj, tau_index, t_index, projection_modes, noise, stride=stride).gram
    forward = forward_malliavin_gram(traj, tau_index, t_index, projection_modes, noise, stride=stride).gram
    scale = float(np.linalg.norm(backward))
    diff = float(np.linalg.norm(backward - forward))
    return diff / scale if scale > 0 else diff


@dataclass(frozen=True, eq=False)
class NondegeneracyResult:
    min_eigenvalues: np.ndarray
    quantiles: dict[str, float]
    degenerate_fraction: float
    epsilons: np.ndarray
    complement_modes: tuple[ModeIndex, ...] = ()
    complement_max_quadform: Optional[float] = None

    @property
    def complement_ok(self) -> Optional[bool]:
        if self.complement_max_quadform is None:
            return None
        return self.complement_max_quadform <= 1e-12

    @property
    def contract_ok(self) -> bool:
        return self.complement_ok is not False

    def to_document(self) -> dict:
        return {
            "samples": int(self.min_eigenvalues.shape[0]),
            "quantiles": self.quantiles,
            "degenerate_fraction": self.degenerate_fraction,
            "complement_modes": [str(m) for m in self.complement_modes],
            "complement_max_quadform": self.complement_max_quadform,
        }


def default_complement(cfg: SolverConfig) -> tuple[ModeIndex, ...]:
    """Modes outside the invariant span of a Case-1 noise set, else nothing."""
    if not cfg.noise.channels:
        return ()
    report = analyze_brackets(cfg.noise, cfg.trunc)
    if report.classification != CASE1:
        return ()
    inside = set(report.degenerate_basis or ())
    return tuple(m for m in cfg.trunc.modes if m not in inside)


def nondegeneracy_probe(
    cfg: SolverConfig,
    master_seed: int,
    samples: int,
    projection_modes: Sequence[ModeLike],
    window_periods: int,
    w0: Optional[SpectralField] = None,
    complement_modes: Optional[Sequence[ModeLike]] = None,
    epsilon: Optional[float] = None,
    s_index: int = 0,
) -> NondegeneracyResult:
    """
    Min eigenvalue of the projected Gram over independent trajectories of
    `window_periods` periods from w0 (zero by default). A sample is degenerate
    when its min eigenvalue is at most ε, by default 1e−8·trace/p.
    """
    if samples < 1:
        raise ValueError(f"At least one sample is required, got {samples}")
    if window_periods < 0:
        raise ValueError(f"window_periods must be non-negative, got {window_periods}")
    w0 = w0 if w0 is not None else SpectralField.zeros(cfg.trunc)
    modes = tuple(as_mode(m) for m in projection_modes)
    extra = tuple(as_mode(m) for m in complement_modes) if complement_modes is not None else default_complement(cfg)
    n_steps = window_periods * cfg.steps_per_period
    log_progress(f"Malliavin probe: {samples} samples, {len(modes)} directions, {n_steps} steps")

    min_eigs = np.empty(samples)
    epsilons = np.empty(samples)
    complement_max = None
    for r in range(samples):
        store = None
        if cfg.noise.channels:
            store = replica_store(master_seed, r, cfg.dt, cfg.noise.channels, s_index, s_index + n_steps)
        traj = simulate(w0, s_index, n_steps, cfg, store)
        report = projected_malliavin_gram(traj, s_index, s_index + n_steps, modes, cfg.noise, complement_modes=extra)
        min_eigs[r] = report.min_eigenvalue
        epsilons[r] = epsilon if epsilon is not None else 1e-8 * report.trace / max(len(modes), 1)
        if report.complement_max_quadform is not None:
            complement_max = max(complement_max or 0.0, report.complement_max_quadform)

    levels = (0.0, 0.05, 0.5, 0.95, 1.0)
    quantiles = {f"q{int(q * 100):02d}": float(np.quantile(min_eigs, q)) for q in levels}
    degenerate = float(np.mean(min_eigs <= epsilons))
    return NondegeneracyResult(min_eigs, quantiles, degenerate, epsilons, extra, complement_max)

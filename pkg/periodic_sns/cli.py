"""
Command-line entry point: `python -m periodic_sns <subcommand> [flags]`.

Every run writes `manifest.json` and its CSV tables into
`<out>/<timestamp>_<SUBCOMMAND>/` and, unless TSNS_WRITE_TRACES is off, a
markdown report next to that directory. Exit codes: 0 success, 1 contract
violation or failed run, 2 usage or configuration error.
"""

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from common.config import OUT_DIR, WRITE_TRACES_TO_FILES
from common.tracing_in_markdown import write_run_report
from common.utils import (
    ConfigError,
    SimulationError,
    generate_timestamp_utc,
    highlight_good,
    highlight_info,
    highlight_warn,
)
from periodic_sns.attractor_regime import (
    CONFIGURED,
    ESTIMATED,
    LAMINAR,
    default_c0,
    pullback_periodic_solution,
    random_periodicity_check,
    regime_from_quantities,
    regime_report,
    synchronization_experiment,
)
from periodic_sns.brackets import FULL, ForcedModeSet, analyze_brackets
from periodic_sns.counter_rng import hash64
from periodic_sns.dynamics import simulate
from periodic_sns.ergodic_stats import MetricConfig, Observable, clt_experiment, mixing_decay_experiment, wlln_estimate
from periodic_sns.malliavin_probe import nondegeneracy_probe
from periodic_sns.run_config import RunSettings, load_solver_config, settings_from_mapping
from periodic_sns.sns_config import AUX_STREAM_SALT, DEFAULT_C0_SAMPLES
from periodic_sns.spectral_core import (
    ModeIndex,
    SpectralField,
    TruncationSpec,
    estimate_ladyzhenskaya_c0,
    random_field,
    sobolev_norm_coeffs,
    spectral_tail_fraction_coeffs,
)
from periodic_sns.trajectory_io import RunManifest, save_trajectory, write_manifest
from periodic_sns.wiener import derive_wiener_store


@dataclass
class Table:
    header: list[str]
    rows: list[Sequence[Any]]

    def to_bytes(self) -> bytes:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buffer.getvalue().encode("utf-8")


@dataclass
class Outcome:
    results: dict[str, Any]
    summary: list[str]
    ok: bool = True
    tables: dict[str, Table] = field(default_factory=dict)
    # Binary payload hashed into the manifest, when the run has one
    payload_writer: Optional[Callable[[Path, RunManifest], RunManifest]] = None
    c0_provenance: Optional[str] = None


@dataclass
class Context:
    args: argparse.Namespace
    settings: RunSettings
    seed: int


# Flags that map onto run-config keys
_SOLVER_FLAGS = {
    "nu": "nu",
    "dt": "dt",
    "trunc": "trunc_K",
    "period": "period",
    "noise_modes": "noise_modes",
    "noise_amps": "noise_amps",
    "c0": "c0",
}


def _global_flags(parser: argparse.ArgumentParser, default: Any) -> None:
    parser.add_argument("--config", type=Path, default=default, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="master seed (u64)")
    parser.add_argument("--out", type=Path, default=default, help="output directory (default: TSNS_OUT_DIR)")
    parser.add_argument("--verbose", "-v", action="store_true", default=default, help="progress lines on stdout")


def _solver_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("solver overrides")
    group.add_argument("--nu", type=float)
    group.add_argument("--dt", type=float)
    group.add_argument("--trunc", type=int, help="truncation radius K")
    group.add_argument("--period", type=float)
    group.add_argument("--noise-modes", help='e.g. "1,0;-1,0;0,1;0,-1"')
    group.add_argument("--noise-amps", help='e.g. "1,1,1,1"')
    group.add_argument("--c0", type=float, help="Ladyzhenskaya constant (estimated when absent)")
    group.add_argument("--no-dealias", action="store_true")
    group.add_argument("--linear", action="store_true", help="drop the nonlinear term")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="periodic_sns", description=__doc__.splitlines()[1])
    _global_flags(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    _solver_flags(common)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", parents=[common], help="integrate one trajectory and save it")
    p.add_argument("--steps", type=int)
    p.add_argument("--periods", type=int, default=1)
    p.add_argument("--init-norm", type=float, default=0.0, help="norm of a random initial field (0: start at rest)")

    p = sub.add_parser("brackets", parents=[common], help="bracket spans and degeneracy class of a forced mode set")
    p.add_argument("--modes", help='forced modes, e.g. "1,0;-1,0;1,1;-1,-1" (default: the noise modes)')
    p.add_argument("--amps")
    p.add_argument("--max-depth", type=int, default=64)

    p = sub.add_parser("regime", parents=[common], help="Grashof numbers, delta0 and regime class")
    p.add_argument("--f-sup", type=float, help="‖f‖∞ (default: from the configured forcing)")
    p.add_argument("--b0", type=float, help="B0 (default: from the configured noise)")
    p.add_argument("--alpha", type=float, default=1.0)

    p = sub.add_parser("sync", parents=[common], help="shared-noise synchronisation slopes")
    p.add_argument("--seeds", type=int, default=10, help="number of noise seeds")
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--fit-start", type=float)
    p.add_argument("--init-norm", type=float, default=1.0)

    p = sub.add_parser("pullback", parents=[common], help="pullback random periodic solution and its checks")
    p.add_argument("--n-max", type=int, default=40)
    p.add_argument("--t-probe", type=int, default=0, help="probe time index")
    p.add_argument("--attraction-periods", type=int, default=10)
    p.add_argument("--perturbation", type=float, default=1.0)

    p = sub.add_parser("mixing", parents=[common], help="Wasserstein decay between two ensembles")
    p.add_argument("--replicas", type=int, default=32)
    p.add_argument("--periods", type=int, default=20)
    p.add_argument("--eta", type=float)
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--init-norm", type=float, default=1.0)

    p = sub.add_parser("wlln", parents=[common], help="running time averages of an observable")
    p.add_argument("--observable", default="clipped_enstrophy:10")
    p.add_argument("--horizon-periods", type=int, default=64)
    p.add_argument("--mode", choices=("continuous", "periodic_chain"), default="continuous")
    p.add_argument("--init-norm", type=float, default=0.0)

    p = sub.add_parser("clt", parents=[common], help="CLT samples and Kolmogorov–Smirnov statistic")
    p.add_argument("--observable", default="clipped_enstrophy:10")
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--replicas", type=int, default=256)
    p.add_argument("--burn-in", type=int, default=16)
    p.add_argument("--init-norm", type=float, default=0.0)

    p = sub.add_parser("malliavin", parents=[common], help="projected Malliavin matrix spectra")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--projection-K", type=int, default=2, help="project on all modes with |k|∞ ≤ this")
    p.add_argument("--projection-modes", help="explicit projection modes, overrides --projection-K")
    p.add_argument("--complement-modes")
    p.add_argument("--window-periods", type=int, default=1)
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("c0-estimate", parents=[common], help="estimate the Ladyzhenskaya constant")
    p.add_argument("--samples", type=int, default=DEFAULT_C0_SAMPLES)
    return parser


def _resolve_settings(args: argparse.Namespace) -> RunSettings:
    overrides = {key: getattr(args, flag) for flag, key in _SOLVER_FLAGS.items() if getattr(args, flag) is not None}
    if args.no_dealias:
        overrides["dealias"] = False
    if args.linear:
        overrides["nonlinear"] = False
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        return load_solver_config(args.config, overrides)
    return settings_from_mapping(overrides)


def _c0(ctx: Context) -> tuple[float, str]:
    if ctx.settings.c0 is not None:
        return ctx.settings.c0, CONFIGURED
    return default_c0(), ESTIMATED


def _initial_field(ctx: Context, norm: float, stream: int = 0) -> SpectralField:
    trunc = ctx.settings.solver.trunc
    if norm <= 0:
        return SpectralField.zeros(trunc)
    return random_field(trunc, hash64(ctx.seed, AUX_STREAM_SALT, 1), stream=stream, norm=norm)


def _modes(text: str) -> list[ModeIndex]:
    return [ModeIndex.parse(chunk) for chunk in text.split(";") if chunk.strip()]


def _cmd_simulate(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    steps = ctx.args.steps if ctx.args.steps is not None else ctx.args.periods * cfg.steps_per_period
    store = derive_wiener_store(ctx.seed, cfg.dt, cfg.noise.channels, 0, steps) if cfg.noise.channels else None
    traj = simulate(_initial_field(ctx, ctx.args.init_norm), 0, steps, cfg, store)

    enstrophy = sobolev_norm_coeffs(cfg.trunc, traj.frames, 0.0) ** 2
    palinstrophy = sobolev_norm_coeffs(cfg.trunc, traj.frames, 1.0) ** 2
    tails = spectral_tail_fraction_coeffs(cfg.trunc, traj.frames)
    table = Table(
        ["index", "time", "enstrophy", "palinstrophy", "tail_fraction"],
        [
            (n, float(t), float(e), float(p), float(f))
            for n, t, e, p, f in zip(range(steps + 1), traj.times(), enstrophy, palinstrophy, tails)
        ],
    )

    def write_payload(run_dir: Path, manifest: RunManifest) -> RunManifest:
        return save_trajectory(traj, run_dir / "trajectory.tsns", manifest)

    results = {"steps": steps, "final_enstrophy": float(enstrophy[-1]), "max_tail_fraction": float(np.max(tails))}
    summary = [f"Simulated {steps} steps, final enstrophy {highlight_info(f'{enstrophy[-1]:.6g}')}"]
    return Outcome(results, summary, tables={"trajectory_stats": table}, payload_writer=write_payload)


def _cmd_brackets(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    try:
        z0 = ForcedModeSet.parse(ctx.args.modes, ctx.args.amps) if ctx.args.modes else cfg.noise
    except ValueError as e:
        raise ConfigError(f"--modes/--amps: {e}") from e
    if not z0.modes:
        raise ConfigError("No forced modes: pass --modes or configure noise_modes")
    report = analyze_brackets(z0, cfg.trunc, ctx.args.max_depth)
    colour = highlight_good if report.classification == FULL else highlight_warn
    summary = [
        f"Span dimensions: {list(report.span_dims)} of {report.truncated_dim}",
        f"Classification: {colour(report.classification)}",
    ]
    table = Table(["level", "span_dim"], [(i + 1, d) for i, d in enumerate(report.span_dims)])
    return Outcome(report.to_document(), summary, tables={"bracket_spans": table})


def _cmd_regime(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    c0, provenance = _c0(ctx)
    f_sup = ctx.args.f_sup if ctx.args.f_sup is not None else cfg.forcing.sup_norm()
    b0 = ctx.args.b0 if ctx.args.b0 is not None else cfg.B0
    try:
        report = regime_from_quantities(cfg.nu, f_sup, b0, c0, ctx.args.alpha, provenance)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    colour = highlight_good if report.classification == LAMINAR else highlight_warn
    summary = [
        f"G1 = {report.G1:.6g}, G2 = {report.G2:.6g}, 1/c0 = {1.0 / report.c0:.6g} ({report.c0_provenance})",
        f"delta0 = {report.delta0:.6g}",
        f"Regime: {colour(report.classification)}",
    ]
    return Outcome(report.to_document(), summary, ok=report.equivalence_ok is not False, c0_provenance=provenance)


def _cmd_sync(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    c0, provenance = _c0(ctx)
    seeds = [hash64(ctx.seed, i) for i in range(ctx.args.seeds)]
    w1 = _initial_field(ctx, ctx.args.init_norm)
    result = synchronization_experiment(
        cfg, c0, seeds, w1, SpectralField.zeros(cfg.trunc), ctx.args.horizon, ctx.args.fit_start
    )
    table = Table(
        ["seed", "slope", "points", "roundoff_cutoff"],
        [(s, f.slope, f.points, int(f.roundoff_cutoff)) for s, f in zip(result.seeds, result.fits)],
    )
    colour = highlight_good if result.contract_ok else highlight_warn
    summary = [f"Median slope of log|e|^2: {colour(f'{result.median_slope:.6g}')} (threshold {result.threshold:.6g})"]
    return Outcome(result.to_document(), summary, result.contract_ok, {"sync_slopes": table}, c0_provenance=provenance)


def _cmd_pullback(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    c0, provenance = _c0(ctx)
    regime = regime_report(cfg, c0)
    P = cfg.steps_per_period
    n_max, t_probe = ctx.args.n_max, ctx.args.t_probe
    store = None
    if cfg.noise.channels:
        lo = t_probe - n_max * P
        hi = t_probe + (2 + ctx.args.attraction_periods) * P
        store = derive_wiener_store(ctx.seed, cfg.dt, cfg.noise.channels, lo, hi)
    delta0 = regime.delta0 if regime.classification == LAMINAR else None
    pullback = pullback_periodic_solution(cfg, store, n_max, t_probe, delta0)
    periodicity = random_periodicity_check(
        cfg, store, n_max, t_probe, ctx.args.attraction_periods, ctx.args.perturbation, delta0
    )
    ok = pullback.contract_ok and periodicity.contract_ok
    table = Table(["n", "cauchy_increment"], [(n + 1, v) for n, v in enumerate(pullback.cauchy_table)])
    colour = highlight_good if ok else highlight_warn
    summary = [
        f"Cauchy ratio {pullback.fitted_ratio:.6g}, onset index {pullback.onset_index}",
        f"Periodicity residual {colour(f'{periodicity.periodicity_residual:.3e}')}",
        f"Forward attraction slope {periodicity.forward_attraction_slope:.6g}",
    ]
    results = {"regime": regime.to_document(), "pullback": pullback.to_document(), **periodicity.to_document()}
    return Outcome(results, summary, ok, {"pullback_cauchy": table}, c0_provenance=provenance)


def _cmd_mixing(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    if ctx.args.eta is None:
        metric = MetricConfig.default_for(cfg, ctx.args.r)
    else:
        metric = MetricConfig(ctx.args.eta, ctx.args.r)
    w1 = _initial_field(ctx, ctx.args.init_norm, stream=0)
    w2 = _initial_field(ctx, ctx.args.init_norm, stream=1)
    result = mixing_decay_experiment(w1, w2, cfg, ctx.seed, ctx.args.replicas, ctx.args.periods, metric)
    table = Table(
        ["period_index", "lower_dist", "upper_dist", "floor_lower", "floor_upper"],
        [(k, lo, hi, flo, fhi) for (k, lo, hi), (_, flo, fhi) in zip(result.decay_table, result.floor_table)],
    )
    colour = highlight_good if result.contract_ok else highlight_warn
    summary = [
        f"Fitted rate gamma = {colour(f'{result.gamma_hat:.6g}')}",
        f"Final/initial upper distance {result.decay_ratio:.3e}, noise floor {result.floor_table[-1][2]:.3e}",
    ]
    return Outcome(result.to_document(), summary, result.contract_ok, {"mixing_decay": table})


def _observable(text: str) -> Observable:
    try:
        return Observable.parse(text)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _cmd_wlln(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    psi = _observable(ctx.args.observable)
    w0 = _initial_field(ctx, ctx.args.init_norm)
    result = wlln_estimate(w0, cfg, ctx.seed, psi, ctx.args.horizon_periods, ctx.args.mode)
    table = Table(["index", "running_average"], [(i + 1, float(v)) for i, v in enumerate(result.running)])
    summary = [f"Time average of {psi.name}: {highlight_info(f'{result.average:.6g}')}"]
    return Outcome({"observable": psi.name, **result.to_document()}, summary, tables={"wlln_running": table})


def _cmd_clt(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    psi = _observable(ctx.args.observable)
    w0 = _initial_field(ctx, ctx.args.init_norm)
    result = clt_experiment(w0, cfg, ctx.seed, psi, ctx.args.N, ctx.args.replicas, ctx.args.burn_in)
    table = Table(["replica", "sample"], [(r, float(s)) for r, s in enumerate(result.samples)])
    colour = highlight_good if result.contract_ok else highlight_warn
    summary = [
        f"sigma^2 = {result.sigma2_hat:.6g} (batch means {result.batch_means_sigma2:.6g})",
        f"KS statistic {colour(f'{result.ks_statistic:.4g}')} vs 5% critical value {result.critical_value:.4g}",
    ]
    results = {"observable": psi.name, **result.to_document()}
    return Outcome(results, summary, result.contract_ok, {"clt_samples": table})


def _cmd_malliavin(ctx: Context) -> Outcome:
    cfg = ctx.settings.solver
    if ctx.args.projection_modes:
        modes = _modes(ctx.args.projection_modes)
    else:
        modes = [m for m in cfg.trunc.modes if m.sup_norm <= ctx.args.projection_K]
    complement = _modes(ctx.args.complement_modes) if ctx.args.complement_modes else None
    result = nondegeneracy_probe(
        cfg,
        ctx.seed,
        ctx.args.samples,
        modes,
        ctx.args.window_periods,
        complement_modes=complement,
        epsilon=ctx.args.epsilon,
    )
    table = Table(["sample", "min_eigenvalue"], [(i, float(v)) for i, v in enumerate(result.min_eigenvalues)])
    colour = highlight_good if result.degenerate_fraction == 0 else highlight_warn
    summary = [
        f"Min eigenvalue quantiles: {result.quantiles}",
        f"Degenerate fraction {colour(f'{result.degenerate_fraction:.3g}')}",
    ]
    if result.complement_max_quadform is not None:
        summary.append(f"Complement quadratic form max {result.complement_max_quadform:.3e}")
    return Outcome(result.to_document(), summary, result.contract_ok, {"malliavin_min_eig": table})


def _cmd_c0_estimate(ctx: Context) -> Outcome:
    trunc = TruncationSpec(ctx.settings.solver.trunc.K)
    c0 = estimate_ladyzhenskaya_c0(trunc, ctx.args.samples, ctx.seed)
    summary = [f"c0 ≥ {highlight_info(f'{c0:.6g}')} (K={trunc.K}, {ctx.args.samples} samples)"]
    return Outcome({"c0": c0, "K": trunc.K, "samples": ctx.args.samples}, summary, c0_provenance=ESTIMATED)


_COMMANDS: dict[str, Callable[[Context], Outcome]] = {
    "simulate": _cmd_simulate,
    "brackets": _cmd_brackets,
    "regime": _cmd_regime,
    "sync": _cmd_sync,
    "pullback": _cmd_pullback,
    "mixing": _cmd_mixing,
    "wlln": _cmd_wlln,
    "clt": _cmd_clt,
    "malliavin": _cmd_malliavin,
    "c0-estimate": _cmd_c0_estimate,
}


def _write_outputs(ctx: Context, outcome: Outcome, timestamp: str) -> dict[str, str]:
    out_dir = Path(ctx.args.out or OUT_DIR)
    run_dir = out_dir / f"{timestamp}_{ctx.args.subcommand.upper().replace('-', '_')}"
    run_dir.mkdir(parents=True, exist_ok=True)

    echo = {**ctx.settings.resolved, "seed": ctx.seed, "subcommand": ctx.args.subcommand}
    echo["arguments"] = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(ctx.args).items())
        if k not in ("config", "out", "verbose")
    }
    manifest = RunManifest.create(echo, ctx.seed, outcome.c0_provenance)

    outputs = {}
    csv_bytes = b""
    for name, table in outcome.tables.items():
        data = table.to_bytes()
        (run_dir / f"{name}.csv").write_bytes(data)
        outputs[name] = str(run_dir / f"{name}.csv")
        csv_bytes += data
    if outcome.payload_writer is not None:
        manifest = outcome.payload_writer(run_dir, manifest)
        outputs["trajectory"] = str(run_dir / "trajectory.tsns")
    else:
        manifest = manifest.with_hash(csv_bytes)
    write_manifest(manifest, run_dir / "manifest.json")
    outputs["manifest"] = str(run_dir / "manifest.json")

    if WRITE_TRACES_TO_FILES:
        write_run_report(
            timestamp=timestamp,
            subcommand=ctx.args.subcommand,
            manifest=manifest.to_document(),
            results={"ok": outcome.ok, **outcome.results},
            outputs=outputs,
            out_dir=out_dir,
        )
    return outputs


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.verbose:
        os.environ["TSNS_VERBOSE"] = "true"

    try:
        settings = _resolve_settings(args)
        ctx = Context(args, settings, settings.seed)
        outcome = _COMMANDS[args.subcommand](ctx)
        timestamp = generate_timestamp_utc()
        outputs = _write_outputs(ctx, outcome, timestamp)
    except ConfigError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except ValueError as e:
        print(f"Invalid arguments: {e}", file=sys.stderr)
        return 2
    except SimulationError as e:
        print(e, file=sys.stderr)
        return 1

    for line in outcome.summary:
        print(line)
    print(f"Outputs in {Path(outputs['manifest']).parent}")
    if not outcome.ok:
        print(highlight_warn("Contract check failed"))
        return 1
    return 0

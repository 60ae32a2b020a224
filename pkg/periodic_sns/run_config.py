from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from common.utils import ConfigError
from periodic_sns.brackets import ForcedModeSet
from periodic_sns.dynamics import SolverConfig
from periodic_sns.forcing import ForcingProfile, ForcingTerm
from periodic_sns.spectral_core import ModeIndex, TruncationSpec

DEFAULTS: dict[str, Any] = {
    "nu": 1.0,
    "dt": 0.01,
    "trunc_K": 4,
    "dealias": True,
    "nonlinear": True,
    "period": 1.0,
    "forcing": [],
    "forcing_shift": "0",
    "noise_modes": [],
    "noise_amps": [],
    "seed": 0,
    "c0": None,
}

KNOWN_KEYS = frozenset(DEFAULTS) | {"scheme"}


@dataclass(frozen=True)
class RunSettings:
    solver: SolverConfig
    seed: int
    c0: Optional[float]
    # Flat mapping the solver was built from, echoed into run manifests
    resolved: dict[str, Any]


def _mode(value: Any, key: str) -> ModeIndex:
    try:
        if isinstance(value, str):
            return ModeIndex.parse(value)
        k1, k2 = value
        return ModeIndex(int(k1), int(k2))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Config key '{key}': cannot read mode {value!r}") from e


def _number(mapping: Mapping[str, Any], key: str, kind: type = float) -> Any:
    value = mapping[key]
    if isinstance(value, bool):
        raise ConfigError(f"Config key '{key}' must be a number, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Config key '{key}' must be a number, got {value!r}") from e


def _flag(mapping: Mapping[str, Any], key: str) -> bool:
    value = mapping[key]
    if not isinstance(value, bool):
        raise ConfigError(f"Config key '{key}' must be true or false, got {value!r}")
    return value


def _noise(mapping: Mapping[str, Any]) -> ForcedModeSet:
    modes_raw = mapping["noise_modes"]
    amps_raw = mapping["noise_amps"]
    if isinstance(modes_raw, str):
        modes_raw = [chunk for chunk in modes_raw.split(";") if chunk.strip()]
    if isinstance(amps_raw, str):
        amps_raw = [chunk for chunk in amps_raw.split(",") if chunk.strip()]
    modes = [_mode(m, "noise_modes") for m in modes_raw or []]
    if not amps_raw:
        amps_raw = [1.0] * len(modes)
    try:
        amps = [float(a) for a in amps_raw]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Config key 'noise_amps': cannot read {amps_raw!r}") from e
    try:
        return ForcedModeSet.of(modes, amps)
    except ValueError as e:
        raise ConfigError(f"Config keys 'noise_modes'/'noise_amps': {e}") from e


def _forcing(mapping: Mapping[str, Any], period: float) -> ForcingProfile:
    terms = []
    for i, entry in enumerate(mapping["forcing"] or []):
        key = f"forcing[{i}]"
        if not isinstance(entry, Mapping) or "mode" not in entry or "amplitude" not in entry:
            raise ConfigError(f"Config key '{key}' needs at least 'mode' and 'amplitude'")
        unknown = set(entry) - {"mode", "amplitude", "phase", "harmonic"}
        if unknown:
            raise ConfigError(f"Config key '{key}': unknown fields {sorted(unknown)}")
        try:
            terms.append(
                ForcingTerm(
                    _mode(entry["mode"], key),
                    float(entry["amplitude"]),
                    float(entry.get("phase", 0.0)),
                    int(entry.get("harmonic", 1)),
                )
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Config key '{key}': {e}") from e
    try:
        shift = Fraction(str(mapping["forcing_shift"]))
        return ForcingProfile(period, tuple(terms), shift)
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"Config keys 'period'/'forcing_shift': {e}") from e


def settings_from_mapping(mapping: Optional[Mapping[str, Any]]) -> RunSettings:
    """Validates a flat run mapping; missing keys take the defaults."""
    mapping = dict(mapping or {})
    unknown = set(mapping) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    resolved = {**DEFAULTS, **{k: v for k, v in mapping.items() if v is not None or k == "c0"}}
    resolved.pop("scheme", None)

    nu = _number(resolved, "nu")
    dt = _number(resolved, "dt")
    K = _number(resolved, "trunc_K", int)
    period = _number(resolved, "period")
    seed = _number(resolved, "seed", int)
    c0 = None if resolved["c0"] is None else _number(resolved, "c0")
    if c0 is not None and not c0 > 0:
        raise ConfigError(f"Config key 'c0' must be positive, got {c0!r}")

    try:
        trunc = TruncationSpec(K, dealias=_flag(resolved, "dealias"))
    except ValueError as e:
        raise ConfigError(f"Config key 'trunc_K': {e}") from e
    try:
        solver = SolverConfig(
            nu=nu,
            dt=dt,
            trunc=trunc,
            noise=_noise(resolved),
            forcing=_forcing(resolved, period),
            nonlinear=_flag(resolved, "nonlinear"),
        )
    except ValueError as e:
        raise ConfigError(f"Invalid solver configuration: {e}") from e
    return RunSettings(solver, seed, c0, resolved)


def load_solver_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> RunSettings:
    """Reads a YAML run file; `overrides` (CLI flags) win over file values."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"Config file {path} must hold a mapping at the top level")
    return settings_from_mapping({**data, **(overrides or {})})


def solver_config_from_document(document: Mapping[str, Any]) -> SolverConfig:
    """Inverse of SolverConfig.to_document."""
    return settings_from_mapping(document).solver

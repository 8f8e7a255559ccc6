"""Experiment configuration: dataclasses, the ``paper-loam`` preset and YAML/JSON loading.

A config file mirrors :meth:`ExperimentConfig.to_dict`; every section and key
is optional and missing entries keep the preset's value. Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dekf import TABLE2_GUESSES, DekfTuning
from .dmhe import INITIAL_MULTIPLIERS, K_SAT_BOUNDS, X_BOUNDS, MheTuning
from .richards import ColumnGrid, ForcingSchedule, NoiseConfig
from .soil import LOAM, SoilDomainError, SoilParams

DAY = 86400.0
PRESETS = ("paper-loam",)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ForcingConfig:
    """Daily irrigation pulse: ``rate`` m/s for ``hours`` starting at ``start_hour``."""

    rate: float = 1.944e-3 / 3600.0
    hours: float = 8.0
    start_hour: float = 0.0

    def schedule(self) -> ForcingSchedule:
        return ForcingSchedule.daily(self.rate, hours=self.hours, start_hour=self.start_hour)


@dataclass
class SimulationConfig:
    initial_head: float = -0.5139
    substep: float = 1.0
    guard: float = 0.1


@dataclass
class DekfConfig:
    tuning: DekfTuning = field(default_factory=DekfTuning)
    initial_guesses: np.ndarray = field(default_factory=lambda: TABLE2_GUESSES.copy())
    randomize_p0: bool = True
    window: int = 10
    eps_consensus: float = 1e-3
    eps_settle: float = 1e-2
    #: stop the filters once the DMHE takes over (off: they keep running)
    stop_after_tau0: bool = False


@dataclass
class DmheConfig:
    tuning: MheTuning = field(default_factory=lambda: MheTuning(model_substep=10.0))
    multipliers: tuple[float, ...] = INITIAL_MULTIPLIERS
    #: profile the multipliers scale: the true state when the DMHE starts
    #: ("activation") or the configured initial head ("initial")
    guess_reference: str = "activation"


@dataclass
class ExperimentConfig:
    grid: ColumnGrid = field(default_factory=ColumnGrid)
    soil: SoilParams = LOAM
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    dekf: DekfConfig = field(default_factory=DekfConfig)
    dmhe: DmheConfig = field(default_factory=DmheConfig)
    dekf_period: float = 240.0
    dmhe_period: float = 1200.0
    duration: float = 5 * DAY
    seed: int = 0
    #: which filter/estimator feeds the moisture recovery (0-based)
    moisture_index: int = 0
    out: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def dmhe_stride(self) -> int:
        return int(round(self.dmhe_period / self.dekf_period))

    @property
    def n_instants(self) -> int:
        return int(round(self.duration / self.dekf_period)) + 1

    def validate(self) -> None:
        n_y = self.grid.n_sensors
        if self.dekf_period <= 0 or self.dmhe_period <= 0:
            raise ConfigError("sampling periods must be positive")
        stride = self.dmhe_period / self.dekf_period
        if abs(stride - round(stride)) > 1e-9:
            raise ConfigError("the DMHE period must be an integer multiple of the DEKF period")
        k = self.duration / self.dekf_period
        if self.duration < 0 or abs(k - round(k)) > 1e-9:
            raise ConfigError("duration must be a nonnegative multiple of the DEKF period")
        sub = self.simulation.substep
        if sub <= 0 or abs(self.dekf_period / sub - round(self.dekf_period / sub)) > 1e-9:
            raise ConfigError("truth substep must divide the DEKF period")
        msub = self.dmhe.tuning.model_substep
        if msub <= 0 or abs(self.dmhe_period / msub - round(self.dmhe_period / msub)) > 1e-9:
            raise ConfigError("DMHE model substep must divide the DMHE period")
        if np.shape(self.dekf.initial_guesses) != (n_y, 4):
            raise ConfigError(f"need {n_y} DEKF initial guesses of length 4")
        if self.dmhe.guess_reference not in ("activation", "initial"):
            raise ConfigError("dmhe.guess_reference must be 'activation' or 'initial'")
        if len(self.dmhe.multipliers) != n_y:
            raise ConfigError(f"need {n_y} DMHE initial-guess multipliers")
        if not 0 <= self.moisture_index < n_y:
            raise ConfigError(f"moisture_index must lie in [0, {n_y})")
        if not self.simulation.initial_head < 0:
            raise ConfigError("initial head must be negative")
        if self.dekf.window < 1 or self.dekf.eps_consensus <= 0 or self.dekf.eps_settle <= 0:
            raise ConfigError("convergence window and thresholds must be positive")
        if self.forcing.rate < 0 or not 0 <= self.forcing.hours <= 24:
            raise ConfigError("irrigation rate must be nonnegative and hours within a day")

    def to_dict(self) -> dict:
        return _plain(self)

    def with_overrides(self, seed: int | None = None, duration: float | None = None,
                       out: str | None = None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if duration is not None:
            changes["duration"] = float(duration)
        if out is not None:
            changes["out"] = str(out)
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError, SoilDomainError) as exc:
            raise ConfigError(str(exc)) from exc


def paper_loam() -> ExperimentConfig:
    """Loam column with 4 sensors, daily 8 h irrigation and a 5-day horizon."""
    return ExperimentConfig(
        forcing=ForcingConfig(rate=1.944e-3 / 3600.0),
        dmhe=DmheConfig(tuning=MheTuning(N=12, Q_w=1.0, R_v=1.0, Pi_L=0.6, Pi_C=0.6, mu_L=1e11,
                                         mu_C=1e11, p_max=2, x_bounds=X_BOUNDS,
                                         k_sat_bounds=K_SAT_BOUNDS, model_substep=10.0)),
    )


def preset(name: str) -> ExperimentConfig:
    if name == "paper-loam":
        return paper_loam()
    raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# nested sections and how to rebuild them from plain values
_SECTIONS = {
    "grid": ColumnGrid, "soil": SoilParams, "forcing": ForcingConfig, "noise": NoiseConfig,
    "simulation": SimulationConfig, "dekf": DekfConfig, "dmhe": DmheConfig,
}


def _merge(cls, base, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    changes = {}
    for key, val in values.items():
        if key == "tuning" and cls in (DekfConfig, DmheConfig):
            tcls = DekfTuning if cls is DekfConfig else MheTuning
            val = _merge(tcls, getattr(base, key), val, f"{where}.tuning")
        elif key == "Q" and cls is DekfTuning:
            val = np.asarray(val, dtype=float)
            val = val * np.eye(4) if val.ndim == 0 else val
        elif key == "initial_guesses":
            val = np.asarray(val, dtype=float)
        elif key in ("multipliers", "x_bounds", "k_sat_bounds", "p0_diag", "sensor_nodes"):
            val = tuple(float(v) if key != "sensor_nodes" else int(v) for v in val)
        changes[key] = val
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError, SoilDomainError) as exc:
        raise ConfigError(f"invalid {where!r}: {exc}") from exc


def config_from_dict(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``values`` on ``base`` (the ``paper-loam`` preset by default)."""
    base = paper_loam() if base is None else base
    if not isinstance(values, dict):
        raise ConfigError("config must be a mapping")
    values = dict(values)
    name = values.pop("preset", None)
    if name is not None:
        base = preset(name)
    changes = {}
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, val in values.items():
        if key not in top:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            changes[key] = _merge(_SECTIONS[key], getattr(base, key), val, key)
        else:
            changes[key] = val
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError, SoilDomainError) as exc:
        raise ConfigError(str(exc)) from exc


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 wants a dot in floats, so plain "1e-5" would load as a string
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$"
               r"|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        values = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(values)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path

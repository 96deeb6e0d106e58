"""
Pipeline configuration.

``default_config.json`` ships next to this module; when it is missing the
literal ``DEFAULTS`` below are used instead. A user file given with
``--config`` is deep-merged over the defaults and may only use known keys.
"""

import copy
import json
import logging
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from attacks import AttackConfig
from classifier import ModelConfig, TrainingConfig
from edge_penalty import PenaltyWeights
from errors import ConfigError, UsageError
from geodata import FilterRules
from scene_synth import SynthConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).with_name("default_config.json")
REPORT_SCOPES = ("all", "held-out", "both")
ATTACK_KEYS = ("weights", "phases", "jitter_px", "seed", "canny_sigma", "canny_low", "canny_high")

DEFAULTS = {
    "synth": SynthConfig().to_dict(),
    "model": ModelConfig().to_dict(),
    "training": asdict(TrainingConfig()),
    "filter": asdict(FilterRules()),
    "attack": {
        "weights": {"lambda1": 1e-3, "lambda2": 1e-1},
        "phases": [[1000, 100.0], [1000, 20.0]],
        "jitter_px": 2,
        "seed": 0,
        "canny_sigma": 2.0,
        "canny_low": 0.1,
        "canny_high": 0.2,
    },
    "experiments": [
        {"exp_id": "exp1", "n": 60, "element_size_m": 0.5, "frames_attacked": 1},
        {"exp_id": "exp2", "n": 80, "element_size_m": 0.5, "frames_attacked": 1},
        {"exp_id": "exp3", "n": 100, "element_size_m": 0.5, "frames_attacked": 1},
        {"exp_id": "exp4", "n": 60, "element_size_m": 0.5, "frames_attacked": 4},
        {"exp_id": "exp5", "n": 80, "element_size_m": 0.5, "frames_attacked": 4},
        {"exp_id": "exp6", "n": 100, "element_size_m": 0.5, "frames_attacked": 4},
    ],
    "targets": [0, 1, 2, 3],
    "report": {"bin_width": 100, "scope": "both"},
}

# sections whose values are replaced wholesale rather than merged key by key
_REPLACED = {"experiments", "targets", "attack.phases", "model.conv_filters", "model.dense_widths"}


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from integers and strings; negative integers are hashed like strings."""
    ints = [p if isinstance(p, int) and p >= 0 else zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentSpec:
    exp_id: str
    n: int
    element_size_m: float
    frames_attacked: int

    def __post_init__(self):
        if not self.exp_id:
            raise ConfigError("experiment ids must be non-empty")
        if self.n < 1 or not self.element_size_m > 0 or self.frames_attacked < 1:
            raise ConfigError(f"experiment {self.exp_id}: needs n >= 1, element_size_m > 0, frames_attacked >= 1")


@dataclass(frozen=True)
class ReportConfig:
    bin_width: int = 100
    scope: str = "both"

    def __post_init__(self):
        if self.bin_width < 1:
            raise ConfigError(f"report.bin_width must be positive, got {self.bin_width}")
        if self.scope not in REPORT_SCOPES:
            raise ConfigError(f"report.scope must be one of {REPORT_SCOPES}, got {self.scope!r}")

    @property
    def scopes(self) -> Tuple[str, ...]:
        return ("all", "held-out") if self.scope == "both" else (self.scope,)


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthConfig
    model: ModelConfig
    training: TrainingConfig
    filter: FilterRules
    attack: dict
    experiments: Tuple[ExperimentSpec, ...]
    targets: Tuple[int, ...]
    report: ReportConfig

    def __post_init__(self):
        if self.synth.chip_size != self.model.input_size:
            raise ConfigError(f"synth.chip_size {self.synth.chip_size} != model.input_size {self.model.input_size}")
        if self.synth.class_count != self.model.class_count:
            raise ConfigError(f"synth.class_count {self.synth.class_count} != model.class_count {self.model.class_count}")
        bad = [t for t in self.targets if not 0 <= t < self.model.class_count]
        if bad:
            raise ConfigError(f"targets {bad} outside 0..{self.model.class_count - 1}")
        ids = [e.exp_id for e in self.experiments]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate experiment ids in {ids}")
        # validates the shared attack settings once
        self.attack_config(ExperimentSpec("check", 1, 1.0, 1), None, targeted=False)

    def experiment(self, exp_id: str) -> ExperimentSpec:
        for e in self.experiments:
            if e.exp_id == exp_id:
                return e
        raise UsageError(f"unknown experiment {exp_id!r}; configured: {[e.exp_id for e in self.experiments]}")

    def attack_config(self, experiment: ExperimentSpec, target_label: Optional[int], targeted: bool = True,
                      seed: Optional[int] = None) -> AttackConfig:
        settings = dict(self.attack)
        settings["weights"] = PenaltyWeights(**settings["weights"])
        if seed is not None:
            settings["seed"] = seed
        return AttackConfig(target_label=target_label, targeted=targeted,
                            frames_attacked=experiment.frames_attacked, n=experiment.n,
                            element_size_m=experiment.element_size_m, **settings)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "training": asdict(self.training),
            "filter": asdict(self.filter),
            "attack": copy.deepcopy(self.attack),
            "experiments": [asdict(e) for e in self.experiments],
            "targets": list(self.targets),
            "report": asdict(self.report),
        }


def _read_config_file(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path} is unreadable: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict) and name not in _REPLACED:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be an object")
            merged[key] = _merge(base[key], value, f"{name}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _apply_seed(data: dict, seed: int) -> None:
    data["synth"]["seed"] = seed
    data["model"]["seed"] = derive_seed(seed, "model")
    data["training"]["seed"] = derive_seed(seed, "training")
    data["attack"]["seed"] = derive_seed(seed, "attack")


def load_config(path=None, seed: Optional[int] = None) -> PipelineConfig:
    """Defaults, then the user file, then the master seed override."""
    data = copy.deepcopy(DEFAULTS)
    if DEFAULT_CONFIG_PATH.exists():
        try:
            data = _merge(data, _read_config_file(DEFAULT_CONFIG_PATH))
        except ConfigError as exc:
            logger.warning("ignoring %s, using built-in defaults: %s", DEFAULT_CONFIG_PATH.name, exc)
    else:
        logger.debug("%s not found, using built-in defaults", DEFAULT_CONFIG_PATH.name)
    if path is not None:
        data = _merge(data, _read_config_file(Path(path)))
        logger.info("loaded configuration from %s", path)
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {seed}")
        _apply_seed(data, seed)

    unknown_attack = set(data["attack"]) - set(ATTACK_KEYS)
    if unknown_attack:
        raise ConfigError(f"unknown config keys {sorted('attack.' + k for k in unknown_attack)}")
    try:
        return PipelineConfig(
            synth=SynthConfig.from_dict(data["synth"]),
            model=ModelConfig.from_dict(data["model"]),
            training=TrainingConfig(**data["training"]),
            filter=FilterRules(**data["filter"]),
            attack=data["attack"],
            experiments=tuple(ExperimentSpec(**e) for e in data["experiments"]),
            targets=tuple(int(t) for t in data["targets"]),
            report=ReportConfig(**data["report"]),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

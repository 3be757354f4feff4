"""
Experiment configuration.

A JSON document with one object per section. Missing keys take task-aware
defaults, unknown keys are rejected, and dotted overrides from the command
line are applied on top of the file (last wins).
"""
import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from .domain.discretization import MIDPOINT, MULTISTEP, Scheme
from .domain.errors import ConfigError
from .domain.objective import LossWeights
from .domain.rollout import NewtonConfig
from .domain.systems import (
    ChainParams,
    ChargedParticleParams,
    DoublePendulumParams,
    OscillatorParams,
    PendulumParams,
)
from .services.training_service import TrainConfig

TASKS = ("dp", "cp", "pixel", "oscillator", "csv-import")
MODELS = ("dflnn", "glnn", "node")

SYSTEM_PARAMS = {
    "dp": DoublePendulumParams,
    "cp": ChargedParticleParams,
    "pixel": PendulumParams,
    "oscillator": OscillatorParams,
    "csv-import": ChainParams,
}

TASK_DEFAULTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "dp": {},
    "cp": {"networks": {"u_depends_on_velocity": True}},
    "pixel": {
        "data": {"train_count": 50, "train_steps": 100, "test_steps": 100, "noise_variance": 0.0},
        "loss": {"physics": 0.9, "reg": 0.1, "ae": 1.0, "reg_points": 20},
        "training": {"batch_size": 1000, "epochs": 5000},
    },
    "oscillator": {"data": {"train_count": 32, "train_steps": 50, "test_steps": 50}},
    "csv-import": {
        "data": {"train_count": 20, "test_count": 4, "train_steps": 100, "test_steps": 100},
        "networks": {"force": "combined_linear"},
    },
}


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = MIDPOINT
    k: int = 1

    def __post_init__(self):
        self.build(h=1.0)

    def build(self, h: float) -> Scheme:
        return Scheme(kind=self.kind, h=h, k=self.k)


@dataclass(frozen=True)
class DataConfig:
    """
    Generator settings. Noise has variance noise_variance·h on training
    positions only; test trajectories stay clean and run test_steps long.
    """
    h: float = 0.1
    train_count: int = 320
    test_count: int = 10
    train_steps: int = 20
    test_steps: int = 50
    noise_variance: float = 1e-2
    substeps: int = 100
    angle_range: float = math.pi / 6
    system: Dict[str, Any] = field(default_factory=dict)
    csv_path: Optional[str] = None
    savgol_window: int = 11
    savgol_polyorder: int = 3
    frame_width: int = 30
    frame_height: int = 50

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be >= 1")
        if self.train_steps < 2 or self.test_steps < 2:
            raise ValueError("trajectories need at least two steps")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")


@dataclass(frozen=True)
class NetworkConfig:
    lagrangian: str = "mechanical"
    force: str = "linear_rayleigh"
    hidden_dim: int = 30
    hidden_layers: int = 3
    epsilon: float = 1e-3
    dropout_rate: float = 0.5
    u_depends_on_velocity: bool = False
    ae_hidden_dim: int = 64
    ae_hidden_layers: int = 1
    latent_dim: int = 1

    def __post_init__(self):
        if self.lagrangian not in ("free", "mechanical"):
            raise ValueError(f"unknown Lagrangian variant '{self.lagrangian}'")
        forces = ("zero", "free", "rayleigh", "linear_rayleigh", "combined", "combined_linear")
        if self.force not in forces:
            raise ValueError(f"unknown force variant '{self.force}'")


@dataclass(frozen=True)
class LossConfig:
    physics: float = 0.5
    reg: float = 0.5
    ae: float = 0.0
    reg_points: int = 100
    squared_residual: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.physics, self.reg, self.ae, self.reg_points, self.squared_residual)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    epochs: int = 20000
    batch_size: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    validation_fraction: float = 0.1
    log_every: int = 100
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.train_config(seed=0)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass(frozen=True)
class EvalConfig:
    k: int = 35
    ae_mse_target: float = 5e-3

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")


SECTIONS = {
    "scheme": SchemeConfig,
    "data": DataConfig,
    "networks": NetworkConfig,
    "loss": LossConfig,
    "training": TrainingConfig,
    "newton": NewtonConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "dp"
    model: str = "dflnn"
    seed: int = 0
    output_dir: str = "runs/default"
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not _is_int(self.seed) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError(f"output_dir must be a non-empty path, got {self.output_dir!r}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model '{self.model}', expected one of {MODELS}")
        if self.task == "pixel" and self.model != "dflnn":
            raise ConfigError("the pixel task is only available for the dflnn model")
        if self.scheme.kind == MULTISTEP and self.model != "dflnn":
            raise ConfigError("the multistep scheme only applies to dflnn training")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        """Build a config from a parsed document, filling task-aware defaults"""
        if not isinstance(data, Mapping):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")

        task = data.get("task", "dp")
        defaults = TASK_DEFAULTS.get(task, {})
        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, Mapping):
                raise ConfigError(f"section '{name}' must be an object")
            sections[name] = _build_section(section_cls, {**defaults.get(name, {}), **raw}, name)

        scalars = {key: data[key] for key in ("task", "model", "seed", "output_dir") if key in data}
        try:
            return cls(**scalars, **sections)
        except (TypeError, ValueError) as error:
            raise ConfigError(str(error)) from error

    def scheme_for_training(self) -> Scheme:
        try:
            return self.scheme.build(self.data.h)
        except ValueError as error:
            raise ConfigError(str(error)) from error

    def system_params(self):
        """Physical parameters of the task's generator, with `data.system` overrides applied"""
        params_cls = SYSTEM_PARAMS[self.task]
        options = {k: tuple(v) if isinstance(v, list) else v for k, v in self.data.system.items()}
        try:
            return params_cls(**options)
        except (TypeError, ValueError) as error:
            raise ConfigError(f"invalid data.system for task {self.task}: {error}") from error

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_type(path: str, default: Any, value: Any) -> None:
    """Scalars must keep the type of their default; None defaults accept anything"""
    if isinstance(default, bool):
        valid = isinstance(value, bool)
    elif isinstance(default, int):
        valid = _is_int(value)
    elif isinstance(default, float):
        valid = _is_int(value) or isinstance(value, float)
    elif isinstance(default, str):
        valid = isinstance(value, str)
    else:
        return
    if not valid:
        raise ConfigError(f"'{path}' must be of type {type(default).__name__}, got {value!r}")


def _build_section(section_cls, values: Mapping[str, Any], path: str):
    fields = {f.name: f for f in dataclasses.fields(section_cls) if f.init}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{path}': {', '.join(unknown)}")
    converted = {}
    for key, value in values.items():
        default = fields[key].default
        _check_type(f"{path}.{key}", default, value)
        converted[key] = tuple(value) if isinstance(value, list) and isinstance(default, tuple) else value
    try:
        return section_cls(**converted)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid section '{path}': {error}") from error


def parse_override(text: str) -> Tuple[str, Any]:
    """`section.key=value`; the value is parsed as JSON and falls back to a plain string"""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[Tuple[str, Any]]) -> Dict[str, Any]:
    """Set dotted keys in a raw config document, in order"""
    result = json.loads(json.dumps(data))
    for key, value in overrides:
        *parents, leaf = key.split(".")
        node = result
        for parent in parents:
            child = node.setdefault(parent, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override '{key}': '{parent}' is not a section")
            node = child
        node[leaf] = value
    return result


def load_config(path: Optional[Path] = None, overrides: Sequence[Tuple[str, Any]] = ()) -> ExperimentConfig:
    """
    Load a config file and apply overrides

    Args:
        path: JSON config file; all defaults when omitted
        overrides: (dotted key, value) pairs applied in order

    Returns:
        The validated configuration
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path} is not valid JSON: {error}") from error
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def _digest(payload: Any) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    return _digest(config.to_dict())


def data_hash(config: ExperimentConfig) -> str:
    """Identity of the generated data: task, seed and data section"""
    return _digest({"task": config.task, "seed": config.seed, "data": asdict(config.data)})

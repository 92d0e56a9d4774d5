# config.py
"""
Training configuration and the flat ``key = value`` config file.

``TrainConfig`` holds every tunable key; ``AgnSettings`` derives the per-module
configs from it so the streams never read the file format directly.
"""
import math
from dataclasses import dataclass, fields, replace
from typing import List, Optional, Tuple

from . import diagnostics
from .cnn_stream import CnnConfig
from .diagnostics import require_valid
from .errors import ConfigError
from .gat_stream import GatConfig
from .graph_builder import GraphConfig
from .inference_stream import InferenceConfig
from .phantom_data import PhantomPalette, PreprocessConfig
from .tensor_core import ActivationConfig


@dataclass
class TrainConfig:
    # optimisation
    cnn_lr: float = 1e-3
    joint_lr: float = 1e-3
    batch_size: int = 1
    cnn_iters: int = 2000
    joint_iters: int = 2000
    graph_update_period: int = 250
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_fraction: float = 0.75
    cnn_aux_weight: float = 1.0
    gnn_aux_weight: float = 0.0
    threshold: float = 0.5

    # architecture
    base_channels: int = 16
    gat_heads: int = 4
    gat_out_features: int = 4
    dropout_p: float = 0.1
    leaky_slope: float = 0.2
    elu_alpha: float = 1.0

    # graph
    delta: int = 3
    d_threshold: Optional[float] = None
    connectivity: int = 4
    solver: str = "dijkstra"
    fmm_eps: float = 1e-3

    # preprocessing / phantom palette
    window: float = 1000.0
    level: float = -600.0
    lung_hu: float = -800.0
    tissue_hu: float = 40.0
    wall_hu: float = 0.0
    lumen_hu: float = -1000.0
    noise_hu: float = 20.0

    def problems(self) -> List[str]:
        errors = []
        for name in ("adam_eps", "window"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("cnn_lr", "joint_lr"):
            # zero freezes the parameters, used for dry runs
            if not getattr(self, name) >= 0:
                errors.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("cnn_iters", "joint_iters", "graph_update_period", "gat_heads", "gat_out_features"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size != 1:
            errors.append(f"batch_size must be 1 (single-slice steps), got {self.batch_size}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("cnn_aux_weight", "gnn_aux_weight", "noise_hu"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.seed < 2 ** 32:
            errors.append(f"seed must lie in [0, 2**32), got {self.seed}")
        if not 0.0 < self.threshold < 1.0:
            errors.append(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 < self.train_fraction < 1.0:
            errors.append(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        errors += self.activation_config().problems()
        errors += self.inference_config().problems()
        errors += self.graph_config().problems()
        return errors

    def cnn_config(self, input_size: Tuple[int, int] = (64, 64)) -> CnnConfig:
        return CnnConfig(base_channels=self.base_channels, input_size=tuple(input_size))

    def graph_config(self) -> GraphConfig:
        return GraphConfig(
            delta=self.delta,
            d_threshold=self.d_threshold,
            connectivity=self.connectivity,
            rng_seed=self.seed,
            solver=self.solver,
            fmm_eps=self.fmm_eps,
        )

    def gat_config(self) -> GatConfig:
        return GatConfig(heads=self.gat_heads, out_features=self.gat_out_features, mode="concat")

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(stage_channels=max(self.base_channels // 4, 1), dropout_p=self.dropout_p, delta=self.delta)

    def activation_config(self) -> ActivationConfig:
        return ActivationConfig(leaky_slope=self.leaky_slope, elu_alpha=self.elu_alpha)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(window=self.window, level=self.level)

    def palette(self) -> PhantomPalette:
        return PhantomPalette(lung=self.lung_hu, tissue=self.tissue_hu, wall=self.wall_hu,
                              lumen=self.lumen_hu, noise=self.noise_hu)


@dataclass
class AgnSettings:
    """Validated bundle handed to the training and prediction entry points."""

    train: TrainConfig
    cnn: CnnConfig
    graph: GraphConfig
    gat: GatConfig
    inference: InferenceConfig
    activation: ActivationConfig
    preprocess: PreprocessConfig

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, input_size: Tuple[int, int] = (64, 64)) -> "AgnSettings":
        problems = cfg.problems() + cfg.cnn_config(input_size).problems()
        require_valid("TrainConfig DIAGNOSTICS:", problems)
        return cls(
            train=cfg,
            cnn=cfg.cnn_config(input_size),
            graph=cfg.graph_config(),
            gat=cfg.gat_config(),
            inference=cfg.inference_config(),
            activation=cfg.activation_config(),
            preprocess=cfg.preprocess_config(),
        )


# =========================
# CONFIG FILE
# =========================

_FIELDS = {f.name: f for f in fields(TrainConfig)}
_AUTO = ("auto", "none", "")


def _parse_value(name: str, text: str):
    default = _FIELDS[name].default
    if name == "d_threshold":
        if text.lower() in _AUTO:
            return None
        value = float(text)
        if not math.isfinite(value) and value != math.inf:
            raise ValueError(text)
        return value
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(text)
        return value
    return text


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Flat 'key = value' lines; '#' starts a comment; unknown or repeated keys are errors."""
    values, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            problems.append(f"{source}:{lineno}: unknown key '{key}'")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: key '{key}' set twice")
            continue
        try:
            values[key] = _parse_value(key, value)
        except ValueError:
            problems.append(f"{source}:{lineno}: bad value '{value}' for '{key}'")
    require_valid(f"Config file {source} DIAGNOSTICS:", problems)
    cfg = replace(TrainConfig(), **values)
    require_valid(f"Config file {source} DIAGNOSTICS:", cfg.problems())
    diagnostics.log(f"config {source}: {len(values)} key(s) set")
    return cfg


def load_config(path: Optional[str], input_size: Tuple[int, int] = (64, 64)) -> AgnSettings:
    """Read a config file (None = all defaults) and derive the per-module settings."""
    if path is None:
        return AgnSettings.from_train_config(TrainConfig(), input_size)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return AgnSettings.from_train_config(parse_config_text(text, path), input_size)

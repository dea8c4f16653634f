"""Training configuration and its INI-style text format.

Every section of the file maps onto one dataclass::

    [train]        iterations, seed, sh_degree, checkpoint_interval, init_opacity
    [attention]    enabled, interval, seed, kernel_size, normalize
    [loss]         lam, beta, eta
    [constraints]  enabled, tau, alpha, omega, age_threshold, interval, ...
    [densify]      enabled, grad_threshold, min_opacity, interval, ...
    [lr]           position, position_final, scale, rotation, opacity, color, sh1
    [render]       dilation, filter_3d, near, tile_size, alpha_max, alpha_min, background

Unknown sections or keys are rejected. ``background`` is written as
``r, g, b``.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

from .constraints import ConstraintConfig, DensifyConfig
from .core import RenderSettings
from .errors import ContractError
from .losses import LossWeights


@dataclass
class AttentionConfig:
    enabled: bool = True
    interval: int = 50
    seed: int = 0
    kernel_size: int = 3
    normalize: bool = True


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    position_max_steps: int = 30000
    scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    sh1: float = 1.25e-4
    spatial_scale: float = 0.0  # 0 -> derive from camera extent

    def position_at(self, step: int, spatial: float) -> float:
        t = min(max(step / max(self.position_max_steps, 1), 0.0), 1.0)
        lr = math.exp(math.log(self.position) * (1 - t) + math.log(self.position_final) * t)
        return lr * spatial


@dataclass
class TrainSettings:
    iterations: int = 30000
    seed: int = 0
    sh_degree: int = 0
    checkpoint_interval: int = 1000
    init_opacity: float = 0.1


@dataclass
class TrainConfig:
    train: TrainSettings = field(default_factory=TrainSettings)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    lr: LearningRates = field(default_factory=LearningRates)
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def iterations(self) -> int:
        return self.train.iterations

    def validate(self) -> None:
        if self.train.iterations < 0:
            raise ContractError("iterations must be >= 0")
        for name, value in [("attention.interval", self.attention.interval),
                            ("constraints.interval", self.constraints.interval),
                            ("densify.interval", self.densify.interval)]:
            if value < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.train.sh_degree not in (0, 1):
            raise ContractError("sh_degree must be 0 or 1")

    def set(self, dotted: str, raw: str) -> None:
        """Override one value, e.g. ``set("loss.beta", "0.5")``."""
        section, _, key = dotted.partition(".")
        group = getattr(self, section, None)
        if group is None or not dataclasses.is_dataclass(group) or not key:
            raise ContractError(f"unknown config key {dotted!r}")
        names = {f.name for f in dataclasses.fields(group)}
        if key not in names:
            raise ContractError(f"unknown config key {dotted!r}")
        setattr(group, key, _parse(raw, getattr(group, key), dotted))
        if hasattr(group, "__post_init__"):
            group.__post_init__()


def _parse(raw: str, current, name: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ContractError(f"bad value {raw!r} for {name}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(f"{section}.{key}", value)
    cfg.validate()
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        group = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for gf in dataclasses.fields(group):
            lines.append(f"{gf.name} = {_format(getattr(group, gf.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def scaled_schedule(iterations: int, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Shrink every iteration-count setting in proportion to a shorter run.

    The defaults describe a 30k-iteration schedule; short runs keep the same
    shape (densify window, opacity resets, constraint passes, ageing)
    compressed into ``iterations``. The attention and densification
    intervals are left as is: densifying more often than every ~100 steps
    only multiplies the population before the gradients have settled.
    """
    cfg = copy.deepcopy(base) if base is not None else TrainConfig()
    f = iterations / TrainSettings.iterations

    def sc(v, lo=1):
        return max(lo, int(round(v * f)))

    cfg.train.iterations = iterations
    cfg.train.checkpoint_interval = sc(cfg.train.checkpoint_interval)
    c, d = cfg.constraints, cfg.densify
    c.interval, c.stop_iteration, c.age_threshold = sc(c.interval), sc(c.stop_iteration), sc(c.age_threshold, 0)
    d.start_iteration, d.stop_iteration = sc(d.start_iteration, 0), sc(d.stop_iteration)
    # resets only make sense with a few densify rounds in between
    d.opacity_reset_interval = max(sc(d.opacity_reset_interval), 2 * d.interval)
    cfg.lr.position_max_steps = iterations
    return cfg

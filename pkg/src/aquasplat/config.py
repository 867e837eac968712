"""Training and run configuration, stored as flat ``key = value`` text."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .losses import LossWeights


@dataclass
class TrainConfig:
    iterations: int = 20000
    seed: int = 0
    # loss weights
    lambda_r: float = 0.8
    lambda_d: float = 0.1
    lambda_ca: float = 1.0
    lambda_s: float = 0.2
    lambda_b: float = 2.0
    alpha_afw: float = 0.5
    use_depth: bool = True
    use_grey: bool = True
    # ablation switches
    ifi: bool = True
    afw: bool = True
    esl: bool = True
    decouple: bool = True
    mlp_layers: int = 5
    # representation
    sh_degree: int = 3
    sh_increase_every: int = 1000
    mlp_hidden: int = 64
    pe_freqs: int = 4
    depth_buckets: int = 64
    backscatter_mode: str = "blend"
    interp_mode: str = "flow"
    ifi_ratio: float = 0.5
    init_opacity: float = 0.1
    init_scale: float = 0.01
    depth_align_every: int = 500
    # densification
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15000
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    # learning rates
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_backscatter: float = 2.5e-3
    lr_medium: float = 1e-3
    lr_gamma: float = 1e-2

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must lie in [0, 3]")
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be at least 1")
        self.loss_weights()  # range checks

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_r=self.lambda_r,
            lambda_d=self.lambda_d,
            lambda_ca=self.lambda_ca,
            lambda_s=self.lambda_s if self.esl else 0.0,
            lambda_b=self.lambda_b,
            alpha_afw=self.alpha_afw,
        )


@dataclass
class RunConfig(TrainConfig):
    scene: str = ""
    out: str = ""
    interp_dir: str = ""
    split_modulus: int = 8

    def __post_init__(self):
        super().__post_init__()
        if self.split_modulus < 2:
            raise ValueError("split_modulus must be at least 2")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _convert(kind: str, raw: str):
    if kind == "bool":
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}") from None
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, cls=RunConfig):
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    kinds = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(kinds[key], value)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return cls(**values)


def load_config(path, cls=RunConfig):
    return parse_config(Path(path).read_text(encoding="utf-8"), cls)


def dump_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg) -> str:
    """SHA-256 over the canonical dump of the training-relevant fields."""
    train = cfg.train_config() if isinstance(cfg, RunConfig) else cfg
    return hashlib.sha256(dump_config(train).encode("utf-8")).hexdigest()


def with_overrides(cfg, **changes):
    return replace(cfg, **changes)

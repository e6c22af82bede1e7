"""Run configuration: a flat ``key = value`` file format with typed parsing.

Values are resolved with precedence command-line flag > environment variable
(``PDFNET_<KEY>``) > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .data import VALID_GRIDS
from .errors import ConfigError
from .losses import LossConfig
from .network import BackboneConfig, ModelConfig

ENV_PREFIX = "PDFNET_"
# Keys describing where a run writes, left out of the checkpoint's config echo.
LOCATION_KEYS = ("out_dir", "resume")


@dataclass
class RunConfig:
    data_root: str = ""
    val_root: str = ""
    out_dir: str = "runs/default"
    resume: str = ""
    resolution: tuple[int, int] = (1024, 1024)
    patch_grid: int = 8
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    backbone_depths: tuple[int, ...] = (1, 1, 1, 1)
    patch_width_scale: float = 0.5
    decoder_channels: int = 64
    head_count: int = 4
    token_limit: int = 32
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    batch_size: int = 1
    grad_accum: int = 1
    max_steps: int = 0
    lambda1: float = 0.5
    lambda2: float = 0.1
    silog_lambda: float = 0.85
    tau: float = 0.1
    use_wbce: bool = True
    use_wiou: bool = True
    use_ssim: bool = True
    use_inte: bool = True
    use_silog: bool = True
    use_depth: bool = True
    use_fse: bool = True
    use_integrity: bool = True
    use_patch_scores: bool = True
    augment: bool = True
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0
    keep_epoch_checkpoints: bool = False
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_grid not in VALID_GRIDS:
            raise ConfigError(f"patch_grid must be one of {VALID_GRIDS}, got {self.patch_grid}")
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ConfigError(f"bad resolution {self.resolution}")
        for key in ("epochs", "batch_size", "grad_accum", "decoder_channels", "head_count", "token_limit", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("max_steps", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ---------------------------------------------------------------- derived configs

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(tuple(self.backbone_channels), tuple(self.backbone_depths)),
            patch_width_scale=self.patch_width_scale,
            decoder_channels=self.decoder_channels,
            head_count=self.head_count,
            patch_grid=self.patch_grid,
            tau=self.tau,
            token_limit=self.token_limit,
            use_depth=self.use_depth,
            use_fse=self.use_fse,
            use_integrity=self.use_integrity,
            use_patch_scores=self.use_patch_scores,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            silog_lambda=self.silog_lambda,
            use_wbce=self.use_wbce,
            use_wiou=self.use_wiou,
            use_ssim=self.use_ssim,
            use_inte=self.use_inte,
            use_silog=self.use_silog,
        )

    @property
    def trains_depth(self) -> bool:
        return self.use_silog and self.lambda2 != 0

    # ---------------------------------------------------------------- (de)serialization

    def to_dict(self, include_location: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_location:
            for k in LOCATION_KEYS:
                d.pop(k)
        return d

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_mapping(parse_text(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = field_types()
        unknown = set(values) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        typed = {k: v if not isinstance(v, str) else parse_value(k, v, types[k]) for k, v in values.items()}
        typed = {k: tuple(v) if isinstance(v, list) else v for k, v in typed.items()}
        return cls(**typed)


def field_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(x) for x in raw.replace("x", ",").split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key}")
        out[key] = value
    return out


def env_values(env: dict | None = None) -> dict[str, str]:
    env = os.environ if env is None else env
    keys = field_types()
    out = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key == "config":
                continue
            if key not in keys:
                raise ConfigError(f"unknown environment override {name}")
            out[key] = value
    return out


def resolve(config_file=None, flags: dict | None = None, env: dict | None = None) -> RunConfig:
    """Merge default < file < environment < flags."""
    values: dict = {}
    if config_file:
        try:
            values.update(parse_text(Path(config_file).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
    values.update(env_values(env))
    values.update({k: v for k, v in (flags or {}).items() if v is not None})
    return RunConfig.from_mapping(values)

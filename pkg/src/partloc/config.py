"""Run configuration: a flat, typed ``key = value`` text document.

One file drives every subcommand (data generation, training, evaluation,
auditing).  Parsing fills unspecified keys with defaults, rejects unknown or
duplicate keys, and reserialization is idempotent: ``parse(serialize(cfg))``
reproduces ``cfg`` and serializing again yields the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

from .encoder import EncoderConfig
from .head import HeadConfig
from .model import ModelConfig
from .scenes import ALTITUDES

ABLATION_FLAGS = ("drop_align", "drop_part", "drop_alt", "drop_distill",
                  "cls_only", "part_only", "no_graph", "all_protos_active",
                  "no_uapa")


class ConfigError(ValueError):
    """Malformed config text, unknown key, or invalid value."""


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"expected 'true' or 'false', got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    # dataset
    n_locations: int = 32            # training locations
    n_test_locations: int = 16       # held-out gallery/query locations
    altitudes: tuple[int, ...] = ALTITUDES
    raster_size: int = 64
    data_seed: int = 11
    # encoder
    patch_size: int = 8
    token_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    teacher_dim: int = 96
    # head
    d_p: int = 32
    embed_dim: int = 96
    k_max: int = 12
    k_min: int = 4
    assign_temperature: float = 0.07
    gate_temperature: float = 0.5
    gate_bias_init: float = 2.0
    cls_norm: str = "batchnorm"
    gat_heads: int = 4
    # model
    init_seed: int = 0
    teacher_seed: int = 7
    # training
    epochs: int = 60
    p_locations: int = 16
    m_drone: int = 4
    head_lr: float = 3e-4
    backbone_lr: float = 3e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    lr_floor: float = 0.01
    lr_scale: float = 1.0
    mar_warmup_epochs: int = 10
    ema_decay: float = 0.996
    weather_online: bool = False
    train_seed: int = 1
    checkpoint_every: int = 0        # 0 = final checkpoint only
    rotation_augmentation: bool = False
    # ablation flags
    drop_align: bool = False
    drop_part: bool = False
    drop_alt: bool = False
    drop_distill: bool = False
    cls_only: bool = False
    part_only: bool = False
    no_graph: bool = False
    all_protos_active: bool = False
    no_uapa: bool = False
    # evaluation
    recall_ks: tuple[int, ...] = (1, 5, 10)
    sdm_k: int = 1
    sdm_lambda: float = 0.05

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(
                raster_size=self.raster_size, patch_size=self.patch_size,
                token_dim=self.token_dim, n_blocks=self.n_blocks,
                n_heads=self.n_heads, teacher_dim=self.teacher_dim),
            head=HeadConfig(
                d_p=self.d_p, embed_dim=self.embed_dim, k_max=self.k_max,
                k_min=self.k_min, assign_temperature=self.assign_temperature,
                gate_temperature=self.gate_temperature,
                gate_bias_init=self.gate_bias_init,
                altitude_bins=self.altitudes, cls_norm=self.cls_norm,
                gat_heads=self.gat_heads),
            n_locations=self.n_locations,
            init_seed=self.init_seed,
            teacher_seed=self.teacher_seed,
        )

    def ablation_mask(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in ABLATION_FLAGS}


def _field_parser(f) -> Any:
    # with postponed annotations the field type is its source string
    name = str(f.type)
    if name == "bool":
        return _parse_bool
    if name.startswith("tuple"):
        return _parse_int_tuple
    if name == "int":
        return int
    if name == "float":
        return float
    return str


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments) into a RunConfig."""
    values: dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser = _field_parser(_FIELDS[key])
        try:
            values[key] = parser(raw)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(
                f"line {lineno}: bad value for {key}: {raw!r} ({exc})"
            ) from exc
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Emit every key in declaration order; reparsing reproduces ``cfg``."""
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}"
             for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_config(cfg))


def _validate(cfg: RunConfig) -> None:
    if cfg.n_locations < 2 or cfg.n_test_locations < 2:
        raise ConfigError("n_locations and n_test_locations must each be >= 2")
    if cfg.p_locations < 1 or cfg.m_drone < 1:
        raise ConfigError("p_locations and m_drone must be positive")
    if min(cfg.head_lr, cfg.backbone_lr) <= 0:
        raise ConfigError("head_lr and backbone_lr must be positive")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be positive")
    if not cfg.altitudes:
        raise ConfigError("altitudes must be non-empty")
    bad = [a for a in cfg.altitudes if a not in ALTITUDES]
    if bad:
        raise ConfigError(f"altitudes {bad} not in the renderable ladder {ALTITUDES}")
    if not 0 < cfg.lr_floor <= 1:
        raise ConfigError("lr_floor must be in (0, 1]")
    if cfg.cls_norm not in ("batchnorm", "layernorm"):
        raise ConfigError("cls_norm must be 'batchnorm' or 'layernorm'")


__all__ = ["RunConfig", "ConfigError", "parse_config", "serialize_config",
           "load_config", "save_config", "ABLATION_FLAGS"]

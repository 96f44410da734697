"""Typed run configuration, presets and the TOML config file format.

A config file looks like::

    schema_version = 1
    seed = 0
    checkpoint_dir = "runs/tiny"
    log_every = 10
    dtype = "float32"

    [model]
    preset = "desk_tiny"   # optional; explicit keys override preset fields
    alpha = 0.4

    [optim]
    peak_lr = 3e-3
    warmup_steps = 20
    total_steps = 200

    [data]
    image_size = 16

Every section is optional. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import tomli
import tomli_w

SCHEMA_VERSION = 1

ScheduleKind = Literal["cosine", "half_cosine", "half_cosine_cooldown"]
SCHEDULE_KINDS = ("cosine", "half_cosine", "half_cosine_cooldown")
CAPTION_STYLES = ("relational", "alt")


class ConfigError(ValueError):
    """Raised for unparsable or invalid configuration.

    ``errors`` holds every violation found, not just the first one.
    """

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int
    depth_enc: int
    d_dec: int
    depth_dec: int
    heads_enc: int
    heads_dec: int
    patch_size: int
    channels: int = 3
    vocab_size: int = 259
    max_text_len: int = 77
    max_patches: int = 64  # decoder positional table covers max_patches + max_text_len
    alpha: float = 0.4
    bias: bool = True  # biases in attention projections, patch embedding and heads
    ffn_mult: float = 8 / 3
    norm_eps: float = 1e-6

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def ffn_hidden_enc(self) -> int:
        return _ffn_hidden(self.d_enc, self.ffn_mult)

    @property
    def ffn_hidden_dec(self) -> int:
        return _ffn_hidden(self.d_dec, self.ffn_mult)


def _ffn_hidden(d: int, mult: float, multiple_of: int = 8) -> int:
    h = int(round(d * mult))
    return multiple_of * ((h + multiple_of - 1) // multiple_of)


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-3
    min_lr: float = 1e-5
    final_cooldown_lr: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 12_500
    total_steps: int = 1_500_000
    schedule: ScheduleKind = "cosine"
    # half_cosine_cooldown only: step at which the linear cooldown branches off
    # (defaults to total_steps) and its length as a fraction of that step.
    cooldown_start: int | None = None
    cooldown_fraction: float = 0.2


@dataclass(frozen=True)
class MixtureSource:
    name: str
    prob: float
    style: str = "relational"


def default_mixture() -> tuple[MixtureSource, ...]:
    """Five-way source mixture with the pre-training sampling probabilities."""
    return (
        MixtureSource("dfn_alt", 0.30, "alt"),
        MixtureSource("dfn_synthetic", 0.30, "relational"),
        MixtureSource("coyo_alt", 0.09, "alt"),
        MixtureSource("hqitp_alt", 0.28, "alt"),
        MixtureSource("hqitp_synthetic", 0.03, "relational"),
    )


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 16
    high_res_image_size: int = 24
    batch_size: int = 16
    dataset_size: int = 0  # 0 streams fresh scenes; N > 0 samples from a fixed pool of N pairs
    scene_grid: int = 2
    min_shapes: int = 1
    max_shapes: int = 3
    native_resolution: bool = False
    token_budget: int = 256  # C, total patches per native-resolution mini-batch
    area_exponents: tuple[int, int] = (2, 4)  # full scale uses (7, 12)
    sources: tuple[MixtureSource, ...] = (MixtureSource("synthetic", 1.0, "relational"),)


@dataclass(frozen=True)
class ProbeConfig:
    num_classes: int = 3
    train_size: int = 256
    val_size: int = 256
    steps: int = 300
    batch_size: int = 64
    lr_grid: tuple[float, ...] = (1e-3, 3e-3)
    wd_grid: tuple[float, ...] = (0.05, 0.1)
    beta1: float = 0.9
    beta2: float = 0.999
    min_lr: float = 1e-5
    grad_clip: float = 3.0
    warmup_steps: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    log_every: int = 10
    dtype: Literal["float32", "float64"] = "float32"


# Full-scale presets: published widths and depths, heads from 64-dim heads.
# Decoder is 1024 wide and 12 deep for every size.
_FULL_SCALE_COMMON = dict(d_dec=1024, depth_dec=12, heads_dec=16, patch_size=14, channels=3,
                     vocab_size=32_000, max_patches=4096)

PRESETS: dict[str, ModelConfig] = {
    "aimv2_l": ModelConfig(d_enc=1024, depth_enc=24, heads_enc=16, **_FULL_SCALE_COMMON),
    "aimv2_h": ModelConfig(d_enc=1536, depth_enc=24, heads_enc=24, **_FULL_SCALE_COMMON),
    "aimv2_1b": ModelConfig(d_enc=2048, depth_enc=24, heads_enc=32, **_FULL_SCALE_COMMON),
    "aimv2_3b": ModelConfig(d_enc=3072, depth_enc=24, heads_enc=48, **_FULL_SCALE_COMMON),
    "desk_tiny": ModelConfig(d_enc=32, depth_enc=2, d_dec=32, depth_dec=2, heads_enc=2,
                             heads_dec=2, patch_size=4, vocab_size=259, max_patches=64),
    "desk_small": ModelConfig(d_enc=64, depth_enc=4, d_dec=64, depth_dec=2, heads_enc=4,
                              heads_dec=4, patch_size=4, vocab_size=259, max_patches=64),
}

# Peak learning rates per encoder size at full scale.
FULL_SCALE_PEAK_LR = {"aimv2_l": 1e-3, "aimv2_h": 8e-4, "aimv2_1b": 8e-4, "aimv2_3b": 4e-4}


def preset_model(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _model_errors(m: ModelConfig) -> list[str]:
    errs = []
    for name in ("d_enc", "depth_enc", "d_dec", "depth_dec", "heads_enc", "heads_dec",
                 "patch_size", "channels", "vocab_size", "max_text_len", "max_patches"):
        v = getattr(m, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            errs.append(f"model.{name} must be a positive integer, got {v!r}")
    if not errs:
        if m.d_enc % m.heads_enc:
            errs.append(f"d_enc={m.d_enc} not divisible by heads_enc={m.heads_enc}")
        if m.d_dec % m.heads_dec:
            errs.append(f"d_dec={m.d_dec} not divisible by heads_dec={m.heads_dec}")
        if m.d_enc % 4:
            errs.append(f"d_enc={m.d_enc} must be divisible by 4 for 2-D sin-cos embeddings")
    if not m.alpha >= 0:
        errs.append(f"alpha must be ≥ 0, got {m.alpha}")
    if not m.ffn_mult > 0:
        errs.append("model.ffn_mult must be > 0")
    if not m.norm_eps > 0:
        errs.append("model.norm_eps must be > 0")
    return errs


def _optim_errors(o: OptimConfig) -> list[str]:
    errs = []
    if not o.peak_lr > 0:
        errs.append("optim.peak_lr must be > 0")
    for name in ("min_lr", "final_cooldown_lr", "weight_decay"):
        if not getattr(o, name) >= 0:
            errs.append(f"optim.{name} must be ≥ 0")
    if o.min_lr > o.peak_lr:
        errs.append("optim.min_lr must be ≤ peak_lr")
    for name in ("beta1", "beta2"):
        if not 0 < getattr(o, name) < 1:
            errs.append(f"optim.{name} must be in (0, 1)")
    if not o.grad_clip > 0:
        errs.append("optim.grad_clip must be > 0")
    if not o.eps > 0:
        errs.append("optim.eps must be > 0")
    if o.warmup_steps < 0:
        errs.append("optim.warmup_steps must be ≥ 0")
    if o.total_steps < 1:
        errs.append("optim.total_steps must be ≥ 1")
    if o.warmup_steps >= o.total_steps:
        errs.append(f"optim.warmup_steps ({o.warmup_steps}) must be < total_steps ({o.total_steps})")
    if o.schedule not in SCHEDULE_KINDS:
        errs.append(f"optim.schedule must be one of {SCHEDULE_KINDS}, got {o.schedule!r}")
    if o.cooldown_start is not None and not (o.warmup_steps <= o.cooldown_start <= o.total_steps):
        errs.append("optim.cooldown_start must lie in [warmup_steps, total_steps]")
    if not 0 < o.cooldown_fraction <= 1:
        errs.append("optim.cooldown_fraction must be in (0, 1]")
    return errs


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def _data_errors(d: DataConfig, m: ModelConfig | None) -> list[str]:
    errs = []
    for name in ("image_size", "high_res_image_size", "batch_size", "scene_grid",
                 "min_shapes", "max_shapes", "token_budget"):
        if getattr(d, name) < 1:
            errs.append(f"data.{name} must be ≥ 1")
    if d.dataset_size < 0:
        errs.append("data.dataset_size must be ≥ 0")
    if d.min_shapes > d.max_shapes:
        errs.append("data.min_shapes must be ≤ max_shapes")
    if d.max_shapes > d.scene_grid ** 2:
        errs.append("data.max_shapes exceeds the number of scene grid cells")
    lo, hi = d.area_exponents
    if not 0 <= lo <= hi:
        errs.append("data.area_exponents must satisfy 0 ≤ lo ≤ hi")
    if not _is_pow2(d.token_budget) or d.token_budget < 2 ** hi:
        errs.append(f"data.token_budget must be a power of two ≥ 2^{hi}")
    if not d.sources:
        errs.append("data.sources must not be empty")
    else:
        total = sum(s.prob for s in d.sources)
        if abs(total - 1.0) > 1e-9:
            errs.append(f"data.sources probabilities sum to {total}, expected 1")
        for s in d.sources:
            if not 0 <= s.prob <= 1:
                errs.append(f"source {s.name!r} probability must be in [0, 1]")
            if s.style not in CAPTION_STYLES:
                errs.append(f"source {s.name!r} style must be one of {CAPTION_STYLES}")
    if m is not None:
        for name in ("image_size", "high_res_image_size"):
            size = getattr(d, name)
            if size % m.patch_size:
                errs.append(f"data.{name}={size} not divisible by patch_size={m.patch_size}")
            elif (size // m.patch_size) ** 2 > m.max_patches:
                errs.append(f"data.{name} yields more patches than model.max_patches")
        if d.native_resolution and 2 ** hi > m.max_patches:
            errs.append("data.area_exponents upper bound exceeds model.max_patches")
    return errs


def _probe_errors(p: ProbeConfig) -> list[str]:
    errs = []
    if p.num_classes < 2:
        errs.append("probe.num_classes must be ≥ 2")
    if p.num_classes > 3:
        errs.append("probe.num_classes must be ≤ 3 (one class per shape kind)")
    for name in ("train_size", "val_size", "steps", "batch_size"):
        if getattr(p, name) < 1:
            errs.append(f"probe.{name} must be ≥ 1")
    if not p.lr_grid or any(lr <= 0 for lr in p.lr_grid):
        errs.append("probe.lr_grid must be non-empty and positive")
    if not p.wd_grid or any(wd < 0 for wd in p.wd_grid):
        errs.append("probe.wd_grid must be non-empty and nonnegative")
    if p.warmup_steps >= p.steps:
        errs.append("probe.warmup_steps must be < steps")
    return errs


def validate_config(cfg: RunConfig) -> None:
    errs = _model_errors(cfg.model) + _optim_errors(cfg.optim)
    errs += _data_errors(cfg.data, cfg.model if not _model_errors(cfg.model) else None)
    errs += _probe_errors(cfg.probe)
    if not 0 <= cfg.seed < 2 ** 64:
        errs.append("seed must be a 64-bit unsigned integer")
    if cfg.log_every < 1:
        errs.append("log_every must be ≥ 1")
    if cfg.checkpoint_every < 0:
        errs.append("checkpoint_every must be ≥ 0")
    if cfg.dtype not in ("float32", "float64"):
        errs.append("dtype must be float32 or float64")
    if errs:
        raise ConfigError(errs)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _build(cls, section: dict[str, Any], where: str, errs: list[str], base=None):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    for k in unknown:
        errs.append(f"unknown key {where}.{k}")
    kwargs = {k: v for k, v in section.items() if k in names}
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except TypeError as exc:
        errs.append(f"[{where}] {exc}")
        return None


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    errs: list[str] = []
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errs.append(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")

    model_raw = dict(raw.pop("model", {}))
    preset = model_raw.pop("preset", None)
    base = None
    if preset is not None:
        if preset not in PRESETS:
            errs.append(f"unknown preset {preset!r}")
        else:
            base = PRESETS[preset]
    model = _build(ModelConfig, model_raw, "model", errs, base)

    optim = _build(OptimConfig, raw.pop("optim", {}), "optim", errs)

    data_raw = dict(raw.pop("data", {}))
    if "sources" in data_raw:
        srcs = []
        for i, s in enumerate(data_raw["sources"]):
            src = _build(MixtureSource, s, f"data.sources[{i}]", errs)
            if src is not None:
                srcs.append(src)
        data_raw["sources"] = tuple(srcs)
    data = _build(DataConfig, data_raw, "data", errs)
    probe = _build(ProbeConfig, raw.pop("probe", {}), "probe", errs)

    top = {k: raw.pop(k) for k in ("seed", "checkpoint_dir", "checkpoint_every", "log_every", "dtype")
           if k in raw}
    for k in sorted(raw):
        errs.append(f"unknown key {k}")
    if errs or None in (model, optim, data, probe):
        raise ConfigError(errs or ["incomplete configuration"])
    cfg = RunConfig(model=model, optim=optim, data=data, probe=probe, **top)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        # tomli reports "(at line N, column M)" in the message
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    def clean(obj):
        d = dataclasses.asdict(obj)
        return {k: _plain(v) for k, v in d.items() if v is not None}

    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "checkpoint_dir": cfg.checkpoint_dir,
        "checkpoint_every": cfg.checkpoint_every,
        "log_every": cfg.log_every,
        "dtype": cfg.dtype,
        "model": clean(cfg.model),
        "optim": clean(cfg.optim),
        "data": clean(cfg.data),
        "probe": clean(cfg.probe),
    }
    return out


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")


def config_hash(cfg: RunConfig) -> bytes:
    """SHA-256 digest of the canonical serialization."""
    return hashlib.sha256(dumps_config(cfg).encode("utf-8")).digest()


def load_manifest(path: str | Path) -> tuple[MixtureSource, ...]:
    """Read a dataset manifest: a TOML file with a ``[[sources]]`` array."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    errs: list[str] = []
    raw = dict(raw)
    raw.pop("schema_version", None)
    items = raw.pop("sources", [])
    for k in sorted(raw):
        errs.append(f"unknown key {k}")
    sources = [_build(MixtureSource, s, f"sources[{i}]", errs) for i, s in enumerate(items)]
    if not sources:
        errs.append("manifest lists no sources")
    else:
        total = sum(s.prob for s in sources if s is not None)
        if abs(total - 1.0) > 1e-9:
            errs.append(f"source probabilities sum to {total}, expected 1")
    if errs:
        raise ConfigError(errs)
    return tuple(sources)

"""Learning-rate schedules, fully decoupled AdamW, checkpoints and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .config import OptimConfig, RunConfig, config_hash, validate_config
from .data import (CaptionedImage, MultimodalBatch, SceneSpec, collate, generate_scene,
                   plan_native_batch, sample_source)
from .objective import AIMv2, LossReport, pretrain_forward
from .patchify import dump_patch_grid, PatchSequence

log = logging.getLogger(__name__)

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def cooldown_bounds(optim: OptimConfig) -> tuple[int, int]:
    """(start step, length) of the linear cooldown of a half_cosine_cooldown schedule."""
    start = optim.total_steps if optim.cooldown_start is None else optim.cooldown_start
    return start, int(round(optim.cooldown_fraction * start))


def schedule_length(optim: OptimConfig) -> int:
    if optim.schedule == "half_cosine_cooldown":
        start, length = cooldown_bounds(optim)
        return start + length
    return optim.total_steps


def _base_lr(t: float, o: OptimConfig) -> float:
    if t < o.warmup_steps:
        return o.peak_lr * t / o.warmup_steps
    tau = (t - o.warmup_steps) / (o.total_steps - o.warmup_steps)
    if o.schedule == "cosine":
        return o.min_lr + 0.5 * (o.peak_lr - o.min_lr) * (1 + math.cos(math.pi * tau))
    # half-cosine: the first quarter period, ending at half the peak
    return o.peak_lr * 0.5 * (1 + math.cos(math.pi * tau / 2))


def lr_at_step(t: float, optim: OptimConfig) -> float:
    """Learning rate at step ``t`` (``0 <= t <= schedule_length(optim)``).

    Linear warmup from 0, then cosine to ``min_lr`` or half-cosine to
    ``peak_lr / 2``. ``half_cosine_cooldown`` follows the half-cosine up to the
    branch step ``s`` and then decays linearly to ``final_cooldown_lr`` over
    ``cooldown_fraction * s`` steps.
    """
    end = schedule_length(optim)
    if not 0 <= t <= end:
        raise ValueError(f"step {t} outside schedule [0, {end}]")
    if optim.schedule != "half_cosine_cooldown":
        return _base_lr(t, optim)
    start, length = cooldown_bounds(optim)
    if t <= start:
        return _base_lr(t, optim)
    lr0 = _base_lr(start, optim)
    frac = (t - start) / length
    # weighted form is exact at both ends of the ramp
    return (1 - frac) * lr0 + frac * optim.final_cooldown_lr


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0


def init_optimizer_state(params: Mapping[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        {k: torch.zeros_like(v) for k, v in params.items()},
        {k: torch.zeros_like(v) for k, v in params.items()},
    )


@torch.no_grad()
def adamw_update(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState,
                 lr: float, optim: OptimConfig, weight_decay: float | None = None) -> None:
    """One in-place AdamW step with weight decay independent of ``lr``.

    ``theta <- theta - wd * theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if lr < 0:
        raise ValueError("learning rate must be ≥ 0")
    wd = optim.weight_decay if weight_decay is None else weight_decay
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = optim.beta1, optim.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if wd:
            p.mul_(1 - wd)
        if lr:
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + optim.eps))


@torch.no_grad()
def global_norm(grads: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))


@torch.no_grad()
def clip_gradients(grads: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads.values())
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AIMV2CK\x00"
CKPT_VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_DTYPE_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    step: int
    config_hash: bytes
    arrays: dict[str, Tensor]
    version: int = CKPT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Little-endian container: header, array records, trailing CRC32."""
    path = Path(path)
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", ckpt.version)
    buf += ckpt.config_hash.ljust(32, b"\x00")[:32]
    buf += struct.pack("<QI", ckpt.step, len(ckpt.arrays))
    for name, t in ckpt.arrays.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw_name = name.encode("utf-8")
        buf += struct.pack("<H", len(raw_name)) + raw_name
        buf += struct.pack("<BB", _DTYPE_TAGS[t.dtype], t.ndim)
        buf += struct.pack(f"<{t.ndim}Q", *t.shape)
        # numpy's '<' view makes the byte order explicit
        arr = t.numpy()
        buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < 60 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: schema version {version} unsupported (expected {CKPT_VERSION})")
    chash = data[12:44]
    step, count = struct.unpack_from("<QI", data, 44)
    off = 56
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dtype = _DTYPES[tag]
        np_dtype = np.dtype({torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}[dtype])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype=np_dtype, count=n, offset=off).reshape(shape)
        off += n * np_dtype.itemsize
        arrays[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    return Checkpoint(step, chash, arrays, version)


# ---------------------------------------------------------------------------
# data for the loop
# ---------------------------------------------------------------------------

def scene_spec_for(cfg: RunConfig, style: str, image_size: int | None = None,
                   aspect: int = 1) -> SceneSpec:
    d = cfg.data
    size = image_size or d.image_size
    return SceneSpec(canvas=(size, size * aspect), grid=(d.scene_grid, d.scene_grid * aspect),
                     min_shapes=d.min_shapes, max_shapes=d.max_shapes, style=style)


def _pair(cfg: RunConfig, seed_words: tuple[int, ...], image_size: int, aspect: int = 1) -> CaptionedImage:
    src_rng = np.random.default_rng((*seed_words, 0))
    src = sample_source(cfg.data.sources, src_rng)
    spec = scene_spec_for(cfg, cfg.data.sources[src].style, image_size, aspect)
    return generate_scene((*seed_words, 1), spec, source_id=src)


@lru_cache(maxsize=8)
def _fixed_pool(cfg: RunConfig, image_size: int) -> tuple[CaptionedImage, ...]:
    return tuple(_pair(cfg, (cfg.seed, 1, j), image_size) for j in range(cfg.data.dataset_size))


def make_batch(cfg: RunConfig, step: int, rng: np.random.Generator, image_size: int | None = None) -> MultimodalBatch:
    """Deterministic batch for ``step``; all randomness comes from ``rng``."""
    d = cfg.data
    size = image_size or d.image_size
    dtype = getattr(torch, cfg.dtype)
    p, tmax = cfg.model.patch_size, cfg.model.max_text_len
    if d.native_resolution:
        plan = plan_native_batch(d.token_budget, rng, d.area_exponents)
        aspects = rng.integers(1, 3, size=plan.batch_size)  # square or 2:1 canvases
        pairs = []
        for b, a in enumerate(aspects):
            pair = _pair(cfg, (cfg.seed, 3, step, b), size, int(a))
            if rng.random() < 0.5:  # portrait variant
                pair.image = pair.image.transpose(0, 1).contiguous()
            pairs.append(pair)
        return collate(pairs, p, area=plan.area, max_text_len=tmax, dtype=dtype)
    if d.dataset_size:
        pool = _fixed_pool(cfg, size)
        pairs = [pool[i] for i in rng.integers(0, len(pool), size=d.batch_size)]
    else:
        pairs = [_pair(cfg, (cfg.seed, 2, step, b), size) for b in range(d.batch_size)]
    return collate(pairs, p, max_text_len=tmax, dtype=dtype)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class MetricRecord:
    step: int
    lr: float
    pixel_loss: float
    text_loss: float
    total: float

    def line(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.pixel_loss!r}\t{self.text_loss!r}\t{self.total!r}"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")


@dataclass
class TrainState:
    model: AIMv2
    opt: OptimizerState
    step: int = 0

    def params(self) -> dict[str, Tensor]:
        return dict(self.model.named_parameters())

    def to_checkpoint(self, cfg: RunConfig) -> Checkpoint:
        arrays = {f"param/{k}": v.detach() for k, v in self.params().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.opt.exp_avg.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.opt.exp_avg_sq.items()})
        arrays["opt_step"] = torch.tensor([self.opt.step], dtype=torch.int64)
        return Checkpoint(self.step, config_hash(cfg), arrays)


def init_state(cfg: RunConfig) -> TrainState:
    model = AIMv2(cfg.model, seed=cfg.seed, dtype=getattr(torch, cfg.dtype))
    return TrainState(model, init_optimizer_state(dict(model.named_parameters())))


def restore_state(cfg: RunConfig, ckpt: Checkpoint) -> TrainState:
    state = init_state(cfg)
    if ckpt.config_hash != config_hash(cfg):
        log.warning("checkpoint config hash differs from the current config (branching run)")
    with torch.no_grad():
        for k, p in state.params().items():
            key = f"param/{k}"
            if key not in ckpt.arrays:
                raise CheckpointError(f"checkpoint lacks parameter {k}")
            if ckpt.arrays[key].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}")
            p.copy_(ckpt.arrays[key])
            state.opt.exp_avg[k].copy_(ckpt.arrays[f"adam_m/{k}"])
            state.opt.exp_avg_sq[k].copy_(ckpt.arrays[f"adam_v/{k}"])
    state.opt.step = int(ckpt.arrays["opt_step"][0])
    state.step = ckpt.step
    return state


def high_res_config(cfg: RunConfig) -> RunConfig:
    """Adaptation stage: higher input resolution and zero weight decay."""
    return dataclasses.replace(
        cfg,
        optim=dataclasses.replace(cfg.optim, weight_decay=0.0),
        data=dataclasses.replace(cfg.data, image_size=cfg.data.high_res_image_size),
    )


def checkpoint_path(cfg: RunConfig, step: int) -> Path:
    return Path(cfg.checkpoint_dir) / f"step_{step:08d}.ckpt"


def train_step(cfg: RunConfig, state: TrainState) -> tuple[LossReport, float]:
    step = state.step
    rng = np.random.default_rng((cfg.seed, 0xA1, step))
    batch = make_batch(cfg, step, rng)
    model = state.model
    report = pretrain_forward(batch, model.encoder, model.decoder, cfg.model.alpha, rng)
    if not math.isfinite(report.total):
        raise FloatingPointError("non-finite loss")
    params = state.params()
    grads = torch.autograd.grad(report.loss, list(params.values()), allow_unused=True)
    grads = {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(params.items(), grads)}
    clip_gradients(grads, cfg.optim.grad_clip)
    lr = lr_at_step(step + 1, cfg.optim)
    adamw_update(params, grads, state.opt, lr, cfg.optim)
    state.step += 1
    return report, lr


def train(
    cfg: RunConfig,
    *,
    resume: str | Path | None = None,
    high_res_adapt: bool = False,
    stop_at: int | None = None,
    log_path: str | Path | None = None,
    write_checkpoints: bool = True,
    dump_patches: str | Path | None = None,
) -> list[MetricRecord]:
    """Run the pre-training loop and return the logged metrics.

    Trains until ``schedule_length(cfg.optim)`` steps (or ``stop_at``). Each
    step draws its batch, prefix length and data from an RNG seeded by
    ``(seed, step)``, so a resumed run replays an uninterrupted one exactly.
    """
    if high_res_adapt:
        cfg = high_res_config(cfg)
    validate_config(cfg)
    state = restore_state(cfg, load_checkpoint(resume)) if resume else init_state(cfg)
    end = schedule_length(cfg.optim) if stop_at is None else min(stop_at, schedule_length(cfg.optim))
    if dump_patches is not None:
        _dump_first_batch(cfg, state.step, Path(dump_patches))

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    records: list[MetricRecord] = []
    last_ckpt: Path | None = Path(resume) if resume else None
    try:
        while state.step < end:
            try:
                report, lr = train_step(cfg, state)
            except FloatingPointError as exc:
                log.error("step %d: %s", state.step, exc)
                raise TrainingDiverged(state.step, last_ckpt) from exc
            if state.step % cfg.log_every == 0 or state.step == end:
                rec = MetricRecord(state.step, lr, report.pixel_loss, report.text_loss, report.total)
                records.append(rec)
                log.info("step %d lr %.3g pixel %.4f text %.4f total %.4f", rec.step, lr,
                         rec.pixel_loss, rec.text_loss, rec.total)
                if log_file:
                    log_file.write(rec.line() + "\n")
                    log_file.flush()
            if write_checkpoints and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                last_ckpt = save_checkpoint(state.to_checkpoint(cfg), checkpoint_path(cfg, state.step))
        if write_checkpoints:
            save_checkpoint(state.to_checkpoint(cfg), checkpoint_path(cfg, state.step))
    finally:
        if log_file:
            log_file.close()
    return records


def _dump_first_batch(cfg: RunConfig, step: int, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    batch = make_batch(cfg, step, np.random.default_rng((cfg.seed, 0xA1, step)))
    for b in range(batch.patches.shape[0]):
        seq = PatchSequence(batch.patches[b].double(), tuple(batch.grids[b]), batch.valid[b])
        dump_patch_grid(seq, cfg.model.patch_size, directory / f"batch{step:06d}_{b:03d}.ppm")

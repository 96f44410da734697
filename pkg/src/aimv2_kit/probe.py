"""Attentive probing of a frozen vision encoder."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import OptimConfig, ProbeConfig, RunConfig
from .data import SHAPES, SceneSpec, generate_scene
from .encoder import VisionEncoder
from .nnprim import init_linear, linear, masked_mha
from .patchify import patchify
from .trainer import clip_gradients, lr_at_step

log = logging.getLogger(__name__)

Tensor = torch.Tensor


class AttentiveProbe(nn.Module):
    """One learnable query cross-attending over patch features, then a linear classifier."""

    def __init__(self, d: int, num_classes: int, heads: int, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.heads = heads
        self.num_classes = num_classes
        self.query = nn.Parameter(torch.randn(1, d, generator=gen, dtype=dtype) * 0.02)
        self.wk = init_linear(d, d, gen, dtype)
        self.wv = init_linear(d, d, gen, dtype)
        self.bv = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.cls_w = init_linear(d, num_classes, gen, dtype)
        self.cls_b = nn.Parameter(torch.zeros(num_classes, dtype=dtype))

    def pool(self, features: Tensor) -> Tensor:
        """features ``[..., I, d]`` -> pooled ``[..., d]`` (all patches visible)."""
        k = linear(features, self.wk)
        v = linear(features, self.wv, self.bv)
        q = self.query.expand(*features.shape[:-2], 1, -1)
        mask = torch.ones(1, features.shape[-2], dtype=torch.bool)
        return masked_mha(q, k, v, mask, self.heads)[..., 0, :]

    def forward(self, features: Tensor) -> Tensor:
        return linear(self.pool(features), self.cls_w, self.cls_b)


def attentive_pool(features: Tensor, probe: AttentiveProbe) -> Tensor:
    return probe.pool(features)


@dataclass
class ProbeDataset:
    patches: Tensor  # [N, I, D]
    grid: tuple[int, int]
    labels: Tensor  # long [N]

    def __len__(self) -> int:
        return self.labels.shape[0]


def make_shape_dataset(n: int, seed: int | tuple[int, ...], num_classes: int = 3, image_size: int = 16,
                       scene_grid: int = 2, patch_size: int = 4, dtype=torch.float32) -> ProbeDataset:
    """Single-shape scenes labelled by shape kind; colour and cell vary."""
    if n < 1:
        raise ValueError("dataset must not be empty")
    spec = SceneSpec(canvas=(image_size, image_size), grid=(scene_grid, scene_grid),
                     min_shapes=1, max_shapes=1, shapes=SHAPES[:num_classes])
    words = tuple(seed) if isinstance(seed, tuple) else (seed,)
    patches, labels = [], []
    for j in range(n):
        pair = generate_scene((*words, 7, j), spec)
        patches.append(patchify(pair.image, patch_size).patches)
        labels.append(SHAPES.index(pair.items[0].shape))
    grid = (image_size // patch_size, image_size // patch_size)
    return ProbeDataset(torch.stack(patches).to(dtype), grid, torch.tensor(labels))


def encoder_checksum(encoder: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def extract_features(encoder: VisionEncoder, dataset: ProbeDataset, batch_size: int = 256) -> Tensor:
    """Last-layer features with bidirectional attention (prefix = all patches)."""
    n = dataset.patches.shape[1]
    mask = torch.ones(n, n, dtype=torch.bool)
    chunks = [encoder(dataset.patches[i:i + batch_size], dataset.grid, mask)
              for i in range(0, len(dataset), batch_size)]
    return torch.cat(chunks)


@dataclass
class ProbeResult:
    probe: AttentiveProbe
    lr: float
    weight_decay: float
    train_accuracy: float
    val_accuracy: float | None = None
    sweep: list[dict] = field(default_factory=list)


def _accuracy(probe: AttentiveProbe, feats: Tensor, labels: Tensor) -> float:
    if labels.numel() == 0:
        raise ValueError("empty dataset")
    if int(labels.min()) < 0 or int(labels.max()) >= probe.num_classes:
        raise ValueError(f"label outside the probe's {probe.num_classes} classes")
    with torch.no_grad():
        pred = probe(feats).argmax(dim=-1)
    return float((pred == labels).double().mean())


def _fit(feats: Tensor, labels: Tensor, hp: ProbeConfig, lr: float, wd: float, heads: int,
         seed: int) -> AttentiveProbe:
    probe = AttentiveProbe(feats.shape[-1], hp.num_classes, heads, seed=seed, dtype=feats.dtype)
    opt = torch.optim.AdamW(probe.parameters(), lr=lr, betas=(hp.beta1, hp.beta2), weight_decay=wd)
    sched = OptimConfig(peak_lr=lr, min_lr=min(hp.min_lr, lr), warmup_steps=hp.warmup_steps,
                        total_steps=hp.steps, schedule="cosine")
    rng = np.random.default_rng((seed, 11))
    n = len(labels)
    for step in range(hp.steps):
        idx = torch.from_numpy(rng.choice(n, size=min(hp.batch_size, n), replace=False))
        loss = F.cross_entropy(probe(feats[idx]), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        clip_gradients({k: p.grad for k, p in probe.named_parameters()}, hp.grad_clip)
        for group in opt.param_groups:
            group["lr"] = lr_at_step(step, sched)
        opt.step()
    return probe


def train_probe(encoder: VisionEncoder, train_set: ProbeDataset, hp: ProbeConfig,
                val_set: ProbeDataset | None = None, seed: int = 0) -> ProbeResult:
    """Sweep ``hp.lr_grid x hp.wd_grid`` and keep the most accurate probe.

    Selection uses validation accuracy when ``val_set`` is given, else
    training accuracy. The encoder is never optimized: features are
    extracted once under ``no_grad`` and the encoder's bytes are checksummed
    before and after.
    """
    if len(train_set) == 0:
        raise ValueError("empty dataset")
    before = encoder_checksum(encoder)
    was_training = encoder.training
    encoder.eval()
    requires = [p.requires_grad for p in encoder.parameters()]
    for p in encoder.parameters():
        p.requires_grad_(False)
    try:
        feats = extract_features(encoder, train_set)
        val_feats = extract_features(encoder, val_set) if val_set is not None else None
        heads = encoder.cfg.heads_enc
        best: ProbeResult | None = None
        sweep = []
        for lr in hp.lr_grid:
            for wd in hp.wd_grid:
                probe = _fit(feats, train_set.labels, hp, lr, wd, heads, seed)
                tr = _accuracy(probe, feats, train_set.labels)
                va = _accuracy(probe, val_feats, val_set.labels) if val_set is not None else None
                sweep.append({"lr": lr, "weight_decay": wd, "train_accuracy": tr, "val_accuracy": va})
                log.info("probe lr=%g wd=%g train=%.4f val=%s", lr, wd, tr, va)
                score = va if va is not None else tr
                if best is None or score > (best.val_accuracy if va is not None else best.train_accuracy):
                    best = ProbeResult(probe, lr, wd, tr, va)
    finally:
        for p, r in zip(encoder.parameters(), requires):
            p.requires_grad_(r)
        encoder.train(was_training)
    if encoder_checksum(encoder) != before:
        raise RuntimeError("encoder parameters changed during probe training")
    best.sweep = sweep
    return best


def evaluate_probe(encoder: VisionEncoder, probe: AttentiveProbe, dataset: ProbeDataset) -> float:
    """Top-1 accuracy of ``probe`` on ``dataset`` with a bidirectional encoder."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return _accuracy(probe, extract_features(encoder, dataset), dataset.labels)


def probe_from_config(encoder: VisionEncoder, cfg: RunConfig) -> ProbeResult:
    """Build the shape-classification splits described by ``cfg`` and sweep a probe."""
    kw = dict(num_classes=cfg.probe.num_classes, image_size=cfg.data.image_size,
              scene_grid=cfg.data.scene_grid, patch_size=cfg.model.patch_size,
              dtype=next(encoder.parameters()).dtype)
    train_set = make_shape_dataset(cfg.probe.train_size, (cfg.seed, 1), **kw)
    val_set = make_shape_dataset(cfg.probe.val_size, (cfg.seed, 2), **kw)
    return train_probe(encoder, train_set, cfg.probe, val_set, seed=cfg.seed)


def write_probe_report(result: ProbeResult, path: str | Path, extra: dict | None = None) -> Path:
    report = {
        "best": {"lr": result.lr, "weight_decay": result.weight_decay,
                 "train_accuracy": result.train_accuracy, "val_accuracy": result.val_accuracy},
        "sweep": result.sweep,
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return path

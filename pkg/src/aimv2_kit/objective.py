"""Pixel regression loss, caption cross-entropy and the full pre-training forward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .data import MultimodalBatch
from .decoder import MultimodalDecoder
from .encoder import VisionEncoder
from .masks import build_prefix_mask, forbid_padding, make_targets, sample_prefix_len
from .nnprim import GradCheckReport, grad_check

Tensor = torch.Tensor


def pixel_loss(preds: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean over active positions of the per-patch mean squared error."""
    if not bool(mask.any()):
        raise ValueError("pixel loss has no active targets")
    diff = preds[mask] - targets[mask]
    return diff.pow(2).mean(dim=-1).mean()


def text_loss(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean negative log-likelihood of the target token over active positions."""
    if not bool(mask.any()):
        raise ValueError("text loss has no active targets")
    return F.cross_entropy(logits[mask], targets[mask])


def total_loss(pixel, text, alpha: float):
    return text + alpha * pixel


@dataclass
class LossReport:
    pixel_loss: float
    text_loss: float
    total: float
    active_pixel_targets: int
    active_text_targets: int
    prefix_len: int
    # differentiable total for backward()
    loss: Tensor | None = field(default=None, repr=False, compare=False)


class AIMv2(nn.Module):
    """Vision encoder plus multimodal decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.encoder = VisionEncoder(cfg, gen, dtype)
        self.decoder = MultimodalDecoder(cfg, gen, dtype)


def pretrain_forward(
    batch: MultimodalBatch,
    encoder: VisionEncoder,
    decoder: MultimodalDecoder,
    alpha: float,
    rng: np.random.Generator | None = None,
    prefix_len: int | None = None,
) -> LossReport:
    """Sample a prefix length, encode under the prefix mask, decode, score.

    One prefix length is shared by every image in the batch. Pass
    ``prefix_len`` to fix it instead of drawing from ``rng``.
    """
    n = batch.num_patches
    if prefix_len is None:
        if rng is None:
            raise ValueError("either rng or prefix_len is required")
        prefix_len = sample_prefix_len(n, rng)
    mask = forbid_padding(build_prefix_mask(n, prefix_len), batch.valid)
    feats = encoder(batch.patches, batch.grids, mask)
    pixel_preds, logits = decoder(feats, batch.tokens, batch.valid)
    tgt = make_targets(batch.patches, batch.tokens, prefix_len, valid=batch.valid, eps=1e-6)
    lp = pixel_loss(pixel_preds, tgt.pixel_targets, tgt.pixel_loss_mask)
    lt = text_loss(logits, tgt.text_targets, tgt.text_loss_mask)
    tot = total_loss(lp, lt, alpha)
    pixel, text = lp.detach().item(), lt.detach().item()
    return LossReport(
        pixel_loss=pixel,
        text_loss=text,
        total=total_loss(pixel, text, alpha),
        active_pixel_targets=int(tgt.pixel_loss_mask.sum()),
        active_text_targets=int(tgt.text_loss_mask.sum()),
        prefix_len=prefix_len,
        loss=tot,
    )


def check_pretrain_gradients(
    cfg: ModelConfig,
    seed: int,
    *,
    image_size: int = 8,
    num_tokens: int = 3,
    alpha: float | None = None,
    eps: float = 1e-4,
    tol: float = 1e-5,
    max_entries: int | None = 24,
) -> GradCheckReport:
    """Finite-difference check of the full pre-training loss in float64.

    Uses random images of ``image_size`` pixels (``(image_size/p)^2`` patches)
    and ``num_tokens`` random caption bytes; the prefix length is drawn once
    from ``seed`` and then held fixed.
    """
    rng = np.random.default_rng(seed)
    model = AIMv2(cfg, seed=seed, dtype=torch.float64)
    # move off the near-symmetric init so every path carries signal
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(rng.normal(0.0, 0.05, size=tuple(p.shape))))
    img = torch.from_numpy(rng.random((2, image_size, image_size, cfg.channels)))
    from .patchify import patchify

    seqs = [patchify(im, cfg.patch_size) for im in img]
    tokens = torch.from_numpy(rng.integers(0, 256, size=(2, num_tokens)))
    batch = MultimodalBatch(torch.stack([s.patches for s in seqs]), torch.stack([s.valid for s in seqs]),
                            [s.grid for s in seqs], tokens)
    prefix = sample_prefix_len(batch.num_patches, rng)
    a = cfg.alpha if alpha is None else alpha

    def loss_fn():
        return pretrain_forward(batch, model.encoder, model.decoder, a, prefix_len=prefix).loss

    return grad_check(loss_fn, dict(model.named_parameters()), eps=eps, tol=tol,
                      max_entries=max_entries, seed=seed)

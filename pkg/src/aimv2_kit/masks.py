"""Prefix/causal attention masks, prefix-length sampling and shifted targets.

Masks are boolean tensors with ``mask[i, j] = True`` when position ``i`` may
attend to position ``j``. Positions are 0-based here; a prefix of length ``M``
covers positions ``0 .. M-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import EOT_ID, PAD_ID
from .patchify import PatchSequence, normalize_patch_targets

Tensor = torch.Tensor


def sample_prefix_len(num_patches: int, rng: np.random.Generator) -> int:
    """Draw ``M`` uniformly from ``{1, ..., I-1}``."""
    if num_patches < 2:
        raise ValueError(f"need at least 2 patches to sample a prefix, got {num_patches}")
    return int(rng.integers(1, num_patches))


def build_prefix_mask(num_patches: int, prefix_len: int) -> Tensor:
    """Bidirectional among the first ``prefix_len`` positions, causal after.

    ``prefix_len == num_patches`` gives the all-allow mask used at inference.
    """
    if not 1 <= prefix_len <= num_patches:
        raise ValueError(f"prefix length {prefix_len} outside [1, {num_patches}]")
    idx = torch.arange(num_patches)
    return (idx[None, :] < prefix_len) | (idx[None, :] <= idx[:, None])


def build_causal_mask(length: int) -> Tensor:
    idx = torch.arange(length)
    return idx[None, :] <= idx[:, None]


def forbid_padding(mask: Tensor, valid: Tensor) -> Tensor:
    """Forbid attention to padding columns, keeping the diagonal.

    mask: ``[L, L]``; valid: ``[..., L]``. Returns ``[..., L, L]``.
    """
    eye = torch.eye(mask.shape[-1], dtype=torch.bool)
    return (mask & valid[..., None, :]) | eye


@dataclass
class TargetPack:
    pixel_targets: Tensor  # [..., I, D]; row i holds normalized patch i+1
    pixel_loss_mask: Tensor  # bool [..., I]
    text_targets: Tensor  # long [..., T]
    text_loss_mask: Tensor  # bool [..., T]


def make_targets(
    patches: PatchSequence | Tensor,
    tokens: Tensor,
    prefix_len: int,
    *,
    valid: Tensor | None = None,
    pad_id: int = PAD_ID,
    eot_id: int = EOT_ID,
    eps: float = 1e-6,
) -> TargetPack:
    """Shift-left targets and loss masks for the image and caption outputs.

    Image output ``i`` regresses normalized patch ``i+1``. It is scored only
    when that patch lies outside the prefix, exists (the last output has no
    successor) and neither patch is padding. Text output ``t`` predicts token
    ``t+1``; a caption that does not end in EOT gets EOT as its final target.
    Positions holding or predicting padding are unscored.

    Accepts a single :class:`PatchSequence` or batched ``[..., I, D]`` patches
    with ``valid`` ``[..., I]``; ``tokens`` is ``[..., T]``.
    """
    if isinstance(patches, PatchSequence):
        valid = patches.valid
        patches = patches.patches
    elif valid is None:
        valid = torch.ones(patches.shape[:-1], dtype=torch.bool)
    n = patches.shape[-2]
    if not 1 <= prefix_len <= n - 1:
        raise ValueError(f"prefix length {prefix_len} outside [1, {n - 1}]")

    norm = normalize_patch_targets(patches, eps)
    pixel_targets = torch.cat([norm[..., 1:, :], torch.zeros_like(norm[..., :1, :])], dim=-2)
    idx = torch.arange(n)
    # output i targets patch i+1 (0-based), which must have index >= prefix_len
    keep = (idx + 1 >= prefix_len) & (idx < n - 1)
    nxt_valid = torch.cat([valid[..., 1:], torch.zeros_like(valid[..., :1])], dim=-1)
    pixel_mask = keep & valid & nxt_valid

    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.shape[-1] == 0:
        return TargetPack(pixel_targets, pixel_mask, tokens.clone(), torch.zeros_like(tokens, dtype=torch.bool))
    last = tokens[..., -1:]
    tail = torch.where((last == eot_id) | (last == pad_id), torch.full_like(last, pad_id),
                       torch.full_like(last, eot_id))
    text_targets = torch.cat([tokens[..., 1:], tail], dim=-1)
    text_mask = (tokens != pad_id) & (text_targets != pad_id)
    return TargetPack(pixel_targets, pixel_mask, text_targets, text_mask)

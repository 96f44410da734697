"""Image <-> patch sequence conversion and per-patch target normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

Tensor = torch.Tensor


@dataclass
class PatchSequence:
    """Raster-ordered (row-major) flattened patches of one image.

    Each patch is flattened in ``(row, col, channel)`` order, giving
    ``p * p * C`` entries. ``valid`` is False for zero-padding patches.
    """

    patches: Tensor  # [I, p*p*C]
    grid: tuple[int, int]
    valid: Tensor  # bool [I]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def __post_init__(self):
        rows, cols = self.grid
        if self.patches.shape[0] != rows * cols or self.valid.shape != (rows * cols,):
            raise ValueError(f"grid {self.grid} inconsistent with {self.patches.shape[0]} patches")


def patchify(image: Tensor | np.ndarray, p: int) -> PatchSequence:
    image = torch.as_tensor(image)
    if image.ndim != 3:
        raise ValueError(f"expected [H, W, C] image, got shape {tuple(image.shape)}")
    h, w, c = image.shape
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = image.reshape(rows, p, cols, p, c).permute(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return PatchSequence(x.contiguous(), (rows, cols), torch.ones(rows * cols, dtype=torch.bool))


def unpatchify(seq: PatchSequence, p: int) -> Tensor:
    rows, cols = seq.grid
    dim = seq.patches.shape[1]
    if dim % (p * p):
        raise ValueError(f"patch dim {dim} incompatible with patch size {p}")
    c = dim // (p * p)
    x = torch.where(seq.valid[:, None], seq.patches, torch.zeros((), dtype=seq.patches.dtype))
    return x.reshape(rows, cols, p, p, c).permute(0, 2, 1, 3, 4).reshape(rows * p, cols * p, c)


def normalize_patch_targets(patches: PatchSequence | Tensor, eps: float = 1e-6) -> Tensor:
    """Per-patch standardization with population variance, over the last dim."""
    x = patches.patches if isinstance(patches, PatchSequence) else patches
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def write_pnm(path: str | Path, image: Tensor | np.ndarray) -> None:
    """Write an ``[H, W]``/``[H, W, 1]`` (PGM) or ``[H, W, 3]`` (PPM) image in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {arr.shape} as PNM")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = magic + f"\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def dump_patch_grid(seq: PatchSequence, p: int, path: str | Path, gap: int = 1) -> None:
    """Render patches as a tiled image with ``gap``-pixel separators.

    Padding patches are drawn mid-gray so they stand out from black content.
    """
    rows, cols = seq.grid
    c = seq.patches.shape[1] // (p * p)
    step = p + gap
    canvas = np.ones((rows * step - gap, cols * step - gap, c))
    tiles = seq.patches.detach().cpu().double().numpy().reshape(-1, p, p, c)
    for i in range(rows * cols):
        r, col = divmod(i, cols)
        tile = tiles[i] if bool(seq.valid[i]) else np.full((p, p, c), 0.5)
        canvas[r * step:r * step + p, col * step:col * step + p] = tile
    write_pnm(path, canvas)

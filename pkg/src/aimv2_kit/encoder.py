"""ViT-style vision encoder with prefix attention."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .nnprim import Block, init_linear, linear, rms_norm

Tensor = torch.Tensor


def _sincos_1d(d: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
    out = np.outer(pos, omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=256)
def _pos_cached(grid: tuple[int, int], d: int) -> Tensor:
    return _positional_embedding(grid, d)


def positional_embedding(grid: tuple[int, int], d: int) -> Tensor:
    """Fixed 2-D sin-cos embedding ``[rows*cols, d]`` in raster order (float64).

    The first half of each vector encodes the row, the second the column, so
    a cell's embedding depends only on its coordinates, not the grid size.
    """
    return _pos_cached(tuple(int(g) for g in grid), d).clone()


def _positional_embedding(grid: tuple[int, int], d: int) -> Tensor:
    if d % 4:
        raise ValueError(f"embedding width {d} must be divisible by 4")
    rows, cols = grid
    r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(d // 2, r.reshape(-1)), _sincos_1d(d // 2, c.reshape(-1))], axis=1)
    return torch.from_numpy(emb)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.patch_w = init_linear(cfg.patch_dim, cfg.d_enc, gen, dtype)
        self.patch_b = nn.Parameter(torch.zeros(cfg.d_enc, dtype=dtype)) if cfg.bias else None
        self.blocks = nn.ModuleList(
            Block(cfg.d_enc, cfg.ffn_hidden_enc, cfg.heads_enc, bias=cfg.bias, eps=cfg.norm_eps,
                  gen=gen, dtype=dtype)
            for _ in range(cfg.depth_enc)
        )
        self.norm = nn.Parameter(torch.ones(cfg.d_enc, dtype=dtype))

    def embed(self, patches: Tensor, grids: Sequence[tuple[int, int]] | tuple[int, int]) -> Tensor:
        """Linear patch embedding plus 2-D positions, ``[B, I, D] -> [B, I, d_enc]``."""
        b, n, _ = patches.shape
        if isinstance(grids, tuple) and len(grids) == 2 and all(isinstance(g, int) for g in grids):
            grids = [grids] * b
        pos = torch.stack([_pos_cached(tuple(int(x) for x in g), self.cfg.d_enc) for g in grids]).to(patches.dtype)
        if pos.shape[1] != n:
            raise ValueError(f"grid sizes {list(grids)} do not match {n} patches")
        return linear(patches, self.patch_w, self.patch_b) + pos

    def encode(self, x: Tensor, mask: Tensor) -> Tensor:
        """Transformer stack and final norm over already-embedded tokens."""
        for blk in self.blocks:
            x = blk(x, mask)
        return rms_norm(x, self.norm, self.cfg.norm_eps)

    def forward(self, patches: Tensor, grids: Sequence[tuple[int, int]] | tuple[int, int],
                mask: Tensor) -> Tensor:
        """patches ``[B, I, D]`` (or ``[I, D]``), one grid per row or a shared grid,
        mask ``[I, I]`` or ``[B, I, I]``. Returns features ``[B, I, d_enc]``."""
        squeeze = patches.ndim == 2
        if squeeze:
            patches = patches[None]
        n = patches.shape[1]
        if mask.shape[-2:] != (n, n):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {n} patches")
        x = self.encode(self.embed(patches, grids), mask)
        return x[0] if squeeze else x

"""Joint causal multimodal decoder with pixel and token heads."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .masks import build_causal_mask, forbid_padding
from .nnprim import Block, init_linear, linear, rms_norm

Tensor = torch.Tensor


class MultimodalDecoder(nn.Module):
    """Image features first, caption tokens after, one causal stack.

    Learned absolute positions index the concatenated sequence slot.
    """

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_dec
        self.img_w = init_linear(cfg.d_enc, d, gen, dtype)
        self.img_b = nn.Parameter(torch.zeros(d, dtype=dtype)) if cfg.bias else None
        self.tok_embed = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=gen, dtype=dtype) * 0.02)
        self.pos_embed = nn.Parameter(
            torch.randn(cfg.max_patches + cfg.max_text_len, d, generator=gen, dtype=dtype) * 0.02)
        self.blocks = nn.ModuleList(
            Block(d, cfg.ffn_hidden_dec, cfg.heads_dec, bias=cfg.bias, eps=cfg.norm_eps, gen=gen, dtype=dtype)
            for _ in range(cfg.depth_dec)
        )
        self.norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.pixel_w = init_linear(d, cfg.patch_dim, gen, dtype)
        self.pixel_b = nn.Parameter(torch.zeros(cfg.patch_dim, dtype=dtype)) if cfg.bias else None
        self.text_w = init_linear(d, cfg.vocab_size, gen, dtype)
        self.text_b = nn.Parameter(torch.zeros(cfg.vocab_size, dtype=dtype)) if cfg.bias else None

    def forward(self, img_feats: Tensor, tokens: Tensor, valid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """img_feats ``[B, I, d_enc]``, tokens ``[B, T]`` -> pixel preds ``[B, I, D]``,
        token logits ``[B, T, V]`` (unbatched inputs give unbatched outputs).

        ``valid`` ``[B, I]`` marks real image patches; later positions never
        attend to padding patches.
        """
        squeeze = img_feats.ndim == 2
        if squeeze:
            img_feats, tokens = img_feats[None], tokens[None]
            valid = None if valid is None else valid[None]
        n, t = img_feats.shape[1], tokens.shape[1]
        if t > self.cfg.max_text_len:
            raise ValueError(f"{t} tokens exceed max_text_len={self.cfg.max_text_len}")
        if n > self.cfg.max_patches:
            raise ValueError(f"{n} patches exceed max_patches={self.cfg.max_patches}")
        if t and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        img = linear(img_feats, self.img_w, self.img_b)
        txt = self.tok_embed[tokens]
        x = torch.cat([img, txt], dim=1) + self.pos_embed[: n + t]
        mask = build_causal_mask(n + t)
        if valid is not None and not bool(valid.all()):
            text_ok = torch.ones(*valid.shape[:-1], t, dtype=torch.bool)
            mask = forbid_padding(mask, torch.cat([valid, text_ok], dim=-1))
        for blk in self.blocks:
            x = blk(x, mask)
        x = rms_norm(x, self.norm, self.cfg.norm_eps)
        pixels = linear(x[:, :n], self.pixel_w, self.pixel_b)
        logits = linear(x[:, n:], self.text_w, self.text_b)
        if squeeze:
            return pixels[0], logits[0]
        return pixels, logits

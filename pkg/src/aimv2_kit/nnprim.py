"""Functional transformer primitives and a central-difference gradient checker.

Weights follow the ``x @ W`` layout, i.e. ``W`` has shape ``[d_in, d_out]``.
Analytic gradients come from autograd; :func:`grad_check` compares them with
finite differences computed independently of autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"gain shape {tuple(gain.shape)} does not match last dim of x {tuple(x.shape)}")
    return gain * x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    d = x.shape[-1]
    if w_gate.shape[0] != d or w_in.shape != w_gate.shape or w_out.shape != (w_gate.shape[1], d):
        raise ValueError(
            f"inconsistent SwiGLU shapes: x[..., {d}], gate {tuple(w_gate.shape)}, "
            f"in {tuple(w_in.shape)}, out {tuple(w_out.shape)}"
        )
    return (F.silu(x @ w_gate) * (x @ w_in)) @ w_out


def _check_mask(mask: Tensor) -> None:
    if mask.dtype != torch.bool:
        raise TypeError("attention mask must be boolean")
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("attention mask has a row with every column forbidden")


def attention_weights(q: Tensor, k: Tensor, mask: Tensor) -> Tensor:
    """Softmax attention weights ``[..., Lq, Lk]`` for single-head ``q``/``k``."""
    _check_mask(mask)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    # torch.softmax subtracts the row max; forbidden entries become exactly 0
    return torch.softmax(scores, dim=-1)


def masked_mha(q: Tensor, k: Tensor, v: Tensor, mask: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected q, k, v.

    q: ``[..., Lq, d]``; k, v: ``[..., Lk, d]``; mask: boolean, broadcastable to
    ``[..., Lq, Lk]``, True where attention is allowed.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ValueError("q, k, v widths disagree")
    hd = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(*t.shape[:-1], heads, hd).transpose(-2, -3)

    w = attention_weights(split(q), split(k), mask.unsqueeze(-3))
    out = w @ split(v)
    return out.transpose(-2, -3).reshape(*q.shape[:-1], d)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


BLOCK_KEYS = ("norm1", "wq", "wk", "wv", "wo", "norm2", "w_gate", "w_in", "w_out")


def transformer_block(
    x: Tensor, params: Mapping[str, Tensor], mask: Tensor, heads: int, eps: float = 1e-6
) -> Tensor:
    """Pre-norm block: x + MHA(RMSNorm(x)), then + SwiGLU(RMSNorm(x)).

    Bias entries (``bq``, ``bk``, ``bv``, ``bo``) are optional.
    """
    h = rms_norm(x, params["norm1"], eps)
    q = linear(h, params["wq"], params.get("bq"))
    k = linear(h, params["wk"], params.get("bk"))
    v = linear(h, params["wv"], params.get("bv"))
    x = x + linear(masked_mha(q, k, v, mask, heads), params["wo"], params.get("bo"))
    h = rms_norm(x, params["norm2"], eps)
    return x + swiglu_ffn(h, params["w_gate"], params["w_in"], params["w_out"])


def init_linear(d_in: int, d_out: int, gen: torch.Generator, dtype, std: float = 0.02) -> nn.Parameter:
    return nn.Parameter(torch.randn(d_in, d_out, generator=gen, dtype=dtype) * std)


class Block(nn.Module):
    """Parameter container for :func:`transformer_block`."""

    def __init__(self, d: int, hidden: int, heads: int, *, bias: bool, eps: float,
                 gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.heads = heads
        self.eps = eps
        self.p = nn.ParameterDict()
        self.p["norm1"] = nn.Parameter(torch.ones(d, dtype=dtype))
        self.p["norm2"] = nn.Parameter(torch.ones(d, dtype=dtype))
        for name in ("wq", "wk", "wv", "wo"):
            self.p[name] = init_linear(d, d, gen, dtype)
            # a key bias shifts every score in a row equally, so softmax ignores it
            if bias and name != "wk":
                self.p["b" + name[1]] = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.p["w_gate"] = init_linear(d, hidden, gen, dtype)
        self.p["w_in"] = init_linear(d, hidden, gen, dtype)
        self.p["w_out"] = init_linear(hidden, d, gen, dtype)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        return transformer_block(x, self.p, mask, self.heads, self.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tol: float
    eps: float
    errors: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None


def _as_float(loss: Tensor | float) -> float:
    val = float(loss)
    if not math.isfinite(val):
        raise FloatingPointError(f"loss is not finite: {val}")
    return val


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``loss_fn`` takes no arguments and must read the tensors in ``params``
    (typically module parameters), which are perturbed in place and restored.
    For each parameter the error is ``max|g_a - g_n| / max(max|g_a|, max|g_n|)``
    over the checked entries (0 when both gradients vanish). With
    ``max_entries`` set, at most that many entries per parameter are sampled.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    _as_float(loss.detach())
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    report = GradCheckReport(tol=tol, eps=eps)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t, ga in zip(names, tensors, analytic):
            ga = torch.zeros_like(t) if ga is None else ga
            ga_flat = ga.reshape(-1)  # autograd may hand back non-contiguous grads
            if not t.is_contiguous():
                raise ValueError(f"parameter {name} must be contiguous to be perturbed in place")
            flat = t.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
            else:
                idx = range(n)
            num, ana = [], []
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + eps
                fp = _as_float(loss_fn())
                flat[j] = orig - eps
                fm = _as_float(loss_fn())
                flat[j] = orig
                num.append((fp - fm) / (2 * eps))
                ana.append(ga_flat[j].item())
            report.checked_entries += len(num)
            num_t = torch.tensor(num, dtype=torch.float64)
            ana_t = torch.tensor(ana, dtype=torch.float64)
            scale = max(num_t.abs().max().item(), ana_t.abs().max().item())
            diff = (num_t - ana_t).abs().max().item()
            report.errors[name] = 0.0 if scale == 0.0 else diff / scale
    return report

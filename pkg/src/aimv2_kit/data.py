"""Synthetic captioned scenes, byte-level tokenizer, source mixtures and
native-resolution batch planning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .patchify import PatchSequence, patchify, write_pnm

# byte-level vocabulary: 0..255 raw bytes, then specials
PAD_ID = 256
EOT_ID = 257
UNK_ID = 258
VOCAB_SIZE = 259

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def tokenize(text: str, max_len: int = 77) -> list[int]:
    """UTF-8 bytes followed by EOT, truncated so the result has at most ``max_len`` ids.

    Truncation keeps the EOT and drops trailing bytes.
    """
    ids = list(text.encode("utf-8"))
    return ids[: max_len - 1] + [EOT_ID]


def detokenize(tokens: Sequence[int]) -> str:
    out = bytearray()
    for t in tokens:
        t = int(t)
        if t == EOT_ID:
            break
        if t < 256:
            out.append(t)
    return out.decode("utf-8", errors="replace")


def pad_tokens(seqs: Sequence[Sequence[int]], length: int | None = None) -> torch.Tensor:
    length = max((len(s) for s in seqs), default=0) if length is None else length
    out = torch.full((len(seqs), length), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        s = list(s)[:length]
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (16, 16)  # H, W in pixels
    grid: tuple[int, int] = (2, 2)  # cell rows, cols
    min_shapes: int = 1
    max_shapes: int = 3
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    style: str = "relational"

    @property
    def cell(self) -> tuple[int, int]:
        return self.canvas[0] // self.grid[0], self.canvas[1] // self.grid[1]


@dataclass(frozen=True)
class ShapeItem:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) in the scene grid


@dataclass
class CaptionedImage:
    image: torch.Tensor  # [H, W, C] in [0, 1]
    caption: str
    source_id: int = 0
    items: tuple[ShapeItem, ...] = ()


def relation(a: ShapeItem, b: ShapeItem) -> str:
    """Position of ``a`` relative to ``b``; vertical offsets take precedence."""
    if a.cell[0] != b.cell[0]:
        return "above" if a.cell[0] < b.cell[0] else "below"
    return "left of" if a.cell[1] < b.cell[1] else "right of"


def caption_for(items: Sequence[ShapeItem], style: str = "relational") -> str:
    words = [f"{it.color} {it.shape}" for it in items]
    if style == "alt":
        return ", ".join(words)
    parts = [words[0]]
    for prev, cur, w in zip(items, items[1:], words[1:]):
        parts.append(f"{relation(prev, cur)} {w}")
    return " ".join(parts)


def _draw(canvas: np.ndarray, item: ShapeItem, cell: tuple[int, int]) -> None:
    ch, cw = cell
    m = max(1, min(ch, cw) // 8)
    top, left = item.cell[0] * ch + m, item.cell[1] * cw + m
    h, w = ch - 2 * m, cw - 2 * m
    yy, xx = np.mgrid[0:h, 0:w]
    yc, xc = (yy + 0.5) / h, (xx + 0.5) / w  # pixel centers in [0, 1]
    if item.shape == "square":
        inside = np.ones((h, w), dtype=bool)
    elif item.shape == "circle":
        inside = (yc - 0.5) ** 2 + (xc - 0.5) ** 2 <= 0.25
    elif item.shape == "triangle":
        inside = np.abs(xc - 0.5) <= 0.5 * yc
    else:
        raise ValueError(f"unknown shape {item.shape!r}")
    canvas[top:top + h, left:left + w][inside] = COLORS[item.color]


def render(items: Sequence[ShapeItem], spec: SceneSpec) -> np.ndarray:
    canvas = np.zeros((*spec.canvas, 3))
    for it in items:
        _draw(canvas, it, spec.cell)
    return canvas


def sample_items(rng: np.random.Generator, spec: SceneSpec) -> tuple[ShapeItem, ...]:
    gr, gc = spec.grid
    if spec.max_shapes > gr * gc:
        raise ValueError(f"grid {gr}x{gc} cannot hold {spec.max_shapes} shapes")
    if min(spec.cell) < 4:
        raise ValueError(f"canvas {spec.canvas} too small: cells must be at least 4 pixels")
    k = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    cells = rng.permutation(gr * gc)[:k]
    items = []
    for c in cells:
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        items.append(ShapeItem(shape, color, divmod(int(c), gc)))
    return tuple(items)


def generate_scene(seed: int | Sequence[int], spec: SceneSpec = SceneSpec(), source_id: int = 0) -> CaptionedImage:
    """Render 1-3 shapes in distinct grid cells and describe them.

    Shapes are listed in sampling order; in the relational style each shape
    after the first is preceded by its position relative to the previous one,
    e.g. ``"red square above blue circle"``.
    """
    rng = np.random.default_rng(seed)
    items = sample_items(rng, spec)
    image = torch.from_numpy(render(items, spec))
    return CaptionedImage(image, caption_for(items, spec.style), source_id, items)


def dump_pairs(pairs: Sequence[CaptionedImage], directory: str | Path) -> None:
    """Write each pair as ``NNNNNN.ppm`` plus a ``NNNNNN.txt`` caption sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        write_pnm(directory / f"{i:06d}.ppm", pair.image)
        (directory / f"{i:06d}.txt").write_text(pair.caption + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# mixture sampling
# ---------------------------------------------------------------------------

def sample_source(probs: Sequence[float], rng: np.random.Generator, size: int | None = None):
    """Categorical draw(s) of a source index."""
    p = np.asarray([getattr(x, "prob", x) for x in probs], dtype=np.float64)
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"source probabilities must be nonnegative and sum to 1, got {p.tolist()}")
    cdf = np.cumsum(p)
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, p.size - 1)  # guards u beyond a cdf that rounds below 1
    return int(idx) if size is None else idx


# ---------------------------------------------------------------------------
# native-resolution batching
# ---------------------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, size: int | None = None, lo: float = -1.0, hi: float = 1.0):
    """Standard normal restricted to ``[lo, hi]`` by rejection."""
    n = 1 if size is None else size
    out = np.empty(n)
    filled = 0
    while filled < n:
        z = rng.standard_normal(max(16, 2 * (n - filled)))
        z = z[(z >= lo) & (z <= hi)][: n - filled]
        out[filled:filled + z.size] = z
        filled += z.size
    return float(out[0]) if size is None else out


def exponent_from_z(z: float, n_range: tuple[int, int] = (7, 12)) -> int:
    """Map z in [-1, 1] linearly onto ``n_range`` and round half up."""
    lo, hi = n_range
    n_real = (lo + hi) / 2 + (hi - lo) / 2 * z
    return int(math.floor(n_real + 0.5))


@dataclass
class BatchPlan:
    area: int  # patches per image, A = 2^n
    batch_size: int  # images per mini-batch, B = C / A
    budget: int  # C
    exponent: int
    z: float
    grids: list[tuple[int, int]] = field(default_factory=list)


def plan_native_batch(budget: int, rng: np.random.Generator, n_range: tuple[int, int] = (7, 12),
                      z: float | None = None) -> BatchPlan:
    lo, hi = n_range
    if budget <= 0 or budget & (budget - 1) or budget < 2 ** hi:
        raise ValueError(f"token budget must be a power of two ≥ 2^{hi}, got {budget}")
    if z is None:
        z = truncated_normal(rng)
    n = exponent_from_z(z, n_range)
    area = 2 ** n
    if budget % area:
        raise ValueError(f"budget {budget} not divisible by area {area}")
    return BatchPlan(area, budget // area, budget, n, z)


def choose_grid(height: int, width: int, area: int, p: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Pick ``rows * cols == area`` minimizing padding for an aspect-preserving fit.

    Returns the grid and the resized ``(h, w)``. Ties prefer the grid whose
    aspect ratio is closest to the image's.
    """
    best = None
    for rows in range(1, area + 1):
        if area % rows:
            continue
        cols = area // rows
        scale = min(rows * p / height, cols * p / width)
        h = min(rows * p, max(1, int(round(height * scale))))
        w = min(cols * p, max(1, int(round(width * scale))))
        pad = area * p * p - h * w
        aspect_gap = abs(math.log((cols / rows) / (width / height)))
        key = (pad, aspect_gap, rows)
        if best is None or key < best[0]:
            best = (key, (rows, cols), (h, w))
    return best[1], best[2]


def fit_image_to_area(image: torch.Tensor, area: int, p: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Resize ``image`` ``[H, W, C]`` to fit an ``area``-patch grid, zero-padding the rest.

    The resized image sits in the top-left corner. Returns the padded image
    ``[rows*p, cols*p, C]`` and the raster-order ``valid`` mask (False for
    patches containing no image pixels).
    """
    if area < 1:
        raise ValueError("area must be ≥ 1")
    image = torch.as_tensor(image)
    height, width, c = image.shape
    (rows, cols), (h, w) = choose_grid(height, width, area, p)
    if (h, w) == (height, width):
        resized = image
    else:
        x = image.permute(2, 0, 1)[None]
        resized = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    out = torch.zeros(rows * p, cols * p, c, dtype=image.dtype)
    out[:h, :w] = resized
    r_idx = torch.arange(rows)[:, None]
    c_idx = torch.arange(cols)[None, :]
    valid = (r_idx * p < h) & (c_idx * p < w)
    return out, valid.reshape(-1)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class MultimodalBatch:
    patches: torch.Tensor  # [B, I, p*p*C]
    valid: torch.Tensor  # bool [B, I]
    grids: list[tuple[int, int]]
    tokens: torch.Tensor  # long [B, T], PAD-filled

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]

    def to(self, dtype: torch.dtype) -> "MultimodalBatch":
        return MultimodalBatch(self.patches.to(dtype), self.valid, self.grids, self.tokens)


def collate(pairs: Sequence[CaptionedImage], p: int, *, area: int | None = None,
            max_text_len: int = 77, dtype: torch.dtype = torch.float32) -> MultimodalBatch:
    """Patchify and stack images, tokenize and pad captions.

    Without ``area`` all images must share one size. With ``area`` each image
    is fitted to an ``area``-patch grid (grids may differ per image).
    """
    seqs: list[PatchSequence] = []
    for pair in pairs:
        if area is None:
            seqs.append(patchify(pair.image, p))
        else:
            img, valid = fit_image_to_area(pair.image, area, p)
            seq = patchify(img, p)
            seq.valid = valid
            seqs.append(seq)
    if len({s.num_patches for s in seqs}) != 1:
        raise ValueError("images in a batch must produce the same number of patches")
    patches = torch.stack([s.patches for s in seqs]).to(dtype)
    valid = torch.stack([s.valid for s in seqs])
    tokens = pad_tokens([tokenize(pair.caption, max_text_len) for pair in pairs])
    return MultimodalBatch(patches, valid, [s.grid for s in seqs], tokens)

import json
import math

import numpy as np
import pytest
import torch

from aimv2_kit.config import ProbeConfig, preset_model
from aimv2_kit.encoder import VisionEncoder
from aimv2_kit.nnprim import grad_check, linear
from aimv2_kit.probe import (
    AttentiveProbe, ProbeDataset, attentive_pool, encoder_checksum, evaluate_probe, extract_features,
    make_shape_dataset, train_probe, write_probe_report,
)

CFG = preset_model("desk_tiny")
f64 = torch.float64


def probe(seed=0, d=32, k=3, heads=2):
    return AttentiveProbe(d, k, heads, seed=seed, dtype=f64)


def feats(n, I, d=32, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((n, I, d)))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_single_patch_pools_to_value_projection():
    p = probe()
    x = feats(5, 1)
    want = linear(x[:, 0], p.wv, p.bv)
    assert torch.allclose(attentive_pool(x, p), want, atol=1e-12)


def test_duplicating_features_leaves_pool_unchanged():
    p = probe(1)
    x = feats(3, 4, seed=1)
    assert torch.allclose(p.pool(torch.cat([x, x], dim=1)), p.pool(x), atol=1e-12)


def test_pool_is_permutation_invariant():
    p = probe(2)
    x = feats(3, 6, seed=2)
    perm = torch.tensor([5, 3, 0, 1, 4, 2])
    assert torch.allclose(p.pool(x[:, perm]), p.pool(x), atol=1e-12)


def test_probe_grad_check():
    p = probe(3)
    with torch.no_grad():
        p.query.mul_(50)  # make attention non-uniform so every path matters
    x = feats(4, 5, seed=3)
    y = torch.tensor([0, 2, 1, 2])
    loss = lambda: torch.nn.functional.cross_entropy(p(x), y)
    rep = grad_check(loss, dict(p.named_parameters()), eps=1e-5)
    assert rep.max_error < 1e-6, rep.errors


# ---------------------------------------------------------------------------
# datasets and features
# ---------------------------------------------------------------------------

def test_shape_dataset():
    ds = make_shape_dataset(30, 4)
    assert ds.patches.shape == (30, 16, 48) and ds.grid == (4, 4)
    assert set(ds.labels.tolist()) == {0, 1, 2}
    again = make_shape_dataset(30, 4)
    assert torch.equal(ds.patches, again.patches) and torch.equal(ds.labels, again.labels)
    with pytest.raises(ValueError, match="empty"):
        make_shape_dataset(0, 4)


def test_features_use_bidirectional_attention():
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(0))
    ds = make_shape_dataset(4, 0)
    out = extract_features(enc, ds)
    full = torch.ones(16, 16, dtype=torch.bool)
    assert torch.equal(out, enc(ds.patches, ds.grid, full))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

HP = ProbeConfig(num_classes=3, steps=100, lr_grid=(1e-4, 1e-3), wd_grid=(0.05,))


def test_encoder_unchanged_by_probe_training():
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(1))
    before = encoder_checksum(enc)
    req = [p.requires_grad for p in enc.parameters()]
    train_probe(enc, make_shape_dataset(64, 1), HP)
    assert encoder_checksum(enc) == before
    assert [p.requires_grad for p in enc.parameters()] == req


def test_sweep_selects_best_validation_accuracy():
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(2))
    res = train_probe(enc, make_shape_dataset(64, 2), HP, make_shape_dataset(64, 3), seed=2)
    assert [s["lr"] for s in res.sweep] == [1e-4, 1e-3]
    best = max(res.sweep, key=lambda s: s["val_accuracy"])
    assert res.val_accuracy == best["val_accuracy"]
    # ties keep the earlier grid point, as max() does
    assert res.lr == best["lr"]


def test_training_is_deterministic():
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(4))
    ds = make_shape_dataset(32, 4)
    a, b = train_probe(enc, ds, HP), train_probe(enc, ds, HP)
    assert a.sweep == b.sweep
    for pa, pb in zip(a.probe.parameters(), b.probe.parameters()):
        assert torch.equal(pa, pb)


def perfect_probe(k):
    p = AttentiveProbe(k, k, 1, dtype=f64)
    with torch.no_grad():
        p.wv.copy_(torch.eye(k, dtype=f64))
        p.cls_w.copy_(torch.eye(k, dtype=f64) * 10)
    return p


class OneHotEncoder(torch.nn.Module):
    """Stands in for an encoder whose features are a given one-hot code."""

    def __init__(self, labels, k):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1, dtype=f64))
        self.labels, self.k = labels, k

    def forward(self, x, grid, mask):
        onehot = torch.nn.functional.one_hot(self.labels[: x.shape[0]], self.k).to(f64)
        return onehot[:, None, :].expand(-1, x.shape[1], -1)


def test_perfect_classifier_scores_one():
    ds = make_shape_dataset(40, 5)
    enc = OneHotEncoder(ds.labels, 3)
    assert evaluate_probe(enc, perfect_probe(3), ds) == 1.0


def test_random_classifier_scores_chance():
    k, n = 4, 10_000
    rng = np.random.default_rng(0)
    labels = torch.from_numpy(rng.integers(0, k, n))
    ds = ProbeDataset(torch.zeros(n, 1, 1, dtype=f64), (1, 1), labels)
    guesses = torch.from_numpy(rng.integers(0, k, n))
    enc = OneHotEncoder(guesses, k)
    acc = evaluate_probe(enc, perfect_probe(k), ds)
    sd = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 0.25) < 4 * sd


def test_label_out_of_range():
    ds = make_shape_dataset(10, 6)
    ds.labels[3] = 5
    enc = OneHotEncoder(torch.zeros(10, dtype=torch.long), 3)
    with pytest.raises(ValueError, match="outside"):
        evaluate_probe(enc, perfect_probe(3), ds)


def test_empty_dataset_rejected():
    ds = ProbeDataset(torch.zeros(0, 16, 48), (4, 4), torch.zeros(0, dtype=torch.long))
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(0))
    with pytest.raises(ValueError, match="empty"):
        evaluate_probe(enc, perfect_probe(3), ds)
    with pytest.raises(ValueError, match="empty"):
        train_probe(enc, ds, HP)


def test_write_report(tmp_path):
    enc = VisionEncoder(CFG, torch.Generator().manual_seed(0))
    res = train_probe(enc, make_shape_dataset(16, 0), ProbeConfig(steps=5, lr_grid=(1e-3,), wd_grid=(0.1,)))
    path = write_probe_report(res, tmp_path / "r" / "probe.json", {"checkpoint": "x"})
    data = json.loads(path.read_text())
    assert data["best"]["lr"] == 1e-3 and data["checkpoint"] == "x" and len(data["sweep"]) == 1

import dataclasses
import math

import numpy as np
import pytest
import torch

from aimv2_kit.config import OptimConfig
from aimv2_kit.trainer import (
    CKPT_MAGIC, Checkpoint, CheckpointError, TrainingDiverged, adamw_update, checkpoint_path, clip_gradients,
    cooldown_bounds, global_norm, high_res_config, init_optimizer_state, init_state, load_checkpoint,
    lr_at_step, make_batch, save_checkpoint, schedule_length, train,
)

# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

COS = OptimConfig(peak_lr=1e-3, min_lr=1e-5, warmup_steps=10, total_steps=100)
HALF = dataclasses.replace(COS, schedule="half_cosine")
COOL = dataclasses.replace(COS, schedule="half_cosine_cooldown")


def test_warmup_is_linear_from_zero():
    assert lr_at_step(0, COS) == 0.0
    assert lr_at_step(5, COS) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at_step(10, COS) == pytest.approx(1e-3, rel=1e-12)


def test_cosine_endpoints():
    assert lr_at_step(100, COS) == pytest.approx(1e-5, rel=1e-12)
    mid = 1e-5 + 0.5 * (1e-3 - 1e-5)
    assert lr_at_step(55, COS) == pytest.approx(mid, rel=1e-12)


def test_half_cosine_ends_at_half_peak():
    assert abs(lr_at_step(100, HALF) - 5e-4) / 5e-4 < 1e-12
    assert schedule_length(HALF) == 100


def test_half_cosine_is_monotone_after_warmup():
    lrs = [lr_at_step(t, HALF) for t in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cooldown_terminates_and_has_fixed_length():
    start, length = cooldown_bounds(COOL)
    assert (start, length) == (100, 20)
    assert schedule_length(COOL) == 120
    assert lr_at_step(120, COOL) == 1e-6


@pytest.mark.parametrize("start", [30, 55, 80, 100])
def test_cooldown_branch(start):
    o = dataclasses.replace(COOL, cooldown_start=start)
    s, length = cooldown_bounds(o)
    assert length == round(0.2 * start)
    assert lr_at_step(s + length, o) == 1e-6
    # the branch starts from the half-cosine value
    assert lr_at_step(s, o) == lr_at_step(s, HALF)


@pytest.mark.parametrize("o", [COS, HALF, COOL], ids=["cosine", "half", "cooldown"])
def test_schedule_continuity(o):
    end = schedule_length(o)
    boundaries = [o.warmup_steps, o.total_steps]
    for b in boundaries:
        for eps in (1e-6, 1e-9):
            lo, hi = lr_at_step(b - eps, o), lr_at_step(min(b + eps, end), o)
            # slope is at most peak / warmup per step
            assert abs(hi - lo) <= 2 * eps * o.peak_lr / o.warmup_steps + 1e-15, (b, lo, hi)


def test_schedule_range_checked():
    with pytest.raises(ValueError, match="outside schedule"):
        lr_at_step(101, COS)
    with pytest.raises(ValueError, match="outside schedule"):
        lr_at_step(-1, COS)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def params(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {"a": torch.randn(3, 4, generator=g, dtype=torch.float64),
            "b": torch.randn(5, generator=g, dtype=torch.float64)}


def zero_grads(p):
    return {k: torch.zeros_like(v) for k, v in p.items()}


def test_zero_grad_no_decay_is_fixed_point():
    p = params()
    before = {k: v.clone() for k, v in p.items()}
    st = init_optimizer_state(p)
    o = OptimConfig(weight_decay=0.0)
    for _ in range(5):
        adamw_update(p, zero_grads(p), st, 1e-3, o)
    assert all(torch.equal(p[k], before[k]) for k in p)


def test_decay_without_lr_shrinks_by_factor():
    p = params()
    before = {k: v.clone() for k, v in p.items()}
    adamw_update(p, zero_grads(p), init_optimizer_state(p), 0.0, OptimConfig(weight_decay=0.1))
    assert all(torch.allclose(p[k], 0.9 * before[k], rtol=0, atol=1e-15) for k in p)


def test_decay_independent_of_lr():
    o = OptimConfig(weight_decay=0.05)
    runs = []
    for lr in (0.0, 1e-3):
        p = params()
        st = init_optimizer_state(p)
        traj = []
        for _ in range(10):
            adamw_update(p, zero_grads(p), st, lr, o)
            traj.append({k: v.clone() for k, v in p.items()})
        runs.append(traj)
    for a, b in zip(*runs):
        assert all(torch.equal(a[k], b[k]) for k in a)


def test_first_step_is_sign_of_gradient():
    p = params()
    before = {k: v.clone() for k, v in p.items()}
    g = {k: torch.randn(v.shape, dtype=torch.float64) for k, v in p.items()}
    adamw_update(p, g, init_optimizer_state(p), 1e-2, OptimConfig(weight_decay=0.0))
    for k in p:
        # bias-corrected m / sqrt(v) is g / |g| up to eps
        assert torch.allclose(p[k] - before[k], -1e-2 * torch.sign(g[k]), atol=1e-8)


def test_matches_torch_adamw_with_rescaled_decay():
    # torch couples decay to lr: theta *= 1 - lr * wd; setting wd_torch = wd / lr matches
    lr, wd = 1e-2, 1e-3
    p = params(1)
    q = {k: torch.nn.Parameter(v.clone()) for k, v in p.items()}
    ref = torch.optim.AdamW(q.values(), lr=lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=wd / lr)
    st = init_optimizer_state(p)
    gen = torch.Generator().manual_seed(3)
    for _ in range(5):
        g = {k: torch.randn(v.shape, generator=gen, dtype=torch.float64) for k, v in p.items()}
        adamw_update(p, g, st, lr, OptimConfig(weight_decay=wd))
        for k in q:
            q[k].grad = g[k].clone()
        ref.step()
    for k in p:
        assert torch.allclose(p[k], q[k].detach(), atol=1e-12)


def test_non_finite_gradient_rejected():
    p = params()
    g = zero_grads(p)
    g["b"][2] = float("inf")
    with pytest.raises(FloatingPointError, match="parameter b"):
        adamw_update(p, g, init_optimizer_state(p), 1e-3, OptimConfig())


def test_negative_lr_rejected():
    p = params()
    with pytest.raises(ValueError):
        adamw_update(p, zero_grads(p), init_optimizer_state(p), -1.0, OptimConfig())


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------

def scaled_grads(norm):
    g = params(4)
    s = norm / global_norm(g.values())
    return {k: v * s for k, v in g.items()}


def test_clip_below_threshold_untouched():
    g = scaled_grads(0.5)
    before = {k: v.clone() for k, v in g.items()}
    assert clip_gradients(g, 1.0) == pytest.approx(0.5, rel=1e-12)
    assert all(torch.equal(g[k], before[k]) for k in g)


@pytest.mark.parametrize("norm", [0.25, 0.999, 1.0, 2.0, 17.0])
def test_clip_post_norm(norm):
    g = scaled_grads(norm)
    before = {k: v.clone() for k, v in g.items()}
    clip_gradients(g, 1.0)
    assert global_norm(g.values()) == pytest.approx(min(norm, 1.0), rel=1e-12)
    # direction preserved
    flat = torch.cat([v.reshape(-1) for v in g.values()])
    ref = torch.cat([v.reshape(-1) for v in before.values()])
    cos = float(flat @ ref / (flat.norm() * ref.norm()))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_clip_requires_positive_threshold():
    with pytest.raises(ValueError):
        clip_gradients(scaled_grads(1.0), 0.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def sample_ckpt():
    return Checkpoint(7, bytes(range(32)), {
        "w": torch.randn(3, 2), "d": torch.randn(4, dtype=torch.float64),
        "i": torch.tensor([1, -2, 3]), "s": torch.tensor(2.5),
    })


def test_checkpoint_round_trip(tmp_path):
    ck = sample_ckpt()
    path = save_checkpoint(ck, tmp_path / "a.ckpt")
    assert path.read_bytes().startswith(CKPT_MAGIC)
    back = load_checkpoint(path)
    assert back.step == 7 and back.config_hash == ck.config_hash and back.version == 1
    assert list(back.arrays) == list(ck.arrays)
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and torch.equal(back.arrays[k], v)


def test_corrupt_checkpoint_rejected(tmp_path):
    path = save_checkpoint(sample_ckpt(), tmp_path / "a.ckpt")
    data = bytearray(path.read_bytes())
    data[80] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncated_and_foreign_files_rejected(tmp_path):
    path = save_checkpoint(sample_ckpt(), tmp_path / "a.ckpt")
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)
    other = tmp_path / "b.ckpt"
    other.write_bytes(b"x" * 100)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(other)
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_version_mismatch_rejected(tmp_path):
    ck = dataclasses.replace(sample_ckpt(), version=2)
    path = save_checkpoint(ck, tmp_path / "v2.ckpt")
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def short(cfg, steps=20, **data):
    return dataclasses.replace(
        cfg, optim=dataclasses.replace(cfg.optim, total_steps=steps, warmup_steps=2),
        data=dataclasses.replace(cfg.data, **data))


def test_batches_are_deterministic(desk_cfg):
    a = make_batch(desk_cfg, 3, np.random.default_rng(1))
    b = make_batch(desk_cfg, 3, np.random.default_rng(1))
    assert torch.equal(a.patches, b.patches) and torch.equal(a.tokens, b.tokens)
    assert a.patches.shape == (16, 16, 48)


def test_native_resolution_batches_keep_budget(desk_cfg):
    cfg = short(desk_cfg, native_resolution=True, token_budget=64, area_exponents=(2, 4))
    for step in range(5):
        b = make_batch(cfg, step, np.random.default_rng(step))
        assert b.patches.shape[0] * b.patches.shape[1] == 64


def test_training_is_deterministic_and_logs(desk_cfg, tmp_path):
    cfg = short(desk_cfg)
    log_a, log_b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    ra = train(cfg, log_path=log_a, write_checkpoints=False)
    rb = train(cfg, log_path=log_b, write_checkpoints=False)
    assert ra == rb and len(ra) == 20
    assert log_a.read_bytes() == log_b.read_bytes()
    fields = log_a.read_text().splitlines()[0].split("\t")
    assert len(fields) == 5 and fields[0] == "1"
    assert float(fields[4]) == pytest.approx(float(fields[3]) + 0.4 * float(fields[2]), rel=1e-6)
    assert ra[-1].lr == pytest.approx(lr_at_step(20, cfg.optim))


def test_checkpoints_written_and_resume_matches(desk_cfg):
    cfg = dataclasses.replace(short(desk_cfg, steps=10), checkpoint_every=5)
    train(cfg)
    full = load_checkpoint(checkpoint_path(cfg, 10))
    mid = checkpoint_path(cfg, 5)
    assert mid.exists()
    again = train(cfg, resume=mid, write_checkpoints=False)
    assert [r.step for r in again] == list(range(6, 11))
    state_cfg = dataclasses.replace(cfg, checkpoint_dir=cfg.checkpoint_dir + "_b")
    train(state_cfg, resume=mid)
    resumed = load_checkpoint(checkpoint_path(state_cfg, 10))
    assert resumed.step == full.step == 10
    for k, v in full.arrays.items():
        assert torch.equal(resumed.arrays[k], v), k


def test_high_res_stage_has_no_weight_decay(desk_cfg):
    hr = high_res_config(desk_cfg)
    assert hr.optim.weight_decay == 0.0
    assert hr.data.image_size == desk_cfg.data.high_res_image_size
    b = make_batch(hr, 0, np.random.default_rng(0))
    assert b.patches.shape[1] == (hr.data.image_size // 4) ** 2


def test_divergence_reports_last_checkpoint(desk_cfg):
    cfg = dataclasses.replace(short(desk_cfg, steps=6), checkpoint_every=2)
    cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, peak_lr=1e30, grad_clip=1e30))
    with pytest.raises(TrainingDiverged) as info:
        train(cfg)
    assert info.value.step >= 1
    if info.value.step > 2:
        assert info.value.last_checkpoint is not None and info.value.last_checkpoint.exists()


def test_alpha_zero_vs_default(desk_cfg):
    runs = {}
    for alpha in (0.0, 0.4):
        cfg = short(desk_cfg, steps=30)
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, alpha=alpha))
        recs = train(cfg)
        runs[alpha] = (recs, load_checkpoint(checkpoint_path(cfg, 30)))
    init = init_state(desk_cfg).params()
    w0 = runs[0.0][1].arrays["param/decoder.pixel_w"]
    w4 = runs[0.4][1].arrays["param/decoder.pixel_w"]
    # with alpha = 0 the pixel head only feels weight decay
    assert torch.allclose(w0, init["decoder.pixel_w"].detach() * (1 - 1e-4) ** 30, rtol=1e-5, atol=1e-7)
    assert not torch.allclose(w4, w0, atol=1e-3)
    for recs, _ in runs.values():
        assert recs[-1].text_loss < recs[0].text_loss
    assert all(math.isfinite(r.total) for r in runs[0.4][0])

"""Pretext tasks: patch-swap corruption, masked restoration loss,
view augmentation, contrastive loss, and the joint pretraining step."""

import math

import numpy as np
import pytest

from progfusion import ssl as S
from progfusion import tensor as T
from progfusion.encoders import PatchConfig, init_vit
from progfusion.errors import ConfigError, ContractError
from progfusion.kernels import gather_patches
from progfusion.optim import Adam
from progfusion.tensor import Tensor

CFG = PatchConfig(channels=2, extents=(8, 8, 8), patch=4, dim=8, depth=1)


def grid(seed=0, channels=2, extent=8):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((channels, extent, extent, extent))


# --------------------------------------------------------------- corruption

def test_corrupt_zero_patches_is_identity():
    g = grid()
    # 8 patches at p=4; ratio 0.05 rounds to 0 masked
    corrupted, plan = S.corrupt_context(g, 4, 0.05, seed=1)
    assert plan.n_masked == 0
    assert np.array_equal(corrupted, g)


def test_corrupt_preserves_voxel_multiset():
    g = grid(1)
    corrupted, plan = S.corrupt_context(g, 4, 0.3, seed=2)
    assert plan.n_masked == round(0.3 * 8)
    assert not np.array_equal(corrupted, g)
    assert np.array_equal(np.sort(corrupted.ravel()), np.sort(g.ravel()))


def test_corrupt_deterministic():
    g = grid(2)
    c1, p1 = S.corrupt_context(g, 4, 0.3, seed=3)
    c2, p2 = S.corrupt_context(g, 4, 0.3, seed=3)
    assert np.array_equal(c1, c2)
    assert np.array_equal(p1.masked_indices, p2.masked_indices)
    assert np.array_equal(p1.partner_indices, p2.partner_indices)


def test_corrupt_swap_is_involution():
    g = grid(3, extent=12)
    corrupted, plan = S.corrupt_context(g, 4, 0.4, seed=4)
    restored = S.apply_swap_plan(corrupted, plan, 4)
    assert np.array_equal(restored, g)


def test_corrupt_ratio_validation():
    with pytest.raises(ConfigError):
        S.corrupt_context(grid(), 4, 0.0, seed=0)
    with pytest.raises(ConfigError):
        S.corrupt_context(grid(), 4, 1.2, seed=0)
    with pytest.raises(ConfigError):  # 0.7*8 rounds to 6 masked, needs 12 > 8 patches
        S.corrupt_context(grid(), 4, 0.7, seed=0)


def test_plan_invariants():
    g = grid(4, extent=16)
    _, plan = S.corrupt_context(g, 4, 0.3, seed=5)
    n = 64
    assert plan.n_masked == round(0.3 * n)
    combined = np.concatenate([plan.masked_indices, plan.partner_indices])
    assert len(np.unique(combined)) == len(combined)
    assert combined.max() < n


# --------------------------------------------------------- restoration loss

def test_restoration_zero_when_equal():
    g = grid(5)
    _, plan = S.corrupt_context(g, 4, 0.3, seed=6)
    assert S.restoration_loss(g, g, plan, 4).item() == 0.0


def test_restoration_constant_offset_inside_mask():
    g = grid(6)
    _, plan = S.corrupt_context(g, 4, 0.3, seed=7)
    rows = gather_patches(g, 4).copy()
    rows[plan.masked_indices] += 0.5
    loss = S.restoration_loss(rows, g, plan, 4)
    assert loss.item() == pytest.approx(0.25, rel=1e-12)


def test_restoration_ignores_errors_outside_mask():
    g = grid(7)
    _, plan = S.corrupt_context(g, 4, 0.3, seed=8)
    rows = gather_patches(g, 4).copy()
    outside = np.setdiff1d(np.arange(rows.shape[0]), plan.masked_indices)
    rows[outside] += 99.0
    assert S.restoration_loss(rows, g, plan, 4).item() == 0.0


def test_restoration_empty_plan_rejected():
    g = grid(8)
    _, plan = S.corrupt_context(g, 4, 0.05, seed=9)
    with pytest.raises(ContractError):
        S.restoration_loss(g, g, plan, 4)


# ------------------------------------------------------------- augmentation

def test_augment_degenerate_settings_identity():
    cfg = S.SSLConfig(noise_sigma=0.0, max_shift=0.0, flips=False)
    g = grid(9)
    pair = S.augment_views(g, seed=10, cfg=cfg)
    assert np.array_equal(pair.a, g)
    assert np.array_equal(pair.b, g)


def test_augment_deterministic_and_seed_sensitive():
    cfg = S.SSLConfig()
    g = grid(10)
    p1 = S.augment_views(g, seed=11, cfg=cfg)
    p2 = S.augment_views(g, seed=11, cfg=cfg)
    p3 = S.augment_views(g, seed=12, cfg=cfg)
    assert np.array_equal(p1.a, p2.a) and np.array_equal(p1.b, p2.b)
    assert not np.array_equal(p1.a, p3.a)
    assert p1.a.shape == g.shape and p1.b.shape == g.shape
    assert p1.desc_a == p2.desc_a


# --------------------------------------------------------- contrastive loss

def test_contrastive_uniform_case_closed_form():
    z = Tensor(np.tile([[1.0, 0.0, 0.0]], (2, 1)))
    loss = S.contrastive_loss(z, Tensor(z.data.copy()), temperature=1.0)
    assert loss.item() == pytest.approx(math.log(3.0), abs=1e-9)
    for b in (3, 5):
        zz = Tensor(np.tile([[0.0, 2.0]], (b, 1)))
        loss = S.contrastive_loss(zz, Tensor(zz.data.copy()), temperature=0.37)
        assert loss.item() == pytest.approx(math.log(2 * b - 1), abs=1e-9)


def test_contrastive_sharp_limit_goes_to_zero():
    z_a = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    z_b = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    loss = S.contrastive_loss(z_a, z_b, temperature=0.01)
    assert loss.item() < 1e-6


def test_contrastive_symmetric_under_swap():
    rng = np.random.default_rng(13)
    z_a = Tensor(rng.standard_normal((4, 6)))
    z_b = Tensor(rng.standard_normal((4, 6)))
    l1 = S.contrastive_loss(z_a, z_b, 0.1).item()
    l2 = S.contrastive_loss(z_b, z_a, 0.1).item()
    assert l1 == pytest.approx(l2, abs=1e-12)
    assert l1 >= 0.0


def test_contrastive_rejects_singleton_batch():
    z = Tensor([[1.0, 0.0]])
    with pytest.raises(ContractError):
        S.contrastive_loss(z, Tensor([[0.0, 1.0]]), 0.1)


def test_contrastive_gradcheck():
    rng = np.random.default_rng(14)
    z_a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    z_b = Tensor(rng.standard_normal((3, 4)))
    err = T.finite_difference_check(lambda t: S.contrastive_loss(t, z_b, 0.5), z_a, 1e-5)
    assert err < 1e-6


# ------------------------------------------------------------ pretrain step

def make_setup(seed=15, n=4):
    rngs = np.random.default_rng(seed)
    grids = [rngs.standard_normal((2, 8, 8, 8)) for _ in range(n)]
    vit = init_vit(CFG, np.random.default_rng(seed + 1))
    heads = S.init_ssl_heads(CFG, np.random.default_rng(seed + 2))
    return grids, vit, heads


def test_pretrain_loss_components_nonnegative():
    grids, vit, heads = make_setup()
    cfg = S.SSLConfig(batch_size=4)
    _, parts = S.compute_pretrain_loss(grids, vit, heads, cfg, seed=0)
    assert parts["restoration"] >= 0.0
    assert parts["contrastive"] >= 0.0
    assert parts["total"] == pytest.approx(parts["restoration"] + parts["contrastive"], rel=1e-9)


def test_pretrain_restoration_only_matches_weighted_step():
    grids, vit, heads = make_setup(seed=16)
    cfg_r = S.SSLConfig(lambda_contrast=0.0)
    total, parts = S.compute_pretrain_loss(grids[:2], vit, heads, cfg_r, seed=1)
    assert set(parts) == {"restoration", "total"}
    assert total.item() == pytest.approx(parts["restoration"], rel=1e-12)


def test_pretrain_full_gradcheck_toy_scale():
    cfg_small = PatchConfig(channels=1, extents=(4, 4, 4), patch=2, dim=4, depth=1)
    rng = np.random.default_rng(17)
    grids = [rng.standard_normal((1, 4, 4, 4)) for _ in range(2)]
    vit = init_vit(cfg_small, np.random.default_rng(18))
    heads = S.init_ssl_heads(cfg_small, np.random.default_rng(19))
    cfg = S.SSLConfig(mask_ratio=0.3, temperature=0.5)

    def loss_fn(_):
        return S.compute_pretrain_loss(grids, vit, heads, cfg, seed=2)[0]

    checked = {}
    named = {**vit.named_parameters("vit."), **heads.named_parameters("heads.")}
    for name in ("vit.proj", "vit.pos", "vit.block0.attn.w_q", "vit.block0.mlp_w1",
                 "vit.block0.ln1_gain", "heads.dec_w", "heads.dec_b", "heads.proj_w1",
                 "heads.proj_w2"):
        checked[name] = T.finite_difference_check(loss_fn, named[name], 1e-5)
    for name, err in checked.items():
        assert err < 1e-4, f"{name}: {err:.3e}"


def test_pretrain_loss_decreases():
    grids, vit, heads = make_setup(seed=20, n=8)
    cfg = S.SSLConfig(steps=60, batch_size=4, lr=3e-3)
    params = {**vit.named_parameters("vit."), **heads.named_parameters("heads.")}
    opt = Adam(params, lr=cfg.lr)
    first = None
    rng = np.random.default_rng(21)
    for step in range(cfg.steps):
        idx = rng.choice(len(grids), size=4, replace=False)
        parts = S.pretrain_step([grids[i] for i in idx], vit, heads, cfg, opt, seed=step)
        if first is None:
            first = parts["restoration"]
    assert parts["restoration"] < 0.5 * first


def test_run_pretraining_history_and_decrease():
    rng = np.random.default_rng(22)
    grids = [rng.standard_normal((2, 8, 8, 8)) for _ in range(16)]
    vit, heads, history = S.run_pretraining(grids, CFG, S.SSLConfig(steps=200, batch_size=8, lr=3e-3), seed=7)
    assert len(history) == 200
    assert history[0]["step"] == 0
    early = np.mean([h["restoration"] for h in history[:5]])
    late = np.mean([h["restoration"] for h in history[-5:]])
    assert late < 0.5 * early
    assert all(h["total"] >= 0 for h in history)

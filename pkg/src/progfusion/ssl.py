"""Self-supervised pretraining of the volume encoder via two pretext tasks:
context restoration (repair patch swaps, scored only on the swapped patches)
and contrastive learning over augmented view pairs (normalized-temperature
cross-entropy). Both objectives share the encoder and are optimized jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import PatchConfig, ViTParams, init_vit, vit_encode
from .errors import ConfigError, ContractError, TrainingError
from .kernels import gather_patches, scatter_patches
from .optim import Adam
from .seeding import derive_seed, rng_for
from .tensor import Tensor

NEG_DIAG = -1e9  # additive mask killing self-similarity terms


@dataclass
class CorruptionPlan:
    """Which patches were swapped with which, and how the choice was drawn."""

    masked_indices: np.ndarray  # patches whose content was displaced (loss targets)
    partner_indices: np.ndarray  # where that content went
    seed: int
    ratio: float

    def __post_init__(self):
        self.masked_indices = np.asarray(self.masked_indices, dtype=np.int64)
        self.partner_indices = np.asarray(self.partner_indices, dtype=np.int64)
        if self.masked_indices.shape != self.partner_indices.shape:
            raise ContractError("swap plan index arrays must pair up")
        combined = np.concatenate([self.masked_indices, self.partner_indices])
        if len(np.unique(combined)) != len(combined):
            raise ContractError("swap plan indices must be disjoint and unique")

    @property
    def n_masked(self) -> int:
        return len(self.masked_indices)


@dataclass
class ViewPair:
    """Two stochastic augmentations of one source volume."""

    source_id: str
    a: np.ndarray
    b: np.ndarray
    desc_a: dict
    desc_b: dict


@dataclass
class SSLConfig:
    steps: int = 200
    batch_size: int = 8
    mask_ratio: float = 0.3
    temperature: float = 0.1
    lambda_restore: float = 1.0
    lambda_contrast: float = 1.0
    lr: float = 1e-3
    noise_sigma: float = 0.05
    max_shift: float = 0.1
    flips: bool = True

    def __post_init__(self):
        if not (0.0 < self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio must be in (0,1), got {self.mask_ratio}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lambda_restore < 0 or self.lambda_contrast < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lambda_restore == 0 and self.lambda_contrast == 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class SSLParams:
    """Task heads around the shared encoder: linear patch decoder and a
    two-layer projection into the contrastive space."""

    dec_w: Tensor  # d × (C·p³)
    dec_b: Tensor  # 1 × (C·p³)
    proj_w1: Tensor  # d × d
    proj_b1: Tensor
    proj_w2: Tensor  # d × d
    proj_b2: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            prefix + name: getattr(self, name)
            for name in ("dec_w", "dec_b", "proj_w1", "proj_b1", "proj_w2", "proj_b2")
        }


def init_ssl_heads(cfg: PatchConfig, rng: np.random.Generator, dtype=np.float64) -> SSLParams:
    d, v = cfg.dim, cfg.patch_voxels
    mk = lambda shape, std: Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)
    zeros = lambda shape: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return SSLParams(
        dec_w=mk((d, v), 1.0 / math.sqrt(d)),
        dec_b=zeros((1, v)),
        proj_w1=mk((d, d), 1.0 / math.sqrt(d)),
        proj_b1=zeros((1, d)),
        proj_w2=mk((d, d), 1.0 / math.sqrt(d)),
        proj_b2=zeros((1, d)),
    )


# --------------------------------------------------------- corruption task

def apply_swap_plan(grid: np.ndarray, plan: CorruptionPlan, patch: int) -> np.ndarray:
    """Swap the planned patch pairs; applying the same plan twice is identity."""
    c, d, h, w = grid.shape
    rows = gather_patches(grid, patch)
    rows[plan.masked_indices], rows[plan.partner_indices] = (
        rows[plan.partner_indices].copy(),
        rows[plan.masked_indices].copy(),
    )
    return scatter_patches(rows, c, d, h, w, patch)


def corrupt_context(
    grid: np.ndarray, patch: int, ratio: float, seed: int
) -> tuple[np.ndarray, CorruptionPlan]:
    """Displace round(ratio·N) patches by swapping each with a distinct partner.

    The voxel multiset is preserved (swaps move content, never invent it),
    which is what makes restoring the original a context task. ratio must
    leave room for disjoint partners (<= 0.5).
    """
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"corruption ratio must be in (0,1), got {ratio}")
    c, d, h, w = grid.shape
    n = (d // patch) * (h // patch) * (w // patch)
    m = round(ratio * n)
    if 2 * m > n:
        raise ConfigError(f"ratio {ratio} needs {2 * m} distinct patches but only {n} exist")
    perm = rng_for(seed, "corrupt").permutation(n)
    plan = CorruptionPlan(perm[:m], perm[m : 2 * m], seed=seed, ratio=ratio)
    if m == 0:
        return grid.copy(), plan
    return apply_swap_plan(grid, plan, patch), plan


def _as_rows(volume_or_rows, patch: int) -> Tensor:
    if isinstance(volume_or_rows, Tensor):
        return volume_or_rows
    arr = np.asarray(volume_or_rows, dtype=np.float64)
    if arr.ndim == 4:
        return Tensor(gather_patches(arr, patch))
    if arr.ndim == 2:
        return Tensor(arr)
    raise ContractError(f"expected a C×D×H×W volume or an N×v row matrix, got shape {arr.shape}")


def restoration_loss(reconstruction, target, plan: CorruptionPlan, patch: int) -> Tensor:
    """Mean squared error over the voxels of the masked patches only.

    Inputs may be volumes or patch-row matrices; the differentiable path
    takes a row-matrix Tensor produced by the decoder.
    """
    if plan.n_masked == 0:
        raise ContractError("restoration_loss: empty corruption plan")
    recon = _as_rows(reconstruction, patch)
    tgt = _as_rows(target, patch)
    if recon.shape != tgt.shape:
        raise ContractError(f"reconstruction {recon.shape} vs target {tgt.shape}")
    n = recon.shape[0]
    selector = np.zeros((plan.n_masked, n), dtype=recon.data.dtype)
    selector[np.arange(plan.n_masked), plan.masked_indices] = 1.0
    sel = Tensor(selector)
    diff = T.sub(T.matmul(sel, recon), T.matmul(sel, tgt))
    return T.mean(T.mul(diff, diff))


# -------------------------------------------------------- view augmentation

def _shift_crop(grid: np.ndarray, shifts: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros_like(grid)
    src = [slice(None)]
    dst = [slice(None)]
    for size, s in zip(grid.shape[1:], shifts):
        if s >= 0:
            src.append(slice(0, size - s))
            dst.append(slice(s, size))
        else:
            src.append(slice(-s, size))
            dst.append(slice(0, size + s))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def _one_view(grid: np.ndarray, rng: np.random.Generator, cfg: SSLConfig) -> tuple[np.ndarray, dict]:
    flips = tuple(bool(rng.integers(0, 2)) if cfg.flips else False for _ in range(3))
    max_shift = [int(round(cfg.max_shift * s)) for s in grid.shape[1:]]
    shifts = tuple(int(rng.integers(-m, m + 1)) if m > 0 else 0 for m in max_shift)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    view = grid
    flip_axes = [ax + 1 for ax, f in enumerate(flips) if f]
    if flip_axes:
        view = np.flip(view, axis=flip_axes)
    view = _shift_crop(np.ascontiguousarray(view), shifts)
    if cfg.noise_sigma > 0:
        noise_rng = np.random.Generator(np.random.PCG64(noise_seed))
        for c in range(view.shape[0]):
            view[c] += noise_rng.standard_normal(view.shape[1:]) * (cfg.noise_sigma * view[c].std())
    return view, {"flips": flips, "shifts": shifts, "noise_seed": noise_seed}


def augment_views(grid: np.ndarray, seed: int, cfg: SSLConfig, source_id: str = "") -> ViewPair:
    """Two independent stochastic views of one volume, deterministic in seed."""
    rng = rng_for(seed, "augment")
    a, desc_a = _one_view(grid, rng, cfg)
    b, desc_b = _one_view(grid, rng, cfg)
    return ViewPair(source_id=source_id, a=a, b=b, desc_a=desc_a, desc_b=desc_b)


# ---------------------------------------------------------- contrastive loss

def contrastive_loss(z_a: Tensor, z_b: Tensor, temperature: float) -> Tensor:
    """Normalized-temperature cross-entropy over 2B paired embeddings.

    Embeddings are L2-normalized internally; each of the 2B anchors treats
    its paired view as the positive and the other 2B−2 samples as
    negatives. Equal similarities everywhere give exactly ln(2B−1).
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if z_a.shape != z_b.shape:
        raise ContractError(f"embedding batches disagree: {z_a.shape} vs {z_b.shape}")
    b = z_a.shape[0]
    if b < 2:
        raise ContractError("contrastive_loss needs batch size >= 2 (no negatives otherwise)")
    z = T.l2_normalize_rows(T.concat_rows(z_a, z_b))
    sims = T.scale(T.matmul(z, T.transpose(z)), 1.0 / temperature)
    n = 2 * b
    mask = Tensor(np.eye(n, dtype=z.data.dtype) * NEG_DIAG)
    masked = T.add(sims, mask)
    pairing = np.zeros((n, n), dtype=z.data.dtype)
    pairing[np.arange(b), np.arange(b) + b] = 1.0
    pairing[np.arange(b) + b, np.arange(b)] = 1.0
    positives = T.row_sum(T.mul(sims, Tensor(pairing)))
    return T.mean(T.sub(T.logsumexp_rows(masked), positives))


# ------------------------------------------------------------- train loop

def _mean_pool(tokens: Tensor) -> Tensor:
    n = tokens.shape[0]
    pool = Tensor(np.full((1, n), 1.0 / n, dtype=tokens.data.dtype))
    return T.matmul(pool, tokens)


def _project(z: Tensor, heads: SSLParams) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(z, heads.proj_w1), heads.proj_b1))
    return T.add(T.matmul(hidden, heads.proj_w2), heads.proj_b2)


def compute_pretrain_loss(
    grids: list[np.ndarray],
    vit: ViTParams,
    heads: SSLParams,
    cfg: SSLConfig,
    seed: int,
) -> tuple[Tensor, dict[str, float]]:
    """Joint restoration + contrastive loss for one batch, deterministic in seed."""
    patch = vit.cfg.patch
    restore_terms = []
    proj_a, proj_b = [], []
    for i, grid in enumerate(grids):
        if cfg.lambda_restore > 0:
            corrupted, plan = corrupt_context(grid, patch, cfg.mask_ratio, derive_seed(seed, "plan", i))
            tokens = vit_encode(corrupted, vit).tokens
            recon = T.add(T.matmul(tokens, heads.dec_w), heads.dec_b)
            restore_terms.append(restoration_loss(recon, grid, plan, patch))
        if cfg.lambda_contrast > 0:
            pair = augment_views(grid, derive_seed(seed, "views", i), cfg)
            za = _mean_pool(vit_encode(pair.a, vit).tokens)
            zb = _mean_pool(vit_encode(pair.b, vit).tokens)
            proj_a.append(_project(za, heads))
            proj_b.append(_project(zb, heads))

    parts: dict[str, float] = {}
    total = None
    if restore_terms:
        acc = restore_terms[0]
        for term in restore_terms[1:]:
            acc = T.add(acc, term)
        restore = T.scale(acc, 1.0 / len(restore_terms))
        parts["restoration"] = restore.item()
        total = T.scale(restore, cfg.lambda_restore)
    if proj_a:
        za = proj_a[0] if len(proj_a) == 1 else _stack_rows(proj_a)
        zb = proj_b[0] if len(proj_b) == 1 else _stack_rows(proj_b)
        contrast = contrastive_loss(za, zb, cfg.temperature)
        parts["contrastive"] = contrast.item()
        weighted = T.scale(contrast, cfg.lambda_contrast)
        total = weighted if total is None else T.add(total, weighted)
    assert total is not None
    parts["total"] = total.item()
    return total, parts


def _stack_rows(rows: list[Tensor]) -> Tensor:
    acc = rows[0]
    for r in rows[1:]:
        acc = T.concat_rows(acc, r)
    return acc


def pretrain_step(
    grids: list[np.ndarray],
    vit: ViTParams,
    heads: SSLParams,
    cfg: SSLConfig,
    optimizer: Adam,
    seed: int,
) -> dict[str, float]:
    """One joint gradient step; returns the loss components for logging."""
    with T.Tape() as tape:
        total, parts = compute_pretrain_loss(grids, vit, heads, cfg, seed)
        if not np.isfinite(parts["total"]):
            raise TrainingError(f"pretraining diverged (non-finite loss) at step {optimizer.t}")
        grads = T.backward(total, tape)
    optimizer.step(grads)
    return parts


def run_pretraining(
    grids: list[np.ndarray],
    patch_cfg: PatchConfig,
    cfg: SSLConfig,
    seed: int,
    dtype=np.float64,
) -> tuple[ViTParams, SSLParams, list[dict[str, float]]]:
    """Pretrain an encoder from scratch on unlabeled volumes.

    Returns the trained encoder, the task heads, and a per-step history of
    loss components.
    """
    if not grids:
        raise ContractError("run_pretraining needs at least one volume")
    vit = init_vit(patch_cfg, rng_for(seed, "ssl", "vit-init"), dtype=dtype)
    heads = init_ssl_heads(patch_cfg, rng_for(seed, "ssl", "head-init"), dtype=dtype)
    params = vit.named_parameters("vit.")
    params.update(heads.named_parameters("heads."))
    optimizer = Adam(params, lr=cfg.lr)
    batch_rng = rng_for(seed, "ssl", "batches")
    history = []
    for step in range(cfg.steps):
        size = min(cfg.batch_size, len(grids))
        idx = batch_rng.choice(len(grids), size=size, replace=False)
        batch = [grids[i] for i in idx]
        parts = pretrain_step(batch, vit, heads, cfg, optimizer, derive_seed(seed, "ssl-step", step))
        parts = {"step": step, **parts}
        history.append(parts)
    return vit, heads, history

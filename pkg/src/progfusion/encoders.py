"""Image encoder (3D-patch transformer over volume tokens) and the clinical
feature encoder that lifts M scalar features into M embedding-space tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import CrossAttentionParams, TokenSequence, init_cross_attention, self_attention
from .data import VolumeSample
from .errors import ConfigError, ContractError, ShapeError
from .kernels import gather_patches
from .tensor import Tensor

MLP_RATIO = 4


@dataclass(frozen=True)
class PatchConfig:
    """Geometry of volume tokenization plus encoder width/depth."""

    channels: int = 2
    extents: tuple[int, int, int] = (32, 32, 32)
    patch: int = 8
    dim: int = 32
    depth: int = 2

    def __post_init__(self):
        for axis, size in zip("DHW", self.extents):
            if size % self.patch != 0:
                raise ConfigError(
                    f"patch edge {self.patch} does not divide axis {axis}={size}"
                )
        if min(self.channels, self.patch, self.dim) < 1 or self.depth < 0:
            raise ConfigError(f"invalid patch config {self}")

    @property
    def n_tokens(self) -> int:
        d, h, w = self.extents
        p = self.patch
        return (d // p) * (h // p) * (w // p)

    @property
    def patch_voxels(self) -> int:
        return self.channels * self.patch**3


@dataclass
class BlockParams:
    """One pre-norm transformer block: x += SA(LN1(x)); x += MLP(LN2(x))."""

    attn: CrossAttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named_parameters(prefix + "attn.")
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                     "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            out[prefix + name] = getattr(self, name)
        return out


@dataclass
class ViTParams:
    """Patch projection, learned positional table, and transformer blocks."""

    cfg: PatchConfig
    proj: Tensor  # (C·p³) × d
    pos: Tensor  # N × d
    blocks: list[BlockParams]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "proj": self.proj, prefix + "pos": self.pos}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}block{i}."))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag


@dataclass
class ClinicalEncoderParams:
    """Per-feature affine lift: token_j = value_j * weights[j] + embeddings[j]."""

    feature_names: list[str]
    weights: Tensor  # M × d
    embeddings: Tensor  # M × d

    def __post_init__(self):
        m = len(self.feature_names)
        if self.weights.shape[0] != m or self.embeddings.shape != self.weights.shape:
            raise ShapeError(
                f"clinical encoder wants {m}×d weights and embeddings, got "
                f"{self.weights.shape} and {self.embeddings.shape}"
            )

    @property
    def m(self) -> int:
        return len(self.feature_names)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weights": self.weights, prefix + "embeddings": self.embeddings}


# ------------------------------------------------------------------- ops

def _grid_of(volume) -> np.ndarray:
    return volume.grid if isinstance(volume, VolumeSample) else np.asarray(volume, dtype=np.float64)


def patchify(volume, cfg: PatchConfig) -> Tensor:
    """Cut the volume into non-overlapping cubes, one flattened row per patch.

    Rows follow lexicographic patch order (z-block, then y, then x); within
    a row, voxels are row-major with channels innermost. The result is a
    plain input tensor (no gradient).
    """
    grid = _grid_of(volume)
    expected = (cfg.channels,) + tuple(cfg.extents)
    if grid.shape != expected:
        raise ShapeError(f"volume shape {grid.shape} != configured {expected}")
    return Tensor(gather_patches(grid, cfg.patch))


def vit_encode(volume, params: ViTParams) -> TokenSequence:
    """Volume -> N×d image tokens: project patches, add positions, run blocks."""
    cfg = params.cfg
    rows = volume if isinstance(volume, Tensor) else patchify(volume, cfg)
    want = params.proj.data.dtype
    if rows.data.dtype != want:
        rows = Tensor(rows.data.astype(want))
    x = T.add(T.matmul(rows, params.proj), params.pos)
    for block in params.blocks:
        normed = T.layernorm_rows(x, block.ln1_gain, block.ln1_bias)
        attended = self_attention(TokenSequence(normed, "image"), block.attn).tokens
        x = T.add(x, attended)
        normed = T.layernorm_rows(x, block.ln2_gain, block.ln2_bias)
        hidden = T.gelu(T.add(T.matmul(normed, block.mlp_w1), block.mlp_b1))
        x = T.add(x, T.add(T.matmul(hidden, block.mlp_w2), block.mlp_b2))
    return TokenSequence(x, provenance="image")


def clinical_encode(values, params: ClinicalEncoderParams) -> TokenSequence:
    """M scalar features -> M tokens via each feature's learned affine lift.

    Feature identity is positional: values must arrive in
    ``params.feature_names`` order.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size != params.m:
        raise ContractError(f"expected {params.m} features {params.feature_names}, got {vals.size}")
    diag = Tensor(np.diag(vals).astype(params.weights.data.dtype))
    tokens = T.add(T.matmul(diag, params.weights), params.embeddings)
    return TokenSequence(tokens, provenance="clinical")


# ------------------------------------------------------------------ init

def _init_block(d: int, rng: np.random.Generator, dtype) -> BlockParams:
    hidden = MLP_RATIO * d
    mk = lambda shape, std: Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)
    ones = lambda n: Tensor(np.ones((1, n), dtype=dtype), requires_grad=True)
    zeros = lambda n: Tensor(np.zeros((1, n), dtype=dtype), requires_grad=True)
    return BlockParams(
        attn=init_cross_attention(d, rng, dtype),
        ln1_gain=ones(d), ln1_bias=zeros(d),
        ln2_gain=ones(d), ln2_bias=zeros(d),
        mlp_w1=mk((d, hidden), 1.0 / math.sqrt(d)),
        mlp_b1=zeros(hidden),
        mlp_w2=mk((hidden, d), 1.0 / math.sqrt(hidden)),
        mlp_b2=zeros(d),
    )


def init_vit(cfg: PatchConfig, rng: np.random.Generator, dtype=np.float64) -> ViTParams:
    proj = Tensor(
        (rng.standard_normal((cfg.patch_voxels, cfg.dim)) / math.sqrt(cfg.patch_voxels)).astype(dtype),
        requires_grad=True,
    )
    pos = Tensor((rng.standard_normal((cfg.n_tokens, cfg.dim)) * 0.02).astype(dtype), requires_grad=True)
    blocks = [_init_block(cfg.dim, rng, dtype) for _ in range(cfg.depth)]
    return ViTParams(cfg=cfg, proj=proj, pos=pos, blocks=blocks)


def init_clinical_encoder(
    feature_names: list[str], d: int, rng: np.random.Generator, dtype=np.float64
) -> ClinicalEncoderParams:
    m = len(feature_names)
    std = 1.0 / math.sqrt(d)
    return ClinicalEncoderParams(
        feature_names=list(feature_names),
        weights=Tensor((rng.standard_normal((m, d)) * std).astype(dtype), requires_grad=True),
        embeddings=Tensor((rng.standard_normal((m, d)) * std).astype(dtype), requires_grad=True),
    )

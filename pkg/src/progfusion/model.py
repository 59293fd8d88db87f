"""The full two-phase classifier: volume encoder + clinical encoder feeding
the fusion block, with freeze support, token caching, and checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .attention import FusionParams, TokenSequence, fusion_forward, init_fusion
from .encoders import (
    ClinicalEncoderParams,
    PatchConfig,
    ViTParams,
    clinical_encode,
    init_clinical_encoder,
    init_vit,
    vit_encode,
)
from .errors import ContractError, FormatError
from .tensor import DTYPES, Tensor


@dataclass
class PreparedSample:
    """One subject after fold-specific preprocessing, ready for the model.

    ``stats_tag`` names the training statistics that produced it; models
    refuse samples prepared with someone else's statistics.
    """

    subject_id: str
    grid: np.ndarray | None  # preprocessed C×D×H×W
    values: np.ndarray | None  # M selected clinical features
    label: int | None
    stats_tag: str


@dataclass
class FusionModel:
    patch_cfg: PatchConfig
    vit: ViTParams
    clinical: ClinicalEncoderParams
    fusion: FusionParams
    freeze_encoder: bool = False
    stats_tag: str = ""
    _token_cache: dict[str, TokenSequence] = field(default_factory=dict, repr=False)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.vit.named_parameters("vit.")
        out.update(self.clinical.named_parameters("clinical."))
        out.update(self.fusion.named_parameters("fusion."))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        named = self.named_parameters()
        if self.freeze_encoder:
            named = {k: v for k, v in named.items() if not k.startswith("vit.")}
        return named

    def image_tokens(self, sample: PreparedSample) -> TokenSequence:
        """Encode the sample's volume; frozen encoders cache by subject id."""
        if sample.grid is None:
            raise ContractError(f"{sample.subject_id}: image modality missing")
        if not self.freeze_encoder:
            return vit_encode(sample.grid, self.vit)
        cached = self._token_cache.get(sample.subject_id)
        if cached is None:
            tokens = vit_encode(sample.grid, self.vit).tokens
            cached = TokenSequence(tokens.detach(), provenance="image")
            self._token_cache[sample.subject_id] = cached
        return cached

    def forward(self, sample: PreparedSample) -> Tensor:
        if sample.values is None:
            raise ContractError(f"{sample.subject_id}: clinical modality missing")
        e_i = self.image_tokens(sample)
        e_c = clinical_encode(sample.values, self.clinical)
        return fusion_forward(e_i, e_c, self.fusion)

    def predict(self, sample: PreparedSample) -> float:
        if self.stats_tag and sample.stats_tag != self.stats_tag:
            raise ContractError(
                f"{sample.subject_id}: prepared with statistics {sample.stats_tag!r}, "
                f"model expects {self.stats_tag!r}"
            )
        return self.forward(sample).item()

    # ------------------------------------------------------------- storage

    def save(self, path: str, extra_tensors: dict[str, np.ndarray] | None = None,
             meta: dict | None = None) -> None:
        tensors: dict[str, np.ndarray] = {k: v.data for k, v in self.named_parameters().items()}
        if extra_tensors:
            tensors.update(extra_tensors)
        info = {
            "patch_cfg": {
                "channels": self.patch_cfg.channels,
                "extents": list(self.patch_cfg.extents),
                "patch": self.patch_cfg.patch,
                "dim": self.patch_cfg.dim,
                "depth": self.patch_cfg.depth,
            },
            "feature_names": self.clinical.feature_names,
            "freeze_encoder": self.freeze_encoder,
            "stats_tag": self.stats_tag,
        }
        info.update(meta or {})
        ckpt.save_checkpoint(path, tensors, meta=info)


def init_model(
    patch_cfg: PatchConfig,
    feature_names: list[str],
    rng: np.random.Generator,
    dtype=np.float64,
    freeze_encoder: bool = False,
) -> FusionModel:
    return FusionModel(
        patch_cfg=patch_cfg,
        vit=init_vit(patch_cfg, rng, dtype=dtype),
        clinical=init_clinical_encoder(feature_names, patch_cfg.dim, rng, dtype=dtype),
        fusion=init_fusion(patch_cfg.dim, rng, dtype=dtype),
        freeze_encoder=freeze_encoder,
    )


def load_model(path: str) -> tuple[FusionModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; returns (model, extra tensors, meta)."""
    stored, meta = ckpt.load_checkpoint(path)
    try:
        pc = meta["patch_cfg"]
        cfg = PatchConfig(pc["channels"], tuple(pc["extents"]), pc["patch"], pc["dim"], pc["depth"])
        feature_names = list(meta["feature_names"])
    except KeyError as missing:
        raise FormatError(f"{path}: checkpoint meta lacks {missing}") from missing
    dtype = DTYPES["f32"] if stored[next(iter(stored))].dtype == np.float32 else DTYPES["f64"]
    model = init_model(cfg, feature_names, np.random.default_rng(0), dtype=dtype,
                       freeze_encoder=bool(meta.get("freeze_encoder", False)))
    model.stats_tag = meta.get("stats_tag", "")
    named = model.named_parameters()
    ckpt.restore_into(named, stored)
    extra = {k: v for k, v in stored.items() if k not in named}
    return model, extra, meta

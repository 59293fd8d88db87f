"""Multimodal classifier for distinguishing true tumor progression from
pseudoprogression: a small autodiff tensor engine, 3-d patch transformer and
clinical encoders, guided cross-attention fusion, self-supervised pretraining,
and a cross-validated training pipeline over synthetic cohorts.
"""

from .attention import fusion_forward, guided_cross_attention, scaled_dot_attention
from .backend import backend_name
from .config import load_config, resolve_config
from .data import (
    ClinicalRecord,
    Dataset,
    SynthConfig,
    VolumeSample,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .encoders import PatchConfig, clinical_encode, vit_encode
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .metrics import confusion_metrics, roc_auc
from .model import FusionModel, PreparedSample, init_model, load_model
from .pipeline import (
    EvalReport,
    TrainConfig,
    permutation_importance,
    run_experiment,
    select_features,
    soft_vote,
    stratified_kfold,
    train_fold,
)
from .seeding import derive_seed, rng_for
from .ssl import SSLConfig, run_pretraining
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ClinicalRecord",
    "ConfigError",
    "ContractError",
    "Dataset",
    "EvalReport",
    "FormatError",
    "FusionModel",
    "NumericError",
    "PatchConfig",
    "PreparedSample",
    "SSLConfig",
    "ShapeError",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "VolumeSample",
    "backend_name",
    "backward",
    "clinical_encode",
    "confusion_metrics",
    "derive_seed",
    "fusion_forward",
    "guided_cross_attention",
    "init_model",
    "load_config",
    "load_dataset",
    "load_model",
    "permutation_importance",
    "resolve_config",
    "rng_for",
    "roc_auc",
    "run_experiment",
    "run_pretraining",
    "save_dataset",
    "scaled_dot_attention",
    "select_features",
    "soft_vote",
    "stratified_kfold",
    "synth_generate",
    "train_fold",
    "vit_encode",
]

"""Supervised training in three regimes, stratified cross-validation,
soft-voting ensembles, permutation feature importance, prefix feature
selection, and the end-to-end experiment runner that writes artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import (
    CHANNEL_NAMES,
    CONTINUOUS_FEATURES,
    ClinicalRecord,
    ClinicalStats,
    Dataset,
    FeatureMatrix,
    LandmarkModel,
    SynthConfig,
    VolumeSample,
    clinical_columns,
    crop_or_pad,
    drop_collinear,
    encode_clinical,
    fit_clinical_stats,
    fit_landmarks,
    histogram_standardize,
    synth_generate,
    znormalize_channels,
)
from .encoders import PatchConfig, init_vit, vit_encode
from .errors import ConfigError, ContractError, TrainingError
from .metrics import RocResult, confusion_metrics, roc_auc
from .model import FusionModel, PreparedSample, init_model, load_model
from .optim import Adam
from .seeding import derive_seed, rng_for
from .ssl import SSLConfig, run_pretraining
from .tensor import DTYPES, Tensor

MODES = ("ssl_frozen", "transfer", "end_to_end")
METRICS_SCHEMA_VERSION = 1


# ---------------------------------------------------------------- folding

@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray  # fold index per subject
    labels: np.ndarray
    seed: int

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, validation indices) for one fold.

        With k=1 there is nothing to hold out: the single fold trains and
        validates on everyone.
        """
        val = np.flatnonzero(self.assignment == fold)
        if self.k == 1:
            return val, val
        train = np.flatnonzero(self.assignment != fold)
        return train, val


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Shuffle within each class, deal round-robin into k folds."""
    labels = np.asarray(labels)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    assignment = np.full(len(labels), -1, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ConfigError(f"class {cls} has {len(members)} members, fewer than k={k}")
        order = rng_for(seed, "folds", int(cls)).permutation(len(members))
        for pos, idx in enumerate(members[order]):
            assignment[idx] = pos % k
    return FoldPlan(k=k, assignment=assignment, labels=labels.copy(), seed=seed)


# ----------------------------------------------------------- preprocessing

@dataclass
class FoldPreprocessor:
    """Training-split statistics and the transform they induce.

    ``stats_tag`` is a digest of everything fitted, stamped onto prepared
    samples and trained models so mismatched preprocessing is caught at
    predict time.
    """

    target_extents: tuple[int, int, int]
    landmarks: LandmarkModel
    clinical_stats: ClinicalStats
    feature_names: list[str]
    stats_tag: str = ""

    def __post_init__(self):
        if not self.stats_tag:
            digest = hashlib.sha256()
            digest.update(np.ascontiguousarray(self.landmarks.landmarks).tobytes())
            digest.update(repr(sorted(self.clinical_stats.mean.items())).encode())
            digest.update(repr(sorted(self.clinical_stats.std.items())).encode())
            digest.update(repr(self.feature_names).encode())
            digest.update(repr(self.target_extents).encode())
            self.stats_tag = digest.hexdigest()[:16]

    def prepare(self, volumes: list[VolumeSample], records: list[ClinicalRecord]) -> list[PreparedSample]:
        matrix = encode_clinical(records, self.clinical_stats)
        col_idx = [matrix.columns.index(name) for name in self.feature_names]
        out = []
        for i, (vol, rec) in enumerate(zip(volumes, records)):
            v = crop_or_pad(vol, self.target_extents)
            v = histogram_standardize(v, self.landmarks)
            v = znormalize_channels(v)
            row = matrix.values[i, col_idx]
            out.append(PreparedSample(
                subject_id=rec.subject_id,
                grid=v.grid,
                values=row,
                label=rec.label,
                stats_tag=self.stats_tag,
            ))
        return out


def fit_fold_preprocessor(
    volumes: list[VolumeSample],
    records: list[ClinicalRecord],
    target_extents: tuple[int, int, int],
    features: list[str] | None = None,
    collinear_threshold: float = 0.95,
) -> FoldPreprocessor:
    """Fit landmarks + clinical statistics on a training split only."""
    cropped = [crop_or_pad(v, target_extents) for v in volumes]
    landmarks = fit_landmarks(cropped)
    stats = fit_clinical_stats(records)
    if features is None:
        matrix = drop_collinear(encode_clinical(records, stats), collinear_threshold)
        features = matrix.selected_columns()
    else:
        known = set(clinical_columns())
        unknown = [f for f in features if f not in known]
        if unknown:
            raise ConfigError(f"unknown clinical feature(s) {unknown}; valid: {sorted(known)}")
    return FoldPreprocessor(
        target_extents=tuple(target_extents),
        landmarks=landmarks,
        clinical_stats=stats,
        feature_names=list(features),
    )


def rebuild_preprocessor(extra: dict[str, np.ndarray], meta: dict) -> FoldPreprocessor:
    """Reconstruct a fold's preprocessing from the arrays stored alongside a
    trained model's checkpoint. The stored tag is kept verbatim so prepared
    samples still match the model's provenance check.
    """
    for key in ("prep.landmarks", "prep.clin_mean", "prep.clin_std"):
        if key not in extra:
            raise ConfigError(f"checkpoint lacks preprocessing array {key!r}")
    landmarks = extra["prep.landmarks"]
    n_channels = landmarks.shape[0]
    channel_names = CHANNEL_NAMES if n_channels == len(CHANNEL_NAMES) else tuple(
        f"ch{i}" for i in range(n_channels))
    names = sorted(CONTINUOUS_FEATURES)
    stats = ClinicalStats(
        mean={n: float(v) for n, v in zip(names, extra["prep.clin_mean"])},
        std={n: float(v) for n, v in zip(names, extra["prep.clin_std"])},
    )
    extents = tuple(meta["patch_cfg"]["extents"])
    return FoldPreprocessor(
        target_extents=extents,
        landmarks=LandmarkModel(landmarks, channel_names),
        clinical_stats=stats,
        feature_names=list(meta["feature_names"]),
        stats_tag=meta.get("stats_tag", ""),
    )


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    mode: str = "end_to_end"
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-3
    encoder_checkpoint: str | None = None
    precision: str = "f64"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("ssl_frozen", "transfer") and not self.encoder_checkpoint:
            raise ConfigError(f"mode {self.mode!r} requires encoder_checkpoint")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")


def _batch_loss(model: FusionModel, batch: list[PreparedSample]) -> tuple[Tensor, np.ndarray]:
    probs = [model.forward(s) for s in batch]
    stacked = probs[0]
    for p in probs[1:]:
        stacked = T.concat_rows(stacked, p)
    targets = np.array([[float(s.label)] for s in batch])
    loss = T.binary_cross_entropy(stacked, targets)
    return loss, stacked.data.ravel().copy()


def train_fold(
    train_samples: list[PreparedSample],
    patch_cfg: PatchConfig,
    feature_names: list[str],
    cfg: TrainConfig,
    seed: int,
    stats_tag: str = "",
) -> tuple[FusionModel, list[dict[str, float]]]:
    """Fit one fold's model under the configured regime.

    ssl_frozen loads the pretrained encoder, freezes it, and caches tokens;
    transfer loads the auxiliary-task encoder and fine-tunes everything;
    end_to_end trains everything from random initialization.
    """
    labels = {s.label for s in train_samples}
    if labels != {0, 1}:
        raise ContractError(f"training split needs both classes, got labels {sorted(labels)}")
    dtype = DTYPES[cfg.precision]
    model = init_model(
        patch_cfg, feature_names, rng_for(seed, "model-init"), dtype=dtype,
        freeze_encoder=cfg.mode == "ssl_frozen",
    )
    model.stats_tag = stats_tag
    if cfg.mode in ("ssl_frozen", "transfer"):
        manifest_path, _ = ckpt._paths(cfg.encoder_checkpoint)
        if not os.path.exists(manifest_path):
            raise ConfigError(f"encoder checkpoint not found: {cfg.encoder_checkpoint}")
        stored, _ = ckpt.load_checkpoint(cfg.encoder_checkpoint)
        ckpt.restore_into(model.vit.named_parameters("vit."), stored)
    if cfg.mode == "ssl_frozen":
        model.vit.set_requires_grad(False)

    params = model.trainable_parameters()
    optimizer = Adam(params, lr=cfg.lr)
    history: list[dict[str, float]] = []
    n = len(train_samples)
    batch_rng = rng_for(seed, "batch-order")
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            with T.Tape() as tape:
                loss, _ = _batch_loss(model, batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"training diverged (non-finite loss) at step {step}")
                grads = T.backward(loss, tape)
            optimizer.step(grads)
            epoch_losses.append(value)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})
    return model, history


def training_accuracy(model: FusionModel, samples: list[PreparedSample]) -> float:
    preds = [model.predict(s) >= 0.5 for s in samples]
    return float(np.mean([p == bool(s.label) for p, s in zip(preds, samples)]))


def pretrain_auxiliary(
    grids: list[np.ndarray],
    targets: list[float],
    patch_cfg: PatchConfig,
    steps: int = 150,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    dtype=np.float64,
) -> tuple[dict[str, Tensor], list[dict[str, float]]]:
    """Train the encoder on a continuous regression target (standardized
    internally); returns encoder tensors named for transfer loading plus a
    loss history. The regression head is discarded by callers that only
    want the encoder.
    """
    if len(grids) != len(targets) or not grids:
        raise ContractError("pretrain_auxiliary needs aligned non-empty grids and targets")
    y = np.asarray(targets, dtype=np.float64)
    mu, sd = float(y.mean()), float(max(y.std(), 1e-8))
    y = (y - mu) / sd
    vit = init_vit(patch_cfg, rng_for(seed, "aux", "vit-init"), dtype=dtype)
    rng = rng_for(seed, "aux", "head-init")
    head_w = Tensor((rng.standard_normal((patch_cfg.dim, 1)) / math.sqrt(patch_cfg.dim)).astype(dtype),
                    requires_grad=True)
    head_b = Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)
    params = vit.named_parameters("vit.")
    params.update({"aux.head_w": head_w, "aux.head_b": head_b})
    optimizer = Adam(params, lr=lr)
    batch_rng = rng_for(seed, "aux", "batches")
    pool_cache: dict[int, Tensor] = {}
    history = []
    for step in range(steps):
        size = min(batch_size, len(grids))
        idx = batch_rng.choice(len(grids), size=size, replace=False)
        with T.Tape() as tape:
            preds = []
            for i in idx:
                tokens = vit_encode(grids[i], vit).tokens
                n_tok = tokens.shape[0]
                pool = Tensor(np.full((1, n_tok), 1.0 / n_tok, dtype=tokens.data.dtype))
                z = T.matmul(pool, tokens)
                preds.append(T.add(T.matmul(z, head_w), head_b))
            stacked = preds[0]
            for p in preds[1:]:
                stacked = T.concat_rows(stacked, p)
            diff = T.sub(stacked, Tensor(y[idx][:, None].astype(stacked.data.dtype)))
            loss = T.mean(T.mul(diff, diff))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"auxiliary pretraining diverged at step {step}")
            grads = T.backward(loss, tape)
        optimizer.step(grads)
        history.append({"step": step, "loss": value})
    encoder = dict(vit.named_parameters("vit."))
    encoder["aux.head_w"] = head_w
    encoder["aux.head_b"] = head_b
    return encoder, history


# ---------------------------------------------------------------- ensemble

def soft_vote(probabilities) -> float:
    probs = list(probabilities)
    if not probs:
        raise ContractError("soft_vote needs at least one probability")
    return float(np.mean(probs))


def evaluate_samples(model: FusionModel, samples: list[PreparedSample]) -> tuple[np.ndarray, np.ndarray]:
    probs = np.array([model.predict(s) for s in samples])
    labels = np.array([s.label for s in samples])
    return probs, labels


# ------------------------------------------------- importance & selection

def permutation_importance(
    models: list[FusionModel],
    validation: list[list[PreparedSample]],
    feature_names: list[str],
    seed: int,
    permutations: int = 1,
) -> list[dict]:
    """Mean validation-AUC drop when each clinical feature is shuffled.

    Shuffling happens within each fold's validation split; drops are
    averaged over folds (and over repeats), then ranked descending.
    """
    if len(models) != len(validation):
        raise ContractError("one validation split per model required")
    # folds may keep different clinical columns, so address features by name
    drops = np.zeros(len(feature_names))
    counts = np.zeros(len(feature_names))
    for f, (model, val) in enumerate(zip(models, validation)):
        fold_features = list(model.clinical.feature_names)
        probs, labels = evaluate_samples(model, val)
        base = roc_auc(probs, labels).auc
        values = np.stack([s.values for s in val])
        for j, name in enumerate(feature_names):
            if name not in fold_features:
                continue
            col = fold_features.index(name)
            per_repeat = []
            for rep in range(permutations):
                rng = rng_for(seed, "perm", f, j, rep)
                shuffled = values.copy()
                shuffled[:, col] = shuffled[rng.permutation(len(val)), col]
                perturbed = [
                    PreparedSample(s.subject_id, s.grid, shuffled[i], s.label, s.stats_tag)
                    for i, s in enumerate(val)
                ]
                p_probs, _ = evaluate_samples(model, perturbed)
                per_repeat.append(base - roc_auc(p_probs, labels).auc)
            drops[j] += float(np.mean(per_repeat))
            counts[j] += 1
    mean_drop = np.where(counts > 0, drops / np.maximum(counts, 1), 0.0)
    order = np.argsort(-mean_drop, kind="stable")
    return [
        {"feature": feature_names[j], "mean_auc_drop": float(mean_drop[j]), "rank": r + 1}
        for r, j in enumerate(order)
    ]


def _fit_logistic(x: np.ndarray, y: np.ndarray, steps: int = 400, lr: float = 0.5) -> tuple[np.ndarray, float]:
    """Deterministic full-batch logistic regression (features assumed scaled)."""
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * float(err.mean())
    return w, b


def _logistic_probs(x: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(x @ w + b)))


def rank_clinical_features(matrix: FeatureMatrix, labels: np.ndarray, k: int, seed: int) -> list[dict]:
    """Importance ranking from a clinical-only logistic model, by the same
    shuffle-one-column criterion used for the full model."""
    cols = matrix.selected_columns()
    values = matrix.selected()
    plan = stratified_kfold(labels, k, derive_seed(seed, "rank-folds"))
    drops = np.zeros((len(cols), k))
    for fold in range(k):
        tr, va = plan.fold_indices(fold)
        w, b = _fit_logistic(values[tr], labels[tr].astype(float))
        base = roc_auc(_logistic_probs(values[va], w, b), labels[va]).auc
        for j in range(len(cols)):
            rng = rng_for(seed, "rank-perm", fold, j)
            shuffled = values[va].copy()
            shuffled[:, j] = shuffled[rng.permutation(len(va)), j]
            drops[j, fold] = base - roc_auc(_logistic_probs(shuffled, w, b), labels[va]).auc
    mean_drop = drops.mean(axis=1)
    order = np.argsort(-mean_drop, kind="stable")
    return [
        {"feature": cols[j], "mean_auc_drop": float(mean_drop[j]), "rank": r + 1}
        for r, j in enumerate(order)
    ]


@dataclass
class SelectionResult:
    selected: list[str]
    m: int
    sweep: list[dict]  # {"m": prefix size, "mean_auc": value}


def select_features(
    ranked: list[str],
    matrix: FeatureMatrix,
    labels: np.ndarray,
    k: int,
    seed: int,
    max_features: int | None = None,
) -> SelectionResult:
    """Sweep prefix sizes of the importance ranking with a clinical-only
    model; keep the prefix with the best mean validation AUC, preferring
    smaller prefixes on ties."""
    if not ranked:
        raise ContractError("select_features needs a non-empty ranking")
    limit = len(ranked) if max_features is None else min(max_features, len(ranked))
    labels = np.asarray(labels)
    plan = stratified_kfold(labels, k, derive_seed(seed, "select-folds"))
    col_index = {name: matrix.columns.index(name) for name in ranked}
    sweep = []
    best_m, best_auc = 1, -1.0
    for m in range(1, limit + 1):
        cols = [col_index[name] for name in ranked[:m]]
        values = matrix.values[:, cols]
        fold_aucs = []
        for fold in range(k):
            tr, va = plan.fold_indices(fold)
            w, b = _fit_logistic(values[tr], labels[tr].astype(float))
            fold_aucs.append(roc_auc(_logistic_probs(values[va], w, b), labels[va]).auc)
        mean_auc = float(np.mean(fold_aucs))
        sweep.append({"m": m, "mean_auc": mean_auc})
        if mean_auc > best_auc + 1e-12:
            best_auc, best_m = mean_auc, m
    return SelectionResult(selected=list(ranked[:best_m]), m=best_m, sweep=sweep)


# ------------------------------------------------------------ orchestration

def _metric_block(probs: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    roc = roc_auc(probs, labels)
    block = {"auc": roc.auc}
    block.update(confusion_metrics(probs, labels))
    return block


def _write_roc_csv(path: str, curves: dict[str, RocResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "threshold", "fpr", "tpr"])
        for name, roc in curves.items():
            for thr, fpr, tpr in roc.points:
                writer.writerow([name, repr(thr), repr(fpr), repr(tpr)])


def _write_predictions_csv(path: str, rows: list[tuple[str, str, float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "fold", "probability", "label"])
        for subject_id, fold, prob, label in rows:
            writer.writerow([subject_id, fold, repr(float(prob)), label])


def write_importance_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_auc_drop", "rank"])
        for row in rows:
            writer.writerow([row["feature"], repr(float(row["mean_auc_drop"])), row["rank"]])


def _write_history_csv(path: str, history: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row[c] if c in ("step", "epoch") else repr(float(row[c])) for c in columns])


@dataclass
class EvalReport:
    folds: list[dict]
    test_mean: dict[str, float]
    test_std: dict[str, float]
    ensemble: dict[str, float]
    metrics_path: str

    def as_dict(self) -> dict:
        return {
            "folds": self.folds,
            "test_mean": self.test_mean,
            "test_std": self.test_std,
            "ensemble": self.ensemble,
        }


def _stage(name: str, fold: int | None = None):
    """Prefix any escaping exception's message with the pipeline stage (and
    fold) it came from, keeping the original exception type."""
    label = name if fold is None else f"{name}, fold {fold}"

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if isinstance(exc, Exception) and not getattr(exc, "_stage_tagged", False):
                exc._stage_tagged = True
                head = str(exc.args[0]) if exc.args else str(exc)
                exc.args = (f"[{label}] {head}",) + tuple(exc.args[1:])
            return False

    return _Ctx()


def _ensure_encoder_checkpoint(cfg: dict, mode: str, train_ds: Dataset,
                               patch_cfg: PatchConfig, seed: int, out_dir: str,
                               dtype) -> str | None:
    """Produce the encoder checkpoint a pretrained mode needs, if absent."""
    configured = cfg["train"]["encoder_checkpoint"]
    if mode == "end_to_end":
        return configured
    if configured:
        return configured
    extents = (cfg["data"]["extent"],) * 3
    grids = [crop_or_pad(v, extents).grid for v in train_ds.volumes]
    grids = [znormalize_channels(VolumeSample("g", g)).grid for g in grids]
    if mode == "ssl_frozen":
        s = cfg["ssl"]
        ssl_cfg = SSLConfig(
            steps=s["steps"], batch_size=s["batch_size"], mask_ratio=s["mask_ratio"],
            temperature=s["temperature"], lambda_restore=s["lambda_restore"],
            lambda_contrast=s["lambda_contrast"], lr=s["lr"],
            noise_sigma=s["noise_sigma"], max_shift=s["max_shift"], flips=s["flips"],
        )
        vit, heads, history = run_pretraining(grids, patch_cfg, ssl_cfg,
                                              derive_seed(seed, "ssl-pretrain"), dtype=dtype)
        path = os.path.join(out_dir, "encoder_ssl")
        tensors = dict(vit.named_parameters("vit."))
        tensors.update(heads.named_parameters("heads."))
        ckpt.save_checkpoint(path, tensors, meta={"kind": "ssl"})
        _write_history_csv(os.path.join(out_dir, "ssl_loss.csv"), history,
                           ["step", "restoration", "contrastive", "total"])
        return path
    targets = [r.days_to_progression for r in train_ds.records]
    a = cfg["aux"]
    tensors, history = pretrain_auxiliary(
        grids, targets, patch_cfg, steps=a["steps"], batch_size=a["batch_size"],
        lr=a["lr"], seed=derive_seed(seed, "aux-pretrain"), dtype=dtype,
    )
    path = os.path.join(out_dir, "encoder_aux")
    ckpt.save_checkpoint(path, tensors, meta={"kind": "aux"})
    _write_history_csv(os.path.join(out_dir, "aux_loss.csv"), history, ["step", "loss"])
    return path


def run_experiment(cfg: dict, seed: int, out_dir: str, precision: str = "f64",
                   train_ds: Dataset | None = None, test_ds: Dataset | None = None) -> EvalReport:
    """Full protocol: synthesize cohorts (unless given), stratified CV
    training, per-fold test evaluation, soft-vote ensemble, artifacts on disk.

    Writes metrics.json, roc_points.csv, predictions.csv, per-fold training
    curves, and fold checkpoints under ``out_dir``. Byte-identical across
    reruns with the same config + seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    d = cfg["data"]
    extents = (d["extent"],) * 3
    patch_cfg = PatchConfig(d["channels"], extents, cfg["patch"]["patch"],
                            cfg["patch"]["dim"], cfg["patch"]["depth"])
    dtype = DTYPES[precision]
    mode = cfg["train"]["mode"]
    k = cfg["train"]["folds"]

    with _stage("synthesize data"):
        if train_ds is None:
            synth = SynthConfig(n_subjects=d["n_subjects"], tp_fraction=d["tp_fraction"],
                                extent=d["extent"], channels=d["channels"], signal=d["signal"],
                                min_folds=k)
            train_ds = synth_generate(synth, derive_seed(seed, "cohort-train"))
        if test_ds is None:
            test_synth = SynthConfig(n_subjects=d["n_test"], tp_fraction=d["tp_fraction"],
                                     extent=d["extent"], channels=d["channels"], signal=d["signal"],
                                     min_folds=1)
            test_ds = synth_generate(test_synth, derive_seed(seed, "cohort-test"))

    with _stage("pretrain encoder"):
        encoder_path = _ensure_encoder_checkpoint(cfg, mode, train_ds, patch_cfg, seed, out_dir, dtype)

    with _stage("fold plan"):
        plan = stratified_kfold(train_ds.labels(), k, derive_seed(seed, "folds"))

    train_cfg = TrainConfig(
        mode=mode, epochs=cfg["train"]["epochs"], batch_size=cfg["train"]["batch_size"],
        lr=cfg["train"]["lr"], encoder_checkpoint=encoder_path, precision=precision,
    )

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    def _run_fold(fold: int) -> dict:
        """Train + evaluate one fold; no file writes here (worker thread)."""
        tr_idx, va_idx = plan.fold_indices(fold)
        with _stage("preprocess", fold):
            prep = fit_fold_preprocessor(
                [train_ds.volumes[i] for i in tr_idx],
                [train_ds.records[i] for i in tr_idx],
                extents, features=cfg["train"]["features"],
            )
            prepared_train = prep.prepare([train_ds.volumes[i] for i in tr_idx],
                                          [train_ds.records[i] for i in tr_idx])
            prepared_val = prep.prepare([train_ds.volumes[i] for i in va_idx],
                                        [train_ds.records[i] for i in va_idx])
            prepared_test = prep.prepare(test_ds.volumes, test_ds.records)
        with _stage("train", fold):
            model, history = train_fold(prepared_train, patch_cfg, prep.feature_names,
                                        train_cfg, derive_seed(seed, "fold", fold),
                                        stats_tag=prep.stats_tag)
        with _stage("evaluate", fold):
            val_probs, val_labels = evaluate_samples(model, prepared_val)
            test_probs, test_labels = evaluate_samples(model, prepared_test)
        return {
            "fold": fold, "model": model, "prep": prep, "history": history,
            "val": _metric_block(val_probs, val_labels),
            "test": _metric_block(test_probs, test_labels),
            "test_probs": test_probs,
            "test_samples": prepared_test,
        }

    # folds are independent (own tape, own seed stream); join before writing
    with _stage("cross-validation"):
        workers = min(k, max(os.cpu_count() or 1, 1))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, range(k)))

    folds_out: list[dict] = []
    curves: dict[str, RocResult] = {}
    prediction_rows: list[tuple[str, str, float, int]] = []
    test_prob_matrix = []
    for r in results:
        fold = r["fold"]
        folds_out.append({"fold": fold, "val": r["val"], "test": r["test"]})
        test_labels = np.array([s.label for s in r["test_samples"]])
        curves[f"fold{fold}"] = roc_auc(r["test_probs"], test_labels)
        test_prob_matrix.append(r["test_probs"])
        for s, p in zip(r["test_samples"], r["test_probs"]):
            prediction_rows.append((s.subject_id, str(fold), float(p), int(s.label)))
        _write_history_csv(os.path.join(out_dir, f"train_loss_fold{fold}.csv"),
                           r["history"], ["epoch", "loss"])
        with _stage("checkpoint", fold):
            prep = r["prep"]
            r["model"].save(os.path.join(ckpt_dir, f"fold{fold}"),
                            extra_tensors={
                                "prep.landmarks": prep.landmarks.landmarks,
                                "prep.clin_mean": np.array([prep.clinical_stats.mean[n] for n in sorted(prep.clinical_stats.mean)]),
                                "prep.clin_std": np.array([prep.clinical_stats.std[n] for n in sorted(prep.clinical_stats.std)]),
                            },
                            meta={"fold": fold, "mode": mode})

    with _stage("ensemble"):
        stacked = np.stack(test_prob_matrix)
        ensemble_probs = np.array([soft_vote(stacked[:, j]) for j in range(stacked.shape[1])])
        test_labels = np.array([r.label for r in test_ds.records])
        ensemble = _metric_block(ensemble_probs, test_labels)
        curves["ensemble"] = roc_auc(ensemble_probs, test_labels)
        for s, p in zip(test_ds.records, ensemble_probs):
            prediction_rows.append((s.subject_id, "ensemble", float(p), int(s.label)))

    metric_names = ("auc", "accuracy", "sensitivity", "specificity")
    test_mean = {m: float(np.mean([f["test"][m] for f in folds_out])) for m in metric_names}
    test_std = {m: float(np.std([f["test"][m] for f in folds_out])) for m in metric_names}

    metrics_path = os.path.join(out_dir, "metrics.json")
    payload = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "seed": seed,
        "precision": precision,
        "config": cfg,
        "folds": folds_out,
        "test_mean": test_mean,
        "test_std": test_std,
        "ensemble": ensemble,
    }
    with open(metrics_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_roc_csv(os.path.join(out_dir, "roc_points.csv"), curves)
    _write_predictions_csv(os.path.join(out_dir, "predictions.csv"), prediction_rows)
    return EvalReport(folds=folds_out, test_mean=test_mean, test_std=test_std,
                      ensemble=ensemble, metrics_path=metrics_path)

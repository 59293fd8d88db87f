"""Command-line entry point.

Every subcommand shares ``--config``, ``--seed``, ``--out``, ``--precision``;
data-consuming commands add ``--data`` (a directory written by ``synth-data``)
and model-consuming ones add ``--checkpoints``.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .config import load_config
from .data import (
    Dataset,
    SynthConfig,
    VolumeSample,
    crop_or_pad,
    drop_collinear,
    encode_clinical,
    fit_clinical_stats,
    load_dataset,
    save_dataset,
    synth_generate,
    znormalize_channels,
)
from .encoders import PatchConfig
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .metrics import roc_auc
from .model import load_model
from .pipeline import (
    _metric_block,
    _write_history_csv,
    _write_predictions_csv,
    _write_roc_csv,
    permutation_importance,
    pretrain_auxiliary,
    rank_clinical_features,
    rebuild_preprocessor,
    run_experiment,
    select_features,
    soft_vote,
    write_importance_csv,
)
from .seeding import derive_seed
from .ssl import SSLConfig, run_pretraining
from .tensor import DTYPES


def _u64(text: str) -> int:
    value = int(text)
    if not (0 <= value < 2**64):
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return value


def _parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="JSON config file (defaults used if omitted)")
    p.add_argument("--seed", type=_u64, default=0, help="master seed (u64)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--precision", choices=sorted(DTYPES), default="f64")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progfusion")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _parent()

    sub.add_parser("synth-data", parents=[parent],
                   help="generate synthetic train/ and test/ cohorts")

    for name in ("pretrain-ssl", "pretrain-aux"):
        p = sub.add_parser(name, parents=[parent], help=f"{name.split('-')[1]} encoder pretraining")
        p.add_argument("--data", required=True, help="dataset directory (one cohort)")

    p = sub.add_parser("train", parents=[parent],
                       help="cross-validated training + test evaluation")
    p.add_argument("--data", default=None,
                   help="directory holding train/ and test/ cohorts; synthesized if omitted")

    for name in ("evaluate", "importance"):
        p = sub.add_parser(name, parents=[parent])
        p.add_argument("--data", required=True, help="evaluation cohort directory")
        p.add_argument("--checkpoints", required=True, help="directory of fold*.ckpt.json models")

    p = sub.add_parser("select-features", parents=[parent],
                       help="rank clinical features and pick the best prefix")
    p.add_argument("--data", required=True, help="cohort directory (clinical data used)")

    return parser


# ------------------------------------------------------------- helpers

def _patch_cfg(cfg: dict) -> PatchConfig:
    d = cfg["data"]
    return PatchConfig(d["channels"], (d["extent"],) * 3, cfg["patch"]["patch"],
                       cfg["patch"]["dim"], cfg["patch"]["depth"])


def _pretrain_grids(ds: Dataset, extent: int) -> list[np.ndarray]:
    extents = (extent,) * 3
    out = []
    for v in ds.volumes:
        g = crop_or_pad(v, extents)
        out.append(znormalize_channels(g).grid)
    return out


def _load_fold_models(directory: str):
    manifests = sorted(glob.glob(os.path.join(directory, "fold*.ckpt.json")))
    if not manifests:
        raise ConfigError(f"no fold checkpoints (fold*.ckpt.json) under {directory}")
    loaded = []
    for manifest in manifests:
        model, extra, meta = load_model(manifest)
        loaded.append((model, rebuild_preprocessor(extra, meta), meta))
    return loaded


# ---------------------------------------------------------- subcommands

def _cmd_synth_data(args, cfg) -> int:
    d = cfg["data"]
    os.makedirs(args.out, exist_ok=True)
    train = synth_generate(
        SynthConfig(n_subjects=d["n_subjects"], tp_fraction=d["tp_fraction"], extent=d["extent"],
                    channels=d["channels"], signal=d["signal"], min_folds=cfg["train"]["folds"]),
        derive_seed(args.seed, "cohort-train"))
    test = synth_generate(
        SynthConfig(n_subjects=d["n_test"], tp_fraction=d["tp_fraction"], extent=d["extent"],
                    channels=d["channels"], signal=d["signal"], min_folds=1),
        derive_seed(args.seed, "cohort-test"))
    save_dataset(train, os.path.join(args.out, "train"))
    save_dataset(test, os.path.join(args.out, "test"))
    print(f"wrote {len(train)} train + {len(test)} test subjects to {args.out}")
    return 0


def _cmd_pretrain_ssl(args, cfg) -> int:
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    grids = _pretrain_grids(ds, cfg["data"]["extent"])
    s = cfg["ssl"]
    ssl_cfg = SSLConfig(steps=s["steps"], batch_size=s["batch_size"], mask_ratio=s["mask_ratio"],
                        temperature=s["temperature"], lambda_restore=s["lambda_restore"],
                        lambda_contrast=s["lambda_contrast"], lr=s["lr"],
                        noise_sigma=s["noise_sigma"], max_shift=s["max_shift"], flips=s["flips"])
    vit, heads, history = run_pretraining(grids, _patch_cfg(cfg), ssl_cfg,
                                          derive_seed(args.seed, "ssl-pretrain"),
                                          dtype=DTYPES[args.precision])
    path = os.path.join(args.out, "encoder_ssl")
    tensors = dict(vit.named_parameters("vit."))
    tensors.update(heads.named_parameters("heads."))
    ckpt.save_checkpoint(path, tensors, meta={"kind": "ssl"})
    _write_history_csv(os.path.join(args.out, "ssl_loss.csv"), history,
                       ["step", "restoration", "contrastive", "total"])
    print(f"encoder checkpoint: {path}.ckpt.json (final loss {history[-1]['total']:.4f})")
    return 0


def _cmd_pretrain_aux(args, cfg) -> int:
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    grids = _pretrain_grids(ds, cfg["data"]["extent"])
    targets = [r.days_to_progression for r in ds.records]
    a = cfg["aux"]
    tensors, history = pretrain_auxiliary(grids, targets, _patch_cfg(cfg), steps=a["steps"],
                                          batch_size=a["batch_size"], lr=a["lr"],
                                          seed=derive_seed(args.seed, "aux-pretrain"),
                                          dtype=DTYPES[args.precision])
    path = os.path.join(args.out, "encoder_aux")
    ckpt.save_checkpoint(path, tensors, meta={"kind": "aux"})
    _write_history_csv(os.path.join(args.out, "aux_loss.csv"), history, ["step", "loss"])
    print(f"encoder checkpoint: {path}.ckpt.json (final loss {history[-1]['loss']:.4f})")
    return 0


def _cmd_train(args, cfg) -> int:
    train_ds = test_ds = None
    if args.data:
        train_ds = load_dataset(os.path.join(args.data, "train"))
        test_ds = load_dataset(os.path.join(args.data, "test"))
    report = run_experiment(cfg, args.seed, args.out, precision=args.precision,
                            train_ds=train_ds, test_ds=test_ds)
    mean, std = report.test_mean, report.test_std
    print(f"test AUC {mean['auc']:.3f} ± {std['auc']:.3f} "
          f"(ensemble {report.ensemble['auc']:.3f}); artifacts in {args.out}")
    return 0


def _cmd_evaluate(args, cfg) -> int:
    ds = load_dataset(args.data)
    loaded = _load_fold_models(args.checkpoints)
    os.makedirs(args.out, exist_ok=True)
    folds_out, curves, rows = [], {}, []
    per_fold_probs = []
    labels = np.array([r.label for r in ds.records])
    for model, prep, meta in loaded:
        fold = meta.get("fold", len(folds_out))
        samples = prep.prepare(ds.volumes, ds.records)
        probs = np.array([model.predict(s) for s in samples])
        folds_out.append({"fold": fold, "test": _metric_block(probs, labels)})
        curves[f"fold{fold}"] = roc_auc(probs, labels)
        per_fold_probs.append(probs)
        rows.extend((s.subject_id, str(fold), float(p), int(s.label))
                    for s, p in zip(samples, probs))
    stacked = np.stack(per_fold_probs)
    ensemble_probs = np.array([soft_vote(stacked[:, j]) for j in range(stacked.shape[1])])
    ensemble = _metric_block(ensemble_probs, labels)
    curves["ensemble"] = roc_auc(ensemble_probs, labels)
    rows.extend((r.subject_id, "ensemble", float(p), int(r.label))
                for r, p in zip(ds.records, ensemble_probs))
    payload = {
        "schema_version": 1,
        "seed": args.seed,
        "folds": folds_out,
        "ensemble": ensemble,
    }
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_roc_csv(os.path.join(args.out, "roc_points.csv"), curves)
    _write_predictions_csv(os.path.join(args.out, "predictions.csv"), rows)
    print(f"ensemble AUC {ensemble['auc']:.3f} over {len(loaded)} folds; artifacts in {args.out}")
    return 0


def _cmd_importance(args, cfg) -> int:
    ds = load_dataset(args.data)
    loaded = _load_fold_models(args.checkpoints)
    os.makedirs(args.out, exist_ok=True)
    models, splits, names = [], [], []
    for model, prep, _ in loaded:
        models.append(model)
        splits.append(prep.prepare(ds.volumes, ds.records))
        for n in prep.feature_names:
            if n not in names:
                names.append(n)
    rows = permutation_importance(models, splits, names, seed=derive_seed(args.seed, "importance"),
                                  permutations=cfg["importance"]["permutations"])
    write_importance_csv(os.path.join(args.out, "importance.csv"), rows)
    top = rows[0]
    print(f"top feature: {top['feature']} (mean AUC drop {top['mean_auc_drop']:.4f}); "
          f"importance.csv in {args.out}")
    return 0


def _cmd_select_features(args, cfg) -> int:
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    labels = ds.labels()
    matrix = drop_collinear(encode_clinical(ds.records, fit_clinical_stats(ds.records)))
    k = cfg["select"]["folds"]
    ranked_rows = rank_clinical_features(matrix, labels, k, derive_seed(args.seed, "select"))
    ranked = [r["feature"] for r in ranked_rows]
    result = select_features(ranked, matrix, labels, k, derive_seed(args.seed, "select"),
                             max_features=cfg["select"]["max_features"])
    write_importance_csv(os.path.join(args.out, "importance.csv"), ranked_rows)
    with open(os.path.join(args.out, "selected_features.json"), "w") as fh:
        json.dump({"selected": result.selected, "m": result.m, "sweep": result.sweep},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"selected {result.m} feature(s): {', '.join(result.selected)}")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "pretrain-ssl": _cmd_pretrain_ssl,
    "pretrain-aux": _cmd_pretrain_aux,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "importance": _cmd_importance,
    "select-features": _cmd_select_features,
}


_REPORTED = (ShapeError, ContractError, NumericError, ConfigError, FormatError,
             TrainingError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except _REPORTED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

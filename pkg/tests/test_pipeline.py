import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progfusion import checkpoint as ckpt
from progfusion.config import resolve_config
from progfusion.data import (
    FeatureMatrix,
    SynthConfig,
    drop_collinear,
    encode_clinical,
    fit_clinical_stats,
    synth_generate,
)
from progfusion.encoders import PatchConfig
from progfusion.errors import ConfigError, ContractError
from progfusion.model import PreparedSample
from progfusion.pipeline import (
    TrainConfig,
    fit_fold_preprocessor,
    permutation_importance,
    pretrain_auxiliary,
    rank_clinical_features,
    run_experiment,
    select_features,
    soft_vote,
    stratified_kfold,
    train_fold,
    training_accuracy,
)
from progfusion.seeding import rng_for
from progfusion.ssl import SSLConfig, run_pretraining

PC16 = PatchConfig(channels=2, extents=(16, 16, 16), patch=8, dim=16, depth=1)


# ------------------------------------------------------------------ folds

def test_fold_quotas_34_25_k5():
    labels = np.array([1] * 34 + [0] * 25)
    for seed in (0, 1, 7, 123, 99999):
        plan = stratified_kfold(labels, 5, seed)
        pos = sorted(int(labels[plan.assignment == f].sum()) for f in range(5))
        neg = sorted(int((1 - labels)[plan.assignment == f].sum()) for f in range(5))
        assert pos == [6, 7, 7, 7, 7]
        assert neg == [5, 5, 5, 5, 5]


def test_single_fold_contains_everyone():
    labels = np.array([0, 1, 0, 1])
    plan = stratified_kfold(labels, 1, 5)
    assert (plan.assignment == 0).all()
    train, val = plan.fold_indices(0)
    assert sorted(train) == sorted(val) == [0, 1, 2, 3]


def test_fold_plan_deterministic():
    labels = np.array([0, 1] * 10)
    a = stratified_kfold(labels, 4, 77)
    b = stratified_kfold(labels, 4, 77)
    assert (a.assignment == b.assignment).all()


def test_small_class_rejected():
    with pytest.raises(ConfigError, match="fewer than k"):
        stratified_kfold(np.array([1, 1, 1, 0]), 2, 0)


@given(n_pos=st.integers(2, 40), n_neg=st.integers(2, 40), k=st.integers(1, 2),
       seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_fold_quota_property(n_pos, n_neg, k, seed):
    labels = np.concatenate([np.ones(n_pos, int), np.zeros(n_neg, int)])
    plan = stratified_kfold(labels, k, seed)
    assert ((plan.assignment >= 0) & (plan.assignment < k)).all()
    for cls, total in ((1, n_pos), (0, n_neg)):
        for f in range(k):
            count = int((labels[plan.assignment == f] == cls).sum())
            assert abs(count - total / k) < 1


# --------------------------------------------------------------- training

def _separable_samples(n=8, tag="t"):
    rng = rng_for(314, "sep")
    out = []
    for i in range(n):
        label = i % 2
        grid = rng.standard_normal((2, 16, 16, 16)) * 0.1 + (label - 0.5)
        values = np.array([2.0 * label - 1.0, rng.standard_normal() * 0.1])
        out.append(PreparedSample(f"s{i}", grid, values, label, tag))
    return out


def test_separable_set_fits_within_500_steps():
    samples = _separable_samples()
    cfg = TrainConfig(mode="end_to_end", epochs=120, batch_size=8, lr=1e-2)
    model, history = train_fold(samples, PC16, ["bias_like", "noise"], cfg, 0, stats_tag="t")
    assert len(history) == 120  # one batch per epoch -> well under 500 steps
    assert training_accuracy(model, samples) == 1.0
    assert history[-1]["loss"] < history[0]["loss"]


def test_single_class_split_rejected():
    samples = [s for s in _separable_samples() if s.label == 1]
    cfg = TrainConfig(epochs=1)
    with pytest.raises(ContractError, match="both classes"):
        train_fold(samples, PC16, ["a", "b"], cfg, 0)


def test_pretrained_modes_require_checkpoint():
    with pytest.raises(ConfigError, match="encoder_checkpoint"):
        TrainConfig(mode="ssl_frozen")
    with pytest.raises(ConfigError, match="encoder_checkpoint"):
        TrainConfig(mode="transfer")
    with pytest.raises(ConfigError, match="mode"):
        TrainConfig(mode="fine_tune")


def test_train_fold_deterministic():
    samples = _separable_samples()
    cfg = TrainConfig(epochs=3, batch_size=4, lr=1e-3)
    m1, _ = train_fold(samples, PC16, ["a", "b"], cfg, 99)
    m2, _ = train_fold(samples, PC16, ["a", "b"], cfg, 99)
    for name, t in m1.named_parameters().items():
        assert m2.named_parameters()[name].data.tobytes() == t.data.tobytes()


def _ssl_checkpoint(tmp_path):
    grids = [rng_for(5, "g", i).standard_normal((2, 16, 16, 16)) for i in range(3)]
    vit, heads, _ = run_pretraining(grids, PC16, SSLConfig(steps=2, batch_size=3), seed=8)
    path = str(tmp_path / "enc_ssl")
    tensors = dict(vit.named_parameters("vit."))
    tensors.update(heads.named_parameters("heads."))
    ckpt.save_checkpoint(path, tensors, meta={"kind": "ssl"})
    return path, {k: v.data.copy() for k, v in vit.named_parameters("vit.").items()}


def test_ssl_frozen_leaves_encoder_bitwise_unchanged(tmp_path):
    path, before = _ssl_checkpoint(tmp_path)
    samples = _separable_samples()
    cfg = TrainConfig(mode="ssl_frozen", epochs=3, batch_size=4, encoder_checkpoint=path)
    model, _ = train_fold(samples, PC16, ["a", "b"], cfg, 1, stats_tag="t")
    after = model.vit.named_parameters("vit.")
    for name, arr in before.items():
        assert after[name].data.tobytes() == arr.tobytes()


def test_transfer_mode_fine_tunes_encoder(tmp_path):
    grids = [rng_for(6, "g", i).standard_normal((2, 16, 16, 16)) for i in range(4)]
    tensors, _ = pretrain_auxiliary(grids, [1.0, 2.0, 3.0, 4.0], PC16, steps=2, seed=3)
    path = str(tmp_path / "enc_aux")
    ckpt.save_checkpoint(path, tensors, meta={"kind": "aux"})
    samples = _separable_samples()
    cfg = TrainConfig(mode="transfer", epochs=2, batch_size=4, encoder_checkpoint=path)
    model, _ = train_fold(samples, PC16, ["a", "b"], cfg, 1, stats_tag="t")
    # fine-tuning must move the encoder away from the loaded weights
    assert any(
        model.vit.named_parameters("vit.")[name].data.tobytes() != tensors[name].data.tobytes()
        for name in model.vit.named_parameters("vit.")
    )


def test_missing_checkpoint_file_names_path(tmp_path):
    cfg = TrainConfig(mode="ssl_frozen", epochs=1, encoder_checkpoint=str(tmp_path / "nope"))
    with pytest.raises(ConfigError, match="nope"):
        train_fold(_separable_samples(), PC16, ["a", "b"], cfg, 0)


# ------------------------------------------------------------ aux pretrain

def test_aux_constant_target_converges_to_mean():
    grids = [rng_for(7, "g", i).standard_normal((2, 16, 16, 16)) for i in range(6)]
    tensors, history = pretrain_auxiliary(grids, [42.0] * 6, PC16, steps=60, lr=1e-2, seed=0)
    assert history[-1]["loss"] < 1e-3
    assert abs(float(tensors["aux.head_b"].data[0, 0])) < 0.05


def test_aux_loss_halves_on_synthetic_volumes():
    ds = synth_generate(SynthConfig(n_subjects=8, extent=16, signal=1.0, min_folds=2), 11)
    grids = [v.grid for v in ds.volumes]
    targets = [r.days_to_progression for r in ds.records]
    _, history = pretrain_auxiliary(grids, targets, PC16, steps=200, batch_size=8, seed=2)
    first = np.mean([h["loss"] for h in history[:10]])
    last = np.mean([h["loss"] for h in history[-10:]])
    assert last <= 0.5 * first


def test_aux_rejects_mismatched_inputs():
    with pytest.raises(ContractError):
        pretrain_auxiliary([], [], PC16)
    with pytest.raises(ContractError):
        pretrain_auxiliary([np.zeros((2, 16, 16, 16))], [1.0, 2.0], PC16)


# ---------------------------------------------------------------- ensemble

def test_soft_vote_values():
    assert soft_vote([0.2, 0.4, 0.6, 0.8, 1.0]) == pytest.approx(0.6)
    assert soft_vote([0.37]) == pytest.approx(0.37)
    with pytest.raises(ContractError):
        soft_vote([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=9))
def test_soft_vote_convexity(probs):
    v = soft_vote(probs)
    eps = 1e-12  # summation rounding can land an ulp outside the hull
    assert min(probs) - eps <= v <= max(probs) + eps


@given(st.integers(1, 6), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_soft_vote_preserves_unanimous_ranking(n_folds, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, n_folds)
    b = np.clip(a - rng.uniform(0.01, 0.5, n_folds), 0, 1)  # every fold ranks a above b
    if (a > b).all():
        assert soft_vote(a) > soft_vote(b)


# ----------------------------------------------- importance & selection

def _trained_folds(seed_data=3, signal=2.5):
    ds = synth_generate(SynthConfig(n_subjects=16, extent=16, signal=signal, min_folds=2), seed_data)
    plan = stratified_kfold(ds.labels(), 2, 9)
    models, vals, names = [], [], []
    for fold in range(2):
        tr, va = plan.fold_indices(fold)
        prep = fit_fold_preprocessor([ds.volumes[i] for i in tr], [ds.records[i] for i in tr],
                                     (16, 16, 16))
        s_tr = prep.prepare([ds.volumes[i] for i in tr], [ds.records[i] for i in tr])
        s_va = prep.prepare([ds.volumes[i] for i in va], [ds.records[i] for i in va])
        model, _ = train_fold(s_tr, PC16, prep.feature_names,
                              TrainConfig(epochs=6, batch_size=4), 21 + fold, prep.stats_tag)
        models.append(model)
        vals.append(s_va)
        for n in prep.feature_names:
            if n not in names:
                names.append(n)
    return models, vals, names


def test_planted_signal_ranks_first():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        models, vals, names = _trained_folds()
    rows = permutation_importance(models, vals, names, seed=17)
    assert rows[0]["feature"] == "days_to_progression"
    assert rows[0]["rank"] == 1
    assert rows[0]["mean_auc_drop"] > 0.1


def test_importance_deterministic_and_null_feature_flat():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        models, vals, names = _trained_folds()
    rows_a = permutation_importance(models, vals, names, seed=17, permutations=3)
    rows_b = permutation_importance(models, vals, names, seed=17, permutations=3)
    assert rows_a == rows_b
    drops = {r["feature"]: r["mean_auc_drop"] for r in rows_a}
    # gender carries no planted signal in the generator
    assert abs(drops["gender_Male"]) <= 0.05


def _matrix(values, columns):
    return FeatureMatrix(values=np.asarray(values, float), columns=list(columns),
                         kept=np.ones(len(columns), bool))


def test_select_four_informative_features():
    rng = np.random.default_rng(12)
    n = 120
    x = rng.standard_normal((n, 8))
    score = x[:, :4].sum(axis=1) + 0.3 * rng.standard_normal(n)
    y = (score > 0).astype(int)
    cols = [f"f{i}" for i in range(8)]
    sel = select_features(cols, _matrix(x, cols), y, k=3, seed=5)
    assert sel.m == 4
    assert sel.selected == cols[:4]


def test_select_single_informative_feature():
    rng = np.random.default_rng(4)
    n = 80
    y = rng.integers(0, 2, n)
    x = np.column_stack([y + 0.1 * rng.standard_normal(n), rng.standard_normal((n, 3)).T[0],
                         rng.standard_normal(n), rng.standard_normal(n)])
    cols = ["hot", "n1", "n2", "n3"]
    sel = select_features(cols, _matrix(x, cols), y, k=2, seed=1)
    assert sel.m == 1
    assert sel.selected == ["hot"]


def test_select_tie_prefers_smaller_prefix():
    rng = np.random.default_rng(9)
    n = 40
    y = rng.integers(0, 2, n)
    informative = y + 0.2 * rng.standard_normal(n)
    dead = np.zeros(n)  # contributes nothing -> exact AUC tie at m=2
    sel = select_features(["live", "dead"], _matrix(np.column_stack([informative, dead]),
                                                    ["live", "dead"]), y, k=2, seed=2)
    assert sel.m == 1
    assert sel.sweep[0]["mean_auc"] == sel.sweep[1]["mean_auc"]


def test_select_rejects_empty_ranking():
    with pytest.raises(ContractError):
        select_features([], _matrix(np.zeros((4, 1)), ["a"]), np.array([0, 1, 0, 1]), k=2, seed=0)


def test_rank_clinical_features_deterministic():
    ds = synth_generate(SynthConfig(n_subjects=20, extent=8, signal=2.0, min_folds=2), 6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        matrix = drop_collinear(encode_clinical(ds.records, fit_clinical_stats(ds.records)))
    a = rank_clinical_features(matrix, ds.labels(), k=2, seed=8)
    b = rank_clinical_features(matrix, ds.labels(), k=2, seed=8)
    assert a == b
    assert [r["rank"] for r in a] == list(range(1, len(a) + 1))


# ------------------------------------------------------------ orchestration

def _tiny_cfg(mode="end_to_end", folds=2, **extra):
    over = {
        "data": {"n_subjects": 12, "n_test": 6, "extent": 16, "signal": 2.0},
        "patch": {"patch": 8, "dim": 16, "depth": 1},
        "train": {"mode": mode, "epochs": 2, "batch_size": 4, "folds": folds},
        "ssl": {"steps": 3, "batch_size": 4},
        "aux": {"steps": 3, "batch_size": 4},
    }
    for k, v in extra.items():
        over.setdefault(k, {}).update(v)
    return resolve_config(over)


def test_run_experiment_k5_emits_five_folds_plus_ensemble(tmp_path):
    cfg = _tiny_cfg(folds=5)
    cfg["data"]["n_subjects"] = 16
    cfg["train"]["epochs"] = 1
    report = run_experiment(cfg, seed=3, out_dir=str(tmp_path / "run"), precision="f64")
    assert len(report.folds) == 5
    payload = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert len(payload["folds"]) == 5
    assert set(payload["ensemble"]) == {"auc", "accuracy", "sensitivity", "specificity"}
    for block in [payload["ensemble"]] + [f["test"] for f in payload["folds"]]:
        assert all(0.0 <= v <= 1.0 for v in block.values())
    lines = (tmp_path / "run" / "predictions.csv").read_text().splitlines()
    folds_in_csv = {line.split(",")[1] for line in lines[1:]}
    assert folds_in_csv == {"0", "1", "2", "3", "4", "ensemble"}
    roc = (tmp_path / "run" / "roc_points.csv").read_text().splitlines()
    assert {line.split(",")[0] for line in roc[1:]} == {f"fold{i}" for i in range(5)} | {"ensemble"}


def test_run_experiment_rerun_identical(tmp_path):
    cfg = _tiny_cfg()
    run_experiment(cfg, seed=5, out_dir=str(tmp_path / "a"), precision="f64")
    run_experiment(cfg, seed=5, out_dir=str(tmp_path / "b"), precision="f64")
    for name in ("metrics.json", "predictions.csv", "roc_points.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_experiment_pretrains_ssl_when_no_checkpoint(tmp_path):
    cfg = _tiny_cfg(mode="ssl_frozen")
    report = run_experiment(cfg, seed=5, out_dir=str(tmp_path / "run"), precision="f64")
    assert (tmp_path / "run" / "encoder_ssl.ckpt.json").exists()
    assert (tmp_path / "run" / "ssl_loss.csv").exists()
    assert all(0.0 <= v <= 1.0 for v in report.ensemble.values())


def test_run_experiment_transfer_mode(tmp_path):
    cfg = _tiny_cfg(mode="transfer")
    run_experiment(cfg, seed=5, out_dir=str(tmp_path / "run"), precision="f64")
    assert (tmp_path / "run" / "encoder_aux.ckpt.json").exists()


def test_run_experiment_missing_checkpoint_names_path(tmp_path):
    cfg = _tiny_cfg(mode="ssl_frozen")
    cfg["train"]["encoder_checkpoint"] = str(tmp_path / "ghost_encoder")
    with pytest.raises(ConfigError, match="ghost_encoder"):
        run_experiment(cfg, seed=5, out_dir=str(tmp_path / "run"))


def test_run_experiment_fold_checkpoints_reload(tmp_path):
    from progfusion.model import load_model

    cfg = _tiny_cfg()
    run_experiment(cfg, seed=5, out_dir=str(tmp_path / "run"), precision="f64")
    model, extra, meta = load_model(str(tmp_path / "run" / "checkpoints" / "fold0"))
    assert meta["fold"] == 0
    assert "prep.landmarks" in extra
    assert model.stats_tag  # provenance travels with the checkpoint

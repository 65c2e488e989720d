import json
import math

import numpy as np
import pytest

from survfuse.encoders import SynthConfig, synth_cohort
from survfuse.harness import (
    POOL_RATIO_PRESETS,
    Checkpoint,
    EarlyStopping,
    RunConfig,
    _run_fold,
    curve_gap,
    curve_rows,
    emit_km_plot,
    evaluate_checkpoint,
    fold_assignment,
    format_mean_std,
    format_p,
    inner_split,
    read_dataset,
    run_cv,
    train_fold,
    write_dataset,
)
from survfuse.metrics import evaluate_cohort, kaplan_meier
from survfuse.survival import cox_loss

from conftest import records

SMALL = dict(C=3, d=6, d_k=4, heads=2, depth=1, head_hidden=(8, 6), gene_hidden=6, max_epochs=6, folds=3)


def small_cohort(n=24, seed=0, **kw):
    cfg = dict(patients=n, C=3, d=6, genes=12, seed=seed, min_patches=6, max_patches=10)
    cfg.update(kw)
    return synth_cohort(SynthConfig(**cfg))


# ---- config


def test_defaults_follow_reported_training_setup():
    c = RunConfig()
    assert (c.lr, c.weight_decay, c.patience, c.folds) == (1e-4, 5e-4, 15, 5)
    assert POOL_RATIO_PRESETS == {"brca": 0.5, "luad": 0.9}
    assert (c.beta1, c.beta2, c.eps, c.max_epochs, c.val_fraction) == (0.9, 0.999, 1e-8, 300, 0.25)
    assert c.model_config().d_model == 2 * c.d_k


@pytest.mark.parametrize(
    "bad", [dict(pool_ratio=0.0), dict(pool_ratio=1.5), dict(folds=1), dict(patience=0), dict(C=0), dict(heads=0)]
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_config_round_trip_and_unknown_keys(tmp_path):
    c = RunConfig(seed=4, pool_ratio=0.9, head_hidden=(16, 8))
    (tmp_path / "c.json").write_text(json.dumps(c.to_dict()))
    assert RunConfig.load(tmp_path / "c.json") == c
    with pytest.raises(ValueError):
        RunConfig.from_dict({"learning_rate": 0.1})


# ---- folds


def test_fold_assignment_is_deterministic():
    a, b = fold_assignment(23, 5, seed=3), fold_assignment(23, 5, seed=3)
    assert np.array_equal(a, b)
    assert sorted(np.bincount(a).tolist()) == [4, 4, 5, 5, 5]
    assert not np.array_equal(a, fold_assignment(23, 5, seed=4))


def test_inner_split_is_75_25_and_disjoint():
    tr, va = inner_split(np.arange(40), 0.25, seed=1)
    assert len(va) == 10 and len(tr) == 30 and not set(tr) & set(va)


# ---- early stopping


def test_patience_one_without_improvement_stops_after_epoch_two():
    stop = EarlyStopping(1)
    assert stop.update(1, 5.0) == (True, False)
    assert stop.update(2, 5.0) == (False, True)
    assert stop.best_epoch == 1


def test_patience_counts_consecutive_epochs():
    stop = EarlyStopping(3)
    losses = [5, 4, 4.5, 4.2, 3.9, 4, 4, 4]
    flags = [stop.update(e, v)[1] for e, v in enumerate(losses, 1)]
    assert flags == [False] * 7 + [True]
    assert stop.best_epoch == 5 and stop.best_loss == 3.9


def test_train_fold_stops_when_validation_never_improves():
    coh = small_cohort(16)
    # lr = 0 and no decay freeze the model, so validation loss is flat
    cfg = RunConfig(**{**SMALL, "max_epochs": 50}, patience=1, lr=0.0, weight_decay=0.0)
    res = train_fold(cfg, coh.subset(range(12)), coh.subset(range(12, 16)))
    assert res.epochs_trained == 2 and res.checkpoint.epoch == 1


def test_training_loss_decreases_on_separable_fixture():
    coh = small_cohort(14, seed=1, effect_size=3.0, censoring_rate=0.0)
    cfg = RunConfig(**{**SMALL, "max_epochs": 5}, patience=50)
    res = train_fold(cfg, coh.subset(range(10)), coh.subset(range(10, 14)))
    assert len(res.train_loss) == 5
    assert all(b < a for a, b in zip(res.train_loss, res.train_loss[1:]))


def test_all_censored_training_fold_is_rejected():
    coh = small_cohort(12)
    for r in coh.records:
        r.event = 0
    with pytest.raises(ValueError, match="no observed events"):
        train_fold(RunConfig(**SMALL), coh.subset(range(8)), coh.subset(range(8, 12)))


def test_overlapping_sets_are_rejected():
    coh = small_cohort(12)
    with pytest.raises(ValueError, match="overlap"):
        train_fold(RunConfig(**SMALL), coh.subset(range(8)), coh.subset(range(6, 12)))


# ---- checkpoints


def test_checkpoint_reload_is_bit_exact(tmp_path):
    coh = small_cohort(16)
    train, val = coh.subset(range(12)), coh.subset(range(12, 16))
    res = train_fold(RunConfig(**SMALL), train, val)
    res.checkpoint.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    model = back.to_model()
    val_loss = cox_loss(model.risks(model.prepare(val)), val.records).item()
    assert val_loss == res.checkpoint.best_val_loss
    assert np.array_equal(model.risks(model.prepare(coh)), res.model.risks(res.model.prepare(coh)))
    back.save(tmp_path / "again.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_header_is_self_describing(tmp_path):
    coh = small_cohort(16)
    res = train_fold(RunConfig(**{**SMALL, "max_epochs": 1}), coh.subset(range(12)), coh.subset(range(12, 16)))
    res.checkpoint.save(tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    head = raw[: raw.index(b"\nend\n")].decode().splitlines()
    assert head[0] == "SURVFUSE-CHECKPOINT 1"
    tensors = [line.split() for line in head if line.startswith("tensor ")]
    total = sum(math.prod(int(s) for s in shape.split(",")) for _, _, shape in tensors)
    assert len(raw) - raw.index(b"\nend\n") - 5 == 8 * total


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "x.ckpt")


# ---- dataset directory


def test_dataset_round_trip_and_missing_modality(tmp_path):
    coh = small_cohort(6)
    write_dataset(coh, tmp_path)
    (tmp_path / "patches" / "P0002.txt").unlink()
    with open(tmp_path / "expression.tsv", "a") as fh:
        fh.write("EXTRA\t" + "\t".join(["0.0"] * 12) + "\n")
    back, excluded = read_dataset(tmp_path)
    assert excluded == ["P0002", "EXTRA"]
    assert back.ids == [i for i in coh.ids if i != "P0002"]
    keep = [0, 1, 3, 4, 5]
    assert np.array_equal(back.expression, coh.expression[keep])
    assert all(np.array_equal(a.patches, coh.patch_sets[i].patches) for a, i in zip(back.patch_sets, keep))
    assert [r.time for r in back.records] == [coh.records[i].time for i in keep]


# ---- cross-validation


def test_run_cv_report(tmp_path):
    coh = small_cohort(24)
    rep = run_cv(RunConfig(**SMALL), coh, out_dir=tmp_path, excluded=["X1"])
    data = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert [f["fold_id"] for f in data["folds"]] == [0, 1, 2]
    for f in data["folds"]:
        assert {"fold_id", "c_index", "pair_count", "logrank_p", "epochs_trained"} <= set(f)
    agg = data["aggregate"]
    cs = [f["c_index"] for f in data["folds"]]
    assert agg["c_index_mean"] == pytest.approx(np.mean(cs), abs=1e-15)
    assert agg["c_index_std"] == pytest.approx(np.std(cs, ddof=1), abs=1e-15)
    assert agg["c_index_summary"] == format_mean_std(np.mean(cs), np.std(cs, ddof=1))
    assert data["excluded"] == ["X1"]
    assert sorted(p["patient_id"] for f in data["folds"] for p in f["predictions"]) == sorted(coh.ids)
    assert all((tmp_path / f"fold{f}.ckpt").exists() for f in range(3))
    assert rep.c_index_summary == agg["c_index_summary"]


def test_threads_do_not_change_results(tmp_path, monkeypatch):
    coh = small_cohort(24)
    run_cv(RunConfig(**SMALL), coh, out_dir=tmp_path / "a")
    monkeypatch.setenv("SURVFUSE_THREADS", "3")
    run_cv(RunConfig(**SMALL), coh, out_dir=tmp_path / "b")
    for name in ["report.json", "fold0.ckpt", "fold1.ckpt", "fold2.ckpt"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fold_isolation():
    coh = small_cohort(24)
    cfg = RunConfig(**SMALL)
    fold = fold_assignment(len(coh), cfg.folds, cfg.seed)
    full = _run_fold(cfg, coh, fold, 0, None)
    drop = int(np.flatnonzero(fold == 0)[1])
    keep = [i for i in range(len(coh)) if i != drop]
    reduced = _run_fold(cfg, coh.subset(keep), fold[keep], 0, None)
    assert reduced.best_val_loss == full.best_val_loss and reduced.epochs_trained == full.epochs_trained
    before = {p["patient_id"]: p["risk"] for p in full.predictions}
    for p in reduced.predictions:
        assert p["risk"] == before[p["patient_id"]]


def test_format_mean_std_matches_reporting_style():
    assert format_mean_std(0.697, 0.020) == "0.697±(0.020)"


# ---- KM output


def _evaluation():
    recs = records([1, 2, 3, 4, 5, 6, 7, 8], [1, 1, 1, 0, 1, 1, 0, 1])
    return evaluate_cohort([8, 7, 6, 5, 4, 3, 2, 1], recs)


def test_km_file_is_exact_step_passthrough(tmp_path):
    ev = _evaluation()
    tsv, svg = emit_km_plot(ev, tmp_path)
    lines = tsv.read_text().splitlines()
    assert lines[0] == "group\ttime\tsurvival\tat_risk"
    rows = [line.split("\t") for line in lines[1:]]
    for name, curve in (("low", ev.km_low), ("high", ev.km_high)):
        got = [(float(t), float(s)) for g, t, s, _ in rows if g == name]
        assert got == curve.steps()
    text = svg.read_text()
    assert 'stroke="red"' in text and 'stroke="blue"' in text and "km-high" in text
    assert f"log-rank p = {format_p(ev.logrank.p_value)}" in text


def test_single_group_writes_curves_only(tmp_path):
    ev = evaluate_cohort([0.5] * 4, records([1, 2, 3, 4], [1, 1, 0, 1]))
    tsv, svg = emit_km_plot(ev, tmp_path)
    assert svg is None and tsv.exists() and not (tmp_path / "km.svg").exists()
    assert {r[0] for r in curve_rows(ev)} == {"low"}


@pytest.mark.parametrize("p,text", [(0.000123456, "1.23e-04"), (0.5, "5.00e-01"), (1.0, "1.00e+00"), (3.1e-38, "3.10e-38")])
def test_p_value_format(p, text):
    assert format_p(p) == text


def test_curve_gap_on_separated_groups():
    ev = _evaluation()
    t_med = np.median([r.time for r in ev.records])
    expect = abs(kaplan_meier(ev.records[4:])(t_med) - kaplan_meier(ev.records[:4])(t_med))
    assert curve_gap(ev) == expect and curve_gap(ev) > 0.2


def test_evaluate_checkpoint(tmp_path):
    coh = small_cohort(16)
    res = train_fold(RunConfig(**{**SMALL, "max_epochs": 2}), coh.subset(range(12)), coh.subset(range(12, 16)))
    ev, preds = evaluate_checkpoint(res.checkpoint, coh)
    assert len(preds) == 16 and 0.0 <= ev.c_index <= 1.0

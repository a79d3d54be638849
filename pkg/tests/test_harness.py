import json
import math
import stat

import numpy as np
import pytest

from fcrn_aec import harness
from fcrn_aec.harness import (COLUMN_KEYS, ExperimentConfig, HarnessError, KalmanSystem,
                              emit_table, load_mixture, load_records, rank_marks, render_table,
                              run_eval, run_simulate)
from fcrn_aec.scene import power


def small_cfg(tmp_path, **kw):
    base = dict(profile="desk", data_dir=str(tmp_path / "data"), counts={"train": 2, "val": 1, "test": 2},
                duration=0.75, checkpoint_dir=str(tmp_path / "ck"), results_dir=str(tmp_path / "res"))
    base.update(kw)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = small_cfg(root)
    run_simulate(cfg)
    return cfg


def test_simulate_tree_and_sidecars(dataset):
    recs = load_records(dataset.data_dir)
    assert [sum(r["split"] == s for r in recs) for s in ("train", "val", "test")] == [2, 1, 2]
    for rec in recs:
        m = load_mixture(dataset.data_dir, rec)
        assert np.array_equal(m.y, m.s + m.n + m.d)
        assert np.max(np.abs(m.y)) <= 0.9 + 1e-4
        meta = json.loads((harness.Path(dataset.data_dir) / rec["split"] / rec["id"] / "meta.json").read_text())
        assert meta["t60"] == rec["t60"]
        if rec["split"] == "test":
            assert meta["target_ser_db"] == 0.0 and meta["target_snr_db"] == 10.0
            # 16-bit storage moves the realized ratios only slightly
            assert abs(meta["realized_ser_db"]) < 0.05
            assert abs(meta["realized_snr_db"] - 10.0) < 0.05


def test_simulate_is_byte_identical(tmp_path, dataset):
    cfg = small_cfg(tmp_path)
    run_simulate(cfg)
    a = harness.Path(dataset.data_dir)
    b = harness.Path(cfg.data_dir)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_paper_profile_counts():
    cfg = ExperimentConfig(profile="paper")
    counts = harness.manifest_config(cfg).counts()
    assert counts == {"train": 3000, "val": 500, "test": 280}


# -- evaluation ------------------------------------------------------------------------

class SpySystem:
    """Records exactly what the evaluator feeds a system; passes the microphone through."""

    def __init__(self, name="spy"):
        self.name = name
        self.calls = []

    def process(self, y, x):
        self.calls.append((y.copy(), x.copy()))
        return y.copy(), None


def test_eval_conditions_feed_only_mic_and_reference(dataset):
    rec = load_records(dataset.data_dir, "test")[0]
    m = load_mixture(dataset.data_dir, rec)
    spy = SpySystem()
    res = harness.evaluate_file(spy, m, dataset.modes_for(spy.name))
    inputs = [c[0] for c in spy.calls]
    for got, want in zip(inputs, (m.y, m.d, m.n, m.s)):
        assert np.array_equal(got, want)
    assert all(np.array_equal(c[1], m.x) for c in spy.calls)
    # identity processing is neutral in every dB column
    assert res["erle_bb"] == pytest.approx(0.0, abs=0.01)
    assert res["dsnr_bb"] == pytest.approx(0.0, abs=0.01)
    assert res["echo_erle"] == pytest.approx(0.0, abs=0.01)
    assert res["noise_dsnr"] == pytest.approx(0.0, abs=1e-9)
    assert res["full_pesq"] is None


def test_reference_mode_zero(dataset):
    rec = load_records(dataset.data_dir, "test")[0]
    m = load_mixture(dataset.data_dir, rec)
    spy = SpySystem("Kalman")
    harness.evaluate_file(spy, m, dataset.modes_for("Kalman"))
    assert np.any(spy.calls[0][1])
    assert not np.any(spy.calls[3][1])


def pesq_stub(tmp_path):
    # 4.64 when the two files are identical, 1.0 otherwise
    path = tmp_path / "pesq_stub.sh"
    path.write_text('#!/bin/sh\nif cmp -s "$3" "$4"; then echo "MOS-LQO = 4.64"; else echo "MOS-LQO = 1.00"; fi\n')
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


def test_kalman_speech_only_passes_through(tmp_path, dataset):
    cfg = harness.with_overrides(dataset, pesq_tool=pesq_stub(tmp_path))
    rows, per_file = run_eval([KalmanSystem()], cfg)
    assert rows[0]["speech_pesq"] == 4.64
    assert all(f["speech_pesq"] == 4.64 for f in per_file)
    assert rows[0]["full_pesq"] == 1.0
    assert rows[0]["files"] == 2
    assert rows[0]["reference"]["speech"] == "zero"


def test_eval_parallel_matches_serial(dataset):
    serial, _ = run_eval([KalmanSystem()], dataset)
    parallel, _ = run_eval([KalmanSystem()], harness.with_overrides(dataset, workers=2))
    assert serial == parallel


def test_missing_checkpoint_and_manifest(tmp_path):
    with pytest.raises(HarnessError, match="checkpoint"):
        harness.load_system(tmp_path / "none.ckpt")
    with pytest.raises(HarnessError, match="manifest"):
        load_records(tmp_path)


def test_config_validation(tmp_path):
    with pytest.raises(HarnessError, match="empty"):
        ExperimentConfig(variants=[], include_kalman=False).validate()
    with pytest.raises(ValueError):
        ExperimentConfig(variants=["LateF/SkipC/OutD"]).validate()
    with pytest.raises(HarnessError, match="reference mode"):
        ExperimentConfig(reference_modes={"speech": "muted"}).validate()
    with pytest.raises(HarnessError, match="training option"):
        ExperimentConfig(train={"momentum": 0.9}).validate()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"profile": "desk", "bogus": 1}))
    with pytest.raises(HarnessError, match="bogus"):
        ExperimentConfig.from_file(path)
    path.write_text(json.dumps({"profile": "desk", "seed": 3, "train": {"max_epochs": 2}}))
    cfg = ExperimentConfig.from_file(path, seed=5)
    assert cfg.seed == 5 and cfg.train_config().max_epochs == 2 and cfg.train_config().seed == 5


def test_desk_training_defaults():
    tc = ExperimentConfig(profile="desk").train_config()
    assert tc.lr_init == 1e-3 and tc.batch_size == 16 and tc.seq_len == 50
    tc = ExperimentConfig(profile="paper").train_config()
    assert tc.lr_init == 5e-5 and tc.stop_lr == 5e-6


# -- tables -------------------------------------------------------------------------------

def row(name, **vals):
    r = {"system": name, "saturated": []}
    r.update({k: vals.get(k) for k in COLUMN_KEYS})
    return r


def test_single_row_best_everywhere():
    r = row("only", **{k: 1.0 for k in COLUMN_KEYS})
    marks = rank_marks([r])
    assert all(marks[0][k] == "best" for k in COLUMN_KEYS)


def test_ties_share_best_and_second_is_next_value():
    rows = [row("a", erle_bb=10.0), row("b", erle_bb=10.001), row("c", erle_bb=5.0), row("d", erle_bb=1.0)]
    marks = rank_marks(rows)
    assert [m["erle_bb"] for m in marks] == ["best", "best", "second", ""]
    assert all(m["full_pesq"] == "" for m in marks)


def test_text_table_layout():
    text = render_table([row("Kalman", echo_erle=18.36, speech_pesq=4.64), row("net", echo_erle=20.0)])
    lines = text.splitlines()
    assert lines[0].index("full mixture") < lines[0].index("d(n)") < lines[0].index("n(n)") < lines[0].index("s(n)")
    header = [h.strip() for h in lines[1].split("|")]
    assert header == ["system", "PESQ", "ERLE_BB", "dSNR_BB", "PESQ_BB", "ERLE", "dSNR", "PESQ"]
    assert "20.00*" in text and "18.36+" in text and "4.64*" in text and "n/a" in text


def test_saturated_values_are_flagged():
    r = row("oracle", echo_erle=120.0)
    r["saturated"] = ["echo_erle"]
    assert "sat*" in render_table([r])
    assert json.loads(harness.export_rows([r]))["saturated"] == ["echo_erle"]


def test_export_keys_are_stable(tmp_path):
    paths = emit_table([row("a", erle_bb=1.23456789)], tmp_path, figures=True)
    rec = json.loads(paths["jsonl"].read_text())
    assert list(rec) == sorted(rec)
    assert set(rec) == set(COLUMN_KEYS) | {"system", "best", "second", "saturated"}
    assert rec["erle_bb"] == 1.23456789
    assert paths["figure"].exists() and paths["figure"].stat().st_size > 0
    assert paths["text"].read_text() == render_table([row("a", erle_bb=1.23456789)])


def test_aggregate_means_and_missing():
    agg = harness.aggregate("x", [{"erle_bb": 10.0, "full_pesq": None}, {"erle_bb": 20.0, "full_pesq": None}])
    assert agg["erle_bb"] == 15.0 and agg["full_pesq"] is None and agg["files"] == 2


def test_speech_power_survives_quantization(dataset):
    rec = load_records(dataset.data_dir, "train")[0]
    m = load_mixture(dataset.data_dir, rec)
    assert power(m.s) > 0
    assert math.isfinite(m.realized_ser_db) or not np.any(m.d)

import json
import logging
from dataclasses import replace
from pathlib import Path

import pytest

from tdformer import cli
from tdformer.config import load_config
from tdformer.datasets import synth_dataset
from tdformer.errors import ConfigurationError, TrainingDivergedError
from tdformer.model import TDFormer, save_checkpoint, train
from tdformer.reports import read_csv

BUNDLED_XOR = Path(__file__).resolve().parent.parent / "temporal_xor.yml"

BASE = """\
dataset: temporal-xor
T: 4
n_sub: 2
alphas: [0.25, 0.75]
epochs: 2
image_size: 4
embed_channels: 8
depth: 1
batch_size: 8
n_train: 16
n_test: {n_test}
"""


@pytest.fixture
def config_file(tmp_path):
    def make(text=None, n_test=8):
        path = tmp_path / "experiment.yml"
        path.write_text(BASE.format(n_test=n_test) if text is None else text)
        return str(path)
    return make


def test_missing_required_key_exits_2(config_file, tmp_path, caplog):
    text = "\n".join(line for line in BASE.format(n_test=8).splitlines() if not line.startswith("alphas"))
    with caplog.at_level(logging.ERROR):
        code = cli.main(["train", "--config", config_file(text), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "alphas" in caplog.text


@pytest.mark.parametrize("extra, field", [("colour: red\n", "colour"), ("lr: fast\n", "lr"),
                                          ("alphas: [0.5, 0.6]\n", "alphas")])
def test_invalid_settings_exit_2(extra, field, config_file, tmp_path, caplog):
    text = BASE.format(n_test=8).replace("alphas: [0.25, 0.75]\n", "") + (
        extra if extra.startswith("alphas") else "alphas: [0.25, 0.75]\n" + extra)
    with caplog.at_level(logging.ERROR):
        code = cli.main(["train", "--config", config_file(text), "--out", str(tmp_path / "out")])
    assert code == 2
    assert field in caplog.text


def test_unreadable_config_exits_2(config_file, tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.yml")]) == 2
    assert cli.main(["train", "--config", config_file("T: [unclosed\n")]) == 2
    assert cli.main(["train", "--config", config_file("")]) == 2


def test_analysis_needing_checkpoint_exits_2(config_file, tmp_path):
    out = str(tmp_path / "out")
    assert cli.main(["analyze", "mi", "--config", config_file(), "--out", out]) == 2
    assert cli.main(["analyze", "energy", "--config", config_file(), "--out", out,
                     "--checkpoint", str(tmp_path / "nope.json")]) == 2


def test_divergence_exits_3(config_file, tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError("loss became non-finite", {"epoch": 0})
    monkeypatch.setattr(cli, "train", diverge)
    assert cli.main(["train", "--config", config_file(), "--out", str(tmp_path / "out")]) == 3


def test_train_writes_reports(config_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["train", "--config", config_file(), "--out", str(out)]) == 0
    meta, rows = read_csv(str(out / "train_report.csv"))
    assert len(rows) == 2
    assert meta["seed"] == "0"
    assert len(meta["config_hash"]) == 64
    _, stages = read_csv(str(out / "stage_losses.csv"))
    assert [row["stage"] for row in stages] == ["0", "1", "0", "1"]
    assert (out / "checkpoint.json").exists()


def test_same_seed_gives_identical_reports(config_file, tmp_path):
    path = config_file()
    for name in ("first", "second"):
        assert cli.main(["train", "--config", path, "--out", str(tmp_path / name)]) == 0
    for filename in ("train_report.csv", "stage_losses.csv", "checkpoint.json"):
        assert (tmp_path / "first" / filename).read_bytes() == (tmp_path / "second" / filename).read_bytes()


def test_seed_override_changes_provenance(config_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["analyze", "jacobian", "--config", config_file(), "--out", str(out), "--seed", "7"]) == 0
    meta, rows = read_csv(str(out / "jacobian.csv"))
    assert meta["seed"] == "7"
    assert len(rows) == 16
    assert all(float(row["baseline"]) == 0.0 for row in rows)


def test_analyze_epsilon(config_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["analyze", "epsilon", "--config", config_file(), "--out", str(out)]) == 0
    meta, rows = read_csv(str(out / "epsilon.csv"))
    assert len(rows) == 10000
    assert float(meta["max_error"]) < 1e-12
    for row in rows[:500]:
        assert abs(float(row["baseline"]) - float(row["baseline_measured"])) < 1e-12
        assert abs(float(row["feedback"]) - float(row["feedback_measured"])) < 1e-12


def test_analyze_mi_on_untrained_checkpoint(config_file, tmp_path):
    path = config_file(n_test=100)
    checkpoint = str(tmp_path / "untrained.json")
    save_checkpoint(TDFormer(load_config(path).model), checkpoint)
    out = tmp_path / "out"
    assert cli.main(["analyze", "mi", "--config", path, "--out", str(out), "--checkpoint", checkpoint]) == 0
    meta, rows = read_csv(str(out / "mi.csv"))
    assert meta["samples"] == "100"
    values = [[float(row["t{}".format(j)]) for j in range(4)] for row in rows]
    assert len(values) == 4
    for i in range(4):
        for j in range(4):
            assert values[i][j] == values[j][i]
            assert values[i][j] >= -1e-12
    assert (out / "mi.svg").exists()


def test_analyze_energy_from_trained_checkpoint(config_file, tmp_path):
    path = config_file()
    out = tmp_path / "out"
    assert cli.main(["train", "--config", path, "--out", str(out)]) == 0
    assert cli.main(["analyze", "energy", "--config", path, "--out", str(out),
                     "--checkpoint", str(out / "checkpoint.json")]) == 0
    meta, rows = read_csv(str(out / "energy.csv"))
    assert meta["e_mac_pj"] == "4.6"
    assert float(meta["tdac_share"]) < 0.5
    assert {row["group"] for row in rows} == {"baseline", "cm", "pm"}


def test_compare_needs_two_seeds(config_file, tmp_path):
    assert cli.main(["compare", "--config", config_file(n_test=100), "--out", str(tmp_path / "out"),
                     "--seeds", "0"]) == 2


def test_null_comparison_has_zero_deltas(config_file, tmp_path):
    out = tmp_path / "out"
    code = cli.main(["compare", "--config", config_file(n_test=100), "--out", str(out),
                     "--seeds", "0", "1", "--ablation", "null"])
    assert code == 0
    _, runs = read_csv(str(out / "compare.csv"))
    assert len(runs) == 4
    _, summary = read_csv(str(out / "compare_summary.csv"))
    for row in summary:
        assert float(row["mean_delta"]) == 0.0
        assert row["direction"] == "equal"
    _, energy = read_csv(str(out / "compare_energy.csv"))
    assert {row["arm"] for row in energy} == {"feedback-off", "feedback-off (repeat)"}
    assert (out / "compare.xlsx").exists()


def test_analyze_bounds_grid_has_no_violations(config_file, tmp_path):
    out = tmp_path / "out"
    path = config_file(BASE.format(n_test=8) + "samples: 10000\n")
    assert cli.main(["analyze", "bounds", "--config", path, "--out", str(out)]) == 0
    meta, rows = read_csv(str(out / "bounds.csv"))
    assert meta["violations"] == "0"
    assert len(rows) == 342
    assert not [row for row in rows if row["violation"] == "True"]


def test_exponent_without_decimal_point_is_a_float(config_file):
    path = config_file(BASE.format(n_test=8) + "lr: 1e-3\nweight_decay: 5e-4\nrates: [2e-1, 5e-1]\n")
    cfg = load_config(path)
    assert cfg.training.lr == 0.001
    assert cfg.training.weight_decay == 0.0005
    assert cfg.sizes.rates == (0.2, 0.5)


def test_checkpoint_records_seed_and_config_hash(config_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["train", "--config", config_file(), "--out", str(out), "--seed", "3"]) == 0
    meta, _ = read_csv(str(out / "train_report.csv"))
    payload = json.loads((out / "checkpoint.json").read_text())
    assert payload["seed"] == 3
    assert payload["config_hash"] == meta["config_hash"]


def test_histogram_mi_from_config(config_file, tmp_path):
    path = config_file(BASE.format(n_test=100) + "mi_estimator: histogram\nmi_bins: 4\n")
    checkpoint = str(tmp_path / "untrained.json")
    save_checkpoint(TDFormer(load_config(path).model), checkpoint)
    out = tmp_path / "out"
    assert cli.main(["analyze", "mi", "--config", path, "--out", str(out), "--checkpoint", checkpoint]) == 0
    meta, rows = read_csv(str(out / "mi.csv"))
    assert meta["estimator"] == "histogram"
    assert meta["bins"] == "4"
    assert len(rows) == 4


@pytest.mark.parametrize("extra, field", [("mi_estimator: kraskov\n", "mi_estimator"),
                                          ("mi_estimator: plug-in\nmi_bins: 3\n", "mi_bins")])
def test_invalid_mi_settings(extra, field, config_file):
    with pytest.raises(ConfigurationError) as err:
        load_config(config_file(BASE.format(n_test=8) + extra))
    assert err.value.field == field


def test_bundled_temporal_xor_trains_one_epoch():
    cfg = load_config(str(BUNDLED_XOR))
    assert cfg.dataset == "temporal-xor"
    assert cfg.model.n_sub == 2 and cfg.model.feedback
    dataset = synth_dataset(cfg.dataset, replace(cfg.sizes, n_train=64, n_test=32), seed=cfg.seed)
    report = train(dataset, cfg.model, training=replace(cfg.training, epochs=1))
    assert len(report.epochs) == 1
    assert report.final.firing_rates["block0.td.k"] > 0.0


@pytest.mark.slow
def test_bundled_temporal_xor_feedback_beats_no_feedback(tmp_path):
    out = tmp_path / "compare"
    assert cli.main(["compare", "--config", str(BUNDLED_XOR), "--out", str(out)]) == 0
    _, runs = read_csv(str(out / "compare.csv"))
    assert len(runs) == 6
    _, summary = read_csv(str(out / "compare_summary.csv"))
    by_metric = {row["metric"]: row for row in summary}
    for metric in ("test_accuracy", "mi_off_diagonal"):
        assert float(by_metric[metric]["mean_treated"]) > float(by_metric[metric]["mean_control"]), metric
        assert by_metric[metric]["direction"] == "higher"

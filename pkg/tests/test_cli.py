import csv

import numpy as np
import pytest

from cli_configs import MINIMAL
from psetlab.cli import COMMANDS, ConfigError, main, read_config_text, resolve_config, run
from psetlab.pointcloud import read_dataset


def _rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_config_parsing():
    raw = read_config_text("# comment\nn_classes = 4  # trailing\n\nepochs=2\n")
    assert raw == {"n_classes": ("4", 2), "epochs": ("2", 4)}
    with pytest.raises(ConfigError, match="duplicate"):
        read_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        read_config_text("just words\n")


def test_seed_override():
    cfg = resolve_config("simple-ensemble", {}, seed=77)
    assert cfg["seed"] == 77 and cfg["n_instances"] == 10 and cfg["k_range"] == (1, 10)
    assert resolve_config("gen-data", {}, seed=5)["data_seed"] == 5


@pytest.mark.parametrize("command,text", [
    ("gen-data", "n_classes = 1\n"),
    ("simple-ensemble", "k_range = 1..12\n"),
    ("simple-ensemble", "bogus = 3\n"),
    ("bagging", "fractions = 0.5, 1.5\n"),
    ("weight-search", "search = grid\nweight.pointnet_lite = (0.95, 0.99)\ngrid_step = 0.1\n"),
    ("weight-search", "weight.hier_lite = (0.4, 1]\nfamilies = pointnet_lite, deepsets_lite\n"),
    ("timing", "repetitions = 2\n"),
])
def test_config_errors_exit_2(command, text, tmp_path, capsys):
    assert run(command, text, tmp_path) == 2
    assert "config error" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_runtime_error_exit_3(tmp_path):
    assert run("simple-ensemble", f"dataset = {tmp_path / 'missing.pset'}\n", tmp_path / "o") == 3


def test_main_unreadable_config(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_gen_data_defaults_and_determinism(tmp_path, capsys):
    assert run("gen-data", "", tmp_path / "a") == 0
    ds = read_dataset(tmp_path / "a" / "dataset.pset")
    assert ds.n_classes == 8 and len(ds) == 8 * 140
    assert np.all(np.bincount(ds.labels) == 140)
    assert "sphere: 140" in capsys.readouterr().out
    assert run("gen-data", "", tmp_path / "b") == 0
    assert (tmp_path / "a" / "dataset.pset").read_bytes() == (tmp_path / "b" / "dataset.pset").read_bytes()


def test_gen_data_import_dir(tmp_path):
    rng = np.random.default_rng(0)
    for cls in ("chair", "lamp"):
        d = tmp_path / "src" / cls
        d.mkdir(parents=True)
        for i in range(2):
            pts = rng.standard_normal((30, 6))
            (d / f"{cls}_{i}.txt").write_text("\n".join(",".join(map(str, r)) for r in pts))
    assert run("gen-data", f"import_dir = {tmp_path / 'src'}\nn_points = 16\n", tmp_path / "o") == 0
    ds = read_dataset(tmp_path / "o" / "dataset.pset")
    assert ds.class_names == ("chair", "lamp") and ds.points.shape == (4, 16, 3)
    assert run("gen-data", f"import_dir = {tmp_path / 'src' / 'chair'}\n", tmp_path / "p") == 3


def test_simple_ensemble_reports(tmp_path):
    assert run("simple-ensemble", MINIMAL["simple-ensemble"], tmp_path) == 0
    rows = _rows(tmp_path / "simple_ensemble.csv")
    assert len(rows) == 3 * 3
    assert {r["method"] for r in rows} == {"raw_mean", "soft_vote", "hard_vote"}
    k1 = [r for r in rows if r["k"] == "1"]
    assert len({(r["instance_mean"], r["class_mean"]) for r in k1}) == 1
    assert (tmp_path / "per_class.csv").exists() and (tmp_path / "scores_pointnet_lite_0.csv").exists()
    head = (tmp_path / "simple_ensemble.csv").read_text().splitlines()[:3]
    assert head[0].startswith("# psetlab") and "config_hash" in head[1] and "seed=0" in head[2]


def test_simple_ensemble_full_k_range_rows(tmp_path):
    text = MINIMAL["simple-ensemble"].replace("n_instances = 3\nk_range = 1..3\n", "n_instances = 10\n")
    text = text.replace("train_per_class = 6", "train_per_class = 2").replace("n_points = 32", "n_points = 16")
    assert run("simple-ensemble", text + "save_scores = false\n", tmp_path) == 0
    assert len(_rows(tmp_path / "simple_ensemble.csv")) == 30


def test_bagging_rows(tmp_path):
    assert run("bagging", MINIMAL["bagging"], tmp_path) == 0
    rows = _rows(tmp_path / "bagging.csv")
    assert len(rows) == 2 * 3
    assert {r["variant"] for r in rows} == {"without_replacement", "with_replacement", "simple"}


def test_weight_search_pair_grid(tmp_path):
    assert run("weight-search", MINIMAL["weight-search"], tmp_path) == 0
    rows = _rows(tmp_path / "weight_search.csv")
    kinds = [r[next(iter(r))] for r in rows]
    assert kinds.count("pair") == 9
    assert (tmp_path / "rank.csv").exists()


def test_random_factors_table(tmp_path):
    assert run("random-factors", MINIMAL["random-factors"], tmp_path) == 0
    rows = _rows(tmp_path / "random_factors.csv")
    assert len(rows) == 8
    const = [r for r in rows if r["identical_models"] == "true"]
    assert len(const) == 1 and float(const[0]["max_score_diff"]) == 0.0
    assert all(float(r["max_score_diff"]) > 0 for r in rows if r is not const[0])


def test_head_ensemble(tmp_path):
    assert run("head-ensemble", MINIMAL["head-ensemble"], tmp_path) == 0
    rows = _rows(tmp_path / "head_ensemble.csv")
    assert len(rows) == 3
    assert all(r["encoder_unchanged"] == "true" for r in rows[:2])


def test_frustum_and_rerun(tmp_path):
    assert run("frustum", MINIMAL["frustum"], tmp_path / "a") == 0
    rows = _rows(tmp_path / "a" / "frustum.csv")
    assert len(rows) == 6
    assert run("frustum", MINIMAL["frustum"], tmp_path / "b") == 0
    for name in ("frustum.csv", "detections.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_frustum_single_instance_modes_agree(tmp_path):
    text = MINIMAL["frustum"].replace("n_instances = 2", "n_instances = 1")
    assert run("frustum", text, tmp_path) == 0
    rows = _rows(tmp_path / "frustum.csv")
    for iou_mode in ("ground", "full3d"):
        vals = {(r["ap"], r["mean_iou"]) for r in rows if r["iou_mode"] == iou_mode}
        assert len(vals) == 1


def test_timing(tmp_path):
    assert run("timing", MINIMAL["timing"], tmp_path) == 0
    rows = _rows(tmp_path / "timing.csv")
    assert [r["family"] for r in rows] == ["deepsets_lite", "pointnet_lite", "hier_lite"]


def test_every_command_has_minimal_config():
    assert set(MINIMAL) == set(COMMANDS)

import logging

import numpy as np
import pytest

import oracles
from psetlab.models import (FAMILIES, ModelArch, ModelFileError, SeedBundle, TrainConfig, TrainedModel, classify,
                            default_arch, encode, encode_batch, load_model, param_count, predict, predict_batch,
                            predict_scores, retrain_classifier, save_model, time_inference, train)
from psetlab.numerics import seeded_rng


def _random_model(family, n_classes=4, seed=0, **kw):
    arch = ModelArch(family, (6 if family == "hier_lite" else 3, 8, 16), (16, 8, n_classes), **kw)
    return TrainedModel(arch, seeded_rng(seed).standard_normal(arch.n_params) * 0.5)


def test_param_count_matches_dense_formula():
    for f in FAMILIES:
        a = default_arch(f, 8)
        assert param_count(a) == oracles.dense_param_count(a.phi_widths) + oracles.dense_param_count(a.rho_widths)
    # phi [3, 32, 64] + rho [64, 32, 8]
    assert param_count(default_arch("deepsets_lite", 8)) == 4584


def test_arch_validation():
    with pytest.raises(ValueError):
        ModelArch("resnet", (3, 8), (8, 2))
    with pytest.raises(ValueError):
        ModelArch("pointnet_lite", (3, 8), (4, 2))
    with pytest.raises(ValueError):
        ModelArch("hier_lite", (3, 8), (8, 2))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_training_deterministic(small_ds, small_models):
    ds, tr, _ = small_ds
    again = train(default_arch("pointnet_lite", 4), ds, tr, SeedBundle(1, 2, 3), TrainConfig(epochs=2))
    assert np.array_equal(again.params, small_models["pointnet_lite"].params)
    other = train(default_arch("pointnet_lite", 4), ds, tr, SeedBundle(1, 9, 3), TrainConfig(epochs=2))
    assert not np.array_equal(other.params, again.params)


def test_training_reduces_loss(small_ds):
    ds, tr, _ = small_ds
    m = train(default_arch("pointnet_lite", 4), ds, tr, SeedBundle(0, 0, 0), TrainConfig(epochs=10))
    assert len(m.epoch_losses) == 10 and np.isfinite(m.final_loss)
    assert np.mean(m.epoch_losses[-3:]) < np.mean(m.epoch_losses[:3])


def test_train_rejects_class_mismatch(small_ds):
    ds, tr, _ = small_ds
    with pytest.raises(ValueError):
        train(default_arch("pointnet_lite", 5), ds, tr, SeedBundle())


@pytest.mark.parametrize("family", FAMILIES)
def test_permutation_invariance(family, rng):
    m = _random_model(family, group_k=4, n_centroids=4)
    pc = rng.standard_normal((40, 3))
    perm = rng.permutation(40)
    a, b = predict(m, pc), predict(m, pc[perm])
    if family == "deepsets_lite":
        assert np.allclose(a, b, rtol=1e-6, atol=1e-12)
    else:
        assert np.array_equal(a, b)


def test_zero_model_gives_zero_scores():
    arch = default_arch("pointnet_lite", 3)
    m = TrainedModel(arch, np.zeros(arch.n_params))
    assert np.array_equal(predict(m, np.ones((10, 3))), np.zeros(3))


def test_max_pool_ignores_duplicates(rng):
    m = _random_model("pointnet_lite")
    pc = rng.standard_normal((20, 3))
    assert np.array_equal(encode(m, pc), encode(m, np.vstack([pc, pc[:5]])))


def test_sum_pool_additive(rng):
    m = _random_model("deepsets_lite")
    a, b = rng.standard_normal((7, 3)), rng.standard_normal((5, 3))
    assert np.allclose(encode(m, np.vstack([a, b])), encode(m, a) + encode(m, b), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("family", FAMILIES)
def test_predict_is_classify_of_encode(family, rng):
    m = _random_model(family, group_k=4, n_centroids=4)
    pts = rng.standard_normal((3, 20, 3))
    assert np.array_equal(predict_batch(m, pts), classify(m, encode_batch(m, pts)))
    assert np.array_equal(predict(m, pts[0]), classify(m, encode(m, pts[0])[None])[0])


def test_retrain_keeps_encoder(small_ds, small_models):
    ds, tr, _ = small_ds
    base = small_models["pointnet_lite"]
    heads = [retrain_classifier(base, ds, tr, 100 + i, epochs=1) for i in range(5)]
    for h in heads:
        assert h.encoder_params.tobytes() == base.encoder_params.tobytes()
    assert len({h.rho_params.tobytes() for h in heads}) == 5


def test_predict_scores_rows(small_ds, small_models):
    ds, _, te = small_ds
    s = predict_scores(small_models["hier_lite"], ds, te)
    assert s.scores.shape == (len(te), 4)
    assert np.array_equal(s.sample_ids, te) and np.array_equal(s.labels, ds.labels[te])


def test_model_file_round_trip(tmp_path, small_models):
    for f, m in small_models.items():
        p = tmp_path / f"{f}.pmodel"
        save_model(m, p)
        back = load_model(p)
        assert back.params.tobytes() == m.params.tobytes()
        assert back.arch == m.arch and back.seeds == m.seeds
        save_model(back, tmp_path / "again.pmodel")
        assert p.read_bytes() == (tmp_path / "again.pmodel").read_bytes()


def test_const_seeds_round_trip(tmp_path):
    m = TrainedModel(default_arch("deepsets_lite", 2), np.zeros(default_arch("deepsets_lite", 2).n_params))
    save_model(m, tmp_path / "c.pmodel")
    assert "init=CONST" in (tmp_path / "c.pmodel").read_text()
    assert load_model(tmp_path / "c.pmodel").seeds == SeedBundle()


def test_model_file_errors(tmp_path, small_models, caplog):
    p = tmp_path / "m.pmodel"
    save_model(small_models["pointnet_lite"], p)
    lines = p.read_text().splitlines()
    (tmp_path / "trunc.pmodel").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(ModelFileError, match="truncated"):
        load_model(tmp_path / "trunc.pmodel")
    (tmp_path / "ver.pmodel").write_text("\n".join(["PMODEL 9 pointnet_lite"] + lines[1:]) + "\n")
    with pytest.raises(ModelFileError, match="version"):
        load_model(tmp_path / "ver.pmodel")
    (tmp_path / "count.pmodel").write_text("\n".join(lines[:3] + ["7"] + lines[4:]) + "\n")
    with pytest.raises(ModelFileError, match="parameter count"):
        load_model(tmp_path / "count.pmodel")
    with caplog.at_level(logging.WARNING):
        m = load_model(p, expected_family="deepsets_lite")
    assert m.family == "pointnet_lite" and "not deepsets_lite" in caplog.text


def test_time_inference(small_models, rng):
    t = time_inference(small_models["pointnet_lite"], rng.standard_normal((2, 32, 3)), repetitions=3)
    assert t["repetitions"] == 3 and t["min"] <= t["mean"] <= t["max"]
    with pytest.raises(ValueError):
        time_inference(small_models["pointnet_lite"], rng.standard_normal((2, 32, 3)), repetitions=2)

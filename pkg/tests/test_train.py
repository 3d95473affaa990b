import json
import logging
import struct

import numpy as np
import pytest

from graphcliff.chem import parse_smiles
from graphcliff.cliff import CompoundRecord
from graphcliff.graphnn import ModelConfig, init_params
from graphcliff.train import (
    Adam,
    Checkpoint,
    CheckpointError,
    EvalResult,
    TrainConfig,
    TrainingDiverged,
    clip_by_global_norm,
    evaluate,
    load_checkpoint,
    metrics,
    save_checkpoint,
    synthetic_label,
    synthetic_records,
    train_model,
    warm_start_params,
)

from conftest import corpus_smiles

TINY = ModelConfig(d=8, n_layers=2, cheb_order=2)


def tiny_records(n=24):
    recs = synthetic_records(corpus_smiles(limit=n))
    for k, r in enumerate(recs):
        r.split = "test" if k % 4 == 0 else "train"
    return recs


def test_adam_descends_bowl():
    for lr in (1e-3, 1e-2, 1e-1):
        w = {"w": np.ones(5)}
        before = float(np.sum(w["w"] ** 2))
        Adam(w, TrainConfig(learning_rate=lr)).step(w, {"w": 2 * w["w"]})
        assert float(np.sum(w["w"] ** 2)) < before


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert np.sqrt(sum(np.sum(v * v) for v in g.values())) == pytest.approx(1.0)
    g = {"a": np.array([0.1])}
    clip_by_global_norm(g, 1.0)
    assert g["a"].tolist() == [0.1]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_frac=0.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_zero_epochs_returns_init():
    ckpt, hist = train_model(tiny_records(), TrainConfig(epochs=0, seed=3), TINY)
    ref = init_params(TINY, 3)
    assert all(np.array_equal(ckpt.params[k], ref[k]) for k in ref)
    assert hist.epoch == []


def test_same_seed_same_history():
    cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
    _, a = train_model(tiny_records(), cfg, TINY)
    _, b = train_model(tiny_records(), cfg, TINY)
    assert a.to_dict() == b.to_dict()
    assert len(a.epoch) == 3 and all(v is not None for v in a.val_rmse)


def test_requires_split_labels():
    recs = synthetic_records(corpus_smiles(limit=5))
    for r in recs:
        r.split = None
    with pytest.raises(ValueError):
        train_model(recs, TrainConfig(epochs=1), TINY)
    ckpt, _ = train_model(recs, TrainConfig(epochs=1, val_frac=0.0), TINY, use_all=True)
    assert ckpt.extra["best_epoch"] == 1


def test_early_stopping_keeps_best():
    ckpt, hist = train_model(tiny_records(), TrainConfig(epochs=40, batch_size=8, patience=2, learning_rate=0.05), TINY)
    best = ckpt.extra["best_epoch"]
    assert hist.val_rmse[best - 1] == min(hist.val_rmse)
    assert len(hist.epoch) <= 40


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort():
    with pytest.raises(TrainingDiverged):
        train_model(tiny_records(), TrainConfig(epochs=5, learning_rate=1e300, clip_norm=1e300), TINY)


def test_checkpoint_round_trip(tmp_path):
    ckpt, _ = train_model(tiny_records(), TrainConfig(epochs=2, batch_size=8), TINY)
    path = tmp_path / "m.bin"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert list(back.params) == list(ckpt.params)
    assert all(back.params[k].tobytes() == ckpt.params[k].tobytes() for k in ckpt.params)
    assert back.model_config == ckpt.model_config
    assert (back.label_mean, back.label_std) == (ckpt.label_mean, ckpt.label_std)
    assert back.history.to_dict() == ckpt.history.to_dict()


def _saved(tmp_path):
    ckpt = Checkpoint(TINY, init_params(TINY))
    path = tmp_path / "m.bin"
    save_checkpoint(ckpt, path)
    return ckpt, path


def test_checkpoint_layout(tmp_path):
    ckpt, path = _saved(tmp_path)
    blob = path.read_bytes()
    assert blob[:8] == b"GCLFCKPT"
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + n])
    first = manifest["arrays"][0]
    (count,) = struct.unpack("<Q", blob[16 + n : 24 + n])
    assert count == np.prod(first["shape"])
    values = np.frombuffer(blob[24 + n : 24 + n + 8 * count], dtype="<f8")
    assert np.array_equal(values, ckpt.params[first["name"]].ravel())


def test_feature_version_mismatch(tmp_path):
    _, path = _saved(tmp_path)
    with pytest.raises(CheckpointError, match="feature version"):
        load_checkpoint(path, expect_feature_version="other")


def test_truncated(tmp_path):
    _, path = _saved(tmp_path)
    path.write_bytes(path.read_bytes()[:-12])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_array_count_mismatch(tmp_path):
    ckpt, path = _saved(tmp_path)
    blob = path.read_bytes()
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + n])
    manifest["arrays"].append({"name": "ghost", "shape": [1]})
    new = json.dumps(manifest).encode()
    path.write_bytes(blob[:8] + struct.pack("<Q", len(new)) + new + blob[16 + n :])
    with pytest.raises(CheckpointError, match="arrays"):
        load_checkpoint(path)
    manifest["arrays"] = manifest["arrays"][:-2]
    new = json.dumps(manifest).encode()
    path.write_bytes(blob[:8] + struct.pack("<Q", len(new)) + new + blob[16 + n :])
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_warm_start_loads_matching_and_ignores_extras(caplog):
    source = Checkpoint(TINY, {**init_params(TINY, 1), "legacy.weight": np.ones(3)})
    fresh = init_params(TINY, 2)
    with caplog.at_level(logging.WARNING):
        out = warm_start_params(fresh, source)
    assert "legacy.weight" in caplog.text
    assert "legacy.weight" not in out
    assert np.array_equal(out["head.0.weight"], source.params["head.0.weight"])


def test_warm_start_partial_and_conflict():
    deeper = ModelConfig(d=8, n_layers=3, cheb_order=2)
    source = Checkpoint(TINY, init_params(TINY, 1))
    out = warm_start_params(init_params(deeper, 2), source)
    assert np.array_equal(out["filters.1.proj.weight"], source.params["filters.1.proj.weight"])
    assert np.array_equal(out["filters.2.proj.weight"], init_params(deeper, 2)["filters.2.proj.weight"])
    wider = ModelConfig(d=16, n_layers=2, cheb_order=2)
    with pytest.raises(CheckpointError, match="shape conflict"):
        warm_start_params(init_params(wider), source)


def test_warm_start_through_training():
    first, _ = train_model(tiny_records(), TrainConfig(epochs=1, batch_size=8), TINY)
    second, _ = train_model(tiny_records(), TrainConfig(epochs=0), TINY, warm_start=first)
    assert all(np.array_equal(second.params[k], first.params[k]) for k in first.params)


def test_metrics_examples():
    assert metrics([1.0, 2.0], [1.0, 2.0], [True, False]) == EvalResult(0.0, 0.0, 2, 1)
    res = metrics([0.0, 2.0], [1.0, 1.0], [False, False])
    assert res.rmse == 1.0 and res.rmse_cliff is None and res.n_cliff == 0
    with pytest.raises(ValueError):
        metrics([], [], [])


def test_metrics_decomposition():
    rng = np.random.default_rng(0)
    pred, y = rng.normal(size=30), rng.normal(size=30)
    whole = metrics(pred, y, np.zeros(30, bool)).rmse
    parts = [slice(0, 7), slice(7, 19), slice(19, 30)]
    sse = sum(metrics(pred[p], y[p], np.zeros(len(y[p]), bool)).rmse ** 2 * len(y[p]) for p in parts)
    assert np.sqrt(sse / 30) == pytest.approx(whole, rel=1e-12)


def test_evaluate_uses_label_scale():
    recs = tiny_records(8)
    ckpt = Checkpoint(TINY, init_params(TINY), label_mean=5.0, label_std=2.0)
    res = evaluate(ckpt, recs)
    pred = ckpt.predict([r.molecule() for r in recs])
    assert res.rmse == pytest.approx(np.sqrt(np.mean((pred - [r.pki for r in recs]) ** 2)))
    with pytest.raises(ValueError):
        evaluate(ckpt, [])


def test_synthetic_label():
    assert synthetic_label(parse_smiles("c1ccccc1C")) == pytest.approx(0.3 * 6 + 0.1 * 6)
    assert synthetic_label(parse_smiles("CCO")) == 0.0
    recs = synthetic_records(["C1CCCCC1"])
    assert recs[0].pki == pytest.approx(0.6) and recs[0].split == "train"

import json
import math

import numpy as np
import pytest

from conftest import MICRO
from tdsnet.autodiff.checkpoint import load_checkpoint
from tdsnet.autodiff.tensor import parameter
from tdsnet.data import DatasetSpec, flip_label, make_dataset
from tdsnet.network import TDSModel
from tdsnet.train import (AdamState, TrainConfig, TrainingDiverged, adamw_step, checksum, evaluate, lr_at, scores,
                          train)

MICRO_DATA = DatasetSpec(clips_per_class=2, val_per_class=1, t_raw=8, height=16, width=16, sprite=4)
FLIP = [flip_label(c, MICRO_DATA) for c in range(4)]
QUICK = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, eval_batch=8)


def test_adamw_zero_grad_no_decay_is_identity():
    p = parameter(np.array([1.0, -2.0]))
    adamw_step([p], {}, AdamState.zeros([p]), lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    p = parameter(np.array([1.0]))
    adamw_step([p], {p: np.array([1.0])}, AdamState.zeros([p]), lr=0.1, wd=0.0)
    # m_hat = 1, v_hat = 1 -> update 0.1 / (1 + 1e-8)
    assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15


def test_adamw_pure_decay_without_gradient():
    p = parameter(np.array([3.0, -1.5]))
    adamw_step([p], {}, AdamState.zeros([p]), lr=0.01, wd=0.5)
    np.testing.assert_allclose(p.data, np.array([3.0, -1.5]) * (1 - 0.005), rtol=0, atol=1e-15)


def test_adamw_shape_mismatch():
    p = parameter(np.zeros(3))
    with pytest.raises(ValueError):
        adamw_step([p], {p: np.zeros(4)}, AdamState.zeros([p]), 0.1, 0.0)


def test_lr_schedule_landmarks():
    assert lr_at(0, 100, 10, 1.0) == 0.0
    assert lr_at(5, 100, 10, 1.0) == 0.5
    assert lr_at(10, 100, 10, 2.0) == 2.0
    assert abs(lr_at(55, 100, 10, 2.0) - 1.0) < 1e-12
    assert abs(lr_at(100, 100, 10, 2.0)) < 1e-12


def test_scores_examples(rng):
    labels = np.arange(4)
    assert scores(np.eye(4) * 5, labels)["top1"] == 100.0
    lg = rng.normal(size=(4000, 4))
    y = rng.integers(0, 4, size=4000)
    s = scores(lg, y)
    assert 22.0 < s["top1"] < 28.0 and s["top5"] == 100.0


def test_evaluate_empty_and_no_mutation(micro_model):
    with pytest.raises(ValueError):
        evaluate(micro_model, [])
    before = checksum(micro_model.named_parameters().values())
    evaluate(micro_model, make_dataset(MICRO_DATA)[1])
    assert checksum(micro_model.named_parameters().values()) == before


def test_training_writes_artifacts_and_keeps_frozen_weights(tmp_path):
    tr, va = make_dataset(MICRO_DATA)
    model = TDSModel(MICRO, seed=QUICK.seed)
    frozen_before = checksum(model.frozen_named().values())
    side_before = checksum(model.side_named().values())
    logged = []
    model, hist = train(MICRO, QUICK, tr, va, out_dir=tmp_path, flip_map=FLIP, log=logged.append, model=model)
    assert len(hist) == 2 and len(logged) == 2
    assert checksum(model.frozen_named().values()) == frozen_before
    assert checksum(model.side_named().values()) != side_before
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    rec = [json.loads(s) for s in lines]
    assert [r["epoch"] for r in rec] == [1, 2]
    assert {"epoch", "loss", "top1", "top5", "lr", "seconds"} <= set(rec[0])
    ckpt = load_checkpoint(tmp_path / "checkpoint.tdsc")
    assert set(ckpt) == set(model.named_parameters())
    assert rec[0]["trainable_params"] + rec[0]["frozen_params"] == sum(a.size for a in ckpt.values())


def test_training_is_deterministic():
    tr, va = make_dataset(MICRO_DATA)
    runs = [train(MICRO, QUICK, tr, va, flip_map=FLIP) for _ in range(2)]
    (m1, h1), (m2, h2) = runs
    assert checksum(m1.named_parameters().values()) == checksum(m2.named_parameters().values())
    strip = lambda h: [{k: v for k, v in vars(m).items() if k != "seconds"} for m in h]  # noqa: E731
    assert strip(h1) == strip(h2)


def test_first_batch_loss_is_near_log_classes():
    tr, _ = make_dataset(MICRO_DATA)
    _, hist = train(MICRO, QUICK.replace(epochs=1, warmup_epochs=0, flip_prob=0.0), tr)
    assert abs(hist[0].loss - math.log(4)) < 0.1


def test_non_finite_loss_aborts():
    tr, _ = make_dataset(MICRO_DATA)
    model = TDSModel(MICRO)
    model.head_w.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(MICRO, QUICK, tr, flip_map=FLIP, model=model)


def test_flip_needs_mirror_map_and_data():
    tr, _ = make_dataset(MICRO_DATA)
    with pytest.raises(ValueError):
        train(MICRO, QUICK, tr)
    with pytest.raises(ValueError):
        train(MICRO, QUICK, [], flip_map=FLIP)

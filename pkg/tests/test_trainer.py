import math
import struct

import numpy as np
import pytest

from twincount.nncore import Optimizer
from twincount.nncore.checkpoint import CheckpointError, CheckpointShapeError, CheckpointVersionError
from twincount.trainer import (HISTORY_COLUMNS, CheckpointPolicy, HistoryRecord, NonFiniteLossError,
                               TrainConfig, TrainingHistory, early_stop_check, load_checkpoint,
                               save_checkpoint, train)
from twincount.twinvae import LossWeights, ModelConfig, TwinVAE

SMALL = ModelConfig.scaled(16)


def quick_config(**kw):
    base = dict(max_epochs=2, batch_size=8, optimizer="adam", learning_rate=1e-3,
                regressor_delay_epochs=0, eval_every=1, patience=50, ratio=1)
    base.update(kw)
    return TrainConfig(**base)


def history_of(maes):
    h = TrainingHistory()
    for i, m in enumerate(maes, start=1):
        h.add(HistoryRecord(i, 1.0, 1.0, 0.0, 0.0, val_mae=m))
    return h


def test_improving_mae_never_stops():
    maes = [10 - i for i in range(10)]
    for k in range(1, 11):
        assert early_stop_check(history_of(maes[:k]), patience=1) == "continue"


def test_constant_mae_stops_at_fourth_evaluation():
    decisions = [early_stop_check(history_of([2.0] * k), patience=3) for k in range(1, 6)]
    assert decisions == ["continue", "continue", "continue", "stop", "stop"]


def test_improvement_below_min_delta_counts_as_stale():
    h = history_of([2.0, 1.9995, 1.9993, 1.9992])
    assert early_stop_check(h, patience=3, min_delta=1e-3) == "stop"
    assert early_stop_check(h, patience=3, min_delta=0.0) == "continue"
    with pytest.raises(ValueError):
        early_stop_check(TrainingHistory(), patience=3)


def test_history_csv_round_trip(tmp_path):
    h = history_of([3.0, 2.5])
    h.add(HistoryRecord(5, 0.1, 0.2, 0.3, 0.4))
    h.to_csv(tmp_path / "h.csv")
    again = TrainingHistory.from_csv(tmp_path / "h.csv")
    assert again.records == h.records
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)
    with pytest.raises(ValueError):
        h.add(HistoryRecord(5, 0, 0, 0, 0))


def test_checkpoint_policy_criteria():
    model = TwinVAE(SMALL, seed=0)

    class M:
        def __init__(self, mae, acc):
            self.mae, self.acc = mae, acc

    best_mae = CheckpointPolicy("min_mae")
    best_acc = CheckpointPolicy("max_accuracy")
    for epoch, m in enumerate([M(3, 10), M(2, 5), M(2.5, 40)], start=1):
        best_mae.update(m, epoch, model)
        best_acc.update(m, epoch, model)
    assert (best_mae.best_epoch, best_mae.best_value) == (2, 2)
    assert (best_acc.best_epoch, best_acc.best_value) == (3, 40)


def test_train_config_round_trip_and_validation():
    cfg = TrainConfig(ratio="2:1", loss=LossWeights(c_reco=25))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.ratio == 2.0
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    step = TrainConfig(lr_schedule="step", learning_rate=1.0, lr_step_epochs=10, lr_step_gamma=0.5)
    assert [step.lr_at(e) for e in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]


@pytest.fixture
def model():
    return TwinVAE(SMALL, seed=0)


def _ckpt_pair(tmp_path, model):
    opt = Optimizer(model.parameters(), kind="adam", lr=1e-3)
    for p in model.parameters():
        p.grad = np.full_like(p.data, 0.01)
    opt.step()
    save_checkpoint(model, opt, tmp_path / "a.ckpt", meta={"epoch": 1})
    return opt


def test_save_load_save_identical_bytes(tmp_path, model):
    _ckpt_pair(tmp_path, model)
    fresh = TwinVAE(SMALL, seed=9)
    opt2 = Optimizer(fresh.parameters(), kind="adam", lr=1e-3)
    load_checkpoint(tmp_path / "a.ckpt", fresh, opt2)
    save_checkpoint(fresh, opt2, tmp_path / "b.ckpt", meta={"epoch": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for p, q in zip(model.parameters(), fresh.parameters()):
        assert np.array_equal(p.data, q.data)


def test_load_builds_model_from_stored_config(tmp_path, model):
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    loaded, header = load_checkpoint(tmp_path / "a.ckpt")
    assert loaded.config == SMALL and header["optimizer"] is None


def test_shape_mismatch_names_group_and_leaves_model_alone(tmp_path, model):
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    other = TwinVAE(ModelConfig.scaled(8), seed=0)
    before = other.state_arrays()
    with pytest.raises(CheckpointShapeError, match="group enc_outer_nat"):
        load_checkpoint(tmp_path / "a.ckpt", other)
    after = other.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_legacy_version_rejected(tmp_path, model):
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    struct.pack_into("<I", raw, 4, 0)
    (tmp_path / "old.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 0"):
        load_checkpoint(tmp_path / "old.ckpt", model)


def test_truncated_checkpoint_rejected(tmp_path, model):
    save_checkpoint(model, None, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt", model)


def test_zero_epochs_returns_initial_state(tiny_pools, tmp_path, model):
    nat, syn, val = tiny_pools
    initial = model.state_arrays()
    res = train(model, nat, syn, quick_config(max_epochs=0), val=val, out_dir=str(tmp_path))
    assert res.epochs_run == 0 and res.history.records == []
    assert all(np.array_equal(initial[k], res.best_state[k]) for k in initial)
    loaded, _ = load_checkpoint(tmp_path / "best.ckpt")
    assert all(np.array_equal(initial[k], v) for k, v in loaded.state_arrays().items())


def test_regression_term_zero_during_delay(tiny_pools, model):
    nat, syn, val = tiny_pools
    res = train(model, nat, syn, quick_config(max_epochs=3, regressor_delay_epochs=2), val=val)
    regr = [r for _, _, r in res.history.epoch_losses]
    assert regr[0] == 0.0 and regr[1] == 0.0 and regr[2] > 0.0


def test_history_file_written_each_evaluation(tiny_pools, tmp_path, model):
    nat, syn, val = tiny_pools
    res = train(model, nat, syn, quick_config(max_epochs=3, eval_every=2), val=val,
                out_dir=str(tmp_path))
    assert [r.epoch for r in res.history.records] == [1, 2, 3]
    assert TrainingHistory.from_csv(tmp_path / "history.csv").records == res.history.records
    assert res.best_epoch in (1, 2, 3) and (tmp_path / "best.ckpt").exists()


def test_non_finite_loss_aborts(tiny_pools, model):
    nat, syn, val = tiny_pools
    for p in model.groups["regressor"].parameters():
        p.data[...] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(model, nat, syn, quick_config(), val=val)
    assert info.value.epoch == 0 and info.value.batch_index == 0
    assert math.isnan(info.value.terms["total"])


def test_early_stopping_ends_run(tiny_pools, model):
    nat, syn, val = tiny_pools
    res = train(model, nat, syn, quick_config(max_epochs=20, learning_rate=1e-9, patience=2,
                                              min_delta=10.0), val=val)
    assert res.stopped_early and res.epochs_run == 3


def test_strict_runs_reproduce_history(tiny_pools, tmp_path):
    nat, syn, val = tiny_pools
    texts = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        train(TwinVAE(SMALL, seed=4), nat, syn, quick_config(strict_deterministic=True, seed=4),
              val=val, out_dir=str(out))
        texts.append((out / "history.csv").read_text())
    assert texts[0] == texts[1]


@pytest.mark.slow
def test_toy_run_halves_training_loss():
    from twincount import synthgen as sg
    from twincount.datapipe import Dataset

    cfg = sg.GeneratorConfig(count_weights=sg.uniform_weights(1, 5), seed=31)
    syn = Dataset.from_samples(sg.generate_samples(cfg, 200), origin="synthetic")
    val = syn.subset(range(16), split="val")
    res = train(TwinVAE(SMALL, seed=31), None, syn,
                quick_config(max_epochs=300, batch_size=32, ratio="1:0", eval_every=1000),
                val=val)
    losses = [total for _, total, _ in res.history.epoch_losses]
    assert len(losses) == 300
    assert losses[-1] <= 0.5 * losses[0]


def test_modality_presets():
    pc, bf = TrainConfig.for_modality("pc_like"), TrainConfig.for_modality("bf_like", seed=3)
    assert (pc.batch_size, pc.optimizer, pc.loss.reco_loss_kind) == (128, "adam", "mse")
    assert (bf.batch_size, bf.optimizer, bf.loss.reco_loss_kind, bf.seed) == (64, "radam", "bce", 3)

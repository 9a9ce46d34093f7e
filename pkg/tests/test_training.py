import csv
from dataclasses import replace

import numpy as np
import pytest

from r2p.errors import NumericalError, UsageError
from r2p.model import ModelConfig, R2PModel, load_checkpoint
from r2p.pointcloud import Dataset
from r2p.tensor import Tensor
from r2p.training import (
    Adam,
    TrainConfig,
    ablate_losses,
    evaluate,
    lr_at,
    predict,
    train,
)

TINY = ModelConfig(n=16, m=32, h1=8, h2=16, h3=16, h4=32, d1=32, d2=32)


def toy_data(count=4, seed=0):
    rng = np.random.default_rng(seed)
    # targets: noisy rings; inputs: sparse subsets of them
    targets, inputs = [], []
    for _ in range(count):
        t = np.linspace(0, 2 * np.pi, TINY.m, endpoint=False)
        r = rng.uniform(0.5, 1.0)
        y = np.column_stack([r * np.cos(t), r * np.sin(t), rng.normal(0, 0.05, TINY.m)])
        targets.append(y)
        inputs.append(y[rng.choice(TINY.m, TINY.n, replace=False)] + rng.normal(0, 0.02, (TINY.n, 3)))
    return Dataset(inputs, targets)


def cfg(**kw):
    base = TrainConfig(epochs=4, batch_size=2, lr_initial=1e-3, model=TINY)
    return replace(base, **kw)


def snapshot(model):
    return [p.data.copy() for p in model.parameters()]


# --------------------------------------------------------------------------- schedule


def test_schedule_reference_points():
    c = TrainConfig()
    assert lr_at(c, 0) == 2e-4
    assert lr_at(c, 99) == 2e-4
    assert lr_at(c, 199) == 0.0
    assert lr_at(c, 149) == pytest.approx(1e-4, rel=1e-15)


def test_schedule_linear_second_half():
    c = TrainConfig(epochs=10, lr_initial=1.0)
    assert [lr_at(c, e) for e in range(10)] == pytest.approx([1, 1, 1, 1, 1, 0.8, 0.6, 0.4, 0.2, 0.0])


def test_schedule_rejects_out_of_range():
    with pytest.raises(UsageError):
        lr_at(TrainConfig(), 200)
    with pytest.raises(UsageError):
        lr_at(TrainConfig(), -1)


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(epochs=3)
    with pytest.raises(UsageError):
        TrainConfig(lr_initial=0)
    with pytest.raises(UsageError):
        TrainConfig(loss="l7")


# --------------------------------------------------------------------------- optimiser


def test_adam_zero_lr_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.tobytes()
    p.grad = np.array([0.3, -0.1])
    opt = Adam([p])
    opt.step(0.0)
    assert p.data.tobytes() == before and opt.t == 1


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    g = np.array([0.3, -0.1, 2.0])
    p.grad = g
    Adam([p]).step(0.01)
    # bias-corrected first step: g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0, -2.0, 0.5] - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(5)]
    p = Tensor(x0, requires_grad=True)
    opt = Adam([p], 0.8, 0.99, 1e-6)
    x, m, v = x0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        p.grad = g
        opt.step(0.05)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.05 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(p.data, x, rtol=1e-13)


# --------------------------------------------------------------------------- training loop


def test_zero_epochs_leaves_model_alone(tmp_path):
    model = R2PModel(TINY)
    before = snapshot(model)
    rep = train(model, toy_data(), cfg(epochs=0), out_dir=tmp_path)
    assert rep.epochs == [] and rep.step_losses == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    rows = list(csv.reader(open(tmp_path / "train_report.csv")))
    assert rows == [["epoch", "loss", "lr", "seconds"]]


def test_training_reduces_loss_and_writes_outputs(tmp_path):
    model = R2PModel(TINY, seed=1)
    rep = train(model, toy_data(), cfg(epochs=20, checkpoint_interval=5), out_dir=tmp_path)
    assert len(rep.epochs) == 20 and len(rep.step_losses) == 40
    assert rep.epochs[-1].loss < 0.5 * rep.epochs[0].loss
    assert rep.epochs[-1].lr == 0.0
    rows = list(csv.reader(open(tmp_path / "train_report.csv")))
    assert rows[0] == ["epoch", "loss", "lr", "seconds"] and len(rows) == 21
    assert "lr_initial=0.001" in (tmp_path / "config.txt").read_text()
    saved, spec = load_checkpoint(tmp_path / "model.r2pm")
    assert spec.d1 == "cd" and spec.alpha == 0.1
    for p, q in zip(model.parameters(), saved.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_smoothed_loss_decreases():
    model = R2PModel(TINY, seed=2)
    rep = train(model, toy_data(), cfg(epochs=100, lr_initial=5e-4))
    losses = np.array(rep.step_losses)
    smooth = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(smooth) < 0)


def test_identical_seeds_identical_curves():
    a = train(R2PModel(TINY, seed=3), toy_data(), cfg(seed=7)).step_losses
    b = train(R2PModel(TINY, seed=3), toy_data(), cfg(seed=7)).step_losses
    c = train(R2PModel(TINY, seed=3), toy_data(), cfg(seed=8)).step_losses
    assert a == b and a != c


def test_resume_reproduces_uninterrupted_run(tmp_path):
    c = cfg(epochs=6, checkpoint_interval=1)
    full = train(R2PModel(TINY, seed=4), toy_data(), c)
    part = R2PModel(TINY, seed=4)
    train(part, toy_data(), c, out_dir=tmp_path, stop_after=2)
    fresh = R2PModel(TINY, seed=99)  # weights come from the checkpoint
    resumed = train(fresh, toy_data(), c, out_dir=tmp_path, resume=True)
    assert resumed.step_losses == full.step_losses
    assert [r.epoch for r in resumed.epochs] == list(range(6))


def test_dimension_mismatch_rejected():
    with pytest.raises(Exception, match="do not match"):
        train(R2PModel(TINY), Dataset([np.zeros((8, 3))], [np.zeros((32, 3))]), cfg())
    with pytest.raises(UsageError):
        train(R2PModel(TINY), toy_data(), cfg(model=replace(TINY, h1=4)))


def test_non_finite_loss_aborts_with_snapshot(tmp_path):
    ds = toy_data()
    ds.inputs[0] = ds.inputs[0] * 1e300
    ds.inputs[1] = ds.inputs[1] * 1e300
    with np.errstate(all="ignore"), pytest.raises(NumericalError) as e:
        train(R2PModel(TINY), ds, cfg(batch_size=4), out_dir=tmp_path)
    assert e.value.snapshot["epoch"] == 0 and e.value.snapshot["step"] == 0
    with np.load(tmp_path / "abort_snapshot.npz") as z:
        assert z["inputs"].shape == (4, 16, 3) and float(z["lr"]) == 1e-3


def test_empty_dataset_rejected():
    with pytest.raises(UsageError):
        train(R2PModel(TINY), Dataset([], []), cfg())


# --------------------------------------------------------------------------- evaluation


def test_evaluate_perfect_stub(tmp_path):
    ds = toy_data(3)
    lookup = {x.tobytes(): y for x, y in zip(ds.inputs, ds.targets)}
    res = evaluate(lambda x: lookup[x[0].tobytes()][None], ds, out_csv=tmp_path / "e.csv")
    assert res.mean_cd == 0.0 and res.mean_emd == 0.0
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["sample_id", "cd", "emd"] and len(rows) == 4


def test_evaluate_means_and_determinism():
    model = R2PModel(TINY, seed=5)
    train(model, toy_data(), cfg(epochs=2))
    ds = toy_data(3, seed=1)
    a, b = evaluate(model, ds), evaluate(model, ds)
    assert a.rows == b.rows and a.emd_method == "hungarian"
    assert a.mean_cd == pytest.approx(np.mean([r[1] for r in a.rows]), rel=1e-15)
    assert a.mean_emd == pytest.approx(np.mean([r[2] for r in a.rows]), rel=1e-15)
    assert model.mode == "train"  # predict restores the mode


def test_evaluate_flags_auction_above_cap():
    model = R2PModel(TINY, seed=5)
    train(model, toy_data(), cfg(epochs=2))
    exact = evaluate(model, toy_data(2))
    approx = evaluate(model, toy_data(2), cap=16)
    assert approx.emd_method == "auction"
    for (_, _, e1), (_, _, e2) in zip(exact.rows, approx.rows):
        assert e1 <= e2 + 1e-12 and e2 - e1 <= 1e-3 * e1 + 1e-12


def test_evaluate_empty():
    with pytest.raises(UsageError):
        evaluate(R2PModel(TINY), Dataset([], []))


def test_predict_shape():
    model = R2PModel(TINY)
    train(model, toy_data(), cfg(epochs=2))
    assert predict(model, toy_data(1).inputs[0][None]).shape == (1, 32, 3)


# --------------------------------------------------------------------------- ablation


def test_ablation_table_shape(tmp_path):
    table = ablate_losses(toy_data(4), toy_data(2, seed=9), cfg(epochs=2), seeds=(0, 1), out_dir=tmp_path)
    assert table.variants == ["l1", "l2", "l3", "l4", "l5"]
    rows = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert rows[0] == ["variant", "cd", "emd"] and [r[0] for r in rows[1:]] == ["L1", "L2", "L3", "L4", "L5"]
    seed_rows = list(csv.reader(open(tmp_path / "ablation_per_seed.csv")))
    assert len(seed_rows) == 11
    assert (tmp_path / "l3_seed1" / "model.r2pm").exists()
    assert "L3" in table.format()

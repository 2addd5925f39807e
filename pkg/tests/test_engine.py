import csv
import math

import numpy as np
import pytest

from ddsl import diffarray as da
from ddsl import engine
from ddsl.data import AugmentSpec, NormStats, synth_dataset
from ddsl.diffarray import Array4
from ddsl.engine import (CheckpointError, OptimizerState, ScheduleState, TrainConfig,
                         adam_step, gradcheck, load_checkpoint, save_checkpoint,
                         schedule_update, train)
from ddsl.layers import ParamStore
from ddsl.network import MRN, MrnConfig, build_model

TINY = MrnConfig(depth=2, base_channels=4, descriptors=4, side=32)


def scalar_param(v):
    store = ParamStore()
    store["w"] = Array4(np.full((1, 1, 1, 1), v, np.float64), requires_grad=True)
    return store


# --- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = scalar_param(0.7)
    p["w"].grad = np.zeros((1, 1, 1, 1))
    adam_step(p, OptimizerState())
    assert p["w"].values.item() == 0.7


@pytest.mark.parametrize("g", [1e-3, 1.0, 250.0])
def test_adam_first_step_is_unit(g):
    p = scalar_param(0.0)
    p["w"].grad = np.full((1, 1, 1, 1), g)
    adam_step(p, OptimizerState(lr=1e-4))
    assert p["w"].values.item() == pytest.approx(-1e-4, rel=1e-4)


def test_adam_ten_steps_on_square_match_script():
    lr, b1, b2, eps = 1e-4, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = scalar_param(1.0)
    state = OptimizerState(lr=lr)
    for _ in range(10):
        p["w"].grad = 2 * p["w"].values
        adam_step(p, state)
    assert state.step == 10
    assert abs(p["w"].values.item() - w) < 1e-10


def test_adam_rejects_nan_and_names_parameter():
    p = scalar_param(1.0)
    p["w"].grad = np.full((1, 1, 1, 1), np.nan)
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(p, OptimizerState())
    assert p["w"].values.item() == 1.0


# --- schedule -----------------------------------------------------------------------

def run_schedule(losses, **kw):
    s = ScheduleState(**kw)
    decays, stop, lrs = [], None, []
    for epoch, loss in enumerate(losses, start=1):
        before = s.lr
        schedule_update(s, loss)
        lrs.append(s.lr)
        if s.lr < before:
            decays.append(epoch)
        if s.stop and stop is None:
            stop = epoch
            break
    return decays, stop, lrs


def test_decreasing_losses_never_decay():
    decays, stop, _ = run_schedule([1.0 - 0.01 * i for i in range(60)])
    assert decays == [] and stop is None


def test_constant_loss_first_decay():
    decays, _, lrs = run_schedule([0.5] * 15)
    assert decays[0] == 11  # epoch 1 sets the best, then 10 flat epochs
    assert lrs[10] == 5e-5


def test_hand_simulated_trace():
    decays, stop, _ = run_schedule([1.0, 0.9] + [0.9] * 25)
    assert decays == [12, 22] and stop == 22


def test_min_delta_counts_as_no_improvement():
    decays, _, _ = run_schedule([1.0] + [1.0 - 9e-5] * 11)
    assert decays == [11]


def test_lr_stays_on_halving_grid():
    rng = np.random.default_rng(0)
    _, _, lrs = run_schedule(list(rng.random(100)), early_stopping=False)
    for lr in lrs:
        k = math.log2(1e-4 / lr)
        assert k == round(k)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_non_finite_val_loss_rejected():
    with pytest.raises(FloatingPointError):
        schedule_update(ScheduleState(), math.nan)


def test_train_config_limits():
    with pytest.raises(ValueError):
        TrainConfig(epochs=151)
    assert TrainConfig(epochs=300, overfit=True).early_stopping is False
    with pytest.raises(ValueError):
        TrainConfig(epochs=301, overfit=True)


# --- checkpoints --------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    data = synth_dataset(6, 32, seed=1)
    model = build_model(TINY, seed=0)
    res = train(model, data[:4], data[4:], TrainConfig(epochs=2, batch_size=2), seed=0,
                out_dir=out)
    return out, model, res, data


def test_checkpoint_round_trip_is_byte_identical(trained, tmp_path):
    out, _, _, _ = trained
    model, opt, sched, norm, meta = load_checkpoint(out / "last.mrn")
    save_checkpoint(tmp_path / "again.mrn", model, opt, sched, norm, meta.get("extra"))
    assert (tmp_path / "again.mrn").read_bytes() == (out / "last.mrn").read_bytes()


def test_checkpoint_restores_everything(trained):
    out, model, _, _ = trained
    m2, opt, sched, norm, _ = load_checkpoint(out / "last.mrn")
    for (k, a), (_, b) in zip(model.named_parameters(), m2.named_parameters()):
        assert np.array_equal(a.values, b.values), k
    for (k, a), (_, b) in zip(model.named_buffers(), m2.named_buffers()):
        assert np.array_equal(a, b), k
    assert opt.step == 4 and len(opt.m) == len(model.params())
    assert sched.lr == 1e-4 and norm == NormStats.load(out / "norm.json")


def test_checkpoint_depth_mismatch_names_tensor(trained):
    out, _, _, _ = trained
    other = MRN(MrnConfig(depth=3, base_channels=4, descriptors=4, side=32))
    with pytest.raises(CheckpointError, match="tensor"):
        load_checkpoint(out / "last.mrn", other)


def test_checkpoint_bad_magic_and_version(tmp_path, trained):
    out, _, _, _ = trained
    raw = (out / "last.mrn").read_bytes()
    (tmp_path / "a.mrn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "a.mrn")
    (tmp_path / "b.mrn").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "b.mrn")


def test_history_csv(trained):
    out, _, res, _ = trained
    with open(out / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_dc", "lr"]
    assert len(rows) == 3 and len(res.history) == 2


# --- training loop ------------------------------------------------------------------

def _run(seed=0, epochs=2, **kw):
    data = synth_dataset(6, 32, seed=1)
    model = build_model(TINY, seed=0)
    return train(model, data[:4], data[4:], TrainConfig(epochs=epochs, batch_size=2),
                 seed=seed, **kw), model


def test_fixed_seed_runs_are_identical():
    (a, ma), (b, mb) = _run(), _run()
    assert a.history == b.history
    for (_, p), (_, q) in zip(ma.named_parameters(), mb.named_parameters()):
        assert np.array_equal(p.values, q.values)


def test_seed_changes_the_run():
    assert _run(0)[0].history != _run(1)[0].history


def test_resume_matches_uninterrupted(tmp_path):
    full, _ = _run(epochs=3)
    _run(epochs=2, out_dir=tmp_path)
    data = synth_dataset(6, 32, seed=1)
    model = build_model(TINY, seed=5)  # weights overwritten by the checkpoint
    resumed = train(model, data[:4], data[4:], TrainConfig(epochs=3, batch_size=2), seed=0,
                    resume=tmp_path / "last.mrn")
    assert len(resumed.history) == 3
    assert abs(resumed.history[2].train_loss - full.history[2].train_loss) < 1e-6
    assert abs(resumed.history[2].val_loss - full.history[2].val_loss) < 1e-6


def test_non_finite_loss_aborts_and_keeps_last_good(tmp_path):
    data = synth_dataset(6, 32, seed=1)
    model = build_model(TINY, seed=0)

    def poison(row):
        model.params()["encoder.stage1.conv1.weight"].values[...] = np.nan

    with pytest.raises(FloatingPointError):
        train(model, data[:4], data[4:], TrainConfig(epochs=3, batch_size=2), seed=0,
              out_dir=tmp_path, on_epoch=poison)
    m2, *_ = load_checkpoint(tmp_path / "last.mrn")
    assert all(np.all(np.isfinite(p.values)) for p in m2.params().values())


def test_best_val_loss_never_increases():
    res, _ = _run(epochs=4)
    best = math.inf
    for r in res.history:
        best = min(best, r.val_loss)
    assert res.best_val_loss <= res.history[0].val_loss
    assert res.best_val_loss == pytest.approx(best)


def test_baseline_trains_too():
    data = synth_dataset(4, 32, seed=2)
    model = build_model(MrnConfig(depth=2, base_channels=4, side=32, kind="baseline"))
    res = train(model, data[:2], data[2:], TrainConfig(epochs=1, batch_size=2),
                aug=AugmentSpec.identity())
    assert math.isfinite(res.history[0].train_loss)


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        train(build_model(TINY), [], synth_dataset(1, 32, 0), TrainConfig(epochs=1))


# --- gradcheck harness --------------------------------------------------------------

SMALL = MrnConfig(depth=1, base_channels=2, descriptors=2, side=8)


def test_gradcheck_small_config_passes_and_lists_every_group():
    rep = gradcheck(SMALL, seed=0)
    names = [r.name for r in rep.rows]
    assert names == list(build_model(SMALL).params())
    assert len(set(names)) == len(names)
    assert rep.passed and rep.worst < 1e-4
    assert rep.to_text().splitlines()[-1].startswith("PASS")


def test_gradcheck_flags_corrupted_backward(monkeypatch):
    def bad_relu(a):
        mask = a.values > 0
        return da.record(a.values * mask, (a,), lambda g: (g * mask * 1.1,), "relu")

    import ddsl.network
    monkeypatch.setattr(ddsl.network, "relu", bad_relu)
    rep = gradcheck(SMALL, seed=0)
    assert not rep.passed
    assert rep.to_text().splitlines()[-1].startswith("FAIL")


def test_rel_error_floor_scales_with_function_value():
    assert engine.rel_error([0.0], [1e-12], scale=5.0) < 1e-6
    assert engine.rel_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agfanet.data import AugmentConfig, PhantomSpec, Sample, generate_phantom, normalize
from agfanet.model import build_network, named_config
from agfanet.tensor import Tensor
from agfanet.training import (AdamState, CheckpointCorruptError, CheckpointVersionError, NumericError, ScheduleState,
                              TrainConfig, TrainRun, ablation_json, ablation_table, adam_step, best_network,
                              checkpoint_bytes, checkpoint_load, checkpoint_save, cycle_position, evaluate, lr_at,
                              predict, run_ablation, train)

SMALL = AugmentConfig(crop=(16, 16, 16))


def _samples(n=2, extents=(16, 16, 16)):
    out = []
    for i in range(n):
        s = generate_phantom(PhantomSpec(seed=i, extents=extents))
        out.append(Sample(normalize(s.volume), s.mask, s.id))
    return out


def _run(cfg_name="agfa", epochs=2, **kw):
    cfg = named_config(cfg_name)
    return TrainRun(cfg, TrainConfig(epochs=epochs, augment=SMALL, **kw)), build_network(cfg, 0)


# -- Adam ----------------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point(rng):
    p = {"w": Tensor(rng.normal(size=(3, 4)), requires_grad=True)}
    before = p["w"].data.copy()
    st_ = AdamState(lr=0.1, weight_decay=0.0)
    for _ in range(5):
        p["w"].grad = np.zeros((3, 4))
        adam_step(p, st_)
    assert p["w"].data.tobytes() == before.tobytes()
    assert st_.step == 5


def test_adam_first_step_unit_direction():
    p = {"x": Tensor(np.array([2.0]), requires_grad=True)}
    p["x"].grad = np.array([1.0])
    adam_step(p, AdamState(lr=0.1, weight_decay=0.0))
    # bias-corrected m/sqrt(v) = 1, shrunk only by eps
    assert abs((p["x"].data[0] - 2.0) - (-0.1 / (1 + 1e-8))) <= 1e-15


def test_adam_recurrence_against_hand_evaluation():
    p = {"x": Tensor(np.array([0.5]), requires_grad=True)}
    st_ = AdamState(lr=0.01, weight_decay=1e-3)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 0.7], start=1):
        p["x"].grad = np.array([g])
        adam_step(p, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * ((m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 1e-3 * x)
        assert abs(p["x"].data[0] - x) <= 1e-15


def test_adam_missing_gradient_named():
    p = {"enc1.conv1.weight": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError, match="enc1.conv1.weight"):
        adam_step(p, AdamState())


# -- schedule -----------------------------------------------------------------------------------

def test_lr_examples():
    s = ScheduleState()
    assert lr_at(s, 0) == 0.003
    assert abs(lr_at(s, 25) - 0.0015) <= 1e-15
    assert lr_at(s, 50) == 0.003 and lr_at(s, 150) == 0.003 and lr_at(s, 350) == 0.003
    assert cycle_position(s, 50) == (0, 100)
    e = ScheduleState(base_lr=0.01, t_0=10, t_mult=1, eta_min=0.001)
    assert abs(lr_at(e, 5) - (0.001 + 0.5 * 0.009)) <= 1e-15
    assert lr_at(e, 10) == 0.01


def test_lr_bounds_many_iterations():
    for s in (ScheduleState(), ScheduleState(base_lr=0.01, t_0=7, t_mult=3, eta_min=1e-4)):
        lrs = np.array([lr_at(s, t) for t in range(100_000)])
        assert lrs.min() >= s.eta_min and lrs.max() <= s.base_lr
        restarts, t_i, t = [0], s.t_0, s.t_0
        while t < 100_000:
            restarts.append(t)
            t_i *= s.t_mult
            t += t_i
        assert all(lrs[r] == s.base_lr for r in restarts)


@given(st.integers(0, 10**6), st.integers(1, 60), st.integers(1, 3))
def test_lr_bounds_property(t, t0, mult):
    s = ScheduleState(base_lr=0.003, t_0=t0, t_mult=mult, eta_min=1e-5)
    assert 1e-5 <= lr_at(s, t) <= 0.003


# -- training ---------------------------------------------------------------------------------------

def test_one_epoch_smoke():
    run, net = _run(epochs=1)
    lines = []
    train(run, _samples(2), net, log=lines.append)
    assert len(run.history) == 1 and len(lines) == 1
    h = run.history[0]
    assert all(math.isfinite(v) for v in (h.l_wce, h.l_dice, h.total))
    assert abs(h.total - (0.6 * h.l_wce + 0.4 * h.l_dice)) < 1e-12
    assert lines[0].startswith("epoch=0 lr=0.003 ")


def test_training_deterministic():
    data = _samples(2)
    (r1, n1), (r2, n2) = _run(epochs=2), _run(epochs=2)
    train(r1, data, n1)
    train(r2, data, n2)
    assert [h.log_line() for h in r1.history] == [h.log_line() for h in r2.history]
    assert checkpoint_bytes(n1, r1) == checkpoint_bytes(n2, r2)


def test_train_rejects_mismatched_network_and_empty_data():
    run, _ = _run()
    with pytest.raises(ValueError):
        train(run, _samples(1), build_network(named_config("baseline"), 0))
    with pytest.raises(ValueError):
        train(run, [], build_network(run.model, 0))


def test_nan_loss_aborts_with_epoch_and_batch():
    run, net = _run("baseline", epochs=1)
    net.params["head.bias"].data = np.array([np.nan])
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(run, _samples(2), net)


def test_validation_keeps_best_weights():
    data = _samples(3)
    run, net = _run(epochs=2)
    train(run, data[:2], net, val_samples=data[2:])
    assert all(not math.isnan(h.val_dice) for h in run.history)
    assert run.best_epoch in (0, 1) and run.best_dice == max(h.val_dice for h in run.history)
    best = best_network(run, net)
    assert evaluate(best, data[2:]).raw.dice == run.best_dice


# -- checkpoints -------------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    run, net = _run(epochs=1)
    train(run, _samples(2), net)
    checkpoint_save(net, run, tmp_path / "c.agck")
    net2, run2 = checkpoint_load(tmp_path / "c.agck")
    for k in net.params:
        assert net2.params[k].data.tobytes() == net.params[k].data.tobytes()
    assert [h.log_line() for h in run2.history] == [h.log_line() for h in run.history]
    assert run2.train == run.train
    assert checkpoint_bytes(net2, run2) == checkpoint_bytes(net, run)


def test_resume_equals_uninterrupted(tmp_path):
    data = _samples(2)
    full_run, full_net = _run(epochs=3)
    train(full_run, data, full_net)
    part_run, part_net = _run(epochs=3)
    train(part_run, data, part_net, until=1)
    checkpoint_save(part_net, part_run, tmp_path / "mid.agck")
    net, run = checkpoint_load(tmp_path / "mid.agck")
    assert run.next_epoch == 1
    train(run, data, net)
    assert checkpoint_bytes(net, run) == checkpoint_bytes(full_net, full_run)


def test_checkpoint_truncated_and_version(tmp_path):
    run, net = _run(epochs=0)
    p = tmp_path / "c.agck"
    checkpoint_save(net, run, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-100])
    with pytest.raises(CheckpointCorruptError):
        checkpoint_load(p)
    p.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointVersionError):
        checkpoint_load(p)
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointCorruptError):
        checkpoint_load(p)


# -- evaluation and ablation ----------------------------------------------------------------------------

def test_evaluate_perfect_prediction(monkeypatch):
    import agfanet.training as tr
    s = _samples(1)[0]
    monkeypatch.setattr(tr, "predict_proba", lambda _net, vol: s.mask.values.astype(float))
    res = evaluate(build_network(named_config("baseline"), 0), [s, s])
    r = res.raw
    assert (r.dice, r.recall, r.precision, r.hd_mm, r.hd95_mm) == (1.0, 1.0, 1.0, 0.0, 0.0)
    assert res.post.recall == 1.0 and r.n_samples == 2


def test_predict_geometry_and_postprocess():
    s = _samples(1)[0]
    net = build_network(named_config("baseline"), 0)
    m = predict(net, s.volume, postprocess=True)
    assert m.same_geometry(s.volume)
    from agfanet.metrics import count_components
    assert count_components(m.values) <= 1


def test_ablation_rows_and_determinism():
    data = _samples(3)
    cfg = TrainConfig(epochs=1, augment=SMALL)
    rows = run_ablation(data, cfg, 8)
    assert [r.name for r in rows] == ["Baseline"] + [f"Net {i}" for i in range(1, 10)] + ["AGFA-Net"]
    for r in rows:
        assert r.status == "ok"
        assert all(0.0 <= v <= 1.0 for v in (r.dice, r.recall, r.precision))
    table = ablation_table(rows)
    assert len(table.strip().splitlines()) == 13
    assert ablation_table(run_ablation(data, cfg, 8)) == table
    assert '"rows"' in ablation_json(rows)


def test_loss_trend_on_overfit_task():
    # the overfit task: full model, base 8, four 32^3 phantoms, default protocol
    data = []
    for i in range(4):
        s = generate_phantom(PhantomSpec(seed=i))
        data.append(Sample(normalize(s.volume), s.mask, s.id))
    cfg = named_config("agfa", 8)
    run = train(TrainRun(cfg, TrainConfig(epochs=60)), data, build_network(cfg, 0))
    totals = np.array([h.total for h in run.history])[20:]
    smooth = np.convolve(totals, np.ones(20) / 20, mode="valid")
    rises = int(np.count_nonzero(np.diff(smooth) > 0))
    assert rises <= 2, np.diff(smooth)
    assert smooth[-1] < smooth[0]

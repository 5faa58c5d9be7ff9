import math

import numpy as np
import pytest

from psgdetect.errors import InvalidConfig, NonFiniteGradient
from psgdetect.model import ModelConfig, build
from psgdetect.pipeline import select_class
from psgdetect.train import (
    OptimState,
    PlateauSchedule,
    TrainConfig,
    build_eval_set,
    clip_by_global_norm,
    clip_per_tensor,
    evaluate_loss,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

SMALL = dict(T=1536, n_max=4, scales=(384,))


def test_plain_sgd_step():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([1.0])}, OptimState(lr=0.1, momentum=0.0))
    assert p["w"][0] == pytest.approx(0.9)


def test_momentum_two_steps():
    p = {"w": np.array([0.0])}
    st = OptimState(lr=1.0, momentum=0.9)
    sgd_step(p, {"w": np.array([1.0])}, st)
    before = p["w"][0]
    sgd_step(p, {"w": np.array([1.0])}, st)
    assert before - p["w"][0] == pytest.approx(1.9)


def test_velocity_decays_geometrically():
    p = {"w": np.array([0.0])}
    st = OptimState(lr=1.0, momentum=0.9)
    sgd_step(p, {"w": np.array([1.0])}, st)
    vs = []
    for _ in range(5):
        sgd_step(p, {"w": np.array([0.0])}, st)
        vs.append(st.velocity["w"][0])
    np.testing.assert_allclose(np.array(vs[1:]) / np.array(vs[:-1]), 0.9)
    # fixed point: total displacement tends to 1 / (1 - 0.9) = 10
    for _ in range(400):
        sgd_step(p, {"w": np.array([0.0])}, st)
    assert p["w"][0] == pytest.approx(-10.0, rel=1e-6)


def test_non_finite_gradient():
    with pytest.raises(NonFiniteGradient):
        sgd_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, OptimState())
    with pytest.raises(NonFiniteGradient):
        clip_by_global_norm({"w": np.array([np.inf])}, 5.0)


def test_global_norm_clip():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    clip_by_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_per_tensor_clip():
    g = {"a": np.array([30.0, 40.0]), "b": np.array([0.3, 0.4])}
    assert clip_per_tensor(g, 5.0) == pytest.approx(np.sqrt(2500 + 0.25))
    np.testing.assert_allclose(g["a"], [3.0, 4.0])
    np.testing.assert_array_equal(g["b"], [0.3, 0.4])  # small tensors untouched
    with pytest.raises(NonFiniteGradient):
        clip_per_tensor({"w": np.array([np.nan])}, 5.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(clip_mode="layer")


def _run(trace):
    st = OptimState(lr=1e-3)
    sched = PlateauSchedule(st, patience=10, decay_every=5)
    actions, lrs = [], []
    for v in trace:
        actions.append(sched.update(v))
        lrs.append(st.lr)
        if actions[-1] == "stop":
            break
    return actions, lrs, st


def test_decay_after_five_flat_epochs():
    actions, lrs, _ = _run([5, 4, 4, 4, 4, 4, 4])
    assert actions[:2] == ["best", "best"]
    assert actions[6] == "decay"
    assert lrs[5] == 1e-3 and lrs[6] == 5e-4


def test_early_stop_after_ten_and_best_epoch():
    trace = [3.0, 2.0, 1.0] + [1.5] * 12
    actions, lrs, st = _run(trace)
    assert actions[-1] == "stop" and len(actions) == 13
    assert st.best_eval_loss == 1.0
    assert int(np.argmin(trace[: len(actions)])) == 2
    # decays at 5 epochs since best; the 10th triggers the stop instead
    assert lrs[-1] == pytest.approx(1e-3 / 2)


def test_new_best_resets_counters():
    actions, lrs, _ = _run([1.0, 2, 2, 2, 2, 2, 0.5, 2, 2, 2, 2, 2])
    assert actions.count("decay") == 2
    assert lrs[-1] == pytest.approx(1e-3 / 4)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(lr=0)
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"bogus": 1})


@pytest.fixture(scope="module")
def lm_small(tiny_cohort):
    tr, ev = tiny_cohort
    return select_class(tr, ["LM"]), select_class(ev, ["LM"])


def test_evaluate_loss_deterministic_and_zero_heads(lm_small):
    _, ev = lm_small
    cfg = ModelConfig(**SMALL)
    es = build_eval_set(ev, cfg, per_class=4, seed=0)
    es2 = build_eval_set(ev, cfg, per_class=4, seed=0)
    np.testing.assert_array_equal(es.x, es2.x)
    det = build(cfg)
    assert evaluate_loss(det, es) == evaluate_loss(det, es)
    for head in det.heads:
        for m in (head.clf, head.loc):
            m.weight.data[...] = 0
            m.bias.data[...] = 0
    # uniform softmax gives ln 2 on every selected window; the localisation
    # term is the smooth-L1 of the raw targets
    expected = []
    for i in range(0, len(es), 32):
        tg = es.targets[i : i + 32]
        pos = np.stack([t[0].match_mask for t in tg])
        loc = np.stack([t[0].loc_target for t in tg])
        d = np.abs(loc)[np.broadcast_to(pos[:, None], loc.shape)]
        sl = np.where(d < 1, 0.5 * d * d, d - 0.5).sum() / max(pos.sum(), 1)
        expected.append((math.log(2) + sl) * len(tg))
    assert evaluate_loss(det, es) == pytest.approx(sum(expected) / len(es), rel=1e-5)


def test_train_loop_and_checkpoint(lm_small, tmp_path):
    tr, ev = lm_small
    mcfg = ModelConfig(**SMALL)
    tcfg = TrainConfig(B=8, steps_per_epoch=3, max_epochs=3, eval_per_class=4)
    seen = []
    res = train(mcfg, tcfg, tr, ev, progress=seen.append)
    run = res.record
    assert [e.epoch for e in run.epochs] == [0, 1, 2] and len(seen) == 3
    assert run.stop_reason == "max_epochs"
    assert run.best_eval_loss == min(e.eval_loss for e in run.epochs)
    es = build_eval_set(ev, mcfg, tcfg.eval_per_class, tcfg.seed)
    assert evaluate_loss(res.detector, es) == run.best_eval_loss

    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.detector, {"best_eval_loss": run.best_eval_loss})
    det, meta = load_checkpoint(path)
    assert evaluate_loss(det, es) == meta["best_eval_loss"] == run.best_eval_loss

    run.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,eval_loss,lr,seconds" and len(lines) == 4

    again = train(mcfg, tcfg, tr, ev)
    assert [(e.train_loss, e.eval_loss, e.lr) for e in again.record.epochs] == \
        [(e.train_loss, e.eval_loss, e.lr) for e in run.epochs]


def test_steps_per_epoch_default(lm_small):
    from psgdetect.train import count_events

    tr, _ = lm_small
    n = count_events(tr, 1)
    assert n == sum(len(r.events) for r in tr)
    assert math.ceil(n / 32) >= 1

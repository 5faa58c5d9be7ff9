import numpy as np
import pytest

from oracles import grad_cases
from psgdetect.autodiff import (
    BatchNorm1d,
    Conv1d,
    Tensor,
    check_finite,
    gradcheck,
    load_tensors,
    no_grad,
    ops,
    save_tensors,
)
from psgdetect.autodiff.nn import BiGRU
from psgdetect.errors import CheckpointError, DegenerateVariance, EmptyTargetSet, ShapeMismatch


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_all_ops(seed):
    for name, fn, inputs, tol in grad_cases(seed):
        report = gradcheck(fn, inputs, tol=tol, seed=seed)
        assert report.passed, f"{name}: {report}"


def test_gradcheck_detects_wrong_gradient():
    def bad_square(x):
        return Tensor._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = gradcheck(bad_square, [np.array([1.0, 2.0, -3.0])])
    assert not report.passed
    assert report.worst == pytest.approx(0.5, rel=1e-3)


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * x + x * 3.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and not y._parents


def test_check_finite_raises():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    from psgdetect.autodiff.tensor import log

    with check_finite(), np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            log(x)


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 11))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    y = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    t_out = (11 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, t_out))
    for n in range(2):
        for o in range(4):
            for t in range(t_out):
                ref[n, o, t] = np.sum(w[o] * xp[n, :, 2 * t : 2 * t + 3]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 1))))


def test_batchnorm_running_stats_and_degenerate():
    bn = BatchNorm1d(2)
    x = np.random.default_rng(0).standard_normal((4, 2, 8)).astype(np.float32) * 3 + 1
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2)), rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1), rtol=1e-5)
    with pytest.raises(DegenerateVariance):
        ops.batchnorm1d(Tensor(np.zeros((1, 2, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.array([[[1.0, 1.0, 0.0, 2.0]]]), requires_grad=True)
    y = ops.maxpool1d(x, 2, 2)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0, 0.0, 1.0]]])
    with pytest.raises(ShapeMismatch):
        ops.maxpool1d(Tensor(np.zeros((1, 1, 5))), 2, 2)


def test_softmax_stable_for_large_logits():
    p = ops.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])), axis=1).data
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_cross_entropy_uniform_is_log_k():
    ce = ops.cross_entropy(Tensor(np.zeros((5, 3))), np.zeros(5, dtype=int), axis=1)
    assert ce.item() == pytest.approx(np.log(3))


def test_smooth_l1_values():
    v = ops.smooth_l1(Tensor(np.array([0.5, 2.0, -3.0])), np.zeros(3), reduction="none").data
    np.testing.assert_allclose(v, [0.125, 1.5, 2.5])
    with pytest.raises(EmptyTargetSet):
        ops.smooth_l1(Tensor(np.zeros(0)), np.zeros(0))


def test_bgru_matches_step_reference():
    rng = np.random.default_rng(3)
    hid, dim, steps = 3, 2, 5
    gru = BiGRU(dim, hid, rng)
    x = rng.standard_normal((1, dim, steps)).astype(np.float32)
    y = gru(Tensor(x)).data[0]

    def sig(v):
        return 1 / (1 + np.exp(-v))

    def run(w_ih, w_hh, b_ih, b_hh, seq):
        h = np.zeros(hid)
        out = []
        for xt in seq:
            gi, gh = w_ih @ xt + b_ih, w_hh @ h + b_hh
            r = sig(gi[:hid] + gh[:hid])
            z = sig(gi[hid : 2 * hid] + gh[hid : 2 * hid])
            n = np.tanh(gi[2 * hid :] + r * gh[2 * hid :])
            h = (1 - z) * n + z * h
            out.append(h)
        return np.array(out)

    w = [p.data.astype(np.float64) for p in gru.weights()]
    seq = x[0].T.astype(np.float64)
    fwd = run(*w[:4], seq)
    bwd = run(*w[4:], seq[::-1])[::-1]
    np.testing.assert_allclose(y[:hid].T, fwd, atol=1e-5)
    np.testing.assert_allclose(y[hid:].T, bwd, atol=1e-5)


def test_module_state_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    conv = Conv1d(2, 3, 3, rng, padding=1)
    state = conv.state_dict()
    save_tensors(tmp_path / "c.ckpt", state, {"note": "x"})
    loaded, meta = load_tensors(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    other = Conv1d(2, 3, 3, np.random.default_rng(1), padding=1)
    other.load_state_dict(loaded)
    for k in state:
        np.testing.assert_array_equal(other.state_dict()[k], state[k])
    with pytest.raises(KeyError):
        other.load_state_dict({"weight": state["weight"]})


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_tensors(p)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roomnet.engine import SGD, Tape, Tensor, backward, he_init, ops
from roomnet.engine import gradcheck
from roomnet.engine.tensor import DecisionRecorder
from roomnet.errors import CorruptedIndicesError, InvalidArgumentError


# ---------------------------------------------------------------- naive oracles

def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    out[i, o, r, q] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


def maxpool_loops(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    idx = np.zeros((n, c, h // k, w // k), dtype=np.int64)
    for i in range(n):
        for ch in range(c):
            for r in range(h // k):
                for q in range(w // k):
                    best, arg = -np.inf, -1
                    for dr in range(k):
                        for dq in range(k):
                            v = x[i, ch, r * k + dr, q * k + dq]
                            if v > best:  # strict: first (lowest flat index) wins ties
                                best, arg = v, (r * k + dr) * w + (q * k + dq)
                    out[i, ch, r, q], idx[i, ch, r, q] = best, arg
    return out, idx


# ---------------------------------------------------------------- forward values

@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
       stride=st.integers(1, 2), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
def test_conv2d_matches_loops(n, c, f, h, w, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(f, c, 3, 3)), rng.normal(size=f)
    if (h + 2 * pad - 3) < 0 or (w + 2 * pad - 3) < 0:
        return
    if (h + 2 * pad - 3) % stride or (w + 2 * pad - 3) % stride:
        with pytest.raises(InvalidArgumentError):
            ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
        return
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data[0, 0]
    # a centred impulse returns the flipped kernel under cross-correlation
    np.testing.assert_array_equal(out, w[0, 0, ::-1, ::-1])


def test_conv2d_channel_mismatch():
    with pytest.raises(InvalidArgumentError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.sampled_from([2, 3]), ties=st.booleans())
def test_maxpool_matches_loops(seed, k, ties):
    rng = np.random.default_rng(seed)
    shape = (2, 2, 2 * k, 3 * k)
    x = rng.integers(0, 3, size=shape).astype(float) if ties else rng.normal(size=shape)
    out, idx = ops.max_pool2d_indices(Tensor(x), k)
    ref, ref_idx = maxpool_loops(x, k)
    np.testing.assert_array_equal(out.data, ref)
    np.testing.assert_array_equal(idx, ref_idx)


def test_maxpool_rejects_indivisible():
    with pytest.raises(InvalidArgumentError):
        ops.max_pool2d_indices(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_unpool_places_values_at_argmax(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    y, idx = ops.max_pool2d_indices(Tensor(x), 2)
    up = ops.max_unpool2d(y, idx, x.shape).data
    # non-zero entries are exactly the window maxima, in place
    mask = up != 0
    assert mask.reshape(2, 3, -1).sum(axis=2).tolist() == [[6] * 3] * 2
    np.testing.assert_array_equal(up[mask], x[mask])


def test_unpool_rejects_corrupt_indices(rng):
    y, idx = ops.max_pool2d_indices(Tensor(rng.normal(size=(1, 1, 4, 4))), 2)
    bad = idx.copy()
    bad[0, 0, 0, 0] = 16
    with pytest.raises(CorruptedIndicesError):
        ops.max_unpool2d(y, bad, (1, 1, 4, 4))
    with pytest.raises(CorruptedIndicesError):
        ops.max_unpool2d(y, idx[..., :1], (1, 1, 4, 4))


def test_batch_norm_train_and_running_stats(rng):
    x = rng.normal(size=(4, 3, 5, 5)) * 3 + 2
    g, b = rng.normal(size=3), rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batch_norm2d(Tensor(x), Tensor(g), Tensor(b), rm, rv, train=True).data
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * g[None, :, None, None] \
        + b[None, :, None, None]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    m = 4 * 25
    np.testing.assert_allclose(rm, 0.1 * mu, rtol=1e-14)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * m / (m - 1), rtol=1e-14)
    ev = ops.batch_norm2d(Tensor(x), Tensor(g), Tensor(b), rm, rv, train=False).data
    ref_ev = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) * g[None, :, None, None] \
        + b[None, :, None, None]
    np.testing.assert_allclose(ev, ref_ev, rtol=1e-12)


def test_dropout_is_inverted_and_identity_in_eval(rng):
    x = Tensor(np.ones((200, 50)))
    out = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    assert ops.dropout(x, 0.5, False) is x
    with pytest.raises(InvalidArgumentError):
        ops.dropout(x, 1.0, True, rng)


def test_softmax_cross_entropy_value():
    z = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    got = float(ops.softmax_cross_entropy(Tensor(z), [2, 0]).data)
    ref = (-(3 - np.log(np.exp(1) + np.exp(2) + np.exp(3))) + np.log(3)) / 2
    assert got == pytest.approx(ref, rel=1e-14)
    with pytest.raises(InvalidArgumentError):
        ops.softmax_cross_entropy(Tensor(z), [3, 0])


def test_weighted_sse_gradient_scales_exactly(rng):
    p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    gt = rng.normal(size=(2, 3))
    grads = {}
    for wv in (1.0, 0.2):
        p.grad = None
        with Tape() as tape:
            loss = ops.weighted_sse(p, gt, np.full((2, 3), wv))
        backward(tape, loss)
        grads[wv] = p.grad.copy()
    np.testing.assert_array_equal(grads[0.2], 0.2 * grads[1.0])


# ---------------------------------------------------------------- tape semantics

def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.mul(x, 2.0)
    assert not y.is_op_output


def test_backward_accumulates_and_requires_scalar():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.mul(x, x))
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    with Tape() as tape:
        z = ops.mul(x, 3.0)
    with pytest.raises(InvalidArgumentError):
        backward(tape, z)


def test_shared_input_gradients_sum():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 5.0)))
    backward(tape, y)
    assert x.grad[0] == 2 * 3.0 + 5.0


def test_decision_replay_freezes_relu_mask():
    x = Tensor(np.array([-1.0, 2.0]))
    with DecisionRecorder() as log:
        ops.relu(x)
    with DecisionRecorder(log):
        out = ops.relu(Tensor(np.array([1.0, -2.0]))).data
    np.testing.assert_array_equal(out, [0.0, -2.0])


# ---------------------------------------------------------------- optimizer

def test_sgd_matches_formula(rng):
    p = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=5e-4)
    v = np.zeros(4)
    ref = p.data.copy()
    for _ in range(3):
        g = rng.normal(size=4)
        p.grad = g
        opt.step()
        v = 0.9 * v + g + 5e-4 * ref
        ref = ref - 0.1 * v
    np.testing.assert_allclose(p.data, ref, rtol=1e-14, atol=1e-15)


def test_he_init_statistics():
    t = he_init((64, 32, 3, 3), 32 * 9, np.random.default_rng(0), np.float64)
    assert abs(t.data.mean()) < 0.01
    assert t.data.std() == pytest.approx(np.sqrt(2 / 288), rel=0.02)
    with pytest.raises(InvalidArgumentError):
        he_init((2, 2), 0, np.random.default_rng(0))


# ---------------------------------------------------------------- gradient checker

@pytest.mark.parametrize("name", list(ops.DIFFERENTIABLE_OPS))
def test_every_registered_op_passes_gradcheck(name):
    r = gradcheck.check_op(name)
    assert r.passed, gradcheck.format_report([r])
    assert r.probes > 0


def test_gradcheck_catches_corrupted_relu_rule(monkeypatch):
    monkeypatch.setattr(ops, "_relu_grad", lambda g, ctx: (2.0 * g * ctx["mask"],))
    assert not gradcheck.check_op("relu").passed


def test_gradcheck_catches_corrupted_conv_rule(monkeypatch):
    orig = ops._conv2d_grad

    def broken(g, ctx):
        dx, dw, db = orig(g, ctx)
        return dx, dw * 1.001, db

    monkeypatch.setattr(ops, "_conv2d_grad", broken)
    assert not gradcheck.check_op("conv2d").passed


def test_report_lists_every_registered_op():
    results = gradcheck.run_suite(include_model=False)
    report = gradcheck.format_report(results)
    for name in ops.DIFFERENTIABLE_OPS:
        assert name in report


def test_sgd_with_everything_zero_leaves_parameters_alone(rng):
    p = Tensor(rng.normal(size=5), requires_grad=True)
    before = p.data.copy()
    p.grad = np.zeros(5)
    SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0).step()
    np.testing.assert_array_equal(p.data, before)


def test_sgd_on_quadratic_decreases_monotonically():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = SGD([p], lr=0.01, momentum=0.9, weight_decay=5e-4)
    losses = []
    for _ in range(10):
        with Tape() as tape:
            loss = ops.sum(ops.mul(p, p))
        losses.append(float(loss.data))
        p.grad = None
        backward(tape, loss)
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))

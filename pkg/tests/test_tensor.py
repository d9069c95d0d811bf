import numpy as np
import pytest

from tpd.tensor import (
    GradTape,
    Tensor,
    TapeError,
    avgpool2x,
    backward,
    concat,
    conv2d,
    default_dtype,
    finite_diff_check,
    group_norm,
    linear,
    mul,
    nearest_upsample2x,
    no_grad,
    silu,
    softmax_attention,
)


# ---- oracles --------------------------------------------------------------

def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def linear_oracle(x, W, b):
    out = np.zeros((x.shape[0], W.shape[0]))
    for i in range(x.shape[0]):
        for j in range(W.shape[0]):
            out[i, j] = b[j] + sum(x[i, k] * W[j, k] for k in range(x.shape[1]))
    return out


def attention_oracle(q, k, v):
    p, d = q.shape
    out = np.zeros_like(v, dtype=np.float64)
    for i in range(p):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / np.sqrt(d) for j in range(p)]
        m = max(scores)
        e = [np.exp(s - m) for s in scores]
        z = sum(e)
        for j in range(p):
            out[i] += (e[j] / z) * v[j]
    return out


# ---- forward ops ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_conv2d_matches_nested_loop(seed):
    rng = np.random.default_rng(seed)
    stride = 1 if seed % 3 else 2
    size = 5 if stride == 1 else 7
    width = size - 2 if stride == 1 and seed % 2 else size
    x = rng.standard_normal((2, 3, size, width)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(x, w, b, stride=stride, pad=1).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, 1), rtol=1e-5, atol=1e-5)


def test_conv2d_identity_and_constant_field():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 6)).astype(np.float32)
    out = conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).data
    assert np.array_equal(out, x)
    c = np.full((1, 1, 5, 5), 0.75, dtype=np.float32)
    out = conv2d(c, np.ones((1, 1, 3, 3)), np.zeros(1), pad=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * 0.75, rtol=1e-6)


def test_conv2d_errors_name_the_axis():
    x = np.zeros((1, 3, 6, 6))
    with pytest.raises(ValueError, match="channel"):
        conv2d(x, np.zeros((2, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="odd"):
        conv2d(x, np.zeros((2, 3, 2, 2)), np.zeros(2))
    with pytest.raises(ValueError, match="height"):
        conv2d(x, np.zeros((2, 3, 3, 3)), np.zeros(2), stride=2, pad=1)
    with pytest.raises(ValueError, match="width"):
        conv2d(np.zeros((1, 3, 7, 6)), np.zeros((2, 3, 3, 3)), np.zeros(2), stride=2, pad=1)
    with pytest.raises(ValueError, match="bias"):
        conv2d(x, np.zeros((2, 3, 3, 3)), np.zeros(3))


@pytest.mark.parametrize("seed", range(20))
def test_linear_matches_loop(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    W = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    with default_dtype(np.float64):
        got = linear(x, W, b).data
    np.testing.assert_allclose(got, linear_oracle(x, W, b), rtol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_loop(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((7, 4)) for _ in range(3))
    with default_dtype(np.float64):
        got = softmax_attention(q, k, v).data
    np.testing.assert_allclose(got, attention_oracle(q, k, v), rtol=1e-6)
    got32 = softmax_attention(*(a.astype(np.float32) for a in (q, k, v))).data
    np.testing.assert_allclose(got32, attention_oracle(q, k, v), rtol=1e-5, atol=1e-6)


def test_attention_special_cases():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((1, 3))
    out = softmax_attention(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), v).data
    np.testing.assert_allclose(out, v.astype(np.float32))
    k = np.tile(rng.standard_normal((1, 4)), (5, 1))
    v = rng.standard_normal((5, 4))
    with default_dtype(np.float64):
        out = softmax_attention(rng.standard_normal((5, 4)), k, v).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), rtol=1e-12)


def test_attention_rows_sum_to_one_on_huge_logits():
    from tpd.tensor import capture_attention

    q = np.full((4, 2), 1e4)
    k = np.arange(8.0).reshape(4, 2) * 1e3
    with capture_attention() as probs:
        out = softmax_attention(q, k, np.ones((4, 2)))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(probs[0].sum(axis=-1), 1.0, atol=1e-6)


def test_attention_errors():
    with pytest.raises(ValueError):
        softmax_attention(np.zeros((3, 0)), np.zeros((3, 0)), np.zeros((3, 0)))
    with pytest.raises(ValueError):
        softmax_attention(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((4, 2)))
    q = np.zeros((3, 2))
    q[1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        softmax_attention(q, np.zeros((3, 2)), np.zeros((3, 2)))


def test_elementwise_definitions():
    assert silu(np.zeros(3)).data.tolist() == [0.0, 0.0, 0.0]
    x = np.random.default_rng(2).standard_normal((2, 6, 3, 3)) * 5 + 3
    with default_dtype(np.float64):
        y = group_norm(x, 3, np.ones(6), np.zeros(6)).data
    g = y.reshape(2, 3, -1)
    assert np.abs(g.mean(axis=-1)).max() < 1e-5
    assert np.abs(g.var(axis=-1) - 1).max() < 1e-4
    with pytest.raises(ValueError, match="divisible"):
        group_norm(x, 4, np.ones(6), np.zeros(6))
    u = nearest_upsample2x(np.arange(4.0).reshape(1, 1, 2, 2)).data
    assert u[0, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    assert np.array_equal(avgpool2x(u).data, np.arange(4.0).reshape(1, 1, 2, 2))


# ---- backward -------------------------------------------------------------

def test_sum_of_squares_grad_is_2x():
    x = Tensor(np.random.default_rng(3).standard_normal(6), requires_grad=True)
    backward((x * x).sum())
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_errors_and_unreachable_leaf():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError, match="scalar"):
        backward(x * 2.0)
    loss = (x * 3.0).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)
    assert other.grad is None or not other.grad.any()


def test_shared_leaf_accumulates_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    backward((x * x + x).sum())
    assert x.grad.tolist() == [3.0, 5.0]


def test_tape_replays_in_reverse_execution_order():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = silu(x * 2.0 + 1.0).sum()
    tape = GradTape(loss)
    seqs = [n.seq for n in tape.reversed()]
    assert seqs == sorted(seqs, reverse=True)
    assert len(tape) == 4


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y.is_leaf


def test_getitem_and_concat_grads():
    with default_dtype(np.float64):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((2, 4)))
        idx = np.array([0, 2, 2])
        err = finite_diff_check(lambda a, b: (concat([a[idx], b], axis=0) * concat([a[idx], b], axis=0)).sum(), [a, b])
    assert err < 1e-6


def _fd_cases(rng):
    def r(*s):
        return Tensor(rng.standard_normal(s), dtype=np.float64)

    def w(*s):
        return Tensor(rng.standard_normal(s), dtype=np.float64)

    w1, w2, w3, w4, w5 = w(1, 2, 4, 4), w(1, 2, 3, 3), w(2, 3), w(2, 4, 2, 3), w(5)
    w6, w7, w8, w9, w10 = w(4, 3), w(1, 1, 2, 2), w(1, 1, 4, 2), w(2, 3), w(3, 2)
    yield lambda x, k, b: (conv2d(x, k, b, pad=1) * w1).sum(), [r(1, 2, 4, 4), r(2, 2, 3, 3), r(2)]
    yield lambda x, k, b: (conv2d(x, k, b, stride=2, pad=1) * w2).sum(), [r(1, 2, 5, 5), r(2, 2, 3, 3), r(2)]
    yield lambda x, W, b: (linear(x, W, b) * w3).sum(), [r(2, 4), r(3, 4), r(3)]
    yield lambda x, g, b: (group_norm(x, 2, g, b) * w4).sum(), [r(2, 4, 2, 3), r(4), r(4)]
    yield lambda x: (silu(x) * w5).sum(), [r(5)]
    yield lambda q, k, v: (softmax_attention(q, k, v) * w6).sum(), [r(4, 3), r(4, 3), r(4, 3)]
    yield lambda x: (avgpool2x(x) * w7).sum(), [r(1, 1, 4, 4)]
    yield lambda x: (nearest_upsample2x(x) * w8).sum(), [r(1, 1, 2, 1)]
    yield lambda a, b: (mul(a + b, a) * w9).sum(), [r(2, 3), r(3)]
    yield lambda a: (a.reshape(3, 2).transpose(1, 0) @ w10).mean(), [r(2, 3)]


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_finite_differences_f64(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        for fn, inputs in _fd_cases(rng):
            assert finite_diff_check(fn, inputs) <= 1e-6


def test_conv_silu_sum_fd_in_f32():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
    b = Tensor(rng.standard_normal(3).astype(np.float32))
    # f32 central differences: judged against a float64 replay of the same graph
    err = finite_diff_check(lambda x, k, b: silu(conv2d(x, k, b, pad=1)).sum(), [x, k, b], eps=1e-2)
    assert err < 1e-2
    with default_dtype(np.float64):
        x64, k64, b64 = (Tensor(t.data.astype(np.float64), requires_grad=True) for t in (x, k, b))
        backward(silu(conv2d(x64, k64, b64, pad=1)).sum())
    np.testing.assert_allclose(x.grad, x64.grad, rtol=1e-3, atol=1e-4)


def test_finite_diff_trivial_closures():
    x = Tensor(np.random.default_rng(6).standard_normal(5), dtype=np.float64)
    assert finite_diff_check(lambda x: x.sum(), [x]) <= 1e-7
    assert finite_diff_check(lambda x: (x * 0.0).sum() + 3.0, [x]) == 0.0
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: x.sum(), [x], eps=0.0)


def test_finite_diff_flags_a_wrong_backward(monkeypatch):
    from tpd import tensor

    monkeypatch.setattr(tensor.SiLU, "backward", lambda self, g: (g,))
    x = Tensor(np.random.default_rng(7).standard_normal(4), dtype=np.float64)
    assert finite_diff_check(lambda x: silu(x).sum(), [x]) > 1e-2


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = conv2d(x, w, np.zeros(4, np.float32), pad=1).data
    b = conv2d(x.copy(), w.copy(), np.zeros(4, np.float32), pad=1).data
    assert a.tobytes() == b.tobytes()

import math

import numpy as np
import pytest

from tpd.nnet import (
    BadMagicError,
    CheckpointError,
    TruncatedCheckpointError,
    UNetConfig,
    VersionMismatchError,
    adam_step,
    init_params,
    load_checkpoint,
    save_checkpoint,
    timestep_embedding,
    unet_forward,
)
from tpd.tensor import Tensor, backward


def small_config(**kw):
    base = dict(in_channels=14, out_channels=4, base_channels=8, channel_mults=(1, 2), attention_levels=(1,),
                time_embed_dim=16, num_heads=2, norm_groups=4)
    base.update(kw)
    return UNetConfig(**base)


def inputs(rng, n=2, h=16, w=8):
    return rng.standard_normal((n, 4, h, w)), rng.standard_normal((n, 10, h, w))


# ---- config ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        small_config(base_channels=6)  # not divisible by 4 groups
    with pytest.raises(ValueError):
        small_config(num_heads=3)
    cfg = small_config()
    cfg.validate(16, 8)
    with pytest.raises(ValueError):
        cfg.validate(15, 8)
    with pytest.raises(ValueError):
        UNetConfig(in_channels=14, out_channels=4).validate(62, 24)


# ---- timestep embedding ---------------------------------------------------

def test_embedding_at_zero_and_distinct_neighbours():
    e = timestep_embedding(0, 8)
    assert np.all(e[..., :4] == 0) and np.all(e[..., 4:] == 1)
    assert np.linalg.norm(timestep_embedding(5, 16) - timestep_embedding(6, 16)) > 0
    with pytest.raises(ValueError):
        timestep_embedding(0, 7)


def test_embedding_matches_direct_formula():
    T, dim = 200, 8
    t = T - 1
    e = timestep_embedding(t, dim, T=T, dtype=np.float64).reshape(-1)
    half = dim // 2
    want = [math.sin(t * math.exp(-math.log(10000.0) * i / half)) for i in range(half)]
    want += [math.cos(t * math.exp(-math.log(10000.0) * i / half)) for i in range(half)]
    np.testing.assert_allclose(e, want, rtol=1e-12)
    with pytest.raises(ValueError):
        timestep_embedding(T, dim, T=T)


# ---- forward --------------------------------------------------------------

def test_forward_shape_and_zero_init():
    rng = np.random.default_rng(0)
    p = init_params(small_config(), seed=0)
    x, c = inputs(rng)
    out = unet_forward(p, x, c, np.array([3, 50]))
    assert out.shape == x.shape
    assert not out.data.any()


def test_forward_rejects_mismatches():
    rng = np.random.default_rng(1)
    p = init_params(small_config())
    x, c = inputs(rng)
    with pytest.raises(ValueError):
        unet_forward(p, x[:, :3], c, 1)
    with pytest.raises(ValueError):
        unet_forward(p, x, c[:, :9], 1)
    with pytest.raises(ValueError):
        unet_forward(p, x[..., :7, :], c[..., :7, :], 1)


def test_forward_deterministic():
    rng = np.random.default_rng(2)
    p = init_params(small_config(), zero_init=False)
    x, c = inputs(rng)
    a = unet_forward(p, x, c, 7).data
    b = unet_forward(p, x, c, 7).data
    assert a.tobytes() == b.tobytes()


def test_zero_projection_attention_is_identity():
    from tpd.nnet import _attnblock

    rng = np.random.default_rng(3)
    p = init_params(small_config(), zero_init=False)
    p.tensors["down.1.attn.0.proj.w"].data[:] = 0
    p.tensors["down.1.attn.0.proj.b"].data[:] = 0
    x = Tensor(rng.standard_normal((1, 16, 8, 4)).astype(np.float32))
    assert np.array_equal(_attnblock(p, "down.1.attn.0", x).data, x.data)


def test_backward_reaches_almost_every_parameter():
    rng = np.random.default_rng(4)
    p = init_params(small_config(), seed=1, zero_init=False)
    x, c = inputs(rng)
    out = unet_forward(p, x, c, np.array([10, 120]))
    backward((out * out).mean())
    counts = [(np.count_nonzero(t.grad), t.size) for _, t in p.items()]
    nonzero = sum(a for a, _ in counts) / sum(b for _, b in counts)
    assert nonzero >= 0.99
    assert all(t.grad is not None and t.grad.any() for _, t in p.items())


# ---- adam -----------------------------------------------------------------

def test_adam_zero_grads_leave_params():
    p = init_params(small_config())
    before = {k: t.data.copy() for k, t in p.items()}
    p.zero_grad()
    adam_step(p)
    assert all(np.array_equal(before[k], t.data) for k, t in p.items())
    assert p.step == 1
    p.zero_grad()
    adam_step(p)
    assert p.step == 2


def test_adam_matches_scalar_recurrence():
    p = init_params(small_config(), dtype=np.float64)
    name = "out.conv.b"
    theta = float(p[name].data[0])
    g, lr, b1, b2, eps = 0.37, 1e-2, 0.9, 0.999, 1e-8
    m = v = 0.0
    for k in range(1, 8):
        for _, t in p.items():
            t.grad = np.zeros_like(t.data)
        p[name].grad[0] = g
        adam_step(p, lr=lr, beta1=b1, beta2=b2, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
        assert p[name].data[0] == pytest.approx(theta, rel=1e-12)


def test_adam_requires_grads():
    p = init_params(small_config())
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(p)


# ---- checkpoint -----------------------------------------------------------

def _trained(seed=5):
    rng = np.random.default_rng(seed)
    p = init_params(small_config(), seed=seed, zero_init=False)
    x, c = inputs(rng)
    out = unet_forward(p, x, c, 3)
    backward((out * out).mean())
    adam_step(p)
    return p, x, c


def test_checkpoint_round_trip_bitwise(tmp_path):
    p, x, c = _trained()
    a, b = tmp_path / "a.tpdc", tmp_path / "b.tpdc"
    save_checkpoint(p, a, meta={"config_hash": "abc"})
    q = load_checkpoint(a)
    save_checkpoint(q, b, meta={"config_hash": "abc"})
    assert a.read_bytes() == b.read_bytes()
    assert q.step == p.step
    for k, t in p.items():
        assert t.data.tobytes() == q[k].data.tobytes()
        assert p.m[k].tobytes() == q.m[k].tobytes() and p.v[k].tobytes() == q.v[k].tobytes()
    assert unet_forward(p, x, c, 9).data.tobytes() == unet_forward(q, x, c, 9).data.tobytes()


def test_checkpoint_distinct_errors(tmp_path):
    p, _, _ = _trained()
    path = tmp_path / "c.tpdc"
    save_checkpoint(p, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad"
    bad.write_bytes(b"X" + raw[1:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:4] + b"\x07" + raw[5:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    assert not issubclass(BadMagicError, VersionMismatchError)

"""Tiny denoising UNet with multi-resolution self-attention.

Layout per level: residual block(s), optional self-attention, skip saved,
then average-pool down. The decoder mirrors it with channel-wise skip
concatenation and nearest-neighbour upsampling followed by a 3x3 conv.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    avgpool2x,
    concat,
    conv2d,
    get_default_dtype,
    group_norm,
    linear,
    nearest_upsample2x,
    no_grad,
    silu,
    softmax_attention,
)


@dataclass
class UNetConfig:
    in_channels: int
    out_channels: int
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    time_embed_dim: int = 128
    num_heads: int = 4
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.attention_levels = tuple(sorted(int(a) for a in self.attention_levels))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def validate(self, height: Optional[int] = None, width: Optional[int] = None) -> None:
        if self.in_channels <= self.out_channels or self.out_channels < 1:
            raise ValueError("in_channels must exceed out_channels (state + conditioning)")
        if not self.channel_mults or min(self.channel_mults) < 1:
            raise ValueError("channel_mults must be a non-empty list of positive ints")
        if self.base_channels % self.norm_groups:
            raise ValueError(f"base_channels {self.base_channels} not divisible by norm_groups {self.norm_groups}")
        if self.num_res_blocks < 1:
            raise ValueError("num_res_blocks must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        for lvl in self.attention_levels:
            if not 0 <= lvl < self.levels:
                raise ValueError(f"attention level {lvl} outside 0..{self.levels - 1}")
        # the middle block always attends at the deepest width
        for lvl in set(self.attention_levels) | {self.levels - 1}:
            if self.level_channels(lvl) % self.num_heads:
                raise ValueError(f"num_heads {self.num_heads} does not divide {self.level_channels(lvl)} channels")
        if height is not None and width is not None:
            f = 2 ** (self.levels - 1)
            if height % f or width % f:
                raise ValueError(f"canvas {height}x{width} not divisible by 2^(levels-1) = {f}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        return d


class UNetParams:
    """Ordered parameter store plus Adam moments and step counter."""

    def __init__(self, config: UNetConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in tensors.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in tensors.items())
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def __call__(self, state_t: np.ndarray, cond: np.ndarray, t) -> np.ndarray:
        """Noise prediction without recording a tape."""
        with no_grad():
            return unet_forward(self, state_t, cond, t).data


# ---- initialisation -------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator, dtype, zero_init: bool):
        self.rng, self.dtype, self.zero_init = rng, dtype, zero_init
        self.out: "OrderedDict[str, Tensor]" = OrderedDict()

    def _put(self, name, arr):
        self.out[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def conv(self, name, cin, cout, k=3, zero=False):
        fan_in = cin * k * k
        if zero and self.zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = self.rng.standard_normal((cout, cin, k, k)) / math.sqrt(fan_in)
        self._put(f"{name}.w", w)
        self._put(f"{name}.b", np.zeros(cout) if self.zero_init else 0.1 * self.rng.standard_normal(cout))

    def dense(self, name, cin, cout, zero=False):
        if zero and self.zero_init:
            w = np.zeros((cout, cin))
        else:
            w = self.rng.standard_normal((cout, cin)) / math.sqrt(cin)
        self._put(f"{name}.w", w)
        self._put(f"{name}.b", np.zeros(cout) if self.zero_init else 0.1 * self.rng.standard_normal(cout))

    def norm(self, name, c):
        if self.zero_init:
            self._put(f"{name}.g", np.ones(c))
            self._put(f"{name}.b", np.zeros(c))
        else:
            self._put(f"{name}.g", 1.0 + 0.1 * self.rng.standard_normal(c))
            self._put(f"{name}.b", 0.1 * self.rng.standard_normal(c))

    def resblock(self, name, cin, cout, temb):
        self.norm(f"{name}.gn1", cin)
        self.conv(f"{name}.conv1", cin, cout)
        self.dense(f"{name}.temb", temb, 2 * cout)
        self.norm(f"{name}.gn2", cout)
        self.conv(f"{name}.conv2", cout, cout, zero=True)
        if cin != cout:
            self.conv(f"{name}.skip", cin, cout, k=1)

    def attn(self, name, c):
        self.norm(f"{name}.gn", c)
        self.dense(f"{name}.qkv", c, 3 * c)
        self.dense(f"{name}.proj", c, c, zero=True)


def init_params(
    config: UNetConfig,
    seed: int = 0,
    dtype=None,
    zero_init: bool = True,
) -> UNetParams:
    """Build a parameter store for ``config``.

    With ``zero_init`` the output projections of every residual/attention
    block and the final conv start at zero, so the untrained network predicts
    exactly zero noise. ``zero_init=False`` randomises everything, which is
    what gradient verification wants.
    """
    dtype = dtype or get_default_dtype()
    init = _Init(np.random.default_rng(seed), dtype, zero_init)
    base, temb = config.base_channels, config.time_embed_dim
    init.dense("time.lin1", base, temb)
    init.dense("time.lin2", temb, temb)
    init.conv("conv_in", config.in_channels, base)

    ch = base
    skips = []
    for lvl in range(config.levels):
        cout = config.level_channels(lvl)
        for i in range(config.num_res_blocks):
            init.resblock(f"down.{lvl}.res.{i}", ch, cout, temb)
            ch = cout
            if lvl in config.attention_levels:
                init.attn(f"down.{lvl}.attn.{i}", ch)
            skips.append(ch)

    init.resblock("mid.res.0", ch, ch, temb)
    init.attn("mid.attn", ch)
    init.resblock("mid.res.1", ch, ch, temb)

    for lvl in reversed(range(config.levels)):
        cout = config.level_channels(lvl)
        for i in range(config.num_res_blocks):
            init.resblock(f"up.{lvl}.res.{i}", ch + skips.pop(), cout, temb)
            ch = cout
            if lvl in config.attention_levels:
                init.attn(f"up.{lvl}.attn.{i}", ch)
        if lvl > 0:
            init.conv(f"up.{lvl}.upconv", ch, config.level_channels(lvl - 1))
            ch = config.level_channels(lvl - 1)

    init.norm("out.gn", ch)
    init.conv("out.conv", ch, config.out_channels, zero=True)
    return UNetParams(config, init.out)


# ---- forward --------------------------------------------------------------

def timestep_embedding(t, dim: int, T: Optional[int] = None, dtype=None) -> np.ndarray:
    """Sinusoidal embedding: ``[sin(t*f_0..), cos(t*f_0..)]`` with log-spaced f."""
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if T is not None and (np.any(t < 0) or np.any(t >= T)):
        raise ValueError(f"timestep outside [0, {T})")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(dtype or get_default_dtype())


def _conv(p: UNetParams, name: str, x: Tensor, pad: int = 1) -> Tensor:
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=pad)


def _norm(p: UNetParams, name: str, x: Tensor) -> Tensor:
    return group_norm(x, p.config.norm_groups, p[f"{name}.g"], p[f"{name}.b"])


def _resblock(p: UNetParams, name: str, x: Tensor, temb: Tensor) -> Tensor:
    h = _conv(p, f"{name}.conv1", silu(_norm(p, f"{name}.gn1", x)))
    cout = h.shape[1]
    ss = linear(temb, p[f"{name}.temb.w"], p[f"{name}.temb.b"]).reshape(-1, 2 * cout, 1, 1)
    scale, shift = ss[:, :cout], ss[:, cout:]
    h = _norm(p, f"{name}.gn2", h)
    h = h * (scale + 1.0) + shift
    h = _conv(p, f"{name}.conv2", silu(h))
    skip = _conv(p, f"{name}.skip", x, pad=0) if f"{name}.skip.w" in p.tensors else x
    return skip + h


def _attnblock(p: UNetParams, name: str, x: Tensor) -> Tensor:
    n, c, hh, ww = x.shape
    heads = p.config.num_heads
    dh = c // heads
    tokens = _norm(p, f"{name}.gn", x).reshape(n, c, hh * ww).transpose(0, 2, 1)
    qkv = linear(tokens, p[f"{name}.qkv.w"], p[f"{name}.qkv.b"])
    qkv = qkv.reshape(n, hh * ww, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    out = softmax_attention(qkv[0], qkv[1], qkv[2])  # (n, heads, p, dh)
    out = out.transpose(0, 2, 1, 3).reshape(n, hh * ww, c)
    out = linear(out, p[f"{name}.proj.w"], p[f"{name}.proj.b"])
    return x + out.transpose(0, 2, 1).reshape(n, c, hh, ww)


def unet_forward(params: UNetParams, state_t, cond, t) -> Tensor:
    """Predict the noise in ``state_t`` given conditioning channels and step ``t``.

    ``state_t`` is (N, out_channels, H, W), ``cond`` is (N, in-out, H, W) and
    ``t`` is an int or a length-N integer array.
    """
    cfg = params.config
    dtype = params.dtype
    state_t = as_tensor(state_t)
    cond = as_tensor(cond)
    if state_t.dtype != dtype:
        state_t = Tensor(state_t.data.astype(dtype))
    if cond.dtype != dtype:
        cond = Tensor(cond.data.astype(dtype))
    if state_t.ndim != 4 or cond.ndim != 4:
        raise ValueError("state_t and cond must be 4-D (N, C, H, W)")
    n, cs, h, w = state_t.shape
    if cs != cfg.out_channels:
        raise ValueError(f"state has {cs} channels, config expects {cfg.out_channels}")
    if cond.shape[0] != n or cond.shape[2:] != (h, w):
        raise ValueError(f"cond shape {cond.shape} incompatible with state shape {state_t.shape}")
    if cs + cond.shape[1] != cfg.in_channels:
        raise ValueError(f"state+cond channels {cs}+{cond.shape[1]} != in_channels {cfg.in_channels}")
    cfg.validate(h, w)

    tt = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
    emb = Tensor(timestep_embedding(tt, cfg.base_channels, dtype=dtype))
    temb = linear(emb, params["time.lin1.w"], params["time.lin1.b"])
    temb = linear(silu(temb), params["time.lin2.w"], params["time.lin2.b"])
    temb = silu(temb)

    x = _conv(params, "conv_in", concat([state_t, cond], axis=1))
    skips = []
    for lvl in range(cfg.levels):
        for i in range(cfg.num_res_blocks):
            x = _resblock(params, f"down.{lvl}.res.{i}", x, temb)
            if lvl in cfg.attention_levels:
                x = _attnblock(params, f"down.{lvl}.attn.{i}", x)
            skips.append(x)
        if lvl < cfg.levels - 1:
            x = avgpool2x(x)

    x = _resblock(params, "mid.res.0", x, temb)
    x = _attnblock(params, "mid.attn", x)
    x = _resblock(params, "mid.res.1", x, temb)

    for lvl in reversed(range(cfg.levels)):
        for i in range(cfg.num_res_blocks):
            x = concat([x, skips.pop()], axis=1)
            x = _resblock(params, f"up.{lvl}.res.{i}", x, temb)
            if lvl in cfg.attention_levels:
                x = _attnblock(params, f"up.{lvl}.attn.{i}", x)
        if lvl > 0:
            x = _conv(params, f"up.{lvl}.upconv", nearest_upsample2x(x))

    x = silu(_norm(params, "out.gn", x))
    return _conv(params, "out.conv", x)


# ---- optimiser ------------------------------------------------------------

def adam_step(
    params: UNetParams,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> UNetParams:
    """One bias-corrected Adam update in place; grads are zeroed afterwards."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    params.step += 1
    k = params.step
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    for name, t in params.items():
        g = t.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.dtype)
        t.grad = np.zeros_like(t.data)
    return params


# ---- checkpoint -----------------------------------------------------------

MAGIC = b"TPDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(params: UNetParams, path, meta: Optional[dict] = None) -> None:
    """Write params, Adam moments and step count.

    Layout: ``TPDC`` | u32 version | u32 manifest length | manifest JSON |
    raw little-endian buffers in manifest order.
    """
    entries = []
    buffers = []
    for prefix, store in (("param", {k: t.data for k, t in params.items()}), ("adam_m", params.m), ("adam_v", params.v)):
        for name, arr in store.items():
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            entries.append([f"{prefix}/{name}", le.dtype.str, list(arr.shape)])
            buffers.append(np.ascontiguousarray(le).tobytes())
    manifest = {
        "config": params.config.to_dict(),
        "entries": entries,
        "meta": meta or {},
        "step": params.step,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for b in buffers:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint_meta(path) -> dict:
    return _read(path)[0]["meta"]


def load_checkpoint(path) -> UNetParams:
    manifest, raw, offset = _read(path)
    cfg = UNetConfig(**manifest["config"])
    stores: dict[str, OrderedDict] = {"param": OrderedDict(), "adam_m": OrderedDict(), "adam_v": OrderedDict()}
    for name, dtype_str, shape in manifest["entries"]:
        dt = np.dtype(dtype_str)
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise TruncatedCheckpointError(f"checkpoint truncated inside buffer {name!r}")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
        offset += nbytes
        prefix, pname = name.split("/", 1)
        stores[prefix][pname] = arr.astype(dt.newbyteorder("="))
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after last buffer")
    tensors = OrderedDict((k, Tensor(a, requires_grad=True, dtype=a.dtype, name=k)) for k, a in stores["param"].items())
    params = UNetParams(cfg, tensors)
    params.m = stores["adam_m"]
    params.v = stores["adam_v"]
    params.step = int(manifest["step"])
    return params


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedCheckpointError("checkpoint header truncated")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    if 12 + mlen > len(raw):
        raise TruncatedCheckpointError("checkpoint manifest truncated")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    return manifest, raw, 12 + mlen

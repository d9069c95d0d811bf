"""Noise schedule, forward noising, the denoising objective and a DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .nnet import UNetParams, unet_forward
from .tensor import Tensor, as_tensor

# (state_t, cond, t) -> predicted noise; UNetParams satisfies this too
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule including both endpoints, computed in float64."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather schedule entries for scalar or per-sample t, shaped to broadcast."""
    v = values[np.asarray(t)]
    if np.ndim(v) == 0:
        return v
    return v.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) >= sched.T):
        raise ValueError(f"t outside [0, {sched.T})")
    ab = _per_sample(sched.alpha_bar, t, x0.ndim)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def training_loss(model: Union[UNetParams, Predictor], state0, cond, t, eps, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between the true and predicted noise.

    ``state0``/``cond``/``eps`` are batched (N, C, H, W) arrays; ``t`` is an
    int or a length-N array. With a :class:`UNetParams` the result is
    differentiable; any other callable is evaluated as a fixed predictor.
    """
    state0 = np.asarray(state0)
    eps = np.asarray(eps, dtype=state0.dtype)
    x_t = q_sample(state0, t, eps, sched)
    if isinstance(model, UNetParams):
        pred = unet_forward(model, x_t, cond, t)
    else:
        pred = Tensor(np.asarray(model(x_t, np.asarray(cond), np.asarray(t))), dtype=state0.dtype)
    diff = pred - as_tensor(eps, pred.dtype)
    return (diff * diff).mean()


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniform-stride descending subsequence starting at T-1."""
    if num_steps < 1 or num_steps > T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, num_steps)).astype(np.int64)


def ddim_sample(
    model: Union[UNetParams, Predictor],
    cond: np.ndarray,
    sched: NoiseSchedule,
    num_steps: int = 50,
    eta: float = 0.0,
    seed=0,
    state_channels: int | None = None,
) -> np.ndarray:
    """Denoise from a seeded Gaussian draw to a clamped state in [-1, 1].

    With ``eta == 0`` no noise is injected after the initial draw, so the
    result is a pure function of (model, cond, seed, num_steps). ``seed`` may
    also be a list with one entry per batch element, in which case every
    sample gets its own independent noise stream.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    steps = ddim_timesteps(sched.T, num_steps)
    cond = np.asarray(cond)
    squeeze = cond.ndim == 3
    if squeeze:
        cond = cond[None]
    if state_channels is None:
        state_channels = model.config.out_channels if isinstance(model, UNetParams) else 4
    n, _, h, w = cond.shape
    if isinstance(seed, (list, tuple)):
        if len(seed) != n:
            raise ValueError(f"got {len(seed)} seeds for a batch of {n}")
        rngs = [np.random.default_rng(s) for s in seed]
    else:
        rngs = [np.random.default_rng(seed)]

    def draw():
        if len(rngs) == 1:
            return rngs[0].standard_normal((n, state_channels, h, w))
        return np.stack([r.standard_normal((state_channels, h, w)) for r in rngs])

    x = draw()
    x0_hat = x
    for i, t in enumerate(steps):
        ab = sched.alpha_bar[t]
        ab_prev = sched.alpha_bar[steps[i + 1]] if i + 1 < len(steps) else 1.0
        eps_hat = np.asarray(model(x, cond, np.full(n, t)), dtype=np.float64)
        x0_hat = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)) if ab_prev < 1.0 else 0.0
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
        if sigma > 0:
            x = x + sigma * draw()
    out = np.clip(x, -1.0, 1.0)
    return out[0] if squeeze else out


def composite(generated: np.ndarray, keep_mask: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Take ``original`` where keep_mask is 1 and ``generated`` elsewhere."""
    keep = np.asarray(keep_mask)
    if not np.all((keep == 0) | (keep == 1)):
        raise ValueError("keep_mask must be binary {0, 1}")
    generated = np.asarray(generated)
    original = np.asarray(original)
    if generated.shape != original.shape:
        raise ValueError(f"generated {generated.shape} and original {original.shape} differ")
    return np.where(keep.astype(bool), original, generated)

"""End-to-end workflows: dataset generation, training, evaluation, ablation
and gradient verification. The CLI is a thin shell over these functions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .config import RunConfig
from .diffusion import training_loss
from .metrics import EvalReport, mask_iou, preservation_check, psnr, quantize, ssim
from .nnet import UNetConfig, UNetParams, adam_step, init_params, load_checkpoint, read_checkpoint_meta, save_checkpoint, unet_forward
from .synthdata import TryOnSample, gen_sample, read_dataset, render, write_dataset
from .tensor import (
    Tensor,
    avgpool2x,
    backward,
    capture_attention,
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
from .tryon import (
    InpaintingMask,
    bbox_to_mask,
    build_cond,
    build_state,
    parse_to_mask,
    signed_distance,
    two_stage_tryon_batch,
    augment_mask,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.tpdc"
LOSS_LOG_NAME = "loss.log"
REPORT_NAME = "report.json"


class RunError(RuntimeError):
    """Incompatible artifacts or unusable inputs."""


class ConfigHashMismatch(RunError):
    pass


# ---- dataset --------------------------------------------------------------

def generate_dataset(cfg: RunConfig, out_dir) -> dict:
    """Render ``num_samples`` training plus ``num_heldout`` held-out samples."""
    d = cfg.dataset
    total = d.num_samples + d.num_heldout
    if total == 0:
        raise RunError("empty dataset: num_samples + num_heldout is 0")
    gen = d.generator()
    samples = [gen_sample(d.seed + i, gen) for i in range(total)]
    splits = ["train"] * d.num_samples + ["heldout"] * d.num_heldout
    return write_dataset(samples, out_dir, gen, splits)


def load_split(cfg: RunConfig, data_dir, split: str) -> list[TryOnSample]:
    samples, manifest = read_dataset(data_dir, cfg.dataset.generator())
    chosen = [s for s, e in zip(samples, manifest["samples"]) if e["split"] == split]
    if not chosen:
        raise RunError(f"dataset {data_dir} has no {split!r} samples")
    return chosen


# ---- training -------------------------------------------------------------

@dataclass
class _Prepared:
    """Per-sample tensors that do not change between steps."""

    state0: np.ndarray
    sdfs: tuple
    parse: InpaintingMask
    bbox: InpaintingMask
    sample: TryOnSample


def _prepare(mode: str, samples: Sequence[TryOnSample]) -> list[_Prepared]:
    out = []
    for s in samples:
        M, b = parse_to_mask(s.parse_mask), bbox_to_mask(s.bbox)
        out.append(_Prepared(
            state0=build_state(mode, s.person, s.garment, s.parse_mask, s.garment_silhouette),
            sdfs=(signed_distance(M.inpaint), signed_distance(b.inpaint)),
            parse=M,
            bbox=b,
            sample=s,
        ))
    return out


def make_batch(cfg: RunConfig, prepared: Sequence[_Prepared], step: int):
    """Draw (sample, t, lambda, eps) for ``step`` from its own generator.

    Keying the generator on (seed, step) makes each step independent of how
    many steps ran before it in this process, which is what lets a resumed
    run continue the exact same trajectory.
    """
    tc = cfg.training
    rng = np.random.default_rng([tc.seed, step])
    b = tc.batch_size
    idx = rng.integers(0, len(prepared), size=b)
    t = rng.integers(0, cfg.schedule.T, size=b)
    lam = rng.uniform(0.0, 1.0, size=b)
    state0 = np.stack([prepared[i].state0 for i in idx])
    eps = rng.standard_normal(state0.shape).astype(np.float32)
    conds = []
    for i, l in zip(idx, lam):
        p = prepared[i]
        c_m = augment_mask(p.parse, p.bbox, float(l), _sdfs=p.sdfs)
        s = p.sample
        conds.append(build_cond(cfg.mode, s.person, s.garment, c_m.keep, s.pose, s.dense))
    return state0, np.stack(conds), t, eps


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.model_hash(), "mode": cfg.mode}


def check_compatible(cfg: RunConfig, ckpt_path) -> None:
    meta = read_checkpoint_meta(ckpt_path)
    want = cfg.model_hash()
    got = meta.get("config_hash")
    if got != want:
        raise ConfigHashMismatch(
            f"checkpoint {ckpt_path} was trained with config {str(got)[:12]}, current config is {want[:12]}"
        )


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.is_file():
        return []
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        step = int(line.split("\t", 1)[0])
        if step > upto:
            break
        keep.append(line + "\n")
    return keep


def train(
    cfg: RunConfig,
    data_dir,
    out_dir,
    resume: bool = False,
    samples: Optional[Sequence[TryOnSample]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
    max_steps: Optional[int] = None,
) -> UNetParams:
    """Train until ``cfg.training.steps`` optimiser steps have been taken.

    Writes ``loss.log`` (``step<TAB>loss``) and ``checkpoint.tpdc`` under
    ``out_dir``. ``max_steps`` stops early without a final checkpoint, which
    simulates an interrupted run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    log_path = out / LOSS_LOG_NAME
    if samples is None:
        samples = load_split(cfg, data_dir, "train")
    prepared = _prepare(cfg.mode, samples)
    tc = cfg.training
    sched = cfg.noise_schedule()

    if resume and ckpt.is_file():
        check_compatible(cfg, ckpt)
        params = load_checkpoint(ckpt)
        lines = _read_log(log_path, params.step)
    else:
        params = init_params(cfg.unet_config(), seed=tc.seed)
        lines = []
    log_path.write_text("".join(lines), encoding="utf-8")

    with open(log_path, "a", encoding="utf-8", buffering=1) as fh:
        while params.step < tc.steps:
            if max_steps is not None and params.step >= max_steps:
                return params
            step = params.step + 1
            state0, cond, t, eps = make_batch(cfg, prepared, step)
            loss = training_loss(params, state0, cond, t, eps, sched)
            backward(loss)
            adam_step(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
            value = loss.item()
            fh.write(f"{step}\t{value:.8g}\n")
            if on_step is not None:
                on_step(step, value)
            if step % tc.checkpoint_interval == 0 and step < tc.steps:
                fh.flush()
                save_checkpoint(params, ckpt, _meta(cfg))
    save_checkpoint(params, ckpt, _meta(cfg))
    return params


def read_loss_log(path) -> np.ndarray:
    """(steps, 2) array of (step, loss)."""
    rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64).reshape(-1, 2)


# ---- evaluation -----------------------------------------------------------

def _u8_png(arr: np.ndarray, path: Path) -> None:
    u8 = quantize(arr)
    if u8.ndim == 3 and u8.shape[0] == 1:
        u8 = u8[0]
    if u8.ndim == 3:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        Image.fromarray(u8, mode="L").save(path, format="PNG")


def _grid(panels: Sequence[np.ndarray]) -> np.ndarray:
    rgb = [np.repeat(p, 3, axis=0) if p.shape[0] == 1 else p for p in panels]
    h = rgb[0].shape[1]
    sep = np.ones((3, h, 1), dtype=np.float32)
    parts = []
    for p in rgb:
        parts += [p, sep]
    return np.concatenate(parts[:-1], axis=2)


def evaluate(
    cfg: RunConfig,
    params: UNetParams,
    samples: Sequence[TryOnSample],
    paired: bool = True,
    out_dir=None,
    label: str = "",
) -> EvalReport:
    """Two-stage try-on over ``samples`` with metrics against rendered ground truth.

    Unpaired evaluation dresses sample i in the garment of sample i+1 (mod N);
    its ground truth is re-rendered from the two generator seeds. Output images
    are quantised to 8 bits before scoring, so the written PNGs reproduce the
    reported numbers exactly.
    """
    n = len(samples)
    gen_cfg = cfg.dataset.generator()
    garments_from = [i if paired else (i + 1) % n for i in range(n)]
    if paired:
        truths = list(samples)
    else:
        truths = [render(samples[i].seed, samples[j].garment_seed, gen_cfg) for i, j in enumerate(garments_from)]
    results = two_stage_tryon_batch(
        params,
        [s.person for s in samples],
        [samples[j].garment for j in garments_from],
        [s.parse_mask for s in samples],
        [s.bbox for s in samples],
        [s.pose for s in samples],
        [s.dense for s in samples],
        cfg.noise_schedule(),
        cfg.sampler,
        cfg.mode,
    )
    report = EvalReport(config_hash=cfg.model_hash(), label=label or cfg.mode)
    report.extra["paired"] = bool(paired)
    report.extra["training_steps"] = int(params.step)
    outp = Path(out_dir) if out_dir is not None else None
    if outp is not None:
        outp.mkdir(parents=True, exist_ok=True)
    for i, (s, r, gt) in enumerate(zip(samples, results, truths)):
        image = quantize(r.image).astype(np.float32) / 255.0
        pred_area = r.stage1_mask.inpaint.astype(np.float32)
        report.add(
            ssim(image, gt.person),
            psnr(image, gt.person),
            mask_iou(pred_area, gt.parse_mask[0]),
            preservation_check(image, s.person, r.final_mask.keep),
        )
        if outp is not None:
            _u8_png(image, outp / f"{i:05d}_tryon.png")
            _u8_png(pred_area, outp / f"{i:05d}_stage1_mask.png")
            panels = [s.person, samples[garments_from[i]].garment, pred_area[None], r.coarse, image, gt.person]
            _u8_png(_grid(panels), outp / f"{i:05d}_grid.png")
    if outp is not None:
        (outp / REPORT_NAME).write_text(report.to_json() + "\n", encoding="utf-8")
    return report


def infer(cfg: RunConfig, ckpt_path, data_dir, out_dir, paired: bool = False, split: str = "train") -> EvalReport:
    check_compatible(cfg, ckpt_path)
    params = load_checkpoint(ckpt_path)
    samples = load_split(cfg, data_dir, split)
    return evaluate(cfg, params, samples, paired=paired, out_dir=out_dir)


# ---- ablation -------------------------------------------------------------

def ablate(cfg: RunConfig, data_dir, out_dir) -> dict:
    """Train and score both conditioning modes under one budget and seed.

    Scoring is paired reconstruction on the held-out split.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_split(cfg, data_dir, "train")
    heldout = load_split(cfg, data_dir, "heldout")
    rows = []
    for mode in ("satt", "channel"):
        mcfg = cfg.with_mode(mode)
        params = train(mcfg, data_dir, out / mode, samples=train_set)
        rep = evaluate(mcfg, params, heldout, paired=True, label=mode)
        rows.append({
            "mode": mode,
            "config_hash": mcfg.model_hash(),
            "training_steps": int(params.step),
            "seed": cfg.training.seed,
            "samples": rep.sample_count,
            "ssim": rep.mean_ssim,
            "psnr": rep.mean_psnr,
            "mask_iou": rep.mean_mask_iou,
            "violations": rep.total_violations,
        })
    report = {"config_hash": cfg.model_hash(), "split": "heldout", "rows": rows}
    (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


# ---- diagnostics ----------------------------------------------------------

def garment_attention_mass(cfg: RunConfig, params: UNetParams, sample: TryOnSample, t: int) -> float:
    """Share of attention that masked person tokens put on garment-half tokens.

    Only meaningful for the stacked layout; averaged over every attention
    call whose token grid still resolves the person/garment split.
    """
    if cfg.mode != "satt":
        raise ValueError("attention mass diagnostic needs the satt layout")
    c_m = bbox_to_mask(sample.bbox)
    cond = build_cond("satt", sample.person, sample.garment, c_m.keep, sample.pose, sample.dense)[None]
    state0 = build_state("satt", sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette)[None]
    eps = np.random.default_rng([cfg.sampler.seed, t]).standard_normal(state0.shape)
    ab = cfg.noise_schedule().alpha_bar[t]
    x_t = np.sqrt(ab) * state0 + np.sqrt(1 - ab) * eps
    hh, ww = state0.shape[-2:]
    with no_grad(), capture_attention() as probs:
        unet_forward(params, x_t, cond, t)
    masses = []
    for p in probs:
        tokens = p.shape[-1]
        f = int(round(np.sqrt(hh * ww / tokens)))
        gh, gw = hh // f, ww // f
        if gh * gw != tokens or gh % 2:
            continue
        inpaint = c_m.inpaint.reshape(gh // 2, f, gw, f).any(axis=(1, 3))
        query = np.flatnonzero(np.concatenate([inpaint.ravel(), np.zeros(gh // 2 * gw, bool)]))
        if query.size == 0:
            continue
        garment_keys = slice(gh // 2 * gw, tokens)
        masses.append(p[..., query, garment_keys].sum(axis=-1).mean())
    return float(np.mean(masses)) if masses else float("nan")


# ---- gradient verification ------------------------------------------------

GRAD_THRESHOLD = 1e-4
GRAD_FAMILIES = (
    "conv2d",
    "linear",
    "group_norm",
    "silu",
    "softmax_attention",
    "avgpool2x",
    "nearest_upsample2x",
    "add_mul",
    "unet",
)


def _family_cases(rng: np.random.Generator):
    def r(*shape):
        return Tensor(rng.standard_normal(shape))

    def weighted(out: Tensor, w: np.ndarray) -> Tensor:
        return (out * Tensor(w)).sum()

    w_conv = rng.standard_normal((2, 4, 5, 5))
    yield "conv2d", lambda x, k, b: weighted(conv2d(x, k, b, stride=1, pad=1), w_conv), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)]
    w_conv2 = rng.standard_normal((1, 2, 3, 3))
    yield "conv2d", lambda x, k, b: weighted(conv2d(x, k, b, stride=2, pad=1), w_conv2), [r(1, 2, 5, 5), r(2, 2, 3, 3), r(2)]
    w_lin = rng.standard_normal((3, 5))
    yield "linear", lambda x, W, b: weighted(linear(x, W, b), w_lin), [r(3, 4), r(5, 4), r(5)]
    w_gn = rng.standard_normal((2, 4, 3, 3))
    yield "group_norm", lambda x, g, b: weighted(group_norm(x, 2, g, b), w_gn), [r(2, 4, 3, 3), r(4), r(4)]
    w_silu = rng.standard_normal((3, 4))
    yield "silu", lambda x: weighted(silu(x), w_silu), [r(3, 4)]
    w_att = rng.standard_normal((2, 5, 3))
    yield "softmax_attention", lambda q, k, v: weighted(softmax_attention(q, k, v), w_att), [r(2, 5, 3), r(2, 5, 3), r(2, 5, 3)]
    w_pool = rng.standard_normal((1, 2, 2, 3))
    yield "avgpool2x", lambda x: weighted(avgpool2x(x), w_pool), [r(1, 2, 4, 6)]
    w_up = rng.standard_normal((1, 2, 4, 6))
    yield "nearest_upsample2x", lambda x: weighted(nearest_upsample2x(x), w_up), [r(1, 2, 2, 3)]
    w_am = rng.standard_normal((3, 4))
    yield "add_mul", lambda a, b: weighted(mul(a + b, a), w_am), [r(3, 4), r(1, 4)]


def tiny_unet_config() -> UNetConfig:
    """Two-level UNet used for whole-model gradient verification (16x8 canvas)."""
    return UNetConfig(
        in_channels=14, out_channels=4, base_channels=8, channel_mults=(1, 2), attention_levels=(1,),
        num_res_blocks=1, time_embed_dim=16, num_heads=2, norm_groups=4,
    )


def grad_check(seed: int = 0, num_coords: int = 50, threshold: float = GRAD_THRESHOLD) -> dict:
    """Finite-difference check of every layer family plus the tiny UNet, in float64.

    Returns ``{"families": {name: max_rel_err}, "failed": [...], "threshold": t}``.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {name: 0.0 for name in GRAD_FAMILIES}
    with default_dtype(np.float64):
        for name, fn, inputs in _family_cases(rng):
            worst[name] = max(worst[name], finite_diff_check(fn, inputs))

        ucfg = tiny_unet_config()
        params = init_params(ucfg, seed=seed, dtype=np.float64, zero_init=False)
        state = rng.standard_normal((1, 4, 16, 8))
        cond = rng.standard_normal((1, 10, 16, 8))
        target = rng.standard_normal((1, 4, 16, 8))
        names = list(params.tensors)

        def unet_loss(*tensors):
            for k, t in zip(names, tensors):
                params.tensors[k] = t
            d = unet_forward(params, state, cond, 37) - Tensor(target)
            return (d * d).mean()

        worst["unet"] = finite_diff_check(
            unet_loss, [params[k] for k in names], num_coords=num_coords, rng=np.random.default_rng([seed, 1])
        )
    failed = [k for k, v in worst.items() if not v <= threshold]
    return {"families": worst, "failed": failed, "threshold": threshold}

"""Canvas assembly, mask augmentation and the two-stage try-on pipeline.

Two conditioning topologies are supported:

``satt``
    Person canvas on top, garment canvas below (rows ``[0, H)`` and
    ``[H, 2H)``). The garment is ordinary spatial context, so the UNet's
    self-attention can move texture from the lower half into the masked
    region of the upper half.
``channel``
    Ablation: the garment RGB is stacked as three extra conditioning
    channels on the H x W person canvas.

Masks use the keep convention throughout: 1 = known pixel, 0 = inpaint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_dilation, distance_transform_edt

from .diffusion import NoiseSchedule, composite, ddim_sample
from .synthdata import TryOnSample

MODES = ("satt", "channel")
STATE_CHANNELS = 4
COND_CHANNELS = {"satt": 10, "channel": 13}


def normalize(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return (np.asarray(x, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class InpaintingMask:
    keep: np.ndarray  # (1, H, W) float32 in {0, 1}
    provenance: str = "parse"

    def __post_init__(self):
        k = np.asarray(self.keep, dtype=np.float32)
        if k.ndim == 2:
            k = k[None]
        if not np.all((k == 0) | (k == 1)):
            raise ValueError("InpaintingMask must be binary")
        object.__setattr__(self, "keep", k)

    @classmethod
    def from_region(cls, region: np.ndarray, provenance: str) -> "InpaintingMask":
        """Build from an inpaint region (True/1 = pixel to synthesise)."""
        return cls((~np.asarray(region).astype(bool)).astype(np.float32), provenance)

    @property
    def inpaint(self) -> np.ndarray:
        """Boolean (H, W) region to synthesise."""
        return self.keep[0] == 0

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.inpaint))


@dataclass
class CanvasBundle:
    state0: np.ndarray  # diffused target: RGB + mask channel
    cond: np.ndarray  # conditioning channels
    split: int  # first garment row (satt); equals H for the channel layout
    mode: str = "satt"

    @property
    def person_rows(self) -> slice:
        return slice(0, self.split)


# ---- assembly -------------------------------------------------------------

def _check_pair(person: np.ndarray, garment: np.ndarray) -> None:
    if person.shape[-1] != garment.shape[-1]:
        raise ValueError(f"width mismatch: person {person.shape[-1]} vs garment {garment.shape[-1]}")
    if person.shape[-2] != garment.shape[-2]:
        raise ValueError(f"height mismatch: person {person.shape[-2]} vs garment {garment.shape[-2]}")


def person_cond(person, keep, pose, dense) -> np.ndarray:
    """(10, H, W): masked person, keep mask, pose map, dense pose."""
    keep = np.asarray(keep, dtype=np.float32).reshape(1, *person.shape[-2:])
    return np.concatenate([keep * normalize(person), keep, normalize(pose), normalize(dense)], axis=0)


def build_cond(mode: str, person, garment, keep, pose, dense) -> np.ndarray:
    _check_pair(person, garment)
    pc = person_cond(person, keep, pose, dense)
    if mode == "satt":
        h, w = garment.shape[-2:]
        gc = np.zeros((10, h, w), dtype=np.float32)
        gc[0:3] = normalize(garment)
        gc[3] = 1.0
        return np.concatenate([pc, gc], axis=1)
    if mode == "channel":
        return np.concatenate([pc, normalize(garment)], axis=0)
    raise ValueError(f"unknown conditioning mode {mode!r}")


def build_state(mode: str, person, garment, parse_mask, silhouette) -> np.ndarray:
    person_state = np.concatenate([normalize(person), normalize(parse_mask)], axis=0)
    if mode == "satt":
        garment_state = np.concatenate([normalize(garment), normalize(silhouette)], axis=0)
        return np.concatenate([person_state, garment_state], axis=1)
    if mode == "channel":
        return person_state
    raise ValueError(f"unknown conditioning mode {mode!r}")


def assemble(mode: str, sample: TryOnSample, c_m: InpaintingMask) -> CanvasBundle:
    _check_pair(sample.person, sample.garment)
    h = sample.person.shape[-2]
    return CanvasBundle(
        state0=build_state(mode, sample.person, sample.garment, sample.parse_mask, sample.garment_silhouette),
        cond=build_cond(mode, sample.person, sample.garment, c_m.keep, sample.pose, sample.dense),
        split=h,
        mode=mode,
    )


def assemble_satt(sample: TryOnSample, c_m: InpaintingMask) -> CanvasBundle:
    """Stack person over garment into a (.., 2H, W) canvas."""
    return assemble("satt", sample, c_m)


def assemble_channel_concat(sample: TryOnSample, c_m: InpaintingMask) -> CanvasBundle:
    """Person canvas only; garment appended as 3 conditioning channels."""
    return assemble("channel", sample, c_m)


# ---- masks ----------------------------------------------------------------

def signed_distance(region: np.ndarray) -> np.ndarray:
    """Euclidean SDF of a pixel region: negative inside, positive outside."""
    region = np.asarray(region, dtype=bool)
    big = float(sum(region.shape))
    if region.all():
        return np.full(region.shape, -big)
    if not region.any():
        return np.full(region.shape, big)
    return np.where(region, -distance_transform_edt(region), distance_transform_edt(~region))


def blend_regions(sdf_a: np.ndarray, sdf_b: np.ndarray, lam: float) -> np.ndarray:
    return (1.0 - lam) * sdf_a + lam * sdf_b < 0


def augment_mask(M_s: InpaintingMask, b_s: InpaintingMask, lam: float, _sdfs=None) -> InpaintingMask:
    """Interpolate the inpaint region between the parse area and the bbox.

    The two regions' signed distance fields are blended linearly; the zero
    sublevel set is then clipped to the box and forced to contain the parse
    area, so ``lam = 0`` and ``lam = 1`` reproduce the endpoints exactly.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    inner, outer = M_s.inpaint, b_s.inpaint
    if inner.shape != outer.shape:
        raise ValueError("M_s and b_s shapes differ")
    if np.any(inner & ~outer):
        raise ValueError("M_s inpaint region is not contained in b_s")
    sdf_in, sdf_out = _sdfs if _sdfs is not None else (signed_distance(inner), signed_distance(outer))
    region = (blend_regions(sdf_in, sdf_out, lam) & outer) | inner
    return InpaintingMask.from_region(region, f"augmented({lam})")


def union_mask(m0_s1: InpaintingMask, M_s: InpaintingMask) -> InpaintingMask:
    """Inpaint wherever either mask inpaints (keep masks multiply)."""
    if m0_s1.keep.shape != M_s.keep.shape:
        raise ValueError(f"mask shapes differ: {m0_s1.keep.shape} vs {M_s.keep.shape}")
    return InpaintingMask(m0_s1.keep * M_s.keep, "union")


def parse_to_mask(parse: np.ndarray) -> InpaintingMask:
    return InpaintingMask.from_region(np.asarray(parse)[0] > 0.5, "parse")


def bbox_to_mask(bbox: np.ndarray) -> InpaintingMask:
    return InpaintingMask.from_region(np.asarray(bbox)[0] > 0.5, "bbox")


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


# ---- inference ------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    seed: int = 0
    threshold: float = 0.5
    dilate_radius: int = 0


class TryOnResult(NamedTuple):
    image: np.ndarray  # (3, H, W) in [0, 1]
    stage1_mask: InpaintingMask  # keep mask whose inpaint region is the predicted garment area
    final_mask: InpaintingMask  # keep mask used for stage 2
    coarse: np.ndarray  # stage-1 person RGB, (3, H, W)


def _person_half(mode: str, state: np.ndarray, h: int) -> np.ndarray:
    return state[..., :h, :] if mode == "satt" else state


def _ddim_per_sample(model, cond, sched, sampler: SamplerConfig, offset: int, indices: Sequence[int]):
    seeds = [[int(sampler.seed), offset, int(i)] for i in indices]
    return ddim_sample(model, cond, sched, num_steps=sampler.num_steps, eta=sampler.eta, seed=seeds,
                       state_channels=STATE_CHANNELS)


def stage1_predict_mask_batch(model, persons, garments, bboxes, poses, denses, sched, sampler, mode="satt",
                              indices: Optional[Sequence[int]] = None):
    """Predict the new garment's area under a bbox inpainting mask, for a batch.

    Returns (list of InpaintingMask, coarse person RGB in [0, 1]).
    """
    n = len(persons)
    indices = list(range(n)) if indices is None else list(indices)
    keeps = [bbox_to_mask(b).keep for b in bboxes]
    cond = np.stack([build_cond(mode, p, g, k, po, d) for p, g, k, po, d in zip(persons, garments, keeps, poses, denses)])
    out = _ddim_per_sample(model, cond, sched, sampler, 1, indices)
    h = persons[0].shape[-2]
    person_state = _person_half(mode, out, h)
    masks = []
    for s in person_state:
        region = (s[3] + 1.0) * 0.5 > sampler.threshold
        if sampler.dilate_radius > 0:
            region = binary_dilation(region, structure=_disk(sampler.dilate_radius))
        masks.append(InpaintingMask.from_region(region, "predicted_stage1"))
    return masks, denormalize(person_state[:, :3])


def stage1_predict_mask(model, S, C_star, b_s, pose, dense, sched: NoiseSchedule, sampler: SamplerConfig,
                        mode: str = "satt") -> InpaintingMask:
    masks, _ = stage1_predict_mask_batch(model, [S], [C_star], [b_s], [pose], [dense], sched, sampler, mode)
    return masks[0]


def two_stage_tryon_batch(model, persons, garments, parses, bboxes, poses, denses, sched, sampler, mode="satt",
                          indices: Optional[Sequence[int]] = None) -> list[TryOnResult]:
    """Stage 1 predicts the garment area, stage 2 inpaints under its union with the parse area."""
    n = len(persons)
    indices = list(range(n)) if indices is None else list(indices)
    stage1, coarse = stage1_predict_mask_batch(model, persons, garments, bboxes, poses, denses, sched, sampler,
                                               mode, indices)
    finals = [union_mask(m, parse_to_mask(p)) for m, p in zip(stage1, parses)]
    cond = np.stack([build_cond(mode, p, g, f.keep, po, d)
                     for p, g, f, po, d in zip(persons, garments, finals, poses, denses)])
    out = _ddim_per_sample(model, cond, sched, sampler, 2, indices)
    h = persons[0].shape[-2]
    gen = denormalize(_person_half(mode, out, h)[:, :3])
    results = []
    for i in range(n):
        # garment half of the canvas is discarded; only the person is kept
        image = composite(gen[i], finals[i].keep, np.asarray(persons[i], dtype=np.float32))
        results.append(TryOnResult(image, stage1[i], finals[i], coarse[i]))
    return results


def two_stage_tryon(model, S, C_star, M_s, b_s, pose, dense, sched: NoiseSchedule, sampler: SamplerConfig,
                    mode: str = "satt") -> TryOnResult:
    """Try garment ``C_star`` on person ``S``; ``M_s``/``b_s`` are (1, H, W) region planes."""
    return two_stage_tryon_batch(model, [S], [C_star], [M_s], [b_s], [pose], [dense], sched, sampler, mode)[0]

"""Paired-setting image metrics and preservation checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_IDENTICAL = math.inf


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # mode="reflect" mirrors about the edge, repeating the border pixel
    out = correlate1d(img, g, axis=-2, mode="reflect")
    return correlate1d(out, g, axis=-1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all pixels, per channel, then averaged over channels.

    Accepts (C, H, W) or (H, W) images with unit dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    var_a = _blur(a * a, g) - mu_a**2
    var_b = _blur(b * b, g) - mu_b**2
    cov = _blur(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    per_channel = (num / den).mean(axis=(-2, -1))
    return float(per_channel.mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE); identical inputs give +inf."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: shape mismatch {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask_iou: masks must be binary")
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def preservation_check(result: np.ndarray, original: np.ndarray, keep_mask: np.ndarray) -> int:
    """Number of kept pixels whose 8-bit colour differs from the original."""
    result = np.asarray(result)
    original = np.asarray(original)
    if result.shape != original.shape:
        raise ValueError(f"preservation_check: shape mismatch {result.shape} vs {original.shape}")
    keep = np.asarray(keep_mask).reshape(result.shape[-2:]).astype(bool)
    differs = np.any(quantize(result) != quantize(original), axis=0) if result.ndim == 3 else quantize(result) != quantize(original)
    return int(np.count_nonzero(differs & keep))


@dataclass
class EvalReport:
    """Per-sample metrics plus their means; serialises with stable key order."""

    config_hash: str
    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    mask_iou: list[float] = field(default_factory=list)
    violations: list[int] = field(default_factory=list)
    label: str = ""
    extra: dict = field(default_factory=dict)

    def add(self, ssim_v: float, psnr_v: float, iou_v: Optional[float], violations: int) -> None:
        self.ssim.append(float(ssim_v))
        self.psnr.append(float(psnr_v))
        if iou_v is not None:
            self.mask_iou.append(float(iou_v))
        self.violations.append(int(violations))

    @property
    def sample_count(self) -> int:
        return len(self.ssim)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_mask_iou(self) -> float:
        return float(np.mean(self.mask_iou)) if self.mask_iou else float("nan")

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations))

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "label": self.label,
            "sample_count": self.sample_count,
            "mean": {
                "ssim": self.mean_ssim,
                "psnr": self.mean_psnr,
                "mask_iou": self.mean_mask_iou,
                "violations": self.total_violations,
            },
            "per_sample": {
                "ssim": self.ssim,
                "psnr": self.psnr,
                "mask_iou": self.mask_iou,
                "violations": self.violations,
            },
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

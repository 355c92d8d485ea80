"""PSNR / SSIM and the evaluation report (RAW and RGB domains)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

IDENTICAL_PSNR = math.inf


class MetricError(ValueError):
    pass


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return IDENTICAL_PSNR
    return float(10 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=-1, mode="constant"), win, axis=-2, mode="constant")
    return out[..., r:-r or None, r:-r or None]


def ssim(a, b, window: int = 11, sigma: float = 1.5, K1: float = 0.01, K2: float = 0.03, peak: float = 1.0) -> float:
    """Mean Gaussian-windowed SSIM over valid windows.

    Images are (H, W) or (C, H, W); channels are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise MetricError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    win = _gaussian_window(window, sigma)
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a ** 2
    sbb = _filter_valid(b * b, win) - mu_b ** 2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


@dataclass
class ImageMetrics:
    name: str
    raw_psnr: float
    raw_ssim: float
    rgb_psnr: float
    rgb_ssim: float
    input_raw_psnr: float = float("nan")
    input_raw_ssim: float = float("nan")
    input_rgb_psnr: float = float("nan")
    input_rgb_ssim: float = float("nan")
    model_index: Optional[int] = None


REPORT_COLUMNS = ("raw_psnr", "raw_ssim", "rgb_psnr", "rgb_ssim", "gmacs_per_mp")


@dataclass
class MetricReport:
    raw_psnr: float
    raw_ssim: float
    rgb_psnr: float
    rgb_ssim: float
    gmacs_per_mp: float
    input_raw_psnr: float = float("nan")
    input_raw_ssim: float = float("nan")
    input_rgb_psnr: float = float("nan")
    input_rgb_ssim: float = float("nan")
    per_image: list[ImageMetrics] = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows: list[ImageMetrics], gmacs_per_mp: float) -> "MetricReport":
        if not rows:
            raise MetricError("cannot build a report from an empty evaluation set")
        mean = lambda key: _mean([getattr(r, key) for r in rows])  # noqa: E731
        return cls(mean("raw_psnr"), mean("raw_ssim"), mean("rgb_psnr"), mean("rgb_ssim"), gmacs_per_mp,
                   mean("input_raw_psnr"), mean("input_raw_ssim"), mean("input_rgb_psnr"),
                   mean("input_rgb_ssim"), rows)

    def to_json(self) -> dict:
        d = asdict(self)
        return _json_safe(d)

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path:
            with open(json_path, "w") as f:
                json.dump(self.to_json(), f, indent=2, sort_keys=True)
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(("name",) + REPORT_COLUMNS)
                for r in self.per_image:
                    w.writerow((r.name, _fmt(r.raw_psnr), _fmt(r.raw_ssim), _fmt(r.rgb_psnr), _fmt(r.rgb_ssim),
                                _fmt(self.gmacs_per_mp)))
                w.writerow(("mean",) + tuple(_fmt(getattr(self, c)) for c in REPORT_COLUMNS))


def _mean(values: list[float]) -> float:
    # an identical pair (inf) dominates the mean, which is the honest result
    return float(np.mean(values)) if values else float("nan")


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else f"{v:.6f}"


def _json_safe(obj):
    if isinstance(obj, float) and (math.isinf(obj) or math.isnan(obj)):
        return "inf" if obj == math.inf else ("-inf" if obj == -math.inf else None)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj

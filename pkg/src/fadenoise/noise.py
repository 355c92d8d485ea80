"""Heteroscedastic Gaussian sensor noise: synthesis, calibration, k-sigma.

Per-pixel model: ``y ~ N(x, a*x + b)`` followed by clipping to [0, 1].
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .bayer import BayerImage
from .tensor import Tensor, fdt
from .tensor import ops

B_FLOOR = 1e-12
A_FLOOR = 1e-12
MID_RANGE = (0.1, 0.9)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"noise params must be finite, got a={self.a}, b={self.b}")
        if self.a <= 0:
            raise ValueError(f"a must be > 0, got {self.a}")
        if self.b < 0:
            raise ValueError(f"b must be >= 0, got {self.b}")


@dataclass
class SensorNoiseModel:
    """Per-sensor calibration.

    ``log_a_range`` and ``logb_line`` work in natural-log space:
    ``log b = slope * log a + intercept``. ``gain_to_a`` holds (slope,
    intercept) and ``gain_to_b`` holds quadratic coefficients (c2, c1, c0) in
    ``numpy.polyval`` order.
    """

    log_a_range: tuple[float, float]
    logb_line: tuple[float, float]
    gain_to_a: tuple[float, float] = (0.0, 0.0)
    gain_to_b: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gain_range: tuple[float, float] = (1.0, 64.0)

    def __post_init__(self):
        lo, hi = self.log_a_range
        if not lo <= hi:
            raise ValueError(f"log_a_range must be ascending, got {self.log_a_range}")

    @classmethod
    def from_a_range(cls, a_min: float, a_max: float, logb_line=(2.0, 0.0), **kw) -> "SensorNoiseModel":
        if not 0 < a_min <= a_max:
            raise ValueError(f"need 0 < a_min <= a_max, got {a_min}, {a_max}")
        return cls((math.log(a_min), math.log(a_max)), tuple(logb_line), **kw)

    @property
    def a_min(self) -> float:
        return math.exp(self.log_a_range[0])

    @property
    def a_max(self) -> float:
        return math.exp(self.log_a_range[1])

    def with_a_range(self, a_min: float, a_max: float) -> "SensorNoiseModel":
        return SensorNoiseModel((math.log(a_min), math.log(a_max)), self.logb_line, self.gain_to_a,
                                self.gain_to_b, self.gain_range)

    def log_b(self, log_a: float) -> float:
        slope, intercept = self.logb_line
        return slope * log_a + intercept

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "SensorNoiseModel":
        return cls(
            tuple(d["log_a_range"]),
            tuple(d["logb_line"]),
            tuple(d.get("gain_to_a", (0.0, 0.0))),
            tuple(d.get("gain_to_b", (0.0, 0.0, 0.0))),
            tuple(d.get("gain_range", (1.0, 64.0))),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "SensorNoiseModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


# desk-scale default: log10 a in [-4, -2], log b = 1.5 log a + log 0.1
DEFAULT_LOGB_LINE = (1.5, math.log(0.1))


def default_sensor_model() -> SensorNoiseModel:
    return SensorNoiseModel.from_a_range(1e-4, 1e-2, DEFAULT_LOGB_LINE)


def sample_noise(clean: BayerImage | np.ndarray, p: NoiseParams, seed=None) -> BayerImage | np.ndarray:
    """Add N(0, a*x + b) noise per pixel and clip to [0, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = clean.plane if isinstance(clean, BayerImage) else np.asarray(clean)
    xd = x.astype(np.float64)
    var = p.a * xd + p.b
    if np.any(var < 0):
        raise ValueError("negative noise variance; clean signal must lie in [0, 1]")
    y = np.clip(xd + rng.standard_normal(xd.shape) * np.sqrt(var), 0.0, 1.0).astype(np.float32)
    if isinstance(clean, BayerImage):
        return replace(clean, plane=y, noise=p)
    return y


def fit_noise_params(patches: Sequence[tuple[np.ndarray, float]], mid_range=MID_RANGE) -> NoiseParams:
    """Weighted least-squares fit of ``variance = a * mean + b`` over patch stacks.

    Only stacks whose mean lies inside ``mid_range`` are used, where clipping
    barely biases the variance.
    """
    means, variances = [], []
    for samples, mu in patches:
        s = np.asarray(samples, dtype=np.float64).ravel()
        if mid_range[0] <= mu <= mid_range[1] and s.size > 1:
            means.append(mu)
            variances.append(np.mean((s - mu) ** 2))
    if len(means) < 2:
        raise CalibrationError(f"need at least 2 mid-range patch stacks, got {len(means)}")
    if len(set(means)) < 2:
        raise CalibrationError("patch stacks must have distinct means")
    design = np.stack([np.asarray(means), np.ones(len(means))], axis=1)
    var = np.asarray(variances)
    (a, b), *_ = np.linalg.lstsq(design, var, rcond=None)
    # a sample variance has spread proportional to the variance itself, so
    # reweight by the fitted variance (two passes are enough to settle)
    for _ in range(2):
        pred = design @ np.array([a, b])
        if not np.all(pred > 0):
            break
        w = 1.0 / pred
        (a, b), *_ = np.linalg.lstsq(design * w[:, None], var * w, rcond=None)
    if not a > A_FLOOR:
        raise CalibrationError(f"fitted signal-dependent coefficient a={a:.3g} is not positive")
    return NoiseParams(float(a), float(max(b, B_FLOOR)))


def calibrate(per_gain: Sequence[tuple[float, Sequence[tuple[np.ndarray, float]]]]) -> SensorNoiseModel:
    """Build a sensor model from patch stacks captured at several gains.

    Fits (a, b) per gain, then a linear gain->a, a quadratic gain->b and a
    log a -> log b line.
    """
    gains, fits = [], []
    for gain, patches in per_gain:
        fits.append(fit_noise_params(patches))
        gains.append(float(gain))
    if len(fits) < 3:
        raise CalibrationError(f"need fits at >= 3 gains for the regressions, got {len(fits)}")
    g = np.asarray(gains)
    a = np.array([f.a for f in fits])
    b = np.array([f.b for f in fits])
    la, lb = np.log(a), np.log(b)
    line = np.polyfit(la, lb, 1) if np.ptp(la) > 0 else np.array([0.0, lb.mean()])
    return SensorNoiseModel(
        log_a_range=(float(la.min()), float(la.max())),
        logb_line=(float(line[0]), float(line[1])),
        gain_to_a=tuple(float(c) for c in np.polyfit(g, a, 1)),
        gain_to_b=tuple(float(c) for c in np.polyfit(g, b, 2)),
        gain_range=(float(g.min()), float(g.max())),
    )


def load_calibration_dir(root) -> list[tuple[float, list[tuple[np.ndarray, float]]]]:
    """Read ``calibration.json`` plus FDT1 stack files from a calibration directory.

    Manifest schema: ``{"captures": [{"gain": g, "stacks": [{"file": f,
    "mean": m}, ...]}, ...]}``.
    """
    with open(os.path.join(root, "calibration.json")) as f:
        manifest = json.load(f)
    out = []
    for cap in manifest["captures"]:
        stacks = [(fdt.load(os.path.join(root, s["file"])), float(s["mean"])) for s in cap["stacks"]]
        out.append((float(cap["gain"]), stacks))
    return out


def synthesize_stacks(p: NoiseParams, means=(0.15, 0.3, 0.45, 0.6, 0.75), samples: int = 4096,
                      seed=None) -> list[tuple[np.ndarray, float]]:
    """Flat-field patch stacks at known means with noise drawn from ``p``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [(sample_noise(np.full(samples, m), p, rng), float(m)) for m in means]


def synthesize_calibration(gains=(1, 2, 4, 8, 16), a_per_gain: float = 2e-4, b_per_gain2: float = 1e-6,
                           seed=0, **kw) -> list[tuple[float, list[tuple[np.ndarray, float]]]]:
    """Calibration captures for a sensor with a = a_per_gain*g and b = b_per_gain2*g^2."""
    rng = np.random.default_rng(seed)
    return [(float(g), synthesize_stacks(NoiseParams(a_per_gain * g, b_per_gain2 * g * g), seed=rng, **kw))
            for g in gains]


def write_calibration_dir(root, per_gain) -> str:
    """Inverse of :func:`load_calibration_dir`."""
    os.makedirs(root, exist_ok=True)
    captures = []
    for i, (gain, stacks) in enumerate(per_gain):
        entries = []
        for j, (samples, mean) in enumerate(stacks):
            name = f"g{i:02d}_s{j:02d}.fdt"
            fdt.save(os.path.join(root, name), np.asarray(samples, dtype=np.float32))
            entries.append({"file": name, "mean": mean})
        captures.append({"gain": gain, "stacks": entries})
    path = os.path.join(root, "calibration.json")
    with open(path, "w") as f:
        json.dump({"captures": captures}, f, indent=2)
    return path


def sample_training_params(model: SensorNoiseModel, seed=None) -> NoiseParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = model.log_a_range
    log_a = lo if lo == hi else rng.uniform(lo, hi)
    return NoiseParams(math.exp(log_a), max(math.exp(model.log_b(log_a)), B_FLOOR))


def gain_to_params(model: SensorNoiseModel, gain: float) -> tuple[NoiseParams, bool]:
    """Predict (a, b) from capture gain.

    Returns the parameters and a flag that is True when ``gain`` lies outside
    the calibrated range (the regressions are then extrapolated).
    """
    if gain < 1:
        raise ValueError(f"gain must be >= 1, got {gain}")
    lo, hi = model.gain_range
    extrapolated = not lo <= gain <= hi
    if extrapolated:
        warnings.warn(f"gain {gain} outside calibrated range [{lo}, {hi}]; extrapolating", stacklevel=2)
    a = float(np.polyval(model.gain_to_a, gain))
    b = float(np.polyval(model.gain_to_b, gain))
    return NoiseParams(max(a, A_FLOOR), max(b, B_FLOOR)), extrapolated


def ksigma(x, p: NoiseParams):
    """Variance-stabilising affine map ``x / a + b / a**2``.

    Works on numpy arrays and on tensors (differentiably).
    """
    if p.a <= 0:
        raise ValueError("k-sigma needs a > 0")
    if isinstance(x, Tensor):
        return ops.add_const(ops.scale(x, 1.0 / p.a), p.b / p.a ** 2)
    return np.asarray(x) / p.a + p.b / p.a ** 2


def ksigma_inv(z, p: NoiseParams):
    if p.a <= 0:
        raise ValueError("k-sigma needs a > 0")
    if isinstance(z, Tensor):
        return ops.scale(ops.add_const(z, -p.b / p.a ** 2), p.a)
    return (np.asarray(z) - p.b / p.a ** 2) * p.a


def ksigma_batch(x: Tensor, params: Sequence[NoiseParams], inverse: bool = False) -> Tensor:
    """Per-sample k-sigma over a batched (N, C, H, W) tensor."""
    a = np.array([p.a for p in params], dtype=np.float64)[:, None, None, None]
    b = np.array([p.b for p in params], dtype=np.float64)[:, None, None, None]
    dt = x.dtype
    if inverse:
        return ops.scale(ops.add_const(x, np.broadcast_to(-b / a ** 2, x.shape).astype(dt)),
                         np.broadcast_to(a, x.shape).astype(dt))
    return ops.add_const(ops.scale(x, np.broadcast_to(1.0 / a, x.shape).astype(dt)),
                         np.broadcast_to(b / a ** 2, x.shape).astype(dt))

"""Noise Subrange Model Array: log-uniform partition of the noise range and
hard routing of images to the model trained on their subrange."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional


BOUNDARY_RTOL = 1e-12


class PartitionError(ValueError):
    pass


@dataclass
class SubrangePartition:
    n: int
    bounds: list[float]
    checkpoints: list[Optional[str]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.bounds) != self.n + 1:
            raise PartitionError(f"need n+1={self.n + 1} bounds, got {len(self.bounds)}")
        if any(b1 <= b0 for b0, b1 in zip(self.bounds, self.bounds[1:])):
            raise PartitionError("bounds must be strictly increasing")
        if not self.checkpoints:
            self.checkpoints = [None] * self.n

    @property
    def a_min(self) -> float:
        return self.bounds[0]

    @property
    def a_max(self) -> float:
        return self.bounds[-1]

    def subrange(self, i: int) -> tuple[float, float]:
        return self.bounds[i], self.bounds[i + 1]

    def to_json(self) -> dict:
        return {"range": [self.a_min, self.a_max], "n": self.n, "bounds": self.bounds,
                "checkpoints": self.checkpoints}

    @classmethod
    def from_json(cls, d: dict) -> "SubrangePartition":
        return cls(int(d["n"]), [float(b) for b in d["bounds"]], list(d.get("checkpoints") or []))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "SubrangePartition":
        with open(path) as f:
            part = cls.from_json(json.load(f))
        base = os.path.dirname(os.path.abspath(path))
        part.checkpoints = [c if c is None or os.path.isabs(c) else os.path.join(base, c) for c in part.checkpoints]
        return part


def partition(a_min: float, a_max: float, n: int) -> SubrangePartition:
    """Split [a_min, a_max] into n slices of equal width in log a.

    Slice i spans log a_min + (i/n)(log a_max - log a_min) to the same with
    (i+1)/n; the outer bounds are returned exactly as given.
    """
    if not (0 < a_min < a_max) or n < 1:
        raise PartitionError(f"need 0 < a_min < a_max and n >= 1, got ({a_min}, {a_max}, {n})")
    lo, hi = math.log(a_min), math.log(a_max)
    inner = [math.exp(lo + i / n * (hi - lo)) for i in range(1, n)]
    return SubrangePartition(n, [a_min, *inner, a_max])


def select_model(a: float, p: SubrangePartition) -> tuple[int, bool]:
    """Index of the subrange holding ``a`` and whether it had to be clamped.

    Intervals are half-open ``[lo, hi)`` except the last, which is closed.
    Bounds come from exp/log and carry round-off, so a value within
    ``BOUNDARY_RTOL`` of an inner bound belongs to the upper interval.
    """
    if not a > 0:
        raise PartitionError(f"noise level a must be positive, got {a}")
    b = p.bounds
    if a < b[0] or a > b[-1]:
        warnings.warn(f"a={a:g} outside [{b[0]:g}, {b[-1]:g}]; clamping to the nearest model", stacklevel=2)
        return (0 if a < b[0] else p.n - 1), True
    for i in range(p.n - 1):
        if a < b[i + 1] * (1 - BOUNDARY_RTOL):
            return i, False
    return p.n - 1, False


def slot_noise_model(model, p: SubrangePartition, i: int):
    """The sensor model restricted to subrange ``i`` (outer ends keep the model's own logs)."""
    from dataclasses import replace

    lo, hi = math.log(p.bounds[i]), math.log(p.bounds[i + 1])
    if i == 0 and p.bounds[0] == model.a_min:
        lo = model.log_a_range[0]
    if i == p.n - 1 and p.bounds[-1] == model.a_max:
        hi = model.log_a_range[1]
    return replace(model, log_a_range=(lo, hi))


def train_array(base_cfg, p: SubrangePartition, out_dir, images=None, teacher=None) -> SubrangePartition:
    """Train one model per subrange and write ``array.json`` next to them.

    Each slot reuses ``base_cfg`` (seed included) with its noise sampling
    restricted to the slot; a training error in any slot propagates.
    """
    from dataclasses import replace

    from .training import load_images, train

    os.makedirs(out_dir, exist_ok=True)
    images = list(images) if images is not None else load_images(base_cfg)
    ckpts = []
    for i in range(p.n):
        cfg = replace(base_cfg, noise=slot_noise_model(base_cfg.noise, p, i))
        res = train(cfg, os.path.join(out_dir, f"model_{i:02d}"), images, teacher)
        ckpts.append(os.path.relpath(res.checkpoint, out_dir))
    out = SubrangePartition(p.n, list(p.bounds), ckpts)
    out.save(os.path.join(out_dir, "array.json"))
    return SubrangePartition.load(os.path.join(out_dir, "array.json"))

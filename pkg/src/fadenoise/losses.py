"""Training losses: Charbonnier, simple distillation, feature matching and
the RGB perceptual variant computed after the ISP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bayer, fanet
from .noise import NoiseParams, ksigma_batch
from .tensor import ConfigError, ShapeError, Tensor, no_grad
from .tensor import ops

MODES = ("charbonnier", "rgb_perceptual", "simple_kd", "feature_matching")
DEFAULT_WEIGHTS = {"charbonnier": 393.5, "feature_matching": 78.7, "simple_kd": 1.0, "rgb_perceptual": 1.0}


@dataclass
class LossConfig:
    mode: str = "charbonnier"
    charb_c: float = 1e-6
    weight: Optional[float] = None
    teacher: Optional[str] = None
    content_weight: float = 1.0
    style_weight: float = 0.1
    layer_set: Optional[list[str]] = None

    def __post_init__(self):
        if self.weight is None and self.mode in DEFAULT_WEIGHTS:
            self.weight = DEFAULT_WEIGHTS[self.mode]
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"loss.mode: must be one of {MODES}, got {self.mode!r}")
        if not self.charb_c > 0:
            raise ConfigError("loss.charb_c: charb_c > 0")
        if not self.weight > 0:
            raise ConfigError("loss.weight: weight > 0")
        if self.mode != "charbonnier" and not self.teacher:
            raise ConfigError(f"loss.teacher: required for mode {self.mode!r}")


@dataclass
class Teacher:
    """Frozen teacher network."""

    cfg: fanet.ModelConfig
    weights: fanet.Weights = field(repr=False)

    def __post_init__(self):
        for t in self.weights.values():
            t.requires_grad = False

    @classmethod
    def load(cls, path) -> "Teacher":
        cfg, w = fanet.load_checkpoint(path, requires_grad=False)
        return cls(cfg, w)

    def layer_names(self) -> list[str]:
        return [f"enc{s}" for s in range(self.cfg.scales)] + ["output"]

    def activations(self, x: Tensor, layer_set: Sequence[str]) -> dict[str, Tensor]:
        out, feats = fanet.forward(self.cfg, self.weights, x, return_features=True)
        acts = {f"enc{s}": f for s, f in enumerate(feats)}
        acts["output"] = out
        missing = [n for n in layer_set if n not in acts]
        if missing:
            raise ConfigError(f"unknown teacher layers {missing}; available {sorted(acts)}")
        return {n: acts[n] for n in layer_set}


def _check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def charbonnier(pred: Tensor, gt: Tensor, c: float = 1e-6) -> Tensor:
    """mean(sqrt((pred - gt)^2 + c^2))."""
    _check(pred, gt, "charbonnier")
    return ops.mean(ops.sqrt(ops.add_const(ops.square(ops.sub(pred, gt)), c * c)))


def simple_kd(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    _check(student_out, teacher_out, "simple_kd")
    return ops.mean(ops.abs_(ops.sub(student_out, teacher_out)))


def gram(features: Tensor) -> Tensor:
    """Per-sample C x C Gram matrix ``A A^T / (C H W)``."""
    n, c, h, w = features.shape
    a = features.data.reshape(n, c, h * w)
    norm = c * h * w
    g = np.matmul(a, a.transpose(0, 2, 1)) / norm

    def bw(grad):
        ga = np.matmul(grad + grad.transpose(0, 2, 1), a) / norm
        return (ga.reshape(features.shape),)

    return Tensor._from_op(g.astype(features.dtype, copy=False), (features,), bw, "gram")


def feature_matching(student_out: Tensor, gt: Tensor, teacher: Teacher, layer_set: Optional[Sequence[str]] = None,
                     content_weight: float = 1.0, style_weight: float = 0.1) -> Tensor:
    """Content + style distance between teacher activations on prediction and target."""
    if teacher is None:
        raise ConfigError("feature_matching needs a teacher")
    _check(student_out, gt, "feature_matching")
    layer_set = list(layer_set) if layer_set else [f"enc{s}" for s in range(teacher.cfg.scales)]
    pred_acts = teacher.activations(student_out, layer_set)
    with no_grad():
        gt_acts = teacher.activations(Tensor(gt.data), layer_set)
    terms = []
    for name in layer_set:
        p, g = pred_acts[name], gt_acts[name]
        if content_weight:
            terms.append(ops.scale(ops.mean(ops.abs_(ops.sub(p, g))), content_weight))
        if style_weight:
            terms.append(ops.scale(ops.mean(ops.abs_(ops.sub(gram(p), gram(g)))), style_weight))
    return ops.stack_scalars(terms)


def isp_roundtrip(packed: Tensor, wb, ccm, gamma: bool, params: Optional[Sequence[NoiseParams]] = None) -> Tensor:
    """Packed RAW -> ISP RGB -> RGGB re-mosaic -> packed, differentiably.

    When ``params`` is given the input is taken to be k-sigma transformed and
    the result is mapped back into the same domain.
    """
    x = ksigma_batch(packed, params, inverse=True) if params is not None else packed
    rgb = bayer.isp_tensor(bayer.unpack_tensor(x), wb, ccm, gamma)
    out = bayer.pack_tensor(bayer.mosaic_tensor(rgb))
    return ksigma_batch(out, params) if params is not None else out


def rgb_perceptual(pred_raw: Tensor, gt_raw: Tensor, teacher: Teacher, layer_set=None, wb=bayer.DEFAULT_WB,
                   ccm=bayer.IDENTITY_CCM, gamma: bool = True, params=None, content_weight: float = 1.0,
                   style_weight: float = 0.1) -> Tensor:
    """Feature matching on ISP-processed images, re-mosaiced for the teacher."""
    _check(pred_raw, gt_raw, "rgb_perceptual")
    p = isp_roundtrip(pred_raw, wb, ccm, gamma, params)
    with no_grad():
        g = isp_roundtrip(Tensor(gt_raw.data), wb, ccm, gamma, params)
    return feature_matching(p, g, teacher, layer_set, content_weight, style_weight)


def training_loss(cfg: LossConfig, pred: Tensor, target: Tensor, noisy: Tensor, teacher: Optional[Teacher] = None,
                  params: Optional[Sequence[NoiseParams]] = None, isp_params: Optional[dict] = None) -> Tensor:
    """Weighted loss for one batch; all tensors live in the k-sigma domain."""
    if cfg.mode == "charbonnier":
        loss = charbonnier(pred, target, cfg.charb_c)
    elif cfg.mode == "simple_kd":
        with no_grad():
            t_out = fanet.forward(teacher.cfg, teacher.weights, Tensor(noisy.data))
        loss = simple_kd(pred, t_out)
    elif cfg.mode == "feature_matching":
        loss = feature_matching(pred, target, teacher, cfg.layer_set, cfg.content_weight, cfg.style_weight)
    else:
        isp_params = isp_params or {}
        loss = rgb_perceptual(pred, target, teacher, cfg.layer_set, params=params,
                              content_weight=cfg.content_weight, style_weight=cfg.style_weight, **isp_params)
    return ops.scale(loss, cfg.weight)

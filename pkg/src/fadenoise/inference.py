"""Running a trained denoiser (or an array of them) on full RAW frames."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import fanet
from .bayer import BayerImage, pack_array, unify_bayer, unpack_array
from .noise import NoiseParams, SensorNoiseModel, gain_to_params, ksigma, ksigma_inv
from .nsma import SubrangePartition, select_model


class AnnotationError(ValueError):
    pass


@dataclass
class Denoiser:
    cfg: fanet.ModelConfig
    weights: fanet.Weights

    @classmethod
    def load(cls, path) -> "Denoiser":
        cfg, w = fanet.load_checkpoint(path, requires_grad=False)
        return cls(cfg, w)

    def __call__(self, noisy: BayerImage, p: NoiseParams) -> BayerImage:
        return denoise(self.cfg, self.weights, noisy, p)


def denoise_packed(cfg: fanet.ModelConfig, weights: fanet.Weights, packed: np.ndarray, p: NoiseParams) -> np.ndarray:
    """(4, h, w) raw-domain planes in, (4, h, w) raw-domain planes out (unclipped)."""
    m = 2 ** (cfg.scales - 1)
    _, h, w = packed.shape
    ph, pw = (-h) % m, (-w) % m
    x = ksigma(packed.astype(np.float32), p)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    y = fanet.run(cfg, weights, x[None])[0, :, :h, :w]
    return ksigma_inv(y, p)


def denoise(cfg: fanet.ModelConfig, weights: fanet.Weights, noisy: BayerImage, p: NoiseParams) -> BayerImage:
    img = unify_bayer(noisy)
    out = denoise_packed(cfg, weights, pack_array(img.plane), p)
    return replace(img, plane=np.clip(unpack_array(out), 0.0, 1.0).astype(np.float32))


def annotation(img: BayerImage, sensor: Optional[SensorNoiseModel] = None) -> NoiseParams:
    """Noise parameters of a frame: its own (a, b) or the gain regression."""
    if img.noise is not None:
        return img.noise
    if sensor is not None:
        return gain_to_params(sensor, img.gain)[0]
    raise AnnotationError(f"{img.name or 'image'}: no (a, b) annotation and no sensor model for its gain")


@dataclass
class ModelArray:
    partition: SubrangePartition
    members: list[Denoiser]

    @classmethod
    def load(cls, manifest_path) -> "ModelArray":
        part = SubrangePartition.load(manifest_path)
        if any(c is None for c in part.checkpoints):
            raise AnnotationError(f"{manifest_path}: array manifest lists untrained slots")
        return cls(part, [Denoiser.load(c) for c in part.checkpoints])

    def route(self, p: NoiseParams) -> int:
        return select_model(p.a, self.partition)[0]

    def __call__(self, noisy: BayerImage, p: NoiseParams) -> BayerImage:
        return self.members[self.route(p)](noisy, p)

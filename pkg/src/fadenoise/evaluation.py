"""Evaluating a checkpoint or a model array on a paired test set."""

from __future__ import annotations

import os
from dataclasses import replace
from typing import Optional, Sequence, Union

import numpy as np

from . import fanet
from .bayer import IDENTITY_CCM, BayerImage, isp, unify_bayer
from .inference import Denoiser, ModelArray, annotation
from .metrics import ImageMetrics, MetricError, MetricReport, psnr, ssim
from .noise import SensorNoiseModel

Model = Union[Denoiser, ModelArray]


def load_model(path) -> Model:
    """A checkpoint directory or an array manifest (``*.json``)."""
    if os.path.isfile(path):
        return ModelArray.load(path)
    return Denoiser.load(path)


def model_macs(model: Model, h: int, w: int) -> float:
    # an array runs exactly one member per image; members share the config shape
    cfg = model.cfg if isinstance(model, Denoiser) else model.members[0].cfg
    return fanet.count_macs(cfg, h, w)


def _rgb(img: BayerImage, isp_params: dict) -> np.ndarray:
    return isp(img, wb=isp_params.get("wb"), ccm=isp_params.get("ccm", IDENTITY_CCM),
               gamma=isp_params.get("gamma", True))


def _four(out: BayerImage, clean: BayerImage, isp_params: dict) -> tuple[float, float, float, float]:
    rgb_o, rgb_c = _rgb(out, isp_params), _rgb(clean, isp_params)
    return psnr(out.plane, clean.plane), ssim(out.plane, clean.plane), psnr(rgb_o, rgb_c), ssim(rgb_o, rgb_c)


def evaluate(model: Union[Model, str, os.PathLike], pairs: Sequence[tuple[BayerImage, BayerImage]],
             isp_params: Optional[dict] = None, sensor: Optional[SensorNoiseModel] = None) -> MetricReport:
    """Denoise every noisy frame and score it against its clean partner.

    Metrics are RAW PSNR/SSIM on the full-resolution plane and RGB PSNR/SSIM
    after the minimal ISP. The clean frame's white balance is used for both
    sides unless ``isp_params["wb"]`` is given. Rows are sorted by name so the
    report does not depend on input order.
    """
    if not isinstance(model, (Denoiser, ModelArray)):
        model = load_model(model)
    isp_params = dict(isp_params or {})
    if not pairs:
        raise MetricError("cannot build a report from an empty evaluation set")
    rows = []
    for noisy, clean in sorted(pairs, key=lambda pc: pc[0].name):
        noisy_u, clean_u = unify_bayer(noisy), unify_bayer(clean)
        if noisy_u.shape != clean_u.shape:
            raise ValueError(f"{noisy.name}: noisy {noisy_u.shape} and clean {clean_u.shape} differ")
        noisy_u = replace(noisy_u, wb_gains=clean_u.wb_gains)
        p = annotation(noisy_u, sensor)
        out = model(noisy_u, p)
        index = model.route(p) if isinstance(model, ModelArray) else None
        den = _four(out, clean_u, isp_params)
        inp = _four(noisy_u, clean_u, isp_params)
        rows.append(ImageMetrics(noisy.name, *den, *inp, model_index=index))
    h, w = unify_bayer(pairs[0][0]).shape
    return MetricReport.aggregate(rows, model_macs(model, h, w))


def identity_row(pairs: Sequence[tuple[BayerImage, BayerImage]], isp_params: Optional[dict] = None) -> dict:
    """Mean metrics of the noisy inputs themselves (the "input" row)."""
    isp_params = dict(isp_params or {})
    vals = []
    for noisy, clean in pairs:
        c = unify_bayer(clean)
        n = replace(unify_bayer(noisy), wb_gains=c.wb_gains)
        vals.append(_four(n, c, isp_params))
    v = np.mean(np.asarray(vals), axis=0)
    return dict(zip(("raw_psnr", "raw_ssim", "rgb_psnr", "rgb_ssim"), map(float, v)))

"""Efficient RAW-domain denoising: a numpy autodiff engine, Bayer pipeline,
sensor noise model, Feature-Align U-Net, distillation losses, noise subrange
model arrays, training, evaluation and pair alignment."""

__version__ = "0.1.0"

from .bayer import BayerImage, isp, pack, unpack, unify_bayer, augment_bayer  # noqa: E402
from .noise import NoiseParams, SensorNoiseModel, ksigma, ksigma_inv, sample_noise  # noqa: E402
from .fanet import ModelConfig, count_macs, forward, init_weights  # noqa: E402
from .metrics import MetricReport, psnr, ssim  # noqa: E402
from .nsma import SubrangePartition, partition, select_model  # noqa: E402

__all__ = [
    "BayerImage", "isp", "pack", "unpack", "unify_bayer", "augment_bayer", "NoiseParams", "SensorNoiseModel",
    "ksigma", "ksigma_inv", "sample_noise", "ModelConfig", "count_macs", "forward", "init_weights",
    "MetricReport", "psnr", "ssim", "SubrangePartition", "partition", "select_model",
]

"""Training loop: synthetic-noise data pipeline, Adam, cosine schedule,
checkpoints and a line-delimited JSON log."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import fanet
from .bayer import BayerImage, augment_bayer, pack_array, unify_bayer, unpack_array
from .losses import LossConfig, Teacher, training_loss
from .metrics import psnr
from .noise import NoiseParams, SensorNoiseModel, default_sensor_model, ksigma, sample_noise, sample_training_params
from .tensor import ConfigError, Tensor, backward, no_grad, zero_grad

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: fanet.ModelConfig = field(default_factory=fanet.ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    noise: SensorNoiseModel = field(default_factory=default_sensor_model)
    data_root: Optional[str] = None
    synthetic_images: int = 64
    image_size: int = 128
    patch: int = 128
    batch: int = 16
    iterations: int = 5000
    max_lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 500
    grad_clip: float = 1.0
    isp: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m = 2 ** self.model.scales
        if self.patch < 2 or self.patch % 2 or self.patch % m:
            raise ConfigError(f"train.patch: patch must be even and divisible by 2**scales={m}")
        if self.batch < 1:
            raise ConfigError("train.batch: batch ≥ 1")
        if self.iterations < 0:
            raise ConfigError("train.iterations: iterations ≥ 0")
        if not self.max_lr > 0:
            raise ConfigError("train.max_lr: max_lr > 0")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigError("train.checkpoint_every/eval_every: must be ≥ 1")
        if self.data_root is None and self.synthetic_images < 2:
            raise ConfigError("train.synthetic_images: need at least 2 images")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: fanet.Weights, **kw) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in weights.items()},
                   {n: np.zeros_like(t.data) for n, t in weights.items()}, **kw)


def adam_step(weights: fanet.Weights, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, in place. Returns ``(weights, state)``."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for n, t in weights.items():
        g = grads[n]
        if g.shape != t.shape:
            raise ValueError(f"adam_step: gradient for {n} has shape {g.shape}, parameter {t.shape}")
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = (t.data - upd).astype(t.data.dtype, copy=False)
    return weights, state


def cosine_lr(it: int, total: int, max_lr: float) -> float:
    if total <= 0:
        raise ValueError("cosine_lr: total must be positive")
    if not 0 <= it <= total:
        raise ValueError(f"cosine_lr: iteration {it} outside [0, {total}]")
    return max_lr * 0.5 * (1 + math.cos(math.pi * it / total))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for n in grads:
            grads[n] = grads[n] * s
    return total


# -- data pipeline ---------------------------------------------------------------

def make_example(clean_raw: BayerImage, cfg: TrainConfig, seed) -> tuple[Tensor, Tensor, NoiseParams]:
    """unify -> random crop -> Bayer augment -> noise -> k-sigma -> pack.

    Crops ``patch + 2`` pixels so the re-unification crop of the augmentation
    still leaves a full patch.
    """
    rng = np.random.default_rng(seed)
    img = unify_bayer(clean_raw)
    h, w = img.shape
    need = cfg.patch + 2
    if h < need or w < need:
        raise TrainingError(f"{clean_raw.name or 'image'} {img.shape} too small for patch {cfg.patch}")
    top = 2 * int(rng.integers(0, (h - need) // 2 + 1))
    left = 2 * int(rng.integers(0, (w - need) // 2 + 1))
    crop = img.with_plane(img.plane[top:top + need, left:left + need])
    flips = rng.random(3) < 0.5
    aug = augment_bayer(crop, bool(flips[0]), bool(flips[1]), bool(flips[2]))
    clean = aug.plane[:cfg.patch, :cfg.patch]
    p = sample_training_params(cfg.noise, rng)
    noisy = sample_noise(clean, p, rng)
    x = ksigma(pack_array(noisy), p).astype(np.float32)
    y = ksigma(pack_array(clean), p).astype(np.float32)
    return Tensor(x[None]), Tensor(y[None]), p


def make_batch(images: Sequence[BayerImage], cfg: TrainConfig, it: int):
    """Batch for iteration ``it``; depends only on (seed, it)."""
    rng = np.random.default_rng([cfg.seed, it])
    picks = rng.integers(0, len(images), cfg.batch)
    xs, ys, ps = [], [], []
    for j, k in enumerate(picks):
        x, y, p = make_example(images[k], cfg, [cfg.seed, it, j, 1])
        xs.append(x.data)
        ys.append(y.data)
        ps.append(p)
    return Tensor(np.concatenate(xs)), Tensor(np.concatenate(ys)), ps


def split_holdout(images: Sequence[BayerImage]) -> tuple[list[BayerImage], list[BayerImage]]:
    """Hold out ~10% of images by a hash of their name."""
    def bucket(img):
        return int(hashlib.sha1(img.name.encode()).hexdigest(), 16) % 10

    flags = [bucket(im) == 0 for im in images]
    if not any(flags) and len(images) > 1:
        first = min(range(len(images)), key=lambda i: hashlib.sha1(images[i].name.encode()).hexdigest())
        flags[first] = True
    train = [im for im, f in zip(images, flags) if not f]
    held = [im for im, f in zip(images, flags) if f]
    return train, held


def _holdout_case(img: BayerImage, cfg: TrainConfig, idx: int):
    m = 2 ** cfg.model.scales
    u = unify_bayer(img)
    h, w = (u.shape[0] // m) * m, (u.shape[1] // m) * m
    clean = u.plane[:h, :w]
    rng = np.random.default_rng([cfg.seed, 7919, idx])
    p = sample_training_params(cfg.noise, rng)
    return clean, sample_noise(clean, p, rng), p


def evaluate_holdout(mcfg: fanet.ModelConfig, weights: fanet.Weights, held: Sequence[BayerImage],
                     cfg: TrainConfig) -> dict:
    """Mean RAW PSNR of denoised and noisy held-out frames (fixed noise draws)."""
    out, inp, ident = [], [], []
    for i, img in enumerate(held):
        clean, noisy, p = _holdout_case(img, cfg, i)
        with no_grad():
            y = fanet.forward(mcfg, weights, Tensor(ksigma(pack_array(noisy), p)[None].astype(np.float32)))
            z = fanet.forward(mcfg, weights, Tensor(ksigma(pack_array(clean), p)[None].astype(np.float32)))
        den = np.clip(unpack_array((y.data[0] - p.b / p.a ** 2) * p.a), 0, 1)
        idn = np.clip(unpack_array((z.data[0] - p.b / p.a ** 2) * p.a), 0, 1)
        out.append(psnr(den, clean))
        inp.append(psnr(noisy, clean))
        ident.append(psnr(idn, clean))
    return {"heldout_psnr": float(np.mean(out)), "input_psnr": float(np.mean(inp)),
            "clean_identity_psnr": float(np.mean(ident))}


def load_images(cfg: TrainConfig) -> list[BayerImage]:
    from .data import load_dir, synthetic_dataset

    if cfg.data_root:
        return load_dir(cfg.data_root)
    return synthetic_dataset(cfg.synthetic_images, cfg.image_size, seed=cfg.seed)


# -- loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    final: dict
    losses: list[float]


def train(cfg: TrainConfig, out_dir, images: Optional[Sequence[BayerImage]] = None,
          teacher: Optional[Teacher] = None) -> TrainResult:
    """Train one model; writes ``checkpoint/``, periodic ``iter_*`` checkpoints and ``log.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    images = list(images) if images is not None else load_images(cfg)
    train_set, held = split_holdout(images)
    if not train_set:
        raise TrainingError("no training images")
    if cfg.loss.mode != "charbonnier" and teacher is None:
        teacher = Teacher.load(cfg.loss.teacher)

    weights = fanet.init_weights(cfg.model, seed=cfg.seed)
    state = AdamState.zeros_like(weights)
    ckpt = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "log.jsonl")
    losses: list[float] = []
    names = list(weights)

    def save(path, it):
        fanet.save_checkpoint(path, cfg.model, weights, extra={"iteration": it, "seed": cfg.seed}, adam=state)

    save(ckpt, 0)
    with open(log_path, "w") as logf:
        def emit(rec):
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

        it = 0
        try:
            for it in range(cfg.iterations):
                lr = cosine_lr(it, cfg.iterations, cfg.max_lr)
                x, y, ps = make_batch(train_set, cfg, it)
                zero_grad(weights.values())
                pred = fanet.forward(cfg.model, weights, x)
                loss = training_loss(cfg.loss, pred, y, x, teacher, ps, cfg.isp)
                grads = dict(zip(names, backward(loss, weights.values())))
                gnorm = clip_grad_norm(grads, cfg.grad_clip)
                lv = loss.item()
                if not (math.isfinite(lv) and math.isfinite(gnorm)):
                    raise TrainingError(f"non-finite loss/gradient at iteration {it}")
                adam_step(weights, grads, state, lr)
                if not all(np.all(np.isfinite(t.data)) for t in weights.values()):
                    raise TrainingError(f"non-finite parameter after iteration {it}")
                losses.append(lv)
                emit({"iter": it + 1, "loss": lv, "lr": lr, "grad_norm": gnorm})
                done = it + 1
                if done % cfg.eval_every == 0 and held and done < cfg.iterations:
                    emit({"iter": done, **evaluate_holdout(cfg.model, weights, held, cfg)})
                if done % cfg.checkpoint_every == 0 and done < cfg.iterations:
                    save(os.path.join(out_dir, f"iter_{done:07d}"), done)
        except BaseException:
            save(os.path.join(out_dir, "partial"), it)
            raise
        final = {"iter": cfg.iterations}
        if held:
            final.update(evaluate_holdout(cfg.model, weights, held, cfg))
        emit(final)
    save(ckpt, cfg.iterations)
    return TrainResult(ckpt, log_path, final, losses)


def train_teacher(cfg: TrainConfig, out_dir, images=None, teacher_model: Optional[fanet.ModelConfig] = None):
    """Train the large plain U-Net with the Charbonnier loss.

    The final log record carries ``clean_identity_psnr``: the teacher run on a
    noise-free input, compared with that input.
    """
    tcfg = replace(cfg, model=teacher_model or fanet.teacher_config(), loss=LossConfig("charbonnier"))
    return train(tcfg, out_dir, images)

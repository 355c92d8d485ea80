"""RAW frame I/O (16-bit PGM + JSON sidecar), PPM output and a procedural
clean-image generator for desk-scale experiments."""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Iterable

import numpy as np

from .bayer import BayerImage, simple_unprocess
from .noise import NoiseParams


class DataError(IOError):
    pass


# -- netpbm -------------------------------------------------------------------

_HEADER = re.compile(rb"^(P[56])\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path, plane: np.ndarray, maxval: int = 65535) -> None:
    h, w = plane.shape
    data = np.asarray(plane).astype(">u2" if maxval > 255 else "u1")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(data.tobytes())


def write_ppm(path, rgb: np.ndarray, bits: int = 8) -> None:
    """Write a (3, H, W) image in [0, 1] as an 8- or 16-bit binary PPM."""
    maxval = 255 if bits == 8 else 65535
    _, h, w = rgb.shape
    q = np.round(np.clip(rgb, 0, 1) * maxval).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n{maxval}\n".encode())
        f.write(q.astype(">u2" if bits == 16 else "u1").tobytes())


def read_netpbm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if not m:
        raise DataError(f"{path}: not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    ch = 1 if kind == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(buf, dtype=dtype, offset=m.end(), count=w * h * ch)
    arr = arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.int64)


# -- RAW frames ----------------------------------------------------------------

def write_raw(path, img: BayerImage, black: int = 0, white: int = 65535) -> None:
    """Store ``img`` as 16-bit PGM with a ``.json`` sidecar of capture metadata."""
    path = Path(path)
    dn = np.round(np.clip(img.plane, 0, 1) * (white - black) + black)
    write_pgm(path, dn)
    meta = {"pattern": img.pattern, "gain": img.gain, "black_level": black, "white_level": white,
            "wb_gains": list(img.wb_gains)}
    if img.noise is not None:
        meta["a"], meta["b"] = img.noise.a, img.noise.b
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_raw(path) -> BayerImage:
    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise DataError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    black, white = meta.get("black_level", 0), meta.get("white_level", 65535)
    if white <= black:
        raise DataError(f"{side}: white level must exceed black level")
    plane = np.clip((read_netpbm(path) - black) / (white - black), 0.0, 1.0)
    noise = NoiseParams(meta["a"], meta["b"]) if "a" in meta and "b" in meta else None
    return BayerImage(plane, meta.get("pattern", "RGGB"), float(meta.get("gain", 1.0)), noise,
                      tuple(meta.get("wb_gains", (2.0, 1.0, 1.6))), name=path.stem)


def list_raw(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("*.pgm") if p.with_suffix(".json").exists())


def load_dir(root) -> list[BayerImage]:
    files = list_raw(root)
    if not files:
        raise DataError(f"no RAW frames (*.pgm + .json) under {root}")
    return [read_raw(p) for p in files]


# -- procedural scenes ------------------------------------------------------------

def synthetic_rgb(size: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth sRGB scene: gradient backdrop, shapes, a striped patch."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.7, 3)
    tilt = rng.uniform(-0.3, 0.3, (3, 2))
    img = base[:, None, None] + tilt[:, 0, None, None] * (xx - 0.5) + tilt[:, 1, None, None] * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.06, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        img = np.where(mask[None], color[:, None, None], img)
    freq = rng.uniform(6, 20)
    ang = rng.uniform(0, np.pi)
    stripes = 0.08 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy))
    cy, cx = rng.uniform(0.2, 0.8, 2)
    patch = (np.abs(yy - cy) < 0.2) & (np.abs(xx - cx) < 0.2)
    img = img + np.where(patch, stripes, 0)[None]
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(count: int, size: int = 128, seed: int = 0) -> list[BayerImage]:
    """``count`` clean RGGB frames from procedural scenes, unprocessed to RAW."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        raw = simple_unprocess(synthetic_rgb(size, rng), wb=None, seed=rng)
        raw.name = f"synth_{i:04d}"
        out.append(raw)
    return out


def write_dataset(root, images: Iterable[BayerImage]) -> list[Path]:
    os.makedirs(root, exist_ok=True)
    paths = []
    for img in images:
        p = Path(root) / f"{img.name}.pgm"
        write_raw(p, img)
        paths.append(p)
    return paths


# -- paired test sets ------------------------------------------------------------

PAIRS_MANIFEST = "pairs.json"


def write_pairs(root, pairs: Iterable[tuple[BayerImage, BayerImage]]) -> Path:
    """Write (noisy, clean) pairs plus a ``pairs.json`` manifest."""
    os.makedirs(root, exist_ok=True)
    entries = []
    for i, (noisy, clean) in enumerate(pairs):
        name = noisy.name or f"pair_{i:04d}"
        write_raw(Path(root) / f"{name}_noisy.pgm", noisy)
        write_raw(Path(root) / f"{name}_clean.pgm", clean)
        entries.append({"name": name, "noisy": f"{name}_noisy.pgm", "clean": f"{name}_clean.pgm"})
    path = Path(root) / PAIRS_MANIFEST
    path.write_text(json.dumps(entries, indent=2))
    return path


def load_pairs(root) -> list[tuple[BayerImage, BayerImage]]:
    path = Path(root) / PAIRS_MANIFEST
    if not path.exists():
        raise DataError(f"{path}: pair manifest not found")
    out = []
    for i, e in enumerate(json.loads(path.read_text())):
        noisy, clean = read_raw(Path(root) / e["noisy"]), read_raw(Path(root) / e["clean"])
        noisy.name = clean.name = e.get("name") or f"pair_{i:04d}"
        out.append((noisy, clean))
    return out


def synthetic_pairs(count: int, size: int, noise_model, seed: int = 0) -> list[tuple[BayerImage, BayerImage]]:
    """Noisy/clean pairs with (a, b) drawn from ``noise_model`` and stored on the noisy frame."""
    from .noise import sample_noise, sample_training_params

    pairs = []
    for i, clean in enumerate(synthetic_dataset(count, size, seed=seed + 104729)):
        rng = np.random.default_rng([seed, i, 3])
        p = sample_training_params(noise_model, rng)
        noisy = sample_noise(clean, p, rng)
        noisy.name = clean.name = f"test_{i:04d}"
        pairs.append((noisy, clean))
    return pairs

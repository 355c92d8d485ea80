"""Bayer mosaic handling and a minimalist differentiable ISP.

RAW planes are H x W float arrays in [0, 1]. The packed representation is a
(1, 4, H/2, W/2) tensor with channels ordered (R, G_r, G_b, B), where G_r
shares rows with R and G_b shares rows with B.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad
from .tensor import ops

if TYPE_CHECKING:
    from .noise import NoiseParams

PATTERNS = ("RGGB", "GRBG", "GBRG", "BGGR")

# (row, col) offset of the crop that brings each pattern to RGGB
_UNIFY_OFFSET = {"RGGB": (0, 0), "GRBG": (0, 1), "GBRG": (1, 0), "BGGR": (1, 1)}

DEFAULT_WB = (2.0, 1.0, 1.6)
IDENTITY_CCM = np.eye(3)


class BayerError(ValueError):
    pass


@dataclass(eq=False)
class BayerImage:
    plane: np.ndarray
    pattern: str = "RGGB"
    gain: float = 1.0
    noise: Optional[NoiseParams] = None
    wb_gains: tuple[float, float, float] = DEFAULT_WB
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise BayerError(f"unknown Bayer pattern {self.pattern!r}")
        self.plane = np.asarray(self.plane, dtype=np.float32)
        if self.plane.ndim != 2:
            raise BayerError(f"Bayer plane must be 2-D, got shape {self.plane.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane.shape

    def with_plane(self, plane: np.ndarray, pattern: str | None = None) -> "BayerImage":
        return replace(self, plane=plane, pattern=pattern or self.pattern)


def site_colors(pattern: str) -> np.ndarray:
    """2x2 array of color indices (0=R, 1=G, 2=B) for a pattern."""
    lut = {"R": 0, "G": 1, "B": 2}
    return np.array([[lut[pattern[0]], lut[pattern[1]]], [lut[pattern[2]], lut[pattern[3]]]])


def _even_crop(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane[: h - h % 2, : w - w % 2]


def unify_bayer(img: BayerImage) -> BayerImage:
    """Crop 0 or 1 leading rows/columns so the mosaic reads RGGB."""
    h, w = img.shape
    dy, dx = _UNIFY_OFFSET[img.pattern]
    if h - dy < 2 or w - dx < 2:
        raise BayerError(f"image {img.shape} too small to unify")
    return img.with_plane(_even_crop(img.plane[dy:, dx:]), "RGGB")


def augment_bayer(img: BayerImage, flip_h: bool = False, flip_v: bool = False, transpose: bool = False) -> BayerImage:
    """Flip/transpose an RGGB image, then re-unify so the result is RGGB."""
    if img.pattern != "RGGB":
        raise BayerError("augment_bayer expects an RGGB image; call unify_bayer first")
    plane = img.plane
    h, w = plane.shape
    # site index map (0=R, 1=G_r, 2=G_b, 3=B) follows the plane through the transform
    smap = (np.arange(h) % 2)[:, None] * 2 + (np.arange(w) % 2)[None, :]
    if flip_h:
        plane, smap = plane[:, ::-1], smap[:, ::-1]
    if flip_v:
        plane, smap = plane[::-1, :], smap[::-1, :]
    if transpose:
        plane, smap = plane.T, smap.T
    letters = "RGGB"
    pattern = "".join(letters[i] for i in (smap[0, 0], smap[0, 1], smap[1, 0], smap[1, 1]))
    return unify_bayer(img.with_plane(np.ascontiguousarray(plane), pattern))


def pack_array(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    if h % 2 or w % 2:
        raise BayerError(f"pack needs even dims, got {plane.shape}")
    return np.stack([plane[0::2, 0::2], plane[0::2, 1::2], plane[1::2, 0::2], plane[1::2, 1::2]])


def unpack_array(packed: np.ndarray) -> np.ndarray:
    c, h, w = packed.shape
    if c != 4:
        raise BayerError(f"unpack needs 4 channels, got {c}")
    plane = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    plane[0::2, 0::2], plane[0::2, 1::2], plane[1::2, 0::2], plane[1::2, 1::2] = packed
    return plane


def pack(img: BayerImage) -> Tensor:
    if img.pattern != "RGGB":
        raise BayerError("pack expects an RGGB image")
    return Tensor(pack_array(img.plane)[None])


def unpack(t: Tensor | np.ndarray, **meta) -> BayerImage:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise BayerError("unpack handles a single image; index the batch first")
        data = data[0]
    return BayerImage(unpack_array(data), "RGGB", **meta)


# -- differentiable packing (space-to-depth on RGGB) --------------------------

def pack_tensor(plane: Tensor) -> Tensor:
    """(N, 1, H, W) RGGB plane -> (N, 4, H/2, W/2)."""
    n, _, h, w = plane.shape
    t = ops.reshape(plane, (n, h // 2, 2, w // 2, 2))
    t = ops.permute(t, (0, 2, 4, 1, 3))
    return ops.reshape(t, (n, 4, h // 2, w // 2))


def unpack_tensor(packed: Tensor) -> Tensor:
    """(N, 4, h, w) -> (N, 1, 2h, 2w) RGGB plane."""
    n, _, h, w = packed.shape
    t = ops.reshape(packed, (n, 2, 2, h, w))
    t = ops.permute(t, (0, 3, 1, 4, 2))
    return ops.reshape(t, (n, 1, 2 * h, 2 * w))


# -- ISP --------------------------------------------------------------------

_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4


def _rggb_masks(h: int, w: int) -> np.ndarray:
    m = np.zeros((3, h, w))
    m[0, 0::2, 0::2] = 1
    m[1, 0::2, 1::2] = 1
    m[1, 1::2, 0::2] = 1
    m[2, 1::2, 1::2] = 1
    return m


def _check_gains(wb: Sequence[float]) -> np.ndarray:
    g = np.asarray(wb, dtype=np.float64)
    if g.shape != (3,) or np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise BayerError(f"white-balance gains must be three positive numbers, got {wb}")
    return g


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 0.0031308), 1 / 2.4) - 0.055)


def _srgb_encode_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.0031308, 12.92, (1.055 / 2.4) * np.power(np.maximum(x, 0.0031308), 1 / 2.4 - 1))


def srgb_decode(y: np.ndarray) -> np.ndarray:
    y = np.clip(y, 0.0, 1.0)
    return np.where(y <= 0.04045, y / 12.92, np.power((y + 0.055) / 1.055, 2.4))


def isp_tensor(plane: Tensor, wb=DEFAULT_WB, ccm=IDENTITY_CCM, gamma: bool = True) -> Tensor:
    """Differentiable RGGB plane (N, 1, H, W) -> RGB (N, 3, H, W)."""
    g = _check_gains(wb)
    ccm = np.asarray(ccm, dtype=np.float64)
    if ccm.shape != (3, 3):
        raise BayerError(f"CCM must be 3x3, got {ccm.shape}")
    _, _, h, w = plane.shape
    dt = plane.dtype
    masks = _rggb_masks(h, w)
    gain_map = (masks * g[:, None, None]).sum(axis=0)
    x = ops.clip(ops.scale(plane, gain_map.astype(dt)[None, None]), 0.0, 1.0)

    x3 = ops.scale(ops.take_channels(x, [0, 0, 0]), masks.astype(dt)[None])
    kern = Tensor(np.stack([_K_RB, _K_G, _K_RB])[:, None].astype(dt))
    num = ops.conv2d(x3, kern, pad=1, groups=3)
    # normalised bilinear: divide by the interpolation weight that hit real samples
    norm = _mask_weight(masks, kern.data.astype(np.float64))
    rgb = ops.scale(num, (1.0 / norm).astype(dt)[None])

    rgb = ops.conv2d(rgb, Tensor(ccm[:, :, None, None].astype(dt)))
    rgb = ops.clip(rgb, 0.0, 1.0)
    if gamma:
        rgb = ops.elementwise(rgb, srgb_encode, _srgb_encode_grad, "srgb")
    return rgb


def _mask_weight(masks: np.ndarray, kern: np.ndarray) -> np.ndarray:
    with no_grad():
        out = ops.conv2d(Tensor(masks[None]), Tensor(kern), pad=1, groups=3)
    return out.data[0]


def isp(raw: BayerImage, wb=None, ccm=IDENTITY_CCM, gamma: bool = True) -> np.ndarray:
    """RGGB BayerImage -> (3, H, W) RGB array in [0, 1]."""
    if raw.pattern != "RGGB":
        raise BayerError("isp expects an RGGB image")
    wb = raw.wb_gains if wb is None else wb
    with no_grad():
        t = Tensor(raw.plane.astype(np.float64)[None, None])
        out = isp_tensor(t, wb, ccm, gamma).data[0]
    return np.clip(out, 0.0, 1.0)


def mosaic(rgb: np.ndarray) -> np.ndarray:
    """Sample a (3, H, W) image on an RGGB lattice."""
    _, h, w = rgb.shape
    plane = np.empty((h, w), dtype=rgb.dtype)
    plane[0::2, 0::2] = rgb[0, 0::2, 0::2]
    plane[0::2, 1::2] = rgb[1, 0::2, 1::2]
    plane[1::2, 0::2] = rgb[1, 1::2, 0::2]
    plane[1::2, 1::2] = rgb[2, 1::2, 1::2]
    return plane


def mosaic_tensor(rgb: Tensor) -> Tensor:
    """Differentiable RGGB sampling of an (N, 3, H, W) image -> (N, 1, H, W)."""
    _, _, h, w = rgb.shape
    masks = _rggb_masks(h, w).astype(rgb.dtype)
    picked = ops.scale(rgb, masks[None])
    # sum over the three channels with a fixed 1x1 conv
    ones = Tensor(np.ones((1, 3, 1, 1), dtype=rgb.dtype))
    return ops.conv2d(picked, ones)


def sample_wb_gains(rng: np.random.Generator) -> tuple[float, float, float]:
    return (float(rng.uniform(1.9, 2.4)), 1.0, float(rng.uniform(1.5, 1.9)))


def simple_unprocess(rgb: np.ndarray, wb=DEFAULT_WB, seed=None) -> BayerImage:
    """Invert sRGB and white balance, then mosaic to RGGB.

    ``wb=None`` draws red/blue gains from the generator seeded by ``seed``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise BayerError(f"expected a (3, H, W) image, got {rgb.shape}")
    if wb is None:
        wb = sample_wb_gains(np.random.default_rng(seed))
    g = _check_gains(wb)
    lin = srgb_decode(rgb) / g[:, None, None]
    plane = mosaic(lin)
    return BayerImage(_even_crop(plane).astype(np.float32), "RGGB", wb_gains=tuple(float(v) for v in g))

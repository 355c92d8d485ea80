"""Aligning a noisy/clean exposure pair: Shi-Tomasi corners, pyramidal
Lucas-Kanade flow, and a global translation rounded to keep the Bayer phase."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .bayer import BayerImage, pack_array, unify_bayer


class AlignmentError(RuntimeError):
    pass


MIN_FLOW_POINTS = 8


@dataclass
class FlowEstimate:
    points: list[tuple[float, float]]
    flows: list[tuple[float, float]]
    global_: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.points) != len(self.flows):
            raise ValueError("FlowEstimate: points and flows differ in length")
        if not np.all(np.isfinite(self.global_)):
            raise ValueError("FlowEstimate: non-finite global translation")

    @classmethod
    def from_flows(cls, points, flows) -> "FlowEstimate":
        pts = [tuple(map(float, p)) for p in points]
        fl = [tuple(map(float, f)) for f in flows]
        mean = tuple(float(v) for v in np.mean(fl, axis=0)) if fl else (0.0, 0.0)
        return cls(pts, fl, mean)


@dataclass
class AlignResult:
    noisy: BayerImage
    clean: BayerImage
    flow: FlowEstimate
    shift: tuple[int, int]          # applied (dx, dy) in full-resolution pixels, both even
    estimate: tuple[float, float]   # estimated (dx, dy) in full-resolution pixels
    extra: dict = field(default_factory=dict)

    @property
    def residual(self) -> float:
        return float(np.hypot(self.estimate[0] - self.shift[0], self.estimate[1] - self.shift[1]))

    def summary(self) -> dict:
        return {"translation": list(self.estimate), "applied_shift": list(self.shift),
                "points": len(self.flow.points), "residual": self.residual, "shape": list(self.noisy.shape)}


def _structure_tensor(img: np.ndarray, sigma: float = 1.0):
    gy, gx = np.gradient(img)
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx, syy, sxy


def _min_eig(sxx, syy, sxy):
    tr = 0.5 * (sxx + syy)
    return tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))


def corner_score(gray: np.ndarray) -> np.ndarray:
    """Shi-Tomasi response: smaller eigenvalue of the smoothed structure tensor."""
    return _min_eig(*_structure_tensor(np.asarray(gray, dtype=np.float64)))


def detect_corners(gray: np.ndarray, max_points: int = 200, quality: float = 0.01, min_dist: float = 7,
                   border: int = 0) -> list[tuple[float, float]]:
    """(x, y) of the strongest local maxima of the corner score.

    Candidates must exceed ``quality * max(score)``; they are accepted in
    decreasing score order, skipping any closer than ``min_dist`` to one
    already kept.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 16:
        raise AlignmentError(f"detect_corners: need a 2-D image of at least 16x16, got {gray.shape}")
    score = corner_score(gray)
    top = score.max()
    if not top > 1e-12:
        return []
    peaks = (score == ndimage.maximum_filter(score, size=3)) & (score > quality * top)
    b = max(border, 1)
    peaks[:b] = peaks[-b:] = False
    peaks[:, :b] = peaks[:, -b:] = False
    ys, xs = np.nonzero(peaks)
    order = np.argsort(-score[ys, xs], kind="stable")
    kept: list[tuple[float, float]] = []
    r2 = float(min_dist) ** 2
    for k in order:
        x, y = float(xs[k]), float(ys[k])
        if all((x - kx) ** 2 + (y - ky) ** 2 >= r2 for kx, ky in kept):
            kept.append((x, y))
            if len(kept) >= max_points:
                break
    return kept


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _lk_level(prev, nxt, pts, init, window, iters, eig_floor):
    r = window // 2
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    gy, gx = np.gradient(prev)
    out = np.full_like(init, np.nan)
    h, w = prev.shape
    for i, ((x, y), d0) in enumerate(zip(pts, init)):
        if not np.all(np.isfinite(d0)):
            continue
        cy, cx = y + oy, x + ox
        coords = np.stack([cy.ravel(), cx.ravel()])
        tmpl = ndimage.map_coordinates(prev, coords, order=1, mode="nearest")
        ix = ndimage.map_coordinates(gx, coords, order=1, mode="nearest")
        iy = ndimage.map_coordinates(gy, coords, order=1, mode="nearest")
        g = np.array([[ix @ ix, ix @ iy], [ix @ iy, iy @ iy]])
        if np.linalg.eigvalsh(g)[0] < eig_floor:
            continue
        ginv = np.linalg.inv(g)
        d = d0.astype(np.float64).copy()
        for _ in range(iters):
            moved = ndimage.map_coordinates(nxt, coords + d[::-1, None], order=1, mode="nearest")
            e = tmpl - moved
            step = ginv @ np.array([e @ ix, e @ iy])
            d += step
            if step @ step < 1e-8:
                break
        if -r <= x + d[0] < w + r and -r <= y + d[1] < h + r:
            out[i] = d
    return out


def lucas_kanade(prev: np.ndarray, nxt: np.ndarray, points, window: int = 21, iters: int = 10,
                 levels: int = 2, eig_floor: float = 1e-6) -> np.ndarray:
    """Per-point displacement (dx, dy) carrying ``prev`` onto ``nxt``.

    Returns an (N, 2) array; rows are NaN where the structure tensor was
    singular (below ``eig_floor``) or the point left the frame.
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise AlignmentError(f"lucas_kanade: frame shapes differ {prev.shape} vs {nxt.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2))
    pyr = [(prev, nxt)]
    for _ in range(levels - 1):
        if min(pyr[-1][0].shape) < 2 * window:
            break
        pyr.append((_downsample(pyr[-1][0]), _downsample(pyr[-1][1])))
    d = np.zeros_like(pts)
    for lvl in range(len(pyr) - 1, -1, -1):
        s = 2.0 ** lvl
        # pooled pixel centres sit half a fine pixel off the fine grid
        lp = (pts + 0.5) / s - 0.5
        d = _lk_level(*pyr[lvl], lp, d, window, iters, eig_floor)
        if lvl:
            d = d * 2
    return d


def green_proxy(plane: np.ndarray) -> np.ndarray:
    """Half-resolution luminance proxy: mean of the two green sites."""
    p = pack_array(plane)
    return 0.5 * (p[1] + p[2])


def estimate_translation(noisy_plane: np.ndarray, clean_plane: np.ndarray, max_points: int = 200,
                         window: int = 21) -> FlowEstimate:
    """Global (dx, dy) of the clean frame's content relative to the noisy one, in
    half-resolution proxy pixels."""
    a = green_proxy(noisy_plane)
    b = green_proxy(clean_plane)
    ma, mb = np.median(a), np.median(b)
    if mb > 0:
        b = b * (ma / mb)
    pts = detect_corners(a, max_points=max_points, min_dist=5, border=window // 2 + 2)
    flows = lucas_kanade(a, b, pts, window=window)
    ok = np.all(np.isfinite(flows), axis=1)
    if ok.sum() < MIN_FLOW_POINTS:
        raise AlignmentError(f"only {int(ok.sum())} usable flow points (need {MIN_FLOW_POINTS})")
    return FlowEstimate.from_flows(np.asarray(pts)[ok], flows[ok])


def _even(v: float) -> int:
    return int(2 * np.round(v / 2))


def align_pair(noisy: BayerImage, clean: BayerImage, max_points: int = 200) -> AlignResult:
    """Estimate the clean frame's translation and undo it by an even-pixel shift.

    Both frames are cropped to their common region; even offsets keep the
    RGGB phase of both crops.
    """
    n = unify_bayer(noisy)
    c = unify_bayer(clean)
    if n.shape != c.shape:
        raise AlignmentError(f"pair dimensions differ: {n.shape} vs {c.shape}")
    flow = estimate_translation(n.plane, c.plane, max_points=max_points)
    est = (2 * flow.global_[0], 2 * flow.global_[1])
    dx, dy = _even(est[0]), _even(est[1])
    h, w = n.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise AlignmentError(f"translation ({dx}, {dy}) leaves no overlap")
    ny0, ny1 = max(0, -dy), min(h, h - dy)
    nx0, nx1 = max(0, -dx), min(w, w - dx)
    n_crop = n.plane[ny0:ny1, nx0:nx1]
    c_crop = c.plane[ny0 + dy:ny1 + dy, nx0 + dx:nx1 + dx]
    return AlignResult(replace(n, plane=n_crop.copy()), replace(c, plane=c_crop.copy()), flow, (dx, dy), est)


def align_directory(root, out_dir) -> list[dict]:
    """Align every pair listed in ``root/pairs.json`` ([{"noisy", "clean", "name"?}]).

    Writes aligned RAW frames and ``<name>.align.json`` per pair into ``out_dir``.
    """
    from .data import DataError, read_raw, write_raw

    manifest = os.path.join(root, "pairs.json")
    if not os.path.exists(manifest):
        raise DataError(f"{manifest}: pair manifest not found")
    with open(manifest) as f:
        pairs = json.load(f)
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for i, entry in enumerate(pairs):
        name = entry.get("name") or f"pair_{i:04d}"
        res = align_pair(read_raw(os.path.join(root, entry["noisy"])), read_raw(os.path.join(root, entry["clean"])))
        write_raw(os.path.join(out_dir, f"{name}_noisy.pgm"), res.noisy)
        write_raw(os.path.join(out_dir, f"{name}_clean.pgm"), res.clean)
        summary = {"name": name, **res.summary()}
        with open(os.path.join(out_dir, f"{name}.align.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        results.append(summary)
    return results

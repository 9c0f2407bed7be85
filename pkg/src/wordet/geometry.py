"""Box geometry, relative location encoding and crop sampling.

Boxes live in center-size form ``(x, y, w, h)`` with image coordinates
(x to the right, y downwards). Pixel ``(row, col)`` covers the unit square
``[col, col + 1) x [row, row + 1)``. Array helpers take ``(n, 4)`` float
arrays in the same layout and are what the training code actually uses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ROTATIONS = (0, 45, 90)
SCALES = (0.8, 1.2, 1.8, 2.7)


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class RelLoc:
    dx: float
    dy: float
    dw: float
    dh: float

    @classmethod
    def from_array(cls, a) -> "RelLoc":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True, order=True)
class CropSpec:
    rotation: int
    scale: float

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def tag(self) -> str:
        return f"r{self.rotation}_s{self.scale:g}"

    @classmethod
    def from_tag(cls, tag: str) -> "CropSpec":
        r, s = tag.split("_")
        return cls(int(r[1:]), float(s[1:]))


# Fixed branch order used for feature concatenation.
DETECTION_SPECS = (
    CropSpec(0, 0.8),
    CropSpec(0, 1.2),
    CropSpec(45, 1.2),
    CropSpec(90, 1.2),
    CropSpec(0, 1.8),
    CropSpec(0, 2.7),
)
SINGLE_SPEC = CropSpec(0, 1.2)
MULTI_SCALE_SPECS = (CropSpec(0, 0.8), CropSpec(0, 1.2), CropSpec(0, 1.8), CropSpec(0, 2.7))


# --------------------------------------------------------------------------
# scalar API


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.area() + b.area() - inter))


def rel_loc(candidate: Box, gt: Box) -> RelLoc:
    """Offset and log size ratio of ``candidate`` w.r.t. ``gt``, in candidate units."""
    return RelLoc(
        (candidate.x - gt.x) / candidate.w,
        (candidate.y - gt.y) / candidate.h,
        math.log(candidate.w / gt.w),
        math.log(candidate.h / gt.h),
    )


def apply_rel_loc(candidate: Box, r: RelLoc) -> Box:
    """Inverse of :func:`rel_loc`: the box ``g`` with ``rel_loc(candidate, g) == r``."""
    return Box(
        candidate.x - r.dx * candidate.w,
        candidate.y - r.dy * candidate.h,
        candidate.w / math.exp(r.dw),
        candidate.h / math.exp(r.dh),
    )


def crop_region(window: Box, spec: CropSpec | float) -> Box:
    scale = spec.scale if isinstance(spec, CropSpec) else float(spec)
    return Box(window.x, window.y, scale * window.w, scale * window.h)


def coverage_fraction(window: Box, gt: Box, scale: float) -> float:
    """Fraction of ``gt`` area inside the axis-aligned context crop of ``window``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    cx0, cy0, cx1, cy1 = crop_region(window, scale).corners()
    gx0, gy0, gx1, gy1 = gt.corners()
    iw = min(cx1, gx1) - max(cx0, gx0)
    ih = min(cy1, gy1) - max(cy0, gy0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return min(1.0, iw * ih / gt.area())


# --------------------------------------------------------------------------
# array API, boxes as (n, 4) center-size float arrays


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2.0, c[..., 2:] - c[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    ca = to_corners(np.reshape(a, (-1, 4)))
    cb = to_corners(np.reshape(b, (-1, 4)))
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(inter / union, 1.0)


def rel_loc_array(candidates: np.ndarray, gts: np.ndarray) -> np.ndarray:
    c = np.asarray(candidates, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(c.shape, g.shape), dtype=np.float64)
    out[..., 0] = (c[..., 0] - g[..., 0]) / c[..., 2]
    out[..., 1] = (c[..., 1] - g[..., 1]) / c[..., 3]
    out[..., 2] = np.log(c[..., 2] / g[..., 2])
    out[..., 3] = np.log(c[..., 3] / g[..., 3])
    return out


def apply_rel_loc_array(candidates: np.ndarray, rel: np.ndarray) -> np.ndarray:
    c = np.asarray(candidates, dtype=np.float64)
    r = np.asarray(rel, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(c.shape, r.shape), dtype=np.float64)
    out[..., 0] = c[..., 0] - r[..., 0] * c[..., 2]
    out[..., 1] = c[..., 1] - r[..., 1] * c[..., 3]
    out[..., 2] = c[..., 2] / np.exp(r[..., 2])
    out[..., 3] = c[..., 3] / np.exp(r[..., 3])
    return out


def coverage_fraction_array(windows: np.ndarray, gts: np.ndarray, scale: float) -> np.ndarray:
    w = np.array(windows, dtype=np.float64)
    w[..., 2:] *= scale
    cw = to_corners(w)
    cg = to_corners(gts)
    iw = np.clip(np.minimum(cw[..., 2], cg[..., 2]) - np.maximum(cw[..., 0], cg[..., 0]), 0, None)
    ih = np.clip(np.minimum(cw[..., 3], cg[..., 3]) - np.maximum(cw[..., 1], cg[..., 1]), 0, None)
    area = (cg[..., 2] - cg[..., 0]) * (cg[..., 3] - cg[..., 1])
    return np.minimum(1.0, iw * ih / area)


# --------------------------------------------------------------------------
# crop sampling


def _cos_sin(degrees: float) -> tuple[float, float]:
    # exact values on the right angles keep 90/180 resamplings free of drift
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    d = degrees % 360
    if d in exact:
        return exact[d]
    t = math.radians(d)
    return math.cos(t), math.sin(t)


def sampling_grid(windows: np.ndarray, rotation: float, scale: float, out_size: int) -> np.ndarray:
    """Continuous (x, y) sample positions, shape ``(n, out_size, out_size, 2)``.

    The grid spans ``(scale * w, scale * h)`` around each window center and is
    turned so the crop content appears rotated anti-clockwise by ``rotation``.
    """
    win = np.reshape(np.asarray(windows, dtype=np.float64), (-1, 4))
    u = (np.arange(out_size) + 0.5) / out_size - 0.5
    ox = u[None, None, :] * (scale * win[:, 2])[:, None, None]
    oy = u[None, :, None] * (scale * win[:, 3])[:, None, None]
    ox, oy = np.broadcast_arrays(ox, oy)
    c, s = _cos_sin(rotation)
    sx = win[:, 0, None, None] + c * ox - s * oy
    sy = win[:, 1, None, None] + s * ox + c * oy
    return np.stack([sx, sy], axis=-1)


def pad_with_mean(images: np.ndarray) -> np.ndarray:
    """Add a one-pixel border holding each image's mean intensity."""
    imgs = np.asarray(images, dtype=np.float64)
    squeeze = imgs.ndim == 2
    if squeeze:
        imgs = imgs[None]
    means = imgs.mean(axis=(1, 2))
    padded = np.empty((imgs.shape[0], imgs.shape[1] + 2, imgs.shape[2] + 2), dtype=np.float64)
    padded[:] = means[:, None, None]
    padded[:, 1:-1, 1:-1] = imgs
    return padded[0] if squeeze else padded


def bilinear(padded: np.ndarray, scene_idx: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample mean-padded images at continuous positions.

    ``padded`` is ``(S, H + 2, W + 2)`` from :func:`pad_with_mean`; ``scene_idx``
    has one entry per leading element of ``points`` (``(n, ..., 2)``).
    Anything beyond the border reads the mean ring.
    """
    hp, wp = padded.shape[1], padded.shape[2]
    # pixel-center convention, shifted by the one-pixel border
    px = np.clip(points[..., 0] + 0.5, 0.0, wp - 1.0)
    py = np.clip(points[..., 1] + 0.5, 0.0, hp - 1.0)
    x0 = np.minimum(px.astype(np.intp), wp - 2)
    y0 = np.minimum(py.astype(np.intp), hp - 2)
    fx = (px - x0).astype(padded.dtype)
    fy = (py - y0).astype(padded.dtype)
    idx = np.asarray(scene_idx, dtype=np.intp).reshape((-1,) + (1,) * (points.ndim - 2))
    flat = padded.reshape(-1)
    base = idx * (hp * wp) + y0 * wp + x0
    v00 = flat.take(base)
    v01 = flat.take(base + 1)
    v10 = flat.take(base + wp)
    v11 = flat.take(base + wp + 1)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def sample_crops(
    padded: np.ndarray,
    scene_idx: np.ndarray,
    windows: np.ndarray,
    spec: CropSpec,
    out_size: int,
) -> np.ndarray:
    """Batched :func:`sample_crop` over windows drawn from several scenes."""
    if out_size < 8:
        raise ValueError(f"out_size must be >= 8, got {out_size}")
    grid = sampling_grid(windows, spec.rotation, spec.scale, out_size)
    return bilinear(padded, scene_idx, grid)


def sample_crop(scene: np.ndarray, window: Box, spec: CropSpec, out_size: int) -> np.ndarray:
    scene = np.asarray(scene, dtype=np.float64)
    if scene.size == 0:
        raise ValueError("empty scene")
    padded = pad_with_mean(scene)[None]
    return sample_crops(padded, np.zeros(1, dtype=np.intp), window.as_array()[None], spec, out_size)[0]


def resample(image: np.ndarray, window: Box, rotation: float, scale: float, out_size: int) -> np.ndarray:
    """Like :func:`sample_crop` but with an arbitrary rotation angle."""
    if out_size < 8:
        raise ValueError(f"out_size must be >= 8, got {out_size}")
    padded = pad_with_mean(np.asarray(image, dtype=np.float64))[None]
    grid = sampling_grid(window.as_array()[None], rotation, scale, out_size)
    return bilinear(padded, np.zeros(1, dtype=np.intp), grid)[0]


def random_box_pairs(rng: np.random.Generator, n: int, min_iou: float = 0.37, max_aspect: float = 3.0):
    """Random (window, gt) arrays with IoU >= ``min_iou`` and aspect ratios bounded by ``max_aspect``.

    The gt is drawn relative to the window (log area ratio within the range
    IoU allows, independent aspect, bounded center offset) and rejected
    until the IoU constraint holds.
    """
    windows = np.empty((0, 4))
    gts = np.empty((0, 4))
    la = math.log(max_aspect)
    lr = -math.log(min_iou)
    while len(windows) < n:
        m = 2 * (n - len(windows)) + 64
        asp_w = np.exp(rng.uniform(-la, la, m))
        asp_g = np.exp(rng.uniform(-la, la, m))
        area_ratio = np.exp(rng.uniform(-lr, lr, m))
        w = np.stack([np.zeros(m), np.zeros(m), np.sqrt(asp_w), 1.0 / np.sqrt(asp_w)], axis=1) * [1, 1, 10, 10]
        ga = area_ratio * w[:, 2] * w[:, 3]
        gw = np.sqrt(ga * asp_g)
        gh = np.sqrt(ga / asp_g)
        off = rng.uniform(-0.6, 0.6, (m, 2)) * np.maximum(w[:, 2:], np.stack([gw, gh], axis=1))
        g = np.stack([off[:, 0], off[:, 1], gw, gh], axis=1)
        ious = iou_matrix_pairs(w, g)
        keep = ious >= min_iou
        windows = np.concatenate([windows, w[keep]])
        gts = np.concatenate([gts, g[keep]])
    return windows[:n], gts[:n]


def iou_matrix_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equal-length box arrays."""
    ca = to_corners(a)
    cb = to_corners(b)
    iw = np.clip(np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0]), 0, None)
    ih = np.clip(np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1]), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.minimum(inter / union, 1.0)


def coverage_search(n_pairs: int, seed: int = 0, scale: float = 2.7, min_iou: float = 0.37,
                    max_aspect: float = 3.0, threshold: float = 0.5, chunk: int = 100_000):
    """Search random constrained pairs for crops covering at most ``threshold`` of the gt.

    Returns ``(minimum coverage seen, list of violating (window, gt, coverage))``.
    """
    rng = np.random.default_rng(seed)
    worst = 1.0
    violations = []
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        w, g = random_box_pairs(rng, m, min_iou, max_aspect)
        cov = coverage_fraction_array(w, g, scale)
        worst = min(worst, float(cov.min()))
        for i in np.flatnonzero(cov <= threshold):
            violations.append((tuple(w[i]), tuple(g[i]), float(cov[i])))
            log.warning("coverage %.4f <= %.2f at scale %g: window %s, gt %s", cov[i], threshold, scale,
                        w[i].tolist(), g[i].tolist())
        done += m
    return worst, violations


def boxes_from_seq(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])

"""Per-landmark feature extraction.

Extractors follow a two-step protocol so one image can be sampled at many
shapes cheaply: ``ctx = extractor.prepare(img)`` does the per-image work
(padding, gradients, integral histograms) and ``ctx.extract(points)`` returns
features for an ``(L, 2)`` shape or a ``(S, L, 2)`` batch of shapes.

All layouts are landmark-major. Patch centres are landmark coordinates
rounded to the nearest pixel; patches crossing the border read
replicate-padded pixels, so the feature length never depends on position.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np


@dataclass(frozen=True)
class HogConfig:
    patch_side: int = 32
    cells_per_side: int = 4
    bins: int = 9
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.patch_side % self.cells_per_side:
            raise ValueError("patch_side must be divisible by cells_per_side")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")

    def length(self, n_landmarks):
        return n_landmarks * self.cells_per_side**2 * self.bins


@dataclass(frozen=True)
class LbpConfig:
    patch_side: int = 32

    def length(self, n_landmarks):
        return n_landmarks * N_UNIFORM_LABELS


def _centers(points, pad, shape, half):
    """Rounded patch origins, clamped into the padded image."""
    c = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64)
    h, w = shape
    cx = np.clip(c[..., 0], half - pad, w - 1 + pad - half) + pad
    cy = np.clip(c[..., 1], half - pad, h - 1 + pad - half) + pad
    return cx, cy


def _integral(channels):
    """Summed-area table with a zero first row/column; channels last."""
    h, w, k = channels.shape
    out = np.zeros((h + 1, w + 1, k), dtype=np.float64)
    np.cumsum(channels, axis=0, out=out[1:, 1:])
    np.cumsum(out[1:, 1:], axis=1, out=out[1:, 1:])
    return out


def _box_sums(table, y0, x0, y1, x1):
    return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]


def _as_batch(points):
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 2
    return (points[None] if single else points), single


class _HogContext:
    def __init__(self, table, pad, shape, cfg):
        self.table, self.pad, self.shape, self.cfg = table, pad, shape, cfg

    def extract(self, points):
        pts, single = _as_batch(points)
        cfg = self.cfg
        half = cfg.patch_side // 2
        cx, cy = _centers(pts, self.pad, self.shape, half)
        cs = cfg.patch_side // cfg.cells_per_side
        k = np.arange(cfg.cells_per_side) * cs
        # (S, L, cells_y, cells_x) corner grids
        y0 = (cy - half)[..., None, None] + k[:, None]
        x0 = (cx - half)[..., None, None] + k[None, :]
        hist = _box_sums(self.table, y0, x0, y0 + cs, x0 + cs)
        norm = np.sqrt(np.sum(hist * hist, axis=-1, keepdims=True) + cfg.epsilon**2)
        out = (hist / norm).reshape(pts.shape[0], -1)
        return out[0] if single else out


class HogExtractor:
    """Unsigned gradient-orientation histograms, L2-normalised per cell."""

    kind = "hog"

    def __init__(self, cfg=HogConfig()):
        self.cfg = cfg

    def length(self, n_landmarks):
        return self.cfg.length(n_landmarks)

    def prepare(self, img):
        pad = self.cfg.patch_side // 2 + 2
        a = np.pad(img.depth, pad, mode="edge")
        gy, gx = np.gradient(a)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        b = np.minimum((ang * (self.cfg.bins / np.pi)).astype(np.int64), self.cfg.bins - 1)
        channels = np.zeros(a.shape + (self.cfg.bins,))
        np.put_along_axis(channels, b[..., None], mag[..., None], axis=-1)
        return _HogContext(_integral(channels), pad, img.depth.shape, self.cfg)


class _ScaledContext:
    def __init__(self, inner, factor):
        self.inner, self.factor = inner, factor

    def extract(self, points):
        # pixel centres map as (x + 0.5) / f - 0.5
        pts = (np.asarray(points, dtype=np.float64) + 0.5) / self.factor - 0.5
        return self.inner.extract(pts)


class ScaledExtractor:
    """Run ``base`` on a ``factor``-times block-averaged copy of the depth map.

    Points are given in full-resolution pixels. Used for cheap coarse
    features such as the SMUF gate.
    """

    def __init__(self, base, factor=2):
        if int(factor) != factor or factor < 1:
            raise ValueError("factor must be a positive integer")
        self.base, self.factor = base, int(factor)

    @property
    def kind(self):
        return f"{self.base.kind}/{self.factor}"

    def prepare(self, img):
        f = self.factor
        d = img.depth
        h, w = (d.shape[0] // f) * f, (d.shape[1] // f) * f
        small = d[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))
        # extractors only read ``depth``
        return _ScaledContext(self.base.prepare(SimpleNamespace(depth=small)), f)


def extract_hog(img, shape, cfg=HogConfig()):
    return HogExtractor(cfg).prepare(img).extract(shape.points)


# 8-neighbour ring at radius 1, clockwise from the east neighbour
LBP_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def _uniform_lut():
    lut = np.full(256, -1, dtype=np.int64)
    label = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            lut[code] = label
            label += 1
    lut[lut < 0] = label
    return lut


UNIFORM_LUT = _uniform_lut()
N_UNIFORM_LABELS = int(UNIFORM_LUT.max()) + 1


def lbp_codes(a):
    """Raw 8-bit LBP codes; bit i is set when neighbour i is strictly brighter."""
    p = np.pad(a, 1, mode="edge")
    h, w = a.shape
    code = np.zeros(a.shape, dtype=np.int64)
    for i, (dy, dx) in enumerate(LBP_OFFSETS):
        code |= (p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] > a).astype(np.int64) << i
    return code


class _LbpContext:
    def __init__(self, labels, pad, shape, cfg):
        self.labels, self.pad, self.shape, self.cfg = labels, pad, shape, cfg
        k = np.arange(cfg.patch_side)
        self._offsets = (k[:, None] * labels.shape[1] + k[None, :]).ravel()

    def extract(self, points):
        # label counts gathered per patch; cheaper than a 59-channel integral
        pts, single = _as_batch(points)
        side = self.cfg.patch_side
        half = side // 2
        cx, cy = _centers(pts, self.pad, self.shape, half)
        origin = ((cy - half) * self.labels.shape[1] + (cx - half)).reshape(-1)
        lab = self.labels.ravel()[origin[:, None] + self._offsets]
        lab = lab + (np.arange(len(origin)) * N_UNIFORM_LABELS)[:, None]
        hist = np.bincount(lab.ravel(), minlength=len(origin) * N_UNIFORM_LABELS)
        out = (hist / float(side * side)).reshape(pts.shape[0], -1)
        return out[0] if single else out


class LbpExtractor:
    """Uniform LBP (8 neighbours, radius 1) histograms over each landmark patch."""

    kind = "lbp"

    def __init__(self, cfg=LbpConfig()):
        self.cfg = cfg

    def length(self, n_landmarks):
        return self.cfg.length(n_landmarks)

    def prepare(self, img):
        pad = self.cfg.patch_side // 2 + 2
        a = np.pad(img.depth, pad, mode="edge")
        return _LbpContext(UNIFORM_LUT[lbp_codes(a)], pad, img.depth.shape, self.cfg)


def extract_lbp(img, shape, cfg=LbpConfig()):
    return LbpExtractor(cfg).prepare(img).extract(shape.points)


def patch_offsets(patch_side):
    """Row-major (dy, dx) offsets of a square patch, centre excluded."""
    if patch_side % 2 == 0 or patch_side < 3:
        raise ValueError(f"patch_side must be odd and >= 3, got {patch_side}")
    r = patch_side // 2
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = (dy != 0) | (dx != 0)
    return dy[keep], dx[keep]


class _DiffContext:
    def __init__(self, padded, pad, shape, offsets):
        self.padded, self.pad, self.shape, self.offsets = padded, pad, shape, offsets

    def extract(self, points):
        """Depth-difference vectors, shape ``(L, p)`` or ``(S, L, p)``."""
        pts, single = _as_batch(points)
        cx, cy = _centers(pts, self.pad, self.shape, self.pad)
        dy, dx = self.offsets
        centre = self.padded[cy, cx]
        out = self.padded[cy[..., None] + dy, cx[..., None] + dx] - centre[..., None]
        return out[0] if single else out


class DepthDiffExtractor:
    kind = "depthdiff"

    def __init__(self, patch_side=15):
        self.patch_side = patch_side
        self.offsets = patch_offsets(patch_side)

    @property
    def p(self):
        return self.patch_side**2 - 1

    def prepare(self, img):
        pad = self.patch_side // 2
        padded = np.pad(img.depth, pad, mode="edge")
        return _DiffContext(padded, pad, img.depth.shape, self.offsets)


def extract_depth_diff(img, shape, patch_side=15):
    return DepthDiffExtractor(patch_side).prepare(img).extract(shape.points)


def binarize(d, W):
    """Binary codes ``0.5 * (sgn(W^T d) + 1)`` with ``sgn(0) = +1``.

    ``d`` is ``(..., p)``; returns ``uint8`` codes of shape ``(..., B)``.
    """
    d = np.asarray(d, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] < 1:
        raise ValueError("W must be a (p, B) matrix with B >= 1")
    if d.shape[-1] != W.shape[0]:
        raise ValueError(f"d has {d.shape[-1]} entries, W expects {W.shape[0]}")
    return (d @ W >= 0.0).astype(np.uint8)


def pack_codes(codes):
    """Pack ``(..., B)`` bits into little-endian 64-bit words, bit j of the
    code landing in bit ``j % 64`` of word ``j // 64``."""
    codes = np.asarray(codes, dtype=np.uint8)
    b = codes.shape[-1]
    words = -(-b // 64)
    padded = np.zeros(codes.shape[:-1] + (words * 64,), dtype=np.uint8)
    padded[..., :b] = codes
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return packed.view("<u8")


def unpack_codes(words, n_bits):
    words = np.ascontiguousarray(words, dtype="<u8")
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")
    return bits[..., :n_bits]

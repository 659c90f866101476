"""Depth images, face boxes, landmark shapes and the image-level operations
(surface-normal preprocessing, clustering face detection, mirroring)."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.cluster import KMeans

from .landmarks import N_LANDMARKS


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Row-major depth grid in millimetres with a validity mask.

    Invalid pixels hold ``0.0``; algorithms gate on ``valid`` and never read
    them. ``filled`` marks pixels whose value was synthesised by hole filling
    (only set on preprocessed images).
    """

    depth: np.ndarray
    valid: np.ndarray
    pitch: float = 1.0
    filled: np.ndarray = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ValueError(
                f"depth {depth.shape} and valid {valid.shape} grids must match"
            )
        if depth.size == 0:
            raise ValueError("depth image has zero pixels")
        if not np.all(np.isfinite(depth[valid])):
            raise ValueError("non-finite depth at a valid pixel")
        if self.pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        depth = np.where(valid, depth, 0.0)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)
        if self.filled is not None:
            object.__setattr__(self, "filled", np.asarray(self.filled, dtype=bool))

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return (
            self.pitch == other.pitch
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.depth, other.depth)
        )


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned box, top-left corner plus size, in pixels.

    Coordinates share the landmark convention where pixel ``i`` is centred on
    ``i``; a box tightly covering pixel columns ``a..b`` spans
    ``[a - 0.5, b + 0.5]``.
    """

    x: float
    y: float
    w: float
    h: float
    fallback: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self):
        return np.array([self.x + self.w / 2.0, self.y + self.h / 2.0])

    @property
    def size(self):
        return np.array([self.w, self.h], dtype=np.float64)

    def inside(self, width, height):
        return (
            self.x >= -0.5
            and self.y >= -0.5
            and self.x + self.w <= width - 0.5
            and self.y + self.h <= height - 0.5
        )

    def expanded(self, margin):
        dx, dy = margin * self.w, margin * self.h
        return FaceBox(self.x - dx, self.y - dy, self.w + 2 * dx, self.h + 2 * dy)

    def contains(self, points):
        """Closed-boundary containment test for an ``(n, 2)`` array."""
        points = np.atleast_2d(points)
        return (
            (points[:, 0] >= self.x)
            & (points[:, 0] <= self.x + self.w)
            & (points[:, 1] >= self.y)
            & (points[:, 1] <= self.y + self.h)
        )


class Shape:
    """Ordered landmark coordinates with visibility flags.

    ``ids`` maps each row to its index in the global landmark table, so a
    14-landmark prediction can be compared against a 22-landmark annotation.
    """

    __slots__ = ("points", "visible", "ids")

    def __init__(self, points, visible=None, ids=None):
        points = np.array(points, dtype=np.float64).reshape(-1, 2)
        n = len(points)
        visible = np.ones(n, bool) if visible is None else np.array(visible, bool)
        ids = np.arange(n) if ids is None else np.array(ids, dtype=np.int64)
        if visible.shape != (n,) or ids.shape != (n,):
            raise ValueError("points, visible and ids must have equal length")
        self.points = points
        self.visible = visible
        self.ids = ids

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"Shape(n={len(self)}, visible={int(self.visible.sum())})"

    def __eq__(self, other):
        if not isinstance(other, Shape):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.ids, other.ids)
        )

    def to_vector(self):
        """Flat ``(x1, y1, ..., xL, yL)`` vector."""
        return self.points.reshape(-1).copy()

    @classmethod
    def from_vector(cls, vector, visible=None, ids=None):
        return cls(np.asarray(vector, dtype=np.float64).reshape(-1, 2), visible, ids)

    def select(self, ids):
        """Sub-shape restricted to global landmark ``ids`` (in that order)."""
        index = {int(g): i for i, g in enumerate(self.ids)}
        try:
            rows = [index[int(g)] for g in ids]
        except KeyError as exc:
            raise ValueError(f"landmark {exc.args[0]} not present in shape") from None
        return Shape(self.points[rows], self.visible[rows], self.ids[rows])

    def expand(self, n_total=N_LANDMARKS):
        """Embed into the full landmark table; missing rows are invisible."""
        points = np.zeros((n_total, 2))
        visible = np.zeros(n_total, bool)
        points[self.ids] = self.points
        visible[self.ids] = self.visible
        return Shape(points, visible)


@dataclass(frozen=True)
class PreprocessConfig:
    median_size: int = 3


def fill_holes(depth, valid):
    """Nearest-valid-neighbour fill on the 8-connected grid (chessboard BFS)."""
    if valid.all():
        return depth.copy()
    _, (iy, ix) = ndimage.distance_transform_cdt(
        ~valid, metric="chessboard", return_indices=True
    )
    return depth[iy, ix]


def normal_z(depth, pitch=1.0):
    """z-component of the unit surface normal from central differences."""
    gy, gx = np.gradient(depth, pitch)
    return 1.0 / np.sqrt(1.0 + gx * gx + gy * gy)


def preprocess(img, cfg=PreprocessConfig()):
    """Replace depth by the normal z-component of the hole-filled, median
    smoothed surface.

    The returned image is valid everywhere; ``filled`` records which pixels
    were synthesised by hole filling.
    """
    if not img.valid.any():
        raise ValueError("cannot preprocess an image without valid pixels")
    filled = fill_holes(img.depth, img.valid)
    if cfg.median_size > 1:
        filled = ndimage.median_filter(filled, size=cfg.median_size, mode="nearest")
    nz = normal_z(filled, img.pitch)
    return DepthImage(nz, np.ones_like(img.valid), img.pitch, filled=~img.valid)


@dataclass(frozen=True)
class DetectorConfig:
    n_clusters: int = 3
    max_iter: int = 100
    seed: int = 0
    min_area_fraction: float = 0.01
    # adjacent depth clusters closer than this belong to one surface
    merge_gap_mm: float = 25.0


def kmeans_1d(values, k, seed=0, max_iter=100):
    """Label 1-D values with k-means++ / Lloyd; returns (labels, centers)."""
    # weighted fit over distinct values: same objective, far fewer points
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
                random_state=seed)
    km.fit(uniq.reshape(-1, 1), sample_weight=counts)
    return km.labels_[inverse], km.cluster_centers_.ravel()


def _bbox(mask, fallback=False):
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    return FaceBox(x0 - 0.5, y0 - 0.5, float(x1 - x0 + 1), float(y1 - y0 + 1),
                   fallback=fallback)


def detect_face(img, cfg=DetectorConfig()):
    """Box around the nearest depth cluster (see :func:`face_mask`).

    Images with fewer than ``k`` distinct depths return the box of all valid
    pixels with ``fallback=True``.
    """
    mask = face_mask(img, cfg)
    if mask is None:
        return _bbox(img.valid, fallback=True)
    return _bbox(mask)


def face_mask(img, cfg=DetectorConfig()):
    """Pixels of the nearest depth cluster.

    Valid depths are split into ``k`` clusters; the one with the lowest mean
    depth is kept, together with farther clusters that continue it without a
    depth gap (a single head spans a continuous depth range). Connected
    components under ``min_area_fraction`` of the valid pixels are dropped.
    Returns ``None`` when there are fewer than ``k`` distinct depths.
    """
    valid = img.valid
    if not valid.any():
        raise ValueError("cannot detect a face in an image without valid pixels")
    values = img.depth[valid]
    if np.unique(values).size < cfg.n_clusters:
        return None

    labels, centers = kmeans_1d(values, cfg.n_clusters, cfg.seed, cfg.max_iter)
    order = np.argsort(centers)
    keep = np.zeros(values.shape, bool)
    hi = -np.inf
    for rank, c in enumerate(order):
        members = labels == c
        if not members.any():
            continue
        if rank > 0 and values[members].min() - hi > cfg.merge_gap_mm:
            break
        keep |= members
        hi = max(hi, values[members].max())

    mask = np.zeros(valid.shape, bool)
    mask[valid] = keep
    comp, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n > 1:
        areas = np.bincount(comp.ravel())[1:]
        big = np.flatnonzero(areas >= cfg.min_area_fraction * valid.sum()) + 1
        if big.size == 0:
            big = np.array([np.argmax(areas) + 1])
        mask = np.isin(comp, big)
    return mask


def hflip(img, shape, mirror_map):
    """Mirror image and landmarks about the vertical axis."""
    mirror_map = np.asarray(mirror_map)
    n = len(mirror_map)
    if sorted(mirror_map.tolist()) != list(range(n)) or not np.array_equal(
        mirror_map[mirror_map], np.arange(n)
    ):
        raise ValueError("mirror map must be an involutive permutation")
    if len(shape) != n:
        raise ValueError(f"mirror map has {n} entries, shape has {len(shape)}")
    flipped = DepthImage(
        img.depth[:, ::-1],
        img.valid[:, ::-1],
        img.pitch,
        None if img.filled is None else img.filled[:, ::-1],
    )
    pts = shape.points.copy()
    pts[:, 0] = img.width - 1 - pts[:, 0]
    out = Shape(pts[mirror_map], shape.visible[mirror_map], shape.ids)
    return flipped, out


def hflip_box(box, width):
    return FaceBox(width - 1 - box.x - box.w, box.y, box.w, box.h, box.fallback)

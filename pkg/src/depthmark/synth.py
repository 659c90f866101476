"""Deterministic synthetic depth faces with analytic landmark ground truth.

The head is an ellipsoid whose front carries Gaussian relief (nose ridge,
eye sockets, brows, lips, mouth groove, chin). Points are sampled densely on
the parametric surface, rotated about the vertical axis and splatted into a
z-buffer under orthographic projection.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .depth import DepthImage, Shape, detect_face
from .io import DEFAULT_SCALE, quantize_depth
from .landmarks import N_LANDMARKS

BASE_AXES = np.array([72.0, 100.0, 92.0])

# visibility rule
MIN_VIEW_NORMAL = 0.05
ZBUFFER_SLACK_MM = 2.0
NOSE_CENTERING_MM = 14.0


@dataclass(frozen=True)
class HeadParams:
    yaw: float = 0.0
    scale: float = 0.85
    expression_amp: float = 0.0
    # (width, height) of the occluding rectangle as fractions of the head box
    occlusion: tuple = None
    noise_sigma: float = 0.3
    seed: int = 0
    identity: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0)
    width: int = 200
    height: int = 250
    pitch: float = 1.0
    distance: float = 650.0
    # None leaves the background invalid, a number places a far plane there
    background: float = None

    def __post_init__(self):
        if not -90.0 <= self.yaw <= 90.0:
            raise ValueError(f"yaw {self.yaw} outside [-90, 90]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SynthSample:
    image: DepthImage
    gt: Shape
    yaw: float
    box: object
    params: HeadParams = field(repr=False, default=None)


def _front_landmarks(e):
    """Landmark (x, y) positions on the face plane, mm at unit scale."""
    half = np.array([
        (-48.0, 47 + 4 * e), (-32.0, 51 + 4 * e), (-16.0, 48 + 4 * e),
    ])
    pts = np.zeros((N_LANDMARKS, 2))
    pts[0:3] = half
    pts[3:6] = half[::-1] * [-1, 1]
    pts[6:10] = [(-46, 27), (-18, 28), (18, 28), (46, 27)]
    pts[10:12] = [(-12, 24), (12, 24)]
    pts[12:15] = [(-17, -17), (0, -11), (17, -17)]
    corner = (25 + 4 * e, -45 + 6 * e)
    pts[15] = (-corner[0], corner[1])
    pts[16] = (0, -38)
    pts[17] = corner
    pts[18] = (0, -43.5)
    pts[19] = (0, -46.5 - 3 * e)
    pts[20] = (0, -53 - 2 * e)
    pts[21] = (0, -86)
    return pts


def _gauss(dx, dy, sx, sy):
    return np.exp(-0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2))


def _relief(x, y, e):
    """Outward displacement (mm) of the facial relief at unit scale."""
    ax = np.abs(x)
    t = np.clip((30.0 - y) / 42.0, 0.0, 1.0)
    ridge = np.where(
        y >= -12.0,
        (4.0 + 22.0 * t) * np.exp(-np.clip(y - 30.0, 0, None) ** 2 / 64.0),
        26.0 * np.exp(-((y + 12.0) / 6.0) ** 2),
    )
    sx = 6.0 + 6.0 * t
    h = ridge * np.exp(-0.5 * (x / sx) ** 2)
    h += 4.0 * _gauss(x, y + 10.0, 6.0, 6.0)
    h += 7.0 * _gauss(ax - 16.0, y + 17.0, 5.0, 5.0)
    h -= 11.0 * _gauss(ax - 32.0, y - 28.0, 14.0, 8.0)
    h += (4.0 + 3.0 * e) * np.exp(-0.5 * ((y - 48.0 - 4.0 * e) / 6.0) ** 2) * np.exp(
        -((ax / 50.0) ** 6)
    )
    h += 5.0 * _gauss(x, y + 38.0, 16.0, 4.0)
    h += 5.0 * _gauss(x, y + 53.0 + 2.0 * e, 15.0, 4.0)
    mouth_y = -45.0 + 6.0 * e * (x / 25.0) ** 2
    h -= (
        (4.0 + 3.0 * e)
        * np.exp(-0.5 * ((y - mouth_y) / (1.8 + 2.0 * e)) ** 2)
        * np.exp(-((ax / (26.0 + 4.0 * e)) ** 8))
    )
    h += 7.0 * _gauss(x, y + 82.0, 18.0, 10.0)
    h += 3.0 * _gauss(ax - 45.0, y + 5.0, 15.0, 15.0)
    return h


class _Head:
    def __init__(self, params):
        self.axes = BASE_AXES * np.asarray(params.identity) * params.scale
        self.scale = params.scale
        self.e = params.expression_amp

    def surface(self, u, v):
        """Surface points for azimuth ``u`` and elevation ``v`` (radians)."""
        ax, ay, az = self.axes
        cv = np.cos(v)
        p0 = np.stack([ax * cv * np.sin(u), ay * np.sin(v), az * cv * np.cos(u)], -1)
        n0 = p0 / self.axes**2
        n0 /= np.linalg.norm(n0, axis=-1, keepdims=True)
        front = np.clip((n0[..., 2] - 0.15) / 0.35, 0.0, 1.0) ** 2
        on_face = front > 0
        s = self.scale
        h = np.zeros(front.shape)
        h[on_face] = s * _relief(
            p0[..., 0][on_face] / s, p0[..., 1][on_face] / s, self.e
        ) * front[on_face]
        return p0 + h[..., None] * n0

    def landmark_uv(self):
        ax, ay, _ = self.axes
        xy = _front_landmarks(self.e) * self.scale
        v = np.arcsin(np.clip(xy[:, 1] / ay, -1, 1))
        u = np.arcsin(np.clip(xy[:, 0] / (ax * np.cos(v)), -1, 1))
        return u, v

    def landmarks(self):
        """Landmark points and outward unit normals in head coordinates."""
        u, v = self.landmark_uv()
        p = self.surface(u, v)
        d = 1e-5
        pu = (self.surface(u + d, v) - self.surface(u - d, v)) / (2 * d)
        pv = (self.surface(u, v + d) - self.surface(u, v - d)) / (2 * d)
        n = np.cross(pu, pv)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        n *= np.sign(np.sum(n * p, axis=-1))[:, None]
        return p, n


def _rotation(yaw_deg):
    t = np.deg2rad(yaw_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _project(points, params):
    """Head coordinates -> (px, py, depth)."""
    rot = points @ _rotation(params.yaw).T
    # keep the nose-extended silhouette centred as the head turns
    shift = NOSE_CENTERING_MM * params.scale * np.sin(np.deg2rad(params.yaw))
    cx = (params.width - 1) / 2.0 + params.offset[0] - shift / params.pitch
    cy = (params.height - 1) / 2.0 + params.offset[1]
    px = cx + rot[..., 0] / params.pitch
    py = cy - rot[..., 1] / params.pitch
    return px, py, params.distance - rot[..., 2], rot


def head_landmarks(params):
    """Projected landmarks ``(L, 2)``, their depths and rotated normals."""
    head = _Head(params)
    p, n = head.landmarks()
    px, py, depth, _ = _project(p, params)
    return np.stack([px, py], -1), depth, n @ _rotation(params.yaw).T


def _zbuffer(px, py, depth, width, height):
    ix = np.rint(px).astype(np.int64).ravel()
    iy = np.rint(py).astype(np.int64).ravel()
    z = depth.ravel()
    ok = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    flat = iy[ok] * width + ix[ok]
    buf = np.full(width * height, np.inf)
    np.minimum.at(buf, flat, z[ok])
    valid = np.isfinite(buf)
    buf[~valid] = 0.0
    return buf.reshape(height, width), valid.reshape(height, width)


def _close_pinholes(buf, valid):
    holes = ndimage.binary_closing(valid, structure=np.ones((3, 3))) & ~valid
    if holes.any():
        k = np.ones((3, 3))
        sums = ndimage.convolve(np.where(valid, buf, 0.0), k, mode="constant")
        counts = ndimage.convolve(valid.astype(float), k, mode="constant")
        buf = buf.copy()
        buf[holes] = sums[holes] / np.maximum(counts[holes], 1)
        valid = valid | holes
    return buf, valid


def _render_surface(params, head):
    ax, ay, az = head.axes
    spacing = 0.5 * params.pitch
    t = np.deg2rad(params.yaw)
    span = 1.8
    nu = int(np.ceil(2 * span * max(ax, az) / spacing))
    nv = int(np.ceil(np.pi * ay / spacing))
    u = np.linspace(-t - span, -t + span, nu)
    v = np.linspace(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3, nv)
    uu, vv = np.meshgrid(u, v)
    pts = head.surface(uu, vv)
    px, py, depth, _ = _project(pts, params)
    buf, valid = _zbuffer(px, py, depth, params.width, params.height)
    return _close_pinholes(buf, valid)


def render_head(params):
    """Render one head; returns a :class:`SynthSample`."""
    rng = np.random.default_rng(params.seed)
    head = _Head(params)
    buf, valid = _render_surface(params, head)

    if params.occlusion is not None:
        ys, xs = np.nonzero(valid)
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        ow = max(1, int(round(params.occlusion[0] * (x1 - x0 + 1))))
        oh = max(1, int(round(params.occlusion[1] * (y1 - y0 + 1))))
        ox = int(rng.integers(x0, max(x0 + 1, x1 - ow + 2)))
        oy = int(rng.integers(y0, max(y0 + 1, y1 - oh + 2)))
        sl = np.s_[oy:oy + oh, ox:ox + ow]
        region = buf[sl][valid[sl]]
        front = region.min() if region.size else params.distance - head.axes[2]
        buf[sl] = front - 20.0
        valid[sl] = True

    # visibility: facing the camera and not hidden in the z-buffer
    pts2d, lm_depth, normals = head_landmarks(params)
    visible = normals[:, 2] >= MIN_VIEW_NORMAL
    ix = np.rint(pts2d[:, 0]).astype(int)
    iy = np.rint(pts2d[:, 1]).astype(int)
    inside = (ix >= 0) & (ix < params.width) & (iy >= 0) & (iy < params.height)
    visible &= inside
    # hidden when the whole 3x3 neighbourhood lies in front of the landmark;
    # a single pixel is too coarse on steep relief
    padded = np.pad(np.where(valid, buf, -np.inf), 1, constant_values=-np.inf)
    back = ndimage.maximum_filter(padded, size=3)[1:-1, 1:-1]
    for i in np.flatnonzero(visible):
        if back[iy[i], ix[i]] < lm_depth[i] - ZBUFFER_SLACK_MM:
            visible[i] = False

    depth = buf
    if params.noise_sigma > 0:
        depth = depth + rng.normal(0.0, params.noise_sigma, depth.shape)
    if params.background is not None:
        depth = np.where(valid, depth, params.background)
        valid = np.ones_like(valid)
    depth = quantize_depth(depth, DEFAULT_SCALE)
    image = DepthImage(depth, valid, params.pitch)
    gt = Shape(pts2d, visible)
    return SynthSample(image, gt, float(params.yaw), detect_face(image), params)


def render_scene(params, torso_depth=900.0, background_depth=2000.0, rng=None):
    """Head in front of a torso slab and a background wall.

    Returns ``(image, head_mask)``; the mask marks pixels rendered from the
    head surface.
    """
    rng = np.random.default_rng(params.seed if rng is None else rng)
    head = _Head(params)
    buf, valid = _render_surface(params, head)
    ys, xs = np.nonzero(valid)
    head_mask = valid.copy()
    depth = np.full(buf.shape, background_depth)
    top = ys.max() + 1 + int(rng.integers(6, 15))
    half = int((xs.max() - xs.min()) * rng.uniform(0.8, 1.1))
    cx = int(round(xs.mean()))
    cols = np.arange(buf.shape[1])
    torso_cols = np.abs(cols - cx) <= half
    if top < buf.shape[0]:
        bulge = 30.0 * (1 - ((cols - cx) / max(half, 1)) ** 2)
        depth[top:, torso_cols] = (torso_depth - bulge)[torso_cols]
    depth[valid] = buf[valid]
    if params.noise_sigma > 0:
        depth = depth + rng.normal(0.0, params.noise_sigma, depth.shape)
    depth = quantize_depth(depth, DEFAULT_SCALE)
    return DepthImage(depth, np.ones_like(valid), params.pitch), head_mask


def make_dataset(
    n,
    yaw_range=(-90.0, 90.0),
    template=HeadParams(),
    seed=0,
    expression_range=(0.0, 0.0),
    occlusion_prob=0.0,
    occlusion_size=(0.35, 0.25),
    identity_sigma=0.04,
    offset_sigma=4.0,
    yaws=None,
):
    """``n`` samples with random identity, offset and yaw.

    Yaws are drawn uniformly from ``yaw_range`` unless given explicitly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if yaws is None:
        yaws = rng.uniform(yaw_range[0], yaw_range[1], n)
    elif len(yaws) != n:
        raise ValueError("len(yaws) must equal n")
    identity = 1.0 + identity_sigma * rng.standard_normal((n, 3))
    offsets = offset_sigma * rng.standard_normal((n, 2))
    expr = rng.uniform(expression_range[0], expression_range[1], n)
    occl = rng.uniform(size=n) < occlusion_prob
    seeds = rng.integers(0, 2**31 - 1, n)
    out = []
    for i in range(n):
        p = replace(
            template,
            yaw=float(np.clip(yaws[i], -90.0, 90.0)),
            identity=tuple(float(a) for a in identity[i]),
            offset=tuple(float(o) for o in offsets[i]),
            expression_amp=float(expr[i]),
            occlusion=tuple(occlusion_size) if occl[i] else template.occlusion,
            seed=int(seeds[i]),
        )
        out.append(render_head(p))
    return out

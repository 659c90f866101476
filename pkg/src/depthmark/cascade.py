"""Ridge-regression descent maps and cascaded shape regression."""

import logging
from dataclasses import dataclass, field, replace
from time import perf_counter

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .depth import FaceBox, Shape

log = logging.getLogger(__name__)


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank, size):
        super().__init__(
            f"unregularised system is rank deficient (rank {rank} < {size}); "
            "use gamma > 0"
        )
        self.rank = rank
        self.size = size


@dataclass(frozen=True)
class TrainConfig:
    n_stages: int = 7
    # relative ridge strength; the absolute value per stage is
    # gamma * trace(Phi Phi^T) / m
    gamma: float = 1.0
    jitter_count: int = 10
    jitter_scale_sigma: float = 0.05
    jitter_shift_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.jitter_count < 0:
            raise ValueError("jitter_count must be >= 0")
        if min(self.jitter_scale_sigma, self.jitter_shift_sigma, self.gamma) < 0:
            raise ValueError("gamma and jitter sigmas must be non-negative")


@dataclass
class StageModel:
    R: np.ndarray
    mean_feature: np.ndarray
    gamma: float

    def __post_init__(self):
        if self.R.shape[1] != self.mean_feature.shape[0]:
            raise ValueError("descent map columns must match the feature length")


@dataclass
class CascadeModel:
    stages: list
    init_shape: np.ndarray  # (L', 2), box-relative unit frame
    landmark_ids: np.ndarray
    extractor: object
    trace: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def feature_kind(self):
        return self.extractor.kind

    def truncate(self, k):
        return replace(self, stages=self.stages[:k])

    # hooks used by the gating layer
    def start_shape(self, box):
        return place_init_shape(self.init_shape, box)

    @property
    def gate_extractor(self):
        return self.extractor

    def gate_feature(self, ctx, x):
        return ctx.extract(x)

    def run(self, ctx, x, phi=None, timer=None):
        return run_cascade(self, ctx, x, phi, timer)


def normalize_shape(points, box):
    """Express ``(L, 2)`` points in the box-relative unit frame."""
    return (np.asarray(points, dtype=np.float64) - box.center) / box.size


def place_init_shape(init, box):
    """Scale a unit-frame shape by the box size and move it to the box centre."""
    if not (box.w > 0 and box.h > 0):
        raise ValueError("degenerate box")
    pts = init.points if isinstance(init, Shape) else np.asarray(init, np.float64)
    return box.center + pts * box.size


def make_jitters(box, cfg, rng):
    """Perturbed copies of ``box`` with scale ~ N(1, s^2) and shift ~ N(0, t^2 * size)."""
    rng = np.random.default_rng(rng)
    n = cfg.jitter_count
    scales = np.maximum(1.0 + cfg.jitter_scale_sigma * rng.standard_normal(n), 0.1)
    shifts = cfg.jitter_shift_sigma * rng.standard_normal((n, 2)) * box.size
    out = []
    for s, (dx, dy) in zip(scales, shifts):
        c = box.center + (dx, dy)
        w, h = box.w * s, box.h * s
        out.append(FaceBox(c[0] - w / 2, c[1] - h / 2, w, h))
    return out


def _pivoted_solve(A, B):
    """Solve ``A X = B`` for symmetric PSD ``A`` via pivoted Cholesky."""
    c, piv, rank, info = lapack.dpstrf(A, lower=0)
    n = A.shape[0]
    if info < 0:
        raise np.linalg.LinAlgError(f"dpstrf failed (info={info})")
    if rank < n:
        raise RankDeficientError(rank, n)
    U = np.triu(c)
    p = piv - 1
    # P^T A P = U^T U
    y = linalg.solve_triangular(U, B[p], trans="T")
    x = linalg.solve_triangular(U, y)
    out = np.empty_like(x)
    out[p] = x
    return out


def solve_spd(A, B, allow_pivot=True):
    """Solve ``A X = B`` with a Cholesky factorisation of SPD ``A``."""
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=False), B)
    except np.linalg.LinAlgError:
        if not allow_pivot:
            raise
        return _pivoted_solve(A, B)


def train_stage(X_hat, Phi_hat, gamma):
    """Descent map ``R = X Phi^T (Phi Phi^T + gamma I)^-1``.

    ``X_hat`` is ``(2L, N)`` target updates, ``Phi_hat`` is ``(m, N)``
    centred features. ``gamma = 0`` gives the plain least-squares map and
    raises :class:`RankDeficientError` when ``Phi Phi^T`` is singular.
    With ``gamma > 0`` and fewer samples than features the equivalent dual
    form ``X (Phi^T Phi + gamma I)^-1 Phi^T`` is solved instead.
    """
    X_hat = np.asarray(X_hat, dtype=np.float64)
    Phi_hat = np.asarray(Phi_hat, dtype=np.float64)
    if X_hat.shape[1] != Phi_hat.shape[1] or X_hat.shape[1] < 1:
        raise ValueError("X_hat and Phi_hat need the same, non-zero column count")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    m, n = Phi_hat.shape
    if gamma > 0 and n < m:
        K = Phi_hat.T @ Phi_hat
        K[np.diag_indices_from(K)] += gamma
        return solve_spd(K, X_hat.T).T @ Phi_hat.T
    A = Phi_hat @ Phi_hat.T
    if gamma > 0:
        A[np.diag_indices_from(A)] += gamma
        Rt = solve_spd(A, Phi_hat @ X_hat.T)
    else:
        Rt = _pivoted_solve(A, Phi_hat @ X_hat.T)
    return Rt.T


def ridge_objective(X_hat, Phi_hat, R, gamma):
    r = X_hat - R @ Phi_hat
    return float(np.sum(r * r) + gamma * np.sum(R * R))


def absolute_gamma(gamma, Phi_rows):
    """Per-stage ridge strength ``gamma * trace(Phi Phi^T) / m``."""
    m = Phi_rows.shape[1]
    return gamma * float(np.einsum("ij,ij->", Phi_rows, Phi_rows)) / m


def _mean_error(X, G):
    return float(np.mean(np.linalg.norm(X - G, axis=-1)))


def initial_shapes(init, boxes, cfg):
    """Start shapes for every sample: its own box plus ``jitter_count`` jitters."""
    rng = np.random.default_rng(cfg.seed)
    starts = []
    for box in boxes:
        bs = [box] + make_jitters(box, cfg, rng)
        starts.append(np.stack([place_init_shape(init, b) for b in bs]))
    return np.stack(starts)  # (N, S, L, 2)


def train_cascade(images, gt_points, boxes, cfg, extractor, landmark_ids=None):
    """Learn ``cfg.n_stages`` descent maps on preprocessed images.

    ``gt_points`` is ``(N, L, 2)``. The unit-frame mean of the ground truth
    is the initial shape; every image contributes its detected box and
    ``jitter_count`` perturbed boxes as starting points.
    """
    G = np.asarray(gt_points, dtype=np.float64)
    n, L = G.shape[:2]
    if n < 2:
        raise ValueError("train_cascade needs at least 2 samples")
    if len(images) != n or len(boxes) != n:
        raise ValueError("images, shapes and boxes must have equal length")
    ids = np.arange(L) if landmark_ids is None else np.asarray(landmark_ids)
    if len(ids) != L:
        raise ValueError("landmark_ids length does not match the shapes")

    init = np.mean([normalize_shape(g, b) for g, b in zip(G, boxes)], axis=0)
    X = initial_shapes(init, boxes, cfg)
    s = X.shape[1]
    m = extractor.length(L)

    stages, trace = [], []
    mean_feature = None
    for k in range(cfg.n_stages):
        Phi = np.empty((n, s, m))
        gt_feat = np.empty((n, m)) if mean_feature is None else None
        for i, img in enumerate(images):
            ctx = extractor.prepare(img)
            Phi[i] = ctx.extract(X[i])
            if gt_feat is not None:
                gt_feat[i] = ctx.extract(G[i])
        if gt_feat is not None:
            # ground-truth features do not move between stages
            mean_feature = gt_feat.mean(axis=0)
        Phi_rows = Phi.reshape(n * s, m)
        Phi_rows -= mean_feature
        X_rows = (G[:, None] - X).reshape(n * s, 2 * L)
        gamma_k = absolute_gamma(cfg.gamma, Phi_rows)
        if cfg.gamma > 0 and gamma_k == 0:
            # every start already sits on its ground truth: nothing to regress
            R = np.zeros((2 * L, m))
        else:
            R = train_stage(X_rows.T, Phi_rows.T, gamma_k)
        before = _mean_error(X, G[:, None])
        X = X + (Phi_rows @ R.T).reshape(X.shape)
        after = _mean_error(X, G[:, None])
        trace.append((before, after))
        log.info("stage %d: train error %.4f -> %.4f px", k + 1, before, after)
        stages.append(StageModel(R, mean_feature.copy(), gamma_k))
        del Phi, Phi_rows
    return CascadeModel(stages, init, ids, extractor, trace)


def run_cascade(model, ctx, x, phi=None, timer=None):
    """Apply every stage to start shape ``x`` (``(L, 2)``) in a prepared image.

    ``phi`` may carry already extracted stage-1 features.
    """
    x = np.array(x, dtype=np.float64)
    for k, stage in enumerate(model.stages):
        if phi is None or k > 0:
            with phase(timer, "feature"):
                phi = ctx.extract(x)
        with phase(timer, "update"):
            x = x + (stage.R @ (phi - stage.mean_feature)).reshape(-1, 2)
    return x


def predict(model, img, box, ctx=None):
    """Landmarks for one preprocessed image starting from ``box``."""
    if ctx is None:
        ctx = model.extractor.prepare(img)
    x = run_cascade(model, ctx, place_init_shape(model.init_shape, box))
    return Shape(x, ids=model.landmark_ids)


class phase:
    """Accumulate wall-clock seconds into ``timer[name]`` when a timer is given."""

    __slots__ = ("timer", "name", "t0")

    def __init__(self, timer, name):
        self.timer, self.name = timer, name

    def __enter__(self):
        if self.timer is not None:
            self.t0 = perf_counter()

    def __exit__(self, *exc):
        if self.timer is not None:
            self.timer[self.name] = self.timer.get(self.name, 0.0) + perf_counter() - self.t0

"""scikit-learn style front ends for the gated GRID and SMUF landmarkers.

``X`` is a sequence of raw :class:`DepthImage` objects and ``y`` a sequence
of full-table :class:`Shape` annotations (visibility included). Boxes come
from :func:`detect_face` unless given; yaw labels drive the pose partition.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cascade import TrainConfig, train_cascade
from .depth import DepthImage, FaceBox, Shape, detect_face, hflip, hflip_box, preprocess
from .features import HogConfig, HogExtractor, LbpConfig, LbpExtractor
from .gating import (
    default_pose_bins,
    gate_select,
    gated_predict,
    parse_pose_bins,
    train_gated,
)
from .landmarks import MIRROR_MAP, N_LANDMARKS
from .smuf import SmufConfig, train_smuf

log = logging.getLogger(__name__)


def check_images(X):
    X = list(X)
    if not X:
        raise ValueError("need at least one image")
    for i, img in enumerate(X):
        if not isinstance(img, DepthImage):
            raise TypeError(f"X[{i}] is {type(img).__name__}, expected DepthImage")
    return X


def check_shapes(y, n):
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {len(y)} shapes for {n} images")
    for i, s in enumerate(y):
        if not isinstance(s, Shape):
            raise TypeError(f"y[{i}] is {type(s).__name__}, expected Shape")
        if len(s) != N_LANDMARKS or not np.array_equal(s.ids, np.arange(N_LANDMARKS)):
            raise ValueError(f"y[{i}] must carry the full {N_LANDMARKS}-landmark table")
        if not np.all(np.isfinite(s.points)):
            raise ValueError(f"y[{i}] has non-finite coordinates")
    return y


def check_boxes(boxes, X):
    if boxes is None:
        return [detect_face(img) for img in X]
    boxes = list(boxes)
    if len(boxes) != len(X):
        raise ValueError(f"got {len(boxes)} boxes for {len(X)} images")
    for i, b in enumerate(boxes):
        if not isinstance(b, FaceBox):
            raise TypeError(f"boxes[{i}] is {type(b).__name__}, expected FaceBox")
    return boxes


def check_yaws(yaws, n, needed):
    if yaws is None:
        if needed:
            raise ValueError("yaw labels are required to partition by pose")
        return np.zeros(n)
    yaws = np.asarray(yaws, dtype=np.float64).reshape(-1)
    if len(yaws) != n:
        raise ValueError(f"got {len(yaws)} yaws for {n} images")
    if not np.all(np.abs(yaws) <= 90.0):
        raise ValueError("yaw labels must lie in [-90, 90]")
    return yaws


class _GatedLandmarker(BaseEstimator):
    """Shared fit/predict plumbing; subclasses supply ``_train_fn``."""

    def _bins(self):
        if self.pose_bins is not None:
            return parse_pose_bins(self.pose_bins) if isinstance(self.pose_bins, str) else list(self.pose_bins)
        return default_pose_bins(self.n_dms)

    def _prepare(self, img):
        return preprocess(img) if self.preprocess else img

    def fit(self, X, y, boxes=None, yaws=None):
        X = check_images(X)
        y = check_shapes(y, len(X))
        boxes = check_boxes(boxes, X)
        bins = self._bins()
        yaws = check_yaws(yaws, len(X), needed=len(bins) > 1)
        images = [self._prepare(img) for img in X]
        shapes = list(y)
        boxes = list(boxes)
        yaws = list(yaws)
        if self.flip:
            for i in range(len(X)):
                fi, fs = hflip(images[i], shapes[i], MIRROR_MAP)
                images.append(fi)
                shapes.append(fs)
                boxes.append(hflip_box(boxes[i], images[i].width))
                yaws.append(-yaws[i])
        self.model_ = train_gated(images, shapes, boxes, yaws, bins, self._train_fn())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    def predict_with_subset(self, X, boxes=None, timers=None):
        """``(shapes, subsets)``; ``timers`` may be a list of dicts to fill."""
        self._check_fitted()
        X = check_images(X)
        boxes = check_boxes(boxes, X)
        shapes, subsets = [], []
        for i, (img, box) in enumerate(zip(X, boxes)):
            timer = None if timers is None else timers[i]
            s, z = gated_predict(self._prepare(img), box, self.model_, timer=timer)
            shapes.append(s)
            subsets.append(z)
        return shapes, np.array(subsets, dtype=np.int64)

    def predict(self, X, boxes=None):
        return self.predict_with_subset(X, boxes)[0]

    def select(self, X, boxes=None):
        self._check_fitted()
        X = check_images(X)
        boxes = check_boxes(boxes, X)
        return np.array([gate_select(self._prepare(img), b, self.model_) for img, b in zip(X, boxes)])


class GridLandmarker(_GatedLandmarker):
    """Gated multiple ridge descent over HOG (or LBP) features."""

    def __init__(
        self,
        n_dms=5,
        pose_bins=None,
        feature="hog",
        n_stages=7,
        gamma=1.0,
        jitter_count=10,
        jitter_scale_sigma=0.05,
        jitter_shift_sigma=0.05,
        hog_patch=32,
        hog_cells=4,
        hog_bins=9,
        lbp_patch=32,
        flip=True,
        preprocess=True,
        seed=0,
    ):
        self.n_dms = n_dms
        self.pose_bins = pose_bins
        self.feature = feature
        self.n_stages = n_stages
        self.gamma = gamma
        self.jitter_count = jitter_count
        self.jitter_scale_sigma = jitter_scale_sigma
        self.jitter_shift_sigma = jitter_shift_sigma
        self.hog_patch = hog_patch
        self.hog_cells = hog_cells
        self.hog_bins = hog_bins
        self.lbp_patch = lbp_patch
        self.flip = flip
        self.preprocess = preprocess
        self.seed = seed

    def extractor(self):
        if self.feature == "hog":
            return HogExtractor(HogConfig(self.hog_patch, self.hog_cells, self.hog_bins))
        if self.feature == "lbp":
            return LbpExtractor(LbpConfig(self.lbp_patch))
        raise ValueError(f"feature must be 'hog' or 'lbp', got {self.feature!r}")

    def train_config(self):
        return TrainConfig(self.n_stages, self.gamma, self.jitter_count,
                           self.jitter_scale_sigma, self.jitter_shift_sigma, self.seed)

    def _train_fn(self):
        cfg, ext = self.train_config(), self.extractor()

        def fn(images, points, boxes, ids):
            return train_cascade(images, points, boxes, cfg, ext, ids)

        return fn


class SmufLandmarker(_GatedLandmarker):
    """Gated cascades over learned binary depth-difference codes."""

    def __init__(
        self,
        n_dms=5,
        pose_bins=None,
        n_stages=7,
        n_bits=64,
        lam=0.1,
        gamma=0.1,
        n_iter=4,
        patch_side=15,
        whiten_floor=1e-2,
        gate_patch=16,
        gate_factor=2,
        jitter_count=10,
        jitter_scale_sigma=0.05,
        jitter_shift_sigma=0.05,
        flip=True,
        preprocess=True,
        seed=0,
    ):
        self.n_dms = n_dms
        self.pose_bins = pose_bins
        self.n_stages = n_stages
        self.n_bits = n_bits
        self.lam = lam
        self.gamma = gamma
        self.n_iter = n_iter
        self.patch_side = patch_side
        self.whiten_floor = whiten_floor
        self.gate_patch = gate_patch
        self.gate_factor = gate_factor
        self.jitter_count = jitter_count
        self.jitter_scale_sigma = jitter_scale_sigma
        self.jitter_shift_sigma = jitter_shift_sigma
        self.flip = flip
        self.preprocess = preprocess
        self.seed = seed

    def train_config(self):
        return SmufConfig(
            n_stages=self.n_stages, n_bits=self.n_bits, lam=self.lam, gamma=self.gamma,
            n_iter=self.n_iter, patch_side=self.patch_side,
            jitter_count=self.jitter_count, jitter_scale_sigma=self.jitter_scale_sigma,
            jitter_shift_sigma=self.jitter_shift_sigma, whiten_floor=self.whiten_floor,
            gate_patch=self.gate_patch, gate_factor=self.gate_factor,
            seed=self.seed,
        )

    def _train_fn(self):
        cfg = self.train_config()

        def fn(images, points, boxes, ids):
            return train_smuf(images, points, boxes, cfg, ids)

        return fn

"""Pose-partitioned training and gated selection of one cascade per image.

A gated model holds Z pose-specific landmarking models. At test time every
subset places its own mean shape in the face box, features are taken at
that shape, and the subset whose ground-truth feature statistics are
closest (diagonal Mahalanobis distance) runs its full cascade. Selection
happens once, before the first stage.

Subset models only need a few hooks, so GRID cascades and SMUF models are
gated the same way::

    x0 = model.start_shape(box)
    gctx = model.gate_extractor.prepare(img)
    phi = model.gate_feature(gctx, x0)   # 1-D or (L, .) array
    x = model.run(ctx, x0, phi, timer)

When the gate extractor is the model's own extractor the prepared context
is shared and ``phi`` doubles as the first-stage feature.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .cascade import phase
from .depth import Shape
from .landmarks import (
    N_LANDMARKS,
    NEAR_SIDE_NEGATIVE_YAW,
    NEAR_SIDE_POSITIVE_YAW,
)

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class PoseBin:
    """Closed yaw interval plus the landmarks its cascade predicts.

    With ``require_visible`` a training sample only joins the bin when all
    of the bin's landmarks are annotated as visible (the 22-landmark
    frontal model); otherwise yaw containment is enough.
    """

    yaw_min: float
    yaw_max: float
    landmark_ids: tuple = tuple(range(N_LANDMARKS))
    require_visible: bool = False

    def __post_init__(self):
        if not -90.0 <= self.yaw_min <= self.yaw_max <= 90.0:
            raise ValueError(f"bad yaw range [{self.yaw_min}, {self.yaw_max}]")
        ids = tuple(int(i) for i in self.landmark_ids)
        if not ids or len(set(ids)) != len(ids):
            raise ValueError("landmark_ids must be non-empty and unique")
        object.__setattr__(self, "landmark_ids", ids)

    def contains(self, yaw):
        return self.yaw_min <= yaw <= self.yaw_max

    def accepts(self, yaw, visible):
        if not self.contains(yaw):
            return False
        return not self.require_visible or bool(np.all(np.asarray(visible)[list(self.landmark_ids)]))


_ALL = tuple(range(N_LANDMARKS))
_NEG = tuple(NEAR_SIDE_NEGATIVE_YAW)
_POS = tuple(NEAR_SIDE_POSITIVE_YAW)


def default_pose_bins(n_dms=5):
    """The 1-, 3- and 5-DM layouts.

    The frontal model is trained on every fully annotated face; the 3-DM
    variant adds [-45, 0] and [0, 45] subsets and the 5-DM variant adds the
    two profile ranges, each on the 14 near-side landmarks.
    """
    bins = [PoseBin(-90.0, 90.0, _ALL, require_visible=True)]
    if n_dms >= 3:
        bins += [PoseBin(-45.0, 0.0, _NEG), PoseBin(0.0, 45.0, _POS)]
    if n_dms >= 5:
        bins += [PoseBin(-90.0, -45.0, _NEG), PoseBin(45.0, 90.0, _POS)]
    if n_dms not in (1, 3, 5):
        raise ValueError(f"default layouts exist for 1, 3 or 5 DMs, not {n_dms}")
    return bins


_SETS = {"all": _ALL, "neg": _NEG, "pos": _POS}


def parse_pose_bins(text):
    """Parse ``lo:hi:set[:visible]`` items separated by commas.

    ``set`` is ``all``, ``neg`` (near side at negative yaw) or ``pos``;
    e.g. ``-90:90:all:visible,0:45:pos``.
    """
    bins = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (3, 4) or parts[2] not in _SETS:
            raise ValueError(f"bad pose bin {item!r}; expected lo:hi:all|neg|pos[:visible]")
        if len(parts) == 4 and parts[3] != "visible":
            raise ValueError(f"bad pose bin flag {parts[3]!r}")
        bins.append(PoseBin(float(parts[0]), float(parts[1]), _SETS[parts[2]], len(parts) == 4))
    if not bins:
        raise ValueError("no pose bins given")
    return bins


def format_pose_bins(bins):
    names = {v: k for k, v in _SETS.items()}
    out = []
    for b in bins:
        if b.landmark_ids not in names:
            raise ValueError("only the named landmark sets can be formatted")
        item = f"{b.yaw_min!r}:{b.yaw_max!r}:{names[b.landmark_ids]}"
        out.append(item + (":visible" if b.require_visible else ""))
    return ",".join(out)


def partition_by_pose(yaws, visible, bins, names=None):
    """Indices of the samples that join each bin.

    A sample may join several bins. Raises ``ValueError`` naming the first
    sample whose yaw lies outside every bin.
    """
    if not bins:
        raise ValueError("at least one pose bin is required")
    yaws = np.asarray(yaws, dtype=np.float64)
    for i, y in enumerate(yaws):
        if not any(b.contains(y) for b in bins):
            who = names[i] if names is not None else f"sample {i}"
            raise ValueError(f"{who}: yaw {y} lies outside every pose bin")
    return [
        np.array([i for i, (y, v) in enumerate(zip(yaws, visible)) if b.accepts(y, v)], dtype=np.int64)
        for b in bins
    ]


@dataclass(frozen=True)
class GatingStats:
    mean_feature: np.ndarray
    var_feature: np.ndarray
    floor: float = VAR_FLOOR

    def __post_init__(self):
        if self.floor <= 0:
            raise ValueError("variance floor must be positive")
        if self.mean_feature.shape != self.var_feature.shape:
            raise ValueError("mean and variance must have equal length")
        if np.any(self.var_feature < self.floor):
            raise ValueError("variance entries below the floor")

    def distance(self, phi):
        """``g = sqrt(mean((phi - mu)^2 / var))``."""
        d = np.ravel(phi) - self.mean_feature
        return float(np.sqrt(np.mean(d * d / self.var_feature)))


def fit_gate_features(features, floor=VAR_FLOOR):
    """Gate statistics from an ``(N, m)`` array of ground-truth features."""
    F = np.asarray(features, dtype=np.float64)
    F = F.reshape(len(F), -1)
    if len(F) < 2:
        raise ValueError("fit_gate needs at least 2 samples")
    mean = F.mean(axis=0)
    var = np.maximum(F.var(axis=0), floor)
    return GatingStats(mean, var, floor)


def fit_gate(model, images, gt_points, floor=VAR_FLOOR):
    """Gate statistics of ``model``'s gate feature at the ground truth."""
    feats = [
        np.ravel(model.gate_feature(model.gate_extractor.prepare(img), g))
        for img, g in zip(images, gt_points)
    ]
    return fit_gate_features(feats, floor)


@dataclass
class GatedSubset:
    model: object
    gate: GatingStats
    pose_bin: PoseBin

    @property
    def landmark_ids(self):
        return self.model.landmark_ids


@dataclass
class GatedModel:
    subsets: list

    def __post_init__(self):
        if not self.subsets:
            raise ValueError("a gated model needs at least one subset")
        kinds = {s.model.feature_kind for s in self.subsets}
        if len(kinds) != 1:
            raise ValueError(f"subsets mix feature kinds {sorted(kinds)}")

    @property
    def n_subsets(self):
        return len(self.subsets)

    @property
    def feature_kind(self):
        return self.subsets[0].model.feature_kind

    @property
    def extractor(self):
        return self.subsets[0].model.extractor

    @property
    def pose_bins(self):
        return [s.pose_bin for s in self.subsets]

    @property
    def gate_extractor(self):
        return self.subsets[0].model.gate_extractor

    @property
    def shares_gate_context(self):
        return self.gate_extractor is self.extractor


def _gate_context(model, img, ctx):
    return ctx if model.shares_gate_context and ctx is not None else model.gate_extractor.prepare(img)


def gate_scores(model, ctx, box):
    """``(g, starts, features)`` for every subset."""
    g, starts, feats = [], [], []
    for sub in model.subsets:
        x0 = sub.model.start_shape(box)
        phi = sub.model.gate_feature(ctx, x0)
        starts.append(x0)
        feats.append(phi)
        g.append(sub.gate.distance(phi))
    return np.array(g), starts, feats


def gate_select(img, box, model, ctx=None):
    """Index of the subset with the smallest gate distance (lowest index on ties)."""
    if model.n_subsets == 1:
        return 0
    g, _, _ = gate_scores(model, _gate_context(model, img, ctx), box)
    return int(np.argmin(g))


def gated_predict(img, box, model, ctx=None, timer=None):
    """Select a subset once, then run its whole cascade; returns ``(Shape, z)``."""
    with phase(timer, "feature"):
        if ctx is None:
            ctx = model.extractor.prepare(img)
    if model.n_subsets == 1:
        # nothing to select; the cascade extracts its own first features
        sub, z = model.subsets[0], 0
        x = sub.model.run(ctx, sub.model.start_shape(box), None, timer)
        return Shape(x, ids=sub.landmark_ids), z
    with phase(timer, "select"):
        g, starts, feats = gate_scores(model, _gate_context(model, img, ctx), box)
        z = int(np.argmin(g))
    sub = model.subsets[z]
    x = sub.model.run(ctx, starts[z], feats[z] if model.shares_gate_context else None, timer)
    return Shape(x, ids=sub.landmark_ids), z


def selection_correct(pose_bin, yaw, rule="side"):
    """Whether selecting ``pose_bin`` for an image at ``yaw`` counts as correct.

    ``rule="side"`` only rejects left/right confusion: a bin lying entirely
    on the other side of zero yaw. ``rule="contain"`` requires the bin to
    contain the true yaw.
    """
    if rule == "contain":
        return pose_bin.contains(yaw)
    if rule != "side":
        raise ValueError(f"unknown selection rule {rule!r}")
    if pose_bin.contains(yaw):
        return True
    return not ((pose_bin.yaw_max <= 0 < yaw) or (pose_bin.yaw_min >= 0 > yaw))


def train_gated(images, shapes, boxes, yaws, bins, train_fn, floor=VAR_FLOOR, names=None):
    """Train one model per pose bin and fit its gate.

    ``shapes`` are full-table :class:`Shape` annotations; ``train_fn(images,
    points, boxes, landmark_ids)`` returns a model exposing the gating hooks.
    """
    parts = partition_by_pose(yaws, [s.visible for s in shapes], bins, names)
    subsets = []
    for z, (b, idx) in enumerate(zip(bins, parts)):
        if len(idx) < 2:
            raise ValueError(
                f"pose bin {z} [{b.yaw_min}, {b.yaw_max}] has {len(idx)} training samples; need >= 2"
            )
        ids = list(b.landmark_ids)
        imgs = [images[i] for i in idx]
        G = np.stack([shapes[i].points[ids] for i in idx])
        bx = [boxes[i] for i in idx]
        log.info("subset %d: yaw [%g, %g], %d samples, %d landmarks",
                 z, b.yaw_min, b.yaw_max, len(idx), len(ids))
        model = train_fn(imgs, G, bx, np.array(ids))
        subsets.append(GatedSubset(model, fit_gate(model, imgs, G, floor), b))
    return GatedModel(subsets)

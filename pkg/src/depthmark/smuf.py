"""Simultaneous learning of binary feature projections and descent maps.

Each stage learns a projection ``W`` (p x B, shared by all landmarks) that
turns a landmark's depth-difference vector into a B-bit code, and a descent
map ``R`` (2L x B*L) that regresses the shape update from the concatenated
codes. The two are found by alternating closed-form updates of

    C = ||X - R Phi||^2 + gamma ||R||^2 + lam ||R (Phi - 0.5 - W^T D)||^2

with codes ``Phi = 0.5 (sgn(W^T D) + 1)``.

Layout
------
Per-landmark matrices (``D`` is p x L*n, codes are B x L*n) put landmark
``l`` of sample ``i`` in column ``i * L + l``. Regression uses the stacked
form, B*L x n, where rows ``l * B .. l * B + B - 1`` hold landmark ``l``'s
code::

    per-landmark  B x (n*L)   [s0l0 s0l1 .. s0lL | s1l0 ..]
    stacked       (L*B) x n   [l0 bits; l1 bits; ..] per sample column

Because codes are binary, a shape update is the sum of the R columns whose
bit is set, which is how prediction computes it.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import linalg

from .cascade import (
    RankDeficientError,
    _mean_error,
    _pivoted_solve,
    initial_shapes,
    normalize_shape,
    phase,
    place_init_shape,
    solve_spd,
)
from .depth import Shape
from .features import DepthDiffExtractor, HogConfig, HogExtractor, ScaledExtractor, binarize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmufConfig:
    n_stages: int = 7
    n_bits: int = 64
    lam: float = 0.1
    # relative ridge strength, made absolute per stage as in the cascade
    gamma: float = 0.1
    n_iter: int = 4
    patch_side: int = 15
    jitter_count: int = 10
    jitter_scale_sigma: float = 0.05
    jitter_shift_sigma: float = 0.05
    whiten: bool = True
    # eigenvalue floor of the whitening, relative to the largest one
    whiten_floor: float = 1e-2
    # coarse HOG gate: patch side on the image downsampled by gate_factor
    gate_patch: int = 16
    gate_factor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 1 or self.n_bits < 1 or self.n_iter < 1:
            raise ValueError("n_stages, n_bits and n_iter must be >= 1")
        if self.gamma <= 0:
            raise ValueError("SMUF training needs gamma > 0")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.jitter_count < 0:
            raise ValueError("jitter_count must be >= 0")


def stack_codes(P, n_landmarks):
    """Per-landmark ``(B, n*L)`` -> stacked ``(L*B, n)``."""
    B, cols = P.shape
    n = cols // n_landmarks
    return P.reshape(B, n, n_landmarks).transpose(2, 0, 1).reshape(n_landmarks * B, n)


def unstack_codes(S, n_landmarks):
    """Stacked ``(L*B, n)`` -> per-landmark ``(B, n*L)``."""
    rows, n = S.shape
    B = rows // n_landmarks
    return S.reshape(n_landmarks, B, n).transpose(1, 2, 0).reshape(B, n * n_landmarks)


@dataclass
class SmufTrainState:
    """Training matrices for one stage.

    ``D_hat`` is p x (L*n), ``X_hat`` is 2L x n; ``Phi_tilde`` holds the
    current per-landmark codes (B x L*n) once :meth:`recompute` has run.
    """

    D_hat: np.ndarray
    X_hat: np.ndarray
    n_landmarks: int
    Phi_tilde: np.ndarray = None

    def __post_init__(self):
        n = self.X_hat.shape[1]
        if self.X_hat.shape[0] != 2 * self.n_landmarks:
            raise ValueError("X_hat must have 2L rows")
        if self.D_hat.shape[1] != n * self.n_landmarks:
            raise ValueError(f"D_hat needs L*n = {n * self.n_landmarks} columns")

    @property
    def n_samples(self):
        return self.X_hat.shape[1]

    def recompute(self, W):
        """Codes ``0.5 (sgn(W^T D) + 1)``, ``sgn(0) = +1``."""
        self.Phi_tilde = binarize(self.D_hat.T, W).T
        return self.Phi_tilde

    def stacked(self, W=None):
        """``(Phi, Q)`` in stacked form; Q is the quantisation residual."""
        if self.Phi_tilde is None or (W is not None and self.Phi_tilde.shape[0] != W.shape[1]):
            raise ValueError("codes have not been computed for this W")
        P = self.Phi_tilde.astype(np.float64)
        L = self.n_landmarks
        Phi = stack_codes(P, L)
        if W is None:
            return Phi, None
        if W.shape[0] != self.D_hat.shape[0]:
            raise ValueError(f"W has {W.shape[0]} rows, D_hat has {self.D_hat.shape[0]}")
        Q = stack_codes(P - 0.5 - W.T @ self.D_hat, L)
        return Phi, Q


def _check_R(state, R, B):
    L = state.n_landmarks
    if R.shape != (2 * L, B * L):
        raise ValueError(f"R must be {(2 * L, B * L)}, got {R.shape}")


def smuf_objective(state, W, R, gamma, lam):
    """``(C, C1, C2)`` with ``C = C1 + lam * C2``."""
    Phi, Q = state.stacked(W)
    _check_R(state, R, W.shape[1])
    r = state.X_hat - R @ Phi
    C1 = float(np.sum(r * r) + gamma * np.sum(R * R))
    RQ = R @ Q
    C2 = float(np.sum(RQ * RQ))
    return C1 + lam * C2, C1, C2


def gradient_R(state, W, R, gamma, lam):
    """Gradient of the objective in R at fixed W and codes."""
    Phi, Q = state.stacked(W)
    return 2.0 * ((R @ Phi - state.X_hat) @ Phi.T + gamma * R + lam * (R @ Q) @ Q.T)


def update_R(state, W, gamma, lam):
    """``R = X Phi^T (Phi Phi^T + gamma I + lam Q Q^T)^-1``."""
    Phi, Q = state.stacked(W)
    A = Phi @ Phi.T
    if lam:
        A += lam * (Q @ Q.T)
    A[np.diag_indices_from(A)] += gamma
    if gamma > 0:
        return solve_spd(A, Phi @ state.X_hat.T).T
    return _pivoted_solve(A, Phi @ state.X_hat.T).T


def update_W(state, R, gamma, lam, rtol=1e-10, max_residual=1e-6):
    """``W = [(R^+ X + lam (Phi - 0.5)) D^T]^T / (1 + gamma + lam)``.

    ``R^+`` is the Moore-Penrose pseudoinverse and ``R^+ X`` is unstacked to
    per-landmark form before the product with ``D^T``. Raises
    :class:`RankDeficientError` when ``R R^+ X`` misses ``X`` by more than
    ``max_residual`` (relative), i.e. R cannot reproduce the targets.
    """
    L = state.n_landmarks
    B = R.shape[1] // L
    _check_R(state, R, B)
    U, s, Vt = linalg.svd(R, full_matrices=False)
    keep = s > rtol * s.max() if s.size and s.max() > 0 else np.zeros(s.shape, bool)
    R_pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    codes_for_X = R_pinv @ state.X_hat
    scale = np.linalg.norm(state.X_hat)
    if scale > 0 and np.linalg.norm(R @ codes_for_X - state.X_hat) > max_residual * scale:
        raise RankDeficientError(int(keep.sum()), R.shape[0])
    target = unstack_codes(codes_for_X, L)
    if lam:
        if state.Phi_tilde is None:
            raise ValueError("codes have not been computed")
        target = target + lam * (state.Phi_tilde - 0.5)
    return (target @ state.D_hat.T).T / (1.0 + gamma + lam)


def random_orthonormal(p, B, rng):
    """p x B matrix with orthonormal columns (or rows when B > p)."""
    rng = np.random.default_rng(rng)
    G = rng.standard_normal((max(p, B), min(p, B)))
    Qm, Rm = np.linalg.qr(G)
    Qm = Qm * np.sign(np.where(np.diag(Rm) == 0, 1.0, np.diag(Rm)))
    return Qm if p >= B else Qm.T


@dataclass
class SmufStage:
    W: np.ndarray  # (p, B)
    R: np.ndarray  # (2L, B*L)
    center: np.ndarray  # (L, p), subtracted from raw depth differences
    whiten: np.ndarray  # (p, p), applied after centring
    lam: float
    gamma: float

    def __post_init__(self):
        p, B = self.W.shape
        L = self.center.shape[0]
        if self.R.shape != (2 * L, B * L):
            raise ValueError(f"R must be {(2 * L, B * L)}, got {self.R.shape}")
        if self.center.shape != (L, p) or self.whiten.shape != (p, p):
            raise ValueError("centre and whitening shapes do not match W")
        if not all(np.all(np.isfinite(a)) for a in (self.W, self.R, self.center, self.whiten)):
            raise ValueError("non-finite stage parameters")

    @property
    def n_bits(self):
        return self.W.shape[1]

    @cached_property
    def projection(self):
        # (d - c) T^T W folded into one matrix and a per-landmark threshold
        P = self.whiten.T @ self.W
        return P, np.einsum("lp,pb->lb", self.center, P)

    def codes(self, d):
        """Binary codes ``(..., L, B)`` for raw ``(..., L, p)`` depth differences."""
        P, offset = self.projection
        return (d @ P - offset >= 0.0).astype(np.uint8)

    def update(self, codes):
        """Shape update by summing the R columns of the set bits."""
        return self.R[:, np.flatnonzero(codes.reshape(-1))].sum(axis=1)

    def update_dense(self, codes):
        return self.R @ codes.reshape(-1).astype(np.float64)


@dataclass
class SmufModel:
    stages: list
    init_shape: np.ndarray  # (L, 2), box-relative unit frame
    landmark_ids: np.ndarray
    patch_side: int
    gate_patch: int = 16
    gate_factor: int = 2
    trace: list = field(default_factory=list, repr=False, compare=False)

    feature_kind = "smuf"

    @property
    def n_stages(self):
        return len(self.stages)

    @cached_property
    def extractor(self):
        return DepthDiffExtractor(self.patch_side)

    def truncate(self, k):
        return replace(self, stages=self.stages[:k])

    def start_shape(self, box):
        return place_init_shape(self.init_shape, box)

    @cached_property
    def gate_extractor(self):
        # binary codes at the mean shape carry almost no pose information,
        # so the gate uses gradient histograms on a downsampled copy
        return ScaledExtractor(HogExtractor(HogConfig(self.gate_patch, 4, 9)), self.gate_factor)

    def gate_feature(self, ctx, x):
        return ctx.extract(x)

    def run(self, ctx, x, phi=None, timer=None):
        return run_smuf(self, ctx, x, timer=timer)


def run_smuf(model, ctx, x, codes=None, timer=None):
    x = np.array(x, dtype=np.float64)
    for k, stage in enumerate(model.stages):
        if codes is None or k > 0:
            with phase(timer, "feature"):
                codes = stage.codes(ctx.extract(x))
        with phase(timer, "update"):
            x = x + stage.update(codes).reshape(-1, 2)
    return x


def smuf_predict(model, img, box, ctx=None):
    if ctx is None:
        ctx = model.extractor.prepare(img)
    x = run_smuf(model, ctx, place_init_shape(model.init_shape, box))
    return Shape(x, ids=model.landmark_ids)


def whitening(D, rel_floor=1e-2):
    """Symmetric ``T`` with ``T D D^T T = I`` on the non-degenerate subspace."""
    C = D @ D.T
    w, V = linalg.eigh(C)
    w = np.maximum(w, rel_floor * max(w.max(), np.finfo(float).tiny))
    return (V / np.sqrt(w)) @ V.T


def train_smuf_stage(state, cfg, gamma, rng, gamma_w=None):
    """Alternate code, R and W updates ``cfg.n_iter`` times.

    Returns ``(W, R, trace)``; the trace holds ``(C, C1, C2)`` after each
    R update. A last code recompute and R update keep R consistent with the
    final W. ``gamma_w`` is the ridge term in the W update's divisor and
    defaults to ``gamma``.
    """
    gamma_w = gamma if gamma_w is None else gamma_w
    p = state.D_hat.shape[0]
    W = random_orthonormal(p, cfg.n_bits, rng)
    trace = []
    for _ in range(cfg.n_iter):
        state.recompute(W)
        R = update_R(state, W, gamma, cfg.lam)
        trace.append(smuf_objective(state, W, R, gamma, cfg.lam))
        W = update_W(state, R, gamma_w, cfg.lam)
    state.recompute(W)
    R = update_R(state, W, gamma, cfg.lam)
    trace.append(smuf_objective(state, W, R, gamma, cfg.lam))
    return W, R, trace


def train_smuf(images, gt_points, boxes, cfg=SmufConfig(), landmark_ids=None):
    """Learn ``cfg.n_stages`` SMUF stages on preprocessed images."""
    G = np.asarray(gt_points, dtype=np.float64)
    N, L = G.shape[:2]
    if N < 2:
        raise ValueError("train_smuf needs at least 2 samples")
    if len(images) != N or len(boxes) != N:
        raise ValueError("images, shapes and boxes must have equal length")
    ids = np.arange(L) if landmark_ids is None else np.asarray(landmark_ids)
    if len(ids) != L:
        raise ValueError("landmark_ids length does not match the shapes")

    ext = DepthDiffExtractor(cfg.patch_side)
    p = ext.p
    init = np.mean([normalize_shape(g, b) for g, b in zip(G, boxes)], axis=0)
    X = initial_shapes(init, boxes, cfg)
    S = X.shape[1]
    n = N * S
    rng = np.random.default_rng(cfg.seed)

    ctxs = [ext.prepare(img) for img in images]  # padded copies; cheap
    center = np.mean([c.extract(g) for c, g in zip(ctxs, G)], axis=0)  # (L, p)

    stages, trace = [], []
    for k in range(cfg.n_stages):
        D = np.stack([c.extract(x) for c, x in zip(ctxs, X)]).reshape(n * L, p) - np.tile(center, (n, 1))
        T = whitening(D.T, cfg.whiten_floor) if cfg.whiten else np.eye(p)
        D_hat = T @ D.T
        X_hat = (G[:, None] - X).reshape(n, 2 * L).T
        state = SmufTrainState(D_hat, X_hat, L)
        # balanced codes have trace(Phi Phi^T) / (B L) = n / 2
        gamma_k = cfg.gamma * 0.5 * n
        # whitened D has D D^T = I whatever n is, so the W side keeps the
        # dimensionless gamma
        W, R, obj = train_smuf_stage(state, cfg, gamma_k, rng, cfg.gamma)
        Phi, _ = state.stacked()
        before = _mean_error(X, G[:, None])
        X = X + (R @ Phi).T.reshape(X.shape)
        after = _mean_error(X, G[:, None])
        trace.append({"before": before, "after": after, "objective": obj})
        log.info("smuf stage %d: W %dx%d, R %dx%d, train error %.4f -> %.4f px",
                 k + 1, *W.shape, *R.shape, before, after)
        stages.append(SmufStage(W, R, center.copy(), T, cfg.lam, gamma_k))
    return SmufModel(stages, init, ids, cfg.patch_side, cfg.gate_patch, cfg.gate_factor, trace)

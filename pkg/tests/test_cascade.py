import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from depthmark.cascade import (
    CascadeModel,
    RankDeficientError,
    StageModel,
    TrainConfig,
    make_jitters,
    normalize_shape,
    place_init_shape,
    predict,
    ridge_objective,
    run_cascade,
    train_cascade,
    train_stage,
)
from depthmark.depth import FaceBox
from depthmark.features import HogExtractor


def ridge_oracle(X, Phi, gamma):
    """Augmented least squares: [Phi^T; sqrt(g) I] R^T = [X^T; 0]."""
    m = Phi.shape[0]
    A = np.vstack([Phi.T, np.sqrt(gamma) * np.eye(m)])
    B = np.vstack([X.T, np.zeros((m, X.shape[0]))])
    return np.linalg.lstsq(A, B, rcond=None)[0].T


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_identity_regression():
    rng = np.random.default_rng(0)
    Phi = rng.standard_normal((6, 6))
    assert np.allclose(train_stage(Phi, Phi, 0.0), np.eye(6), atol=1e-8)


def test_large_gamma_shrinks():
    rng = np.random.default_rng(1)
    Phi, X = rng.standard_normal((5, 40)), rng.standard_normal((4, 40))
    R0 = train_stage(X, Phi, 0.0)
    big = 1e12 * np.linalg.norm(Phi @ Phi.T)
    assert np.all(np.abs(train_stage(X, Phi, big)) < 1e-6 * np.abs(R0).max())


@pytest.mark.parametrize("m, n", [(20, 50), (50, 20)])
def test_matches_oracle(m, n):
    rng = np.random.default_rng(m)
    Phi, X = rng.standard_normal((m, n)), rng.standard_normal((6, n))
    g = 0.3
    assert rel(train_stage(X, Phi, g), ridge_oracle(X, Phi, g)) < 1e-8


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 60), st.floats(1e-3, 10.0))
def test_first_order_optimality(seed, m, n, g):
    rng = np.random.default_rng(seed)
    Phi, X = rng.standard_normal((m, n)), rng.standard_normal((4, n))
    R = train_stage(X, Phi, g)
    resid = (X - R @ Phi) @ Phi.T - g * R
    assert np.linalg.norm(resid) <= 1e-6 * max(np.linalg.norm(X @ Phi.T), 1e-12) + 1e-10


@given(st.integers(0, 2**32 - 1))
def test_perturbation_increases_objective(seed):
    rng = np.random.default_rng(seed)
    Phi, X = rng.standard_normal((8, 30)), rng.standard_normal((4, 30))
    g = 0.5
    R = train_stage(X, Phi, g)
    c0 = ridge_objective(X, Phi, R, g)
    D = rng.standard_normal(R.shape)
    step = 1e-3 * np.linalg.norm(R) * D / np.linalg.norm(D)
    assert ridge_objective(X, Phi, R + step, g) > c0


def test_rank_deficiency_reported():
    Phi = np.ones((3, 10))
    with pytest.raises(RankDeficientError) as exc:
        train_stage(np.ones((2, 10)), Phi, 0.0)
    assert exc.value.rank == 1 and exc.value.size == 3
    with pytest.raises(ValueError):
        train_stage(np.ones((2, 3)), np.ones((3, 4)), 0.1)


def test_place_init_shape():
    unit = np.array([[-0.25, 0.0], [0.25, 0.0], [0.0, 0.3]])
    unit -= unit.mean(axis=0)
    box = FaceBox(0, 0, 100, 100)
    x = place_init_shape(unit, box)
    assert np.allclose(x.mean(axis=0), (50, 50))
    x2 = place_init_shape(unit, FaceBox(-50, -50, 200, 200))
    assert np.allclose(x2 - 50, 2 * (x - 50))
    assert np.allclose(normalize_shape(x, box), unit, atol=1e-9)


def test_jitters():
    box = FaceBox(10, 20, 80, 100)
    assert all(b == box for b in make_jitters(box, TrainConfig(jitter_scale_sigma=0, jitter_shift_sigma=0), 0))
    cfg = TrainConfig(jitter_count=10)
    assert make_jitters(box, cfg, 3) == make_jitters(box, cfg, 3)
    many = make_jitters(box, TrainConfig(jitter_count=10000, jitter_scale_sigma=0.05), 1)
    scales = np.array([b.w / box.w for b in many])
    assert abs(scales.std() - 0.05) < 0.05 * 0.05


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_stages=0)
    with pytest.raises(ValueError):
        TrainConfig(jitter_count=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma=-1)


class LinearContext:
    """Features that are a fixed linear function of the shape."""

    def __init__(self, A):
        self.A = A

    def extract(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts.reshape(*pts.shape[:-2], -1) @ self.A.T


class LinearExtractor:
    kind = "linear"

    def __init__(self, A):
        self.A = A

    def length(self, n_landmarks):
        return self.A.shape[0]

    def prepare(self, img):
        return LinearContext(self.A)


def test_exact_linear_model_fits_in_one_stage():
    # one shared box makes the target update an exact linear function of
    # the features; jitters have 3 dof (shift x, shift y, scale), so three
    # generic features keep the system full rank
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 4))
    box = FaceBox(3, 4, 50, 60)
    G = np.stack([place_init_shape(np.array([[-0.2, 0.1], [0.25, -0.3]]), box)] * 8)
    cfg = TrainConfig(n_stages=1, gamma=0.0, jitter_count=3)
    model = train_cascade([None] * 8, G, [box] * 8, cfg, LinearExtractor(A))
    before, after = model.trace[0]
    assert before > 1 and after < 1e-8


def test_zero_maps_return_start_shape():
    init = np.array([[0.1, 0.2], [-0.1, 0.0]])
    stages = [StageModel(np.zeros((4, 4)), np.zeros(4), 0.0) for _ in range(3)]
    ext = LinearExtractor(np.eye(4))
    model = CascadeModel(stages, init, np.arange(2), ext)
    box = FaceBox(0, 0, 10, 10)
    assert np.array_equal(predict(model, None, box).points, place_init_shape(init, box))


@pytest.fixture(scope="module")
def trained(small_corpus):
    data, pre = small_corpus
    G = np.stack([s.gt.points for s in data])
    cfg = TrainConfig(n_stages=4, jitter_count=4)
    return train_cascade(pre, G, [s.box for s in data], cfg, HogExtractor()), pre, data


def test_training_error_non_increasing(trained):
    model, _, _ = trained
    errors = [model.trace[0][0]] + [a for _, a in model.trace]
    assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


def test_training_deterministic(trained, small_corpus):
    model, pre, data = trained
    G = np.stack([s.gt.points for s in data])
    again = train_cascade(pre, G, [s.box for s in data], TrainConfig(n_stages=4, jitter_count=4), HogExtractor())
    for a, b in zip(model.stages, again.stages):
        assert np.array_equal(a.R, b.R) and np.array_equal(a.mean_feature, b.mean_feature)


def test_overfit_single_face():
    from depthmark.depth import preprocess
    from depthmark.synth import HeadParams, render_head

    s = render_head(HeadParams(noise_sigma=0.0))
    img = preprocess(s.image)
    cfg = TrainConfig(n_stages=7, gamma=1e-3, jitter_count=10)
    model = train_cascade([img, img], np.stack([s.gt.points] * 2), [s.box] * 2, cfg, HogExtractor())
    err = np.linalg.norm(predict(model, img, s.box).points - s.gt.points, axis=1).mean()
    assert err < 1.0


def test_truncation_equals_early_stop(trained):
    model, pre, data = trained
    ctx = model.extractor.prepare(pre[0])
    x0 = place_init_shape(model.init_shape, data[0].box)
    short = run_cascade(model.truncate(3), ctx, x0)
    stepped = run_cascade(model.truncate(4), ctx, x0)
    assert not np.array_equal(short, stepped)
    last = model.stages[3]
    manual = short + (last.R @ (ctx.extract(short) - last.mean_feature)).reshape(-1, 2)
    assert np.allclose(manual, stepped, atol=1e-12)
    assert np.array_equal(predict(model, pre[0], data[0].box).points,
                          predict(model, pre[0], data[0].box).points)


def test_inconsistent_inputs_rejected(small_corpus):
    data, pre = small_corpus
    G = np.stack([s.gt.points for s in data[:3]])
    with pytest.raises(ValueError):
        train_cascade(pre[:2], G, [s.box for s in data[:3]], TrainConfig(), HogExtractor())
    with pytest.raises(ValueError):
        train_cascade(pre[:1], G[:1], [data[0].box], TrainConfig(), HogExtractor())

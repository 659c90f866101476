import numpy as np
import pytest
from hypothesis import settings

from depthmark.depth import preprocess
from depthmark.synth import make_dataset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    """40 near-frontal synthetic faces, raw and preprocessed."""
    data = make_dataset(40, yaw_range=(-20.0, 20.0), seed=5)
    return data, [preprocess(s.image) for s in data]


@pytest.fixture(scope="session")
def pose_corpus():
    """80 faces spread over the full yaw range."""
    return make_dataset(80, yaw_range=(-90.0, 90.0), seed=9)


def random_image(rng, h=20, w=30, lo=500.0, hi=900.0):
    from depthmark.depth import DepthImage

    return DepthImage(rng.uniform(lo, hi, (h, w)), np.ones((h, w), bool))


def fit_small(kind, corpus, **kw):
    from depthmark.estimators import GridLandmarker, SmufLandmarker

    if kind == "grid":
        est = GridLandmarker(n_stages=2, jitter_count=2, hog_patch=16, **kw)
    else:
        est = SmufLandmarker(n_stages=2, n_bits=8, jitter_count=2, **kw)
    return est.fit([s.image for s in corpus], [s.gt for s in corpus],
                   [s.box for s in corpus], [s.yaw for s in corpus])


@pytest.fixture(scope="session")
def fitted_grid(pose_corpus):
    return fit_small("grid", pose_corpus)


@pytest.fixture(scope="session")
def fitted_smuf(pose_corpus):
    return fit_small("smuf", pose_corpus)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from depthmark.cascade import RankDeficientError, ridge_objective, train_stage
from depthmark.features import binarize
from depthmark.smuf import (
    SmufConfig,
    SmufStage,
    SmufTrainState,
    gradient_R,
    random_orthonormal,
    smuf_objective,
    stack_codes,
    train_smuf,
    train_smuf_stage,
    unstack_codes,
    update_R,
    update_W,
    whitening,
)


def instance(seed=0, L=2, n=5, p=8, B=4):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((p, L * n))
    X = rng.standard_normal((2 * L, n))
    state = SmufTrainState(D, X, L)
    W = rng.standard_normal((p, B))
    state.recompute(W)
    return state, W, rng


def brute_objective(state, W, R, gamma, lam):
    L, n = state.n_landmarks, state.n_samples
    B = W.shape[1]
    P = state.Phi_tilde
    proj = W.T @ state.D_hat
    C1 = gamma * sum(R[i, j] ** 2 for i in range(R.shape[0]) for j in range(R.shape[1]))
    C2 = 0.0
    for i in range(n):
        for r in range(2 * L):
            fit = 0.0
            q = 0.0
            for l in range(L):
                for b in range(B):
                    col = i * L + l
                    fit += R[r, l * B + b] * P[b, col]
                    q += R[r, l * B + b] * (P[b, col] - 0.5 - proj[b, col])
            C1 += (state.X_hat[r, i] - fit) ** 2
            C2 += q * q
    return C1 + lam * C2, C1, C2


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5))
def test_stack_roundtrip(L, n, B):
    P = np.arange(B * L * n, dtype=float).reshape(B, L * n)
    S = stack_codes(P, L)
    assert S.shape == (L * B, n)
    # landmark l of sample i sits in column i*L + l, rows l*B..l*B+B-1
    i, l, b = n - 1, L - 1, B - 1
    assert S[l * B + b, i] == P[b, i * L + l]
    assert np.array_equal(unstack_codes(S, L), P)


def test_objective_zero_map():
    state, W, _ = instance()
    R = np.zeros((4, 8))
    C, C1, C2 = smuf_objective(state, W, R, 0.7, 1.0)
    assert np.isclose(C, np.sum(state.X_hat**2)) and C2 == 0


def test_objective_without_constraint_is_ridge():
    state, W, rng = instance(1)
    R = rng.standard_normal((4, 8))
    Phi, _ = state.stacked(W)
    C, C1, _ = smuf_objective(state, W, R, 0.3, 0.0)
    assert np.isclose(C, ridge_objective(state.X_hat, Phi, R, 0.3))


@pytest.mark.parametrize("seed", range(3))
def test_objective_matches_brute_force(seed):
    state, W, rng = instance(seed, L=3, n=4, p=6, B=3)
    R = rng.standard_normal((6, 9))
    got = smuf_objective(state, W, R, 0.4, 0.8)
    want = brute_objective(state, W, R, 0.4, 0.8)
    assert np.allclose(got, want, rtol=1e-10)


def test_dimension_checks():
    state, W, _ = instance()
    with pytest.raises(ValueError):
        smuf_objective(state, W, np.zeros((4, 7)), 1.0, 1.0)
    with pytest.raises(ValueError):
        SmufTrainState(np.zeros((8, 9)), np.zeros((4, 5)), 2)
    with pytest.raises(ValueError):
        state.stacked(np.zeros((8, 5)))


def test_update_R_vanishing_constraint_is_ridge():
    rng = np.random.default_rng(3)
    L, n, B = 2, 6, 5
    P = rng.integers(0, 2, (B, L * n)).astype(float)
    W = rng.standard_normal((B, B))
    D = np.linalg.solve(W.T, P - 0.5)  # W^T D = Phi - 0.5
    state = SmufTrainState(D, rng.standard_normal((2 * L, n)), L)
    state.recompute(W)
    assert np.array_equal(state.Phi_tilde, P)
    Phi, Q = state.stacked(W)
    assert np.allclose(Q, 0, atol=1e-12)
    assert np.allclose(update_R(state, W, 0.5, 2.0), train_stage(state.X_hat, Phi, 0.5), atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_update_R_strict_local_minimum(seed):
    state, W, rng = instance(seed, L=2, n=12, p=6, B=4)
    g, lam = 0.5, 1.0
    R = update_R(state, W, g, lam)
    c0 = smuf_objective(state, W, R, g, lam)[0]
    for _ in range(20):
        D = rng.standard_normal(R.shape)
        step = 1e-3 * np.linalg.norm(R) * D / np.linalg.norm(D)
        assert smuf_objective(state, W, R + step, g, lam)[0] > c0


def test_update_R_first_order_and_finite_differences():
    state, W, rng = instance(4, L=2, n=10, p=6, B=4)
    g, lam = 0.3, 0.7
    R = update_R(state, W, g, lam)
    G = gradient_R(state, W, R, g, lam)
    assert np.linalg.norm(G) <= 1e-6 * np.linalg.norm(gradient_R(state, W, np.zeros_like(R), g, lam))
    R1 = rng.standard_normal(R.shape)
    G1 = gradient_R(state, W, R1, g, lam)
    h = 1e-5
    fd = np.zeros_like(R1)
    for idx in np.ndindex(R1.shape):
        E = np.zeros_like(R1)
        E[idx] = h
        fd[idx] = (smuf_objective(state, W, R1 + E, g, lam)[0] - smuf_objective(state, W, R1 - E, g, lam)[0]) / (2 * h)
    assert np.linalg.norm(fd - G1) <= 1e-4 * np.linalg.norm(G1)


def test_update_R_shrinks_and_needs_gamma():
    state, W, _ = instance(5)
    assert np.abs(update_R(state, W, 1e12, 1.0)).max() < 1e-9
    with pytest.raises(RankDeficientError):
        update_R(state, W, 0.0, 0.0)  # 8 code rows, 5 samples


def update_W_oracle(state, R, gamma, lam):
    L, n = state.n_landmarks, state.n_samples
    B = R.shape[1] // L
    Z = np.linalg.pinv(R) @ state.X_hat
    U = np.zeros((B, L * n))
    for i in range(n):
        for l in range(L):
            for b in range(B):
                U[b, i * L + l] = Z[l * B + b, i]
    U = U + lam * (state.Phi_tilde - 0.5)
    return (U @ state.D_hat.T).T / (1 + gamma + lam)


def test_update_W_tiny_dense_oracle():
    state, W, rng = instance(6, L=2, n=3, p=8, B=4)
    R = rng.standard_normal((4, 8))
    assert np.allclose(update_W(state, R, 0.2, 0.9), update_W_oracle(state, R, 0.2, 0.9), rtol=1e-10, atol=1e-12)


def test_update_W_reduction_and_homogeneity():
    state, W, rng = instance(7, L=2, n=3, p=8, B=4)
    R = rng.standard_normal((4, 8))
    W0 = update_W(state, R, 0.0, 0.0)
    assert np.allclose(W0, update_W_oracle(state, R, 0.0, 0.0), atol=1e-12)
    assert np.allclose(update_W(state, R, 1.0, 0.0), W0 / 2, atol=1e-12)


def test_update_W_flags_unreachable_targets():
    state, W, rng = instance(8, L=2, n=3, p=8, B=4)
    R = rng.standard_normal((4, 8))
    R[0] = 0.0  # first target row can never be reproduced
    with pytest.raises(RankDeficientError):
        update_W(state, R, 0.1, 0.1)


def test_random_orthonormal():
    Q = random_orthonormal(10, 4, 0)
    assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)
    assert np.array_equal(Q, random_orthonormal(10, 4, 0))
    assert np.allclose(random_orthonormal(3, 5, 1) @ random_orthonormal(3, 5, 1).T, np.eye(3))


def test_whitening():
    rng = np.random.default_rng(0)
    D = rng.standard_normal((5, 200)) * [[1], [2], [3], [4], [5]]
    T = whitening(D, 1e-9)
    assert np.allclose(T @ D @ D.T @ T, np.eye(5), atol=1e-9)


def separable_state(seed, p=6, L=2, n=30):
    rng = np.random.default_rng(seed)
    D = rng.choice([-1.0, 1.0], (p, L * n)) + 0.05 * rng.standard_normal((p, L * n))
    # the W update assumes whitened differences, as in training
    D = whitening(D, 1e-9) @ D
    X = rng.standard_normal((2 * L, n))
    return SmufTrainState(D, X, L)


def test_stage_deterministic_and_each_R_step_beats_zero_map():
    # the alternation itself is not monotone in C1 (the W step is a
    # closed-form heuristic); each R step is an exact minimiser though
    cfg = SmufConfig(n_bits=6, n_iter=4, lam=1.0)
    a = train_smuf_stage(separable_state(0), cfg, 1.0, 0)
    b = train_smuf_stage(separable_state(0), cfg, 1.0, 0)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    state = separable_state(0)
    baseline = float(np.sum(state.X_hat**2))
    for C, C1, C2 in a[2]:
        assert np.isfinite(C) and C1 >= 0 and C2 >= 0
        assert C <= baseline + 1e-9
    state.recompute(a[0])
    g = gradient_R(state, a[0], a[1], 1.0, 1.0)
    g0 = gradient_R(state, a[0], np.zeros_like(a[1]), 1.0, 1.0)
    assert np.linalg.norm(g) <= 1e-6 * np.linalg.norm(g0)


def test_quantisation_residual_shrinks_on_separable_data():
    cfg = SmufConfig(n_bits=6, n_iter=4, lam=1.0)
    state = separable_state(1)
    trace = train_smuf_stage(state, cfg, 1.0, 0)[2]
    assert trace[3][2] < trace[0][2]


def test_stage_update_bit_gather_equals_dense():
    rng = np.random.default_rng(2)
    L, p, B = 3, 8, 5
    stage = SmufStage(rng.standard_normal((p, B)), rng.standard_normal((2 * L, B * L)),
                      rng.standard_normal((L, p)), np.eye(p), 1.0, 1.0)
    for _ in range(20):
        codes = stage.codes(rng.standard_normal((L, p)))
        assert np.allclose(stage.update(codes), stage.update_dense(codes), rtol=0, atol=1e-12)
    assert np.all(stage.update(np.zeros((L, B), np.uint8)) == 0)


def test_stage_codes_fold_centring_and_whitening():
    rng = np.random.default_rng(3)
    L, p, B = 2, 6, 4
    T = rng.standard_normal((p, p))
    c = rng.standard_normal((L, p))
    stage = SmufStage(rng.standard_normal((p, B)), np.zeros((2 * L, B * L)), c, T, 1.0, 1.0)
    d = rng.standard_normal((L, p))
    direct = np.stack([binarize(T @ (d[l] - c[l]), stage.W) for l in range(L)])
    assert np.array_equal(stage.codes(d), direct)


def test_config_validation():
    with pytest.raises(ValueError):
        SmufConfig(gamma=0)
    with pytest.raises(ValueError):
        SmufConfig(lam=-1)
    with pytest.raises(ValueError):
        SmufConfig(n_bits=0)


@pytest.fixture(scope="module")
def smuf_model(small_corpus):
    data, pre = small_corpus
    G = np.stack([s.gt.points for s in data])
    cfg = SmufConfig(n_stages=3, n_bits=16, jitter_count=3)
    return train_smuf(pre, G, [s.box for s in data], cfg), cfg


def test_train_smuf_dims_and_trace(smuf_model):
    model, cfg = smuf_model
    L = 22
    for st_ in model.stages:
        assert st_.W.shape == (224, 16) and st_.R.shape == (2 * L, 16 * L)
    errs = [model.trace[0]["before"]] + [t["after"] for t in model.trace]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_train_smuf_deterministic(smuf_model, small_corpus):
    model, cfg = smuf_model
    data, pre = small_corpus
    again = train_smuf(pre, np.stack([s.gt.points for s in data]), [s.box for s in data], cfg)
    for a, b in zip(model.stages, again.stages):
        assert np.array_equal(a.W, b.W) and np.array_equal(a.R, b.R)


def test_single_stage_is_one_stage_training(small_corpus):
    data, pre = small_corpus
    G = np.stack([s.gt.points for s in data])
    cfg = SmufConfig(n_stages=1, n_bits=8, jitter_count=2)
    m1 = train_smuf(pre, G, [s.box for s in data], cfg)
    m3 = train_smuf(pre, G, [s.box for s in data], SmufConfig(n_stages=3, n_bits=8, jitter_count=2))
    assert np.array_equal(m1.stages[0].W, m3.stages[0].W)
    assert np.array_equal(m1.stages[0].R, m3.stages[0].R)

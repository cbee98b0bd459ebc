from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockgp.conditional import build_cache, cond_cov_matrix
from blockgp.design import Partition, make_rng
from blockgp.gp import Dataset, GpParams, blup_batch, sample_gp
from blockgp.kernel import ValidationError, corr_matrix
from blockgp.predict import (
    LambdaSystem,
    blubp_weights,
    blubp_weights_batch,
    blubp_weights_direct,
    check_lambda_pd,
    lambda_system,
    predict_batch,
    predict_blubp,
    predict_cl,
)


def make_case(sizes, p=1, seed=0, spread=1.5, phi=0.8):
    rng = make_rng(seed)
    n = sum(sizes)
    X = rng.uniform(0, spread * n, size=(n, p))
    params = GpParams([0.4], 1.5, [phi] * p)
    y = sample_gp(X, params, seed=seed)
    cuts = np.cumsum([0] + list(sizes))
    part = Partition(tuple(np.arange(cuts[i], cuts[i + 1]) for i in range(len(sizes))))
    ds = Dataset(X, y)
    return ds, part, params, build_cache(ds, part, params.phi)


def kkt_fraction(Lam, lam):
    """Exact rational solve of [[Lam, 1], [1^T, 0]] [w; mu] = [lam; 1]."""
    k = len(lam)
    A = [[Fraction(Lam[i][j]) for j in range(k)] + [Fraction(1)] for i in range(k)]
    A.append([Fraction(1)] * k + [Fraction(0)])
    b = [Fraction(v) for v in lam] + [Fraction(1)]
    n = k + 1
    for c in range(n):
        piv = next(r for r in range(c, n) if A[r][c] != 0)
        A[c], A[piv] = A[piv], A[c]
        b[c], b[piv] = b[piv], b[c]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c] / A[c][c]
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
                b[r] -= f * b[c]
    return [b[i] / A[i][i] for i in range(k)]


def test_weights_match_exact_rational_kkt():
    Lam = [[0.5, 0.125, 0.0625], [0.125, 0.375, 0.25], [0.0625, 0.25, 0.625]]
    lam = [0.5, 0.375, 0.625]
    w_exact = kkt_fraction(Lam, lam)
    w, vf = blubp_weights(LambdaSystem(np.array(Lam), np.array(lam)))
    assert np.allclose(w, [float(v) for v in w_exact], atol=1e-12)
    wf = [float(v) for v in w_exact]
    obj = np.array(wf) @ np.array(Lam) @ np.array(wf) - 2 * np.dot(lam, wf) + 1
    assert vf == pytest.approx(obj, rel=1e-12)


def test_weights_match_direct_covariance_route():
    ds, part, params, cache = make_case([4, 3, 5], seed=2)
    sys = lambda_system(cache, [7.3])
    w1, v1 = blubp_weights(sys)
    w2, v2 = blubp_weights_direct(sys)
    assert np.allclose(w1, w2, atol=1e-6)
    assert v1 == pytest.approx(v2, rel=1e-6)


def test_lambda_against_dense_formula():
    ds, part, params, cache = make_case([3, 4, 2], p=2, seed=4)
    x = np.array([[4.0, 5.0]])
    sys = lambda_system(cache, x)
    Ks = [b.K for b in cache.blocks]
    a = [corr_matrix(x, b.X, params.phi)[0] for b in cache.blocks]
    for i in range(3):
        vi = np.linalg.solve(Ks[i], a[i])
        assert sys.lam[i] == pytest.approx(a[i] @ vi, rel=1e-10)
        for j in range(3):
            vj = np.linalg.solve(Ks[j], a[j])
            C = corr_matrix(cache.blocks[i].X, cache.blocks[j].X, params.phi)
            want = vi @ (Ks[i] if i == j else C) @ vj
            assert sys.Lambda[i, j] == pytest.approx(want, rel=1e-9, abs=1e-14)


def test_lambda_is_positive_definite_for_distinct_points():
    ds, part, params, cache = make_case([3, 3, 3], seed=5)
    eig, ok = check_lambda_pd(lambda_system(cache, [6.1]))
    assert eig > 0 and ok


def test_single_block_collapses_to_blup():
    ds, part, params, cache = make_case([25], seed=3)
    Xs = np.linspace(0, 40, 30)[:, None]
    out = predict_batch(params, cache, Xs, "blubp", exact_hits=False)
    mean, var = blup_batch(params, ds, Xs)
    assert np.allclose(out.mean, mean, rtol=1e-8, atol=1e-10)
    assert np.allclose(out.variance, var, rtol=1e-8, atol=1e-12)


def test_interpolates_design_points_without_shortcut():
    ds, part, params, cache = make_case([5, 5, 5], seed=6)
    out = predict_batch(params, cache, ds.X, "blubp", exact_hits=False)
    assert np.allclose(out.mean, ds.y, atol=1e-6)
    assert np.all(out.variance <= 1e-8 * params.sigma2)


def test_exact_hit_shortcut():
    ds, part, params, cache = make_case([4, 4], seed=7)
    res = predict_blubp(params, cache, ds.X[6])
    assert res.mean == ds.y[6]
    assert res.variance == 0.0
    assert res.weights.tolist() == [0.0, 1.0]


def test_variance_matches_weighted_conditional_covariance():
    ds, part, params, cache = make_case([4, 3, 4], seed=8)
    x = np.array([[5.5]])
    res = predict_blubp(params, cache, x)
    K = cond_cov_matrix(cache, range(3), x).K
    assert res.variance == pytest.approx(params.sigma2 * res.weights @ K @ res.weights, rel=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_variance_ordering(seed, k):
    ds, part, params, cache = make_case([4] * k, seed=seed)
    Xs = make_rng((seed, 1)).uniform(0, 1.5 * ds.n, size=(10, 1))
    _, v_blup = blup_batch(params, ds, Xs)
    v_blubp = predict_batch(params, cache, Xs, "blubp", exact_hits=False).variance_raw
    v_cl = predict_batch(params, cache, Xs, "cl", exact_hits=False).variance_raw
    s2 = params.sigma2
    assert np.all(v_blup <= v_blubp + 1e-10 * s2)
    assert np.all(v_blubp <= v_cl + 1e-10 * s2)


def test_weights_sum_to_one_batch():
    ds, part, params, cache = make_case([3, 3, 3, 3], seed=9)
    out = predict_batch(params, cache, np.linspace(0, 18, 40)[:, None], "blubp")
    assert np.allclose(out.weights.sum(axis=1), 1.0, atol=1e-12)


def test_cl_equal_lambda_gives_equal_weights():
    Lam = np.array([[[0.3, 0.1], [0.1, 0.3]]])
    lam = np.array([[0.4, 0.4]])
    from blockgp.predict import _cl_weights

    W, _, _, flag = _cl_weights(Lam, lam, np.array([0.5, 0.5]))
    assert W[0].tolist() == [0.5, 0.5] and not flag[0]


def test_cl_weights_follow_one_minus_lambda():
    ds, part, params, cache = make_case([4, 4], seed=10)
    x = np.array([[3.3]])
    res = predict_cl(params, cache, x)
    lam = lambda_system(cache, x).lam
    w = (1 / (1 - lam)) / (1 / (1 - lam)).sum()
    assert np.allclose(res.weights, w, rtol=1e-12)


def test_block_swap_permutes_weights():
    ds, part, params, cache = make_case([3, 5], seed=11)
    swapped = build_cache(ds, part.reordered([1, 0]), params.phi)
    x = np.array([[6.2]])
    a = predict_blubp(params, cache, x)
    b = predict_blubp(params, swapped, x)
    assert np.allclose(a.weights, b.weights[::-1], atol=1e-10)
    assert a.mean == pytest.approx(b.mean, rel=1e-10)


def test_batch_matches_single():
    ds, part, params, cache = make_case([3, 4, 3], seed=12)
    Xs = np.array([[1.0], [7.7], [13.1]])
    out = predict_batch(params, cache, Xs, "blubp", chunk=2)
    for t in range(3):
        r = predict_blubp(params, cache, Xs[t])
        assert r.mean == pytest.approx(out.mean[t], rel=1e-13)
        assert r.variance == pytest.approx(out.variance[t], rel=1e-12)


def test_batch_weights_handle_singular_stack_item():
    Lam = np.stack([np.eye(2), np.ones((2, 2))])
    lam = np.array([[0.5, 0.5], [1.0, 1.0]])
    w, vf, _ = blubp_weights_batch(Lam, lam)
    assert np.all(np.isfinite(w)) and np.allclose(w.sum(axis=1), 1)


def test_input_validation():
    ds, part, params, cache = make_case([3, 3], seed=13)
    with pytest.raises(ValidationError):
        predict_batch(params, cache, [[1.0]], "nearest")
    with pytest.raises(ValidationError):
        predict_batch(GpParams([0.4], 1.5, [2.0]), cache, [[1.0]])
    with pytest.raises(ValidationError):
        predict_cl(params, cache, [1.0], prior_weights=[0.7, 0.7])


def test_uncorrelated_block_takes_the_slack():
    Lam = np.array([[0.5, 0.2, 0.0], [0.2, 0.6, 0.0], [0.0, 0.0, 0.0]])
    lam = np.array([0.5, 0.6, 0.0])
    w, vf = blubp_weights(LambdaSystem(Lam, lam))
    head = np.linalg.solve(Lam[:2, :2], lam[:2])
    assert np.allclose(w, [*head, 1 - head.sum()], atol=1e-12)
    rng = make_rng(2)
    for _ in range(200):
        u = rng.normal(size=3)
        u += (1 - u.sum()) / 3
        assert vf <= u @ Lam @ u - 2 * lam @ u + 1 + 1e-12


def test_far_targets_predict_the_trend():
    ds, part, params, cache = make_case([3, 3, 3], seed=14, phi=5.0)
    out = predict_batch(params, cache, [[1e3], [-1e3]], "blubp")
    assert np.allclose(out.mean, params.beta[0], atol=1e-12)
    assert np.allclose(out.variance, params.sigma2, rtol=1e-12)


def test_two_single_point_blocks_analytic():
    # blocks {0} and {1}, x* = 0.5, phi = 1, beta = 0: by symmetry the block
    # predictor averages rho * y_i, while the BLUP scales by rho / (1 + r)
    X = np.array([[0.0], [1.0]])
    y = np.array([1.0, 1.0])
    ds = Dataset(X, y)
    params = GpParams([0.0], 1.0, [1.0])
    cache = build_cache(ds, Partition((np.array([0]), np.array([1]))), [1.0])
    rho, r = np.exp(-0.25), np.exp(-1.0)
    res = predict_blubp(params, cache, [0.5])
    assert res.weights == pytest.approx([0.5, 0.5], abs=1e-15)
    assert res.mean == pytest.approx(rho / (1 + 2e-10), rel=1e-12)
    mean, _ = blup_batch(params, ds, [[0.5]])
    assert mean[0] == pytest.approx(2 * rho / (1 + r + 2e-10), rel=1e-9)


def test_single_block_lambda_collapses():
    ds, part, params, cache = make_case([6], seed=15)
    sys = lambda_system(cache, [4.4])
    assert sys.Lambda[0, 0] == pytest.approx(sys.lam[0], abs=1e-8)
    w, vf = blubp_weights(sys)
    assert w.tolist() == [1.0] and vf == pytest.approx(1 - sys.lam[0], abs=1e-12)


def test_near_duplicate_across_blocks_makes_lambda_singular():
    X = np.array([[0.0], [1.0], [1.0 + 1e-9], [2.5]])
    cache = build_cache(Dataset(X, np.zeros(4)), Partition((np.array([0, 1]), np.array([2, 3]))), [0.7])
    eig, _ = check_lambda_pd(lambda_system(cache, [1.0]))
    assert abs(eig) < 1e-8


def test_decorrelated_target_gives_vanishing_lambda():
    ds, part, params, cache = make_case([3, 3], seed=16)
    sys = lambda_system(cache, [1e4])
    assert np.all(np.abs(sys.Lambda) < 1e-12) and np.all(sys.lam < 1e-12)


def test_blubp_is_unbiased_monte_carlo():
    # the mean is affine in y, so 1e4 replications need only n + 1 predictions
    ds, part, params, _ = make_case([3, 3, 3], seed=17, spread=0.8)
    x = np.array([[3.1]])
    n = ds.n

    def predict(y):
        data = Dataset(ds.X, y)
        return predict_batch(params, build_cache(data, part, params.phi), x, "blubp").mean[0]

    c = predict(np.zeros(n))
    g = np.array([predict(np.eye(n)[j]) - c for j in range(n)])
    pts = np.vstack([x, ds.X])
    C = params.sigma2 * corr_matrix(pts, pts, params.phi) + 1e-10 * np.eye(n + 1)
    draws = params.beta[0] + make_rng(7).standard_normal((10_000, n + 1)) @ np.linalg.cholesky(C).T
    err = c + draws[:, 1:] @ g - draws[:, 0]
    assert abs(err.mean()) <= 4 * err.std() / np.sqrt(len(err))

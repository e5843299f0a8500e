import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_piece, scan_minimizer
from panet import weight_quant as wq
from panet.bitops import unpack

M8_ENDPOINTS = np.array([-1.5, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0, 1.5], dtype=np.float32)


def fit(W, M=8):
    return wq.fit_weight_piecewise(np.asarray(W, dtype=np.float32), wq.WeightQuantizerConfig(M=M))


@pytest.mark.parametrize("sigma,scale", [(1.0, 1.0), (2.0, 2.0), (0.0, 1e-8)])
def test_endpoints(sigma, scale):
    u = wq.weight_endpoints(wq.WeightQuantizerConfig(M=8), sigma)
    np.testing.assert_array_equal(u, (M8_ENDPOINTS.astype(np.float64) * scale).astype(np.float32))


@pytest.mark.parametrize("M", [2, 4, 6, 8, 10, 16])
def test_default_multipliers_shape(M):
    m = np.array(wq.default_multipliers(M))
    assert len(m) == M and np.all(np.diff(m) > 0)
    np.testing.assert_array_equal(m, -m[::-1])
    assert m[M // 2] == 0.25 and m[-1] < 2.0


@pytest.mark.parametrize("bad", [dict(M=3), dict(M=0), dict(lambda_W=0.0),
                                 dict(M=4, endpoint_multipliers=(-1, -0.5, 0.5, 2)),
                                 dict(M=4, endpoint_multipliers=(-1, 0.5, -0.5, 1)),
                                 dict(M=4, endpoint_multipliers=(-1, 1))])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        wq.WeightQuantizerConfig(**bad)


def test_piece_index_examples():
    assert wq.piece_index(0.0, M8_ENDPOINTS) == wq.DEAD
    # [1.0, 1.5) is the second positive piece, id 6 in 0-based order
    assert wq.piece_index(1.0, M8_ENDPOINTS) == 6
    assert wq.piece_bounds(6, M8_ENDPOINTS, 1.0) == (1.0, 1.5)
    assert wq.piece_index(-10.0, M8_ENDPOINTS) == 0
    assert wq.piece_index(1.5, M8_ENDPOINTS) == 7 and wq.piece_index(-1.5, M8_ENDPOINTS) == 1


def test_piece_indices_match_scan_at_boundaries():
    pts = np.concatenate([M8_ENDPOINTS, np.nextafter(M8_ENDPOINTS, -np.inf), np.nextafter(M8_ENDPOINTS, np.inf), [0, -9, 9]])
    got = wq.piece_indices(pts.astype(np.float32), M8_ENDPOINTS)
    assert list(got) == [naive_piece(float(p), [float(x) for x in M8_ENDPOINTS]) for p in pts.astype(np.float32)]


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_piece_bounds_contain_members(seed, M):
    W = np.random.default_rng(seed).standard_normal(200).astype(np.float32)
    wp, _ = fit(W, M)
    idx = wq.piece_indices(W, wp.u)
    for w, i in zip(W, idx):
        lo, hi = wq.piece_bounds(int(i), wp.u, wp.sigma)
        assert lo <= w < hi


def test_hand_example():
    W = np.array([-1, -1, 1, 1], dtype=np.float32)
    wp, diag = fit(W)
    assert wp.sigma == 1.0
    # lower-closed pieces: -1 falls in [-1.0, -0.5) (id 2), +1 in [1.0, 1.5) (id 6)
    assert wp.alpha[6] == 1.0 and wp.alpha[2] == -1.0
    assert sorted(diag.empty_pieces) == [0, 1, 3, 4, 5, 7]
    # fallbacks: midpoints, and u -+ sigma/2 for the unbounded pieces
    np.testing.assert_allclose(wp.alpha[[0, 1, 3, 4, 5, 7]], [-2.0, -1.25, -0.375, 0.375, 0.75, 2.0])
    np.testing.assert_array_equal(wq.quantize_weights_forward(W, wp), W)
    planes = wq.decompose_weight_bases(W, wp.u)
    assert [p.popcount() for p in planes] == [0, 0, 2, 0, 0, 0, 2, 0]


def test_single_piece_alpha_is_mean():
    W = np.array([1.1, 1.2, 1.3, 1.4], dtype=np.float32)
    u = M8_ENDPOINTS
    alpha, diag = wq.fit_scaling_coefficients(W, u, sigma=1.0)
    assert alpha[6] == pytest.approx(W.astype(np.float64).mean(), abs=1e-7)
    assert diag.counts[6] == 4


def test_all_zero_weights():
    W = np.zeros((3, 2, 3, 3), dtype=np.float32)
    wp, _ = fit(W)
    assert not wq.quantize_weights_forward(W, wp).any()
    assert all(p.popcount() == 0 for p in wq.decompose_weight_bases(W, wp.u))


@pytest.mark.parametrize("seed", range(20))
def test_alpha_is_brute_force_minimizer(seed):
    r = np.random.default_rng(seed)
    W = (r.standard_normal(500) * r.uniform(0.1, 3)).astype(np.float32)
    wp, diag = fit(W)
    idx = wq.piece_indices(W, wp.u)
    for i in range(8):
        members = W[idx == i]
        if members.size:
            assert abs(float(wp.alpha[i]) - scan_minimizer(members)) <= 1e-4
            assert members.min() <= wp.alpha[i] <= members.max()


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]), st.sampled_from([(7,), (3, 4), (2, 3, 3, 3)]))
def test_reconstruction_and_partition(seed, M, shape):
    W = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    wp, _ = fit(W, M)
    Wq = wq.quantize_weights_forward(W, wp)
    planes = wq.decompose_weight_bases(W, wp.u)
    recon = np.zeros_like(W)
    for a, p in zip(wp.alpha, planes):
        recon += a * unpack(p).reshape(W.shape)
    np.testing.assert_array_equal(recon, Wq)
    dead = int(np.sum(wq.piece_indices(W, wp.u) == wq.DEAD))
    assert sum(p.popcount() for p in planes) + dead == W.size


@given(st.integers(0, 10_000))
def test_idempotent_when_alpha_inside_piece(seed):
    W = np.random.default_rng(seed).standard_normal(300).astype(np.float32)
    wp, _ = fit(W)
    Wq = wq.quantize_weights_forward(W, wp)
    inside = all(wq.piece_index(float(a), wp.u) == i for i, a in enumerate(wp.alpha))
    if inside:
        np.testing.assert_array_equal(wq.quantize_weights_forward(Wq, wp), Wq)


@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_scaling_covariance(seed, c):
    W = np.random.default_rng(seed).standard_normal(200).astype(np.float32)
    wp, _ = fit(W)
    # keep away from endpoint ties, which rounding of c*W may flip
    cW = (np.float64(c) * W).astype(np.float32)
    wpc, _ = fit(cW)
    np.testing.assert_allclose(wpc.u, c * wp.u, rtol=1e-5)
    if np.array_equal(wq.piece_indices(cW, wpc.u), wq.piece_indices(W, wp.u)):
        np.testing.assert_allclose(wq.quantize_weights_forward(cW, wpc),
                                   c * wq.quantize_weights_forward(W, wp), rtol=1e-5, atol=1e-6 * c)


def test_backward_endpoints_are_midpoints():
    s = wq.backward_endpoints(M8_ENDPOINTS)
    np.testing.assert_array_equal(s, (M8_ENDPOINTS[1:] + M8_ENDPOINTS[:-1]) / 2)


def piece_table_slope(w, wp, lam):
    """Direct evaluation of the slope table: interval k of s carries the jump at u_k."""
    s = [float(x) for x in wp.s]
    M = wp.M
    half = M // 2
    a = [float(x) for x in wp.alpha]
    levels = a[:half] + [0.0] + a[half:]
    k = sum(1 for e in s if w >= e)
    return lam * (levels[k + 1] - levels[k])


def test_slope_example():
    W = np.random.default_rng(3).standard_normal(1000).astype(np.float32)
    wp, _ = fit(W)
    # a point between s_1 and s_2 gets alpha_3 - alpha_2 (1-based), i.e. alpha[2] - alpha[1]
    w = np.float32((wp.s[0] + wp.s[1]) / 2)
    g = wq.weight_backward(np.ones(1, np.float32), np.array([w]), wp, 1.0)
    assert g[0] == pytest.approx(float(wp.alpha[2]) - float(wp.alpha[1]), rel=1e-6)


@pytest.mark.parametrize("M", [2, 4, 8])
def test_weight_backward_matches_piece_table(M):
    r = np.random.default_rng(M)
    W = r.standard_normal(400).astype(np.float32)
    wp, _ = fit(W, M)
    lam = 0.7
    near = np.concatenate([wp.s, np.nextafter(wp.s, -np.inf), np.nextafter(wp.s, np.inf)])
    pts = np.concatenate([r.uniform(-4, 4, 1000 - near.size), near]).astype(np.float32)
    g = r.standard_normal(pts.size).astype(np.float32)
    got = wq.weight_backward(g, pts, wp, lam)
    want = np.array([gi * piece_table_slope(float(p), wp, lam) for gi, p in zip(g, pts)])
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)


def test_backward_zero_grad_and_sign():
    W = np.random.default_rng(0).standard_normal(300).astype(np.float32)
    wp, _ = fit(W)
    assert not wq.weight_backward(np.zeros_like(W), W, wp, 1.0).any()
    assert np.all(np.diff(wp.alpha) >= 0)
    g = np.random.default_rng(1).standard_normal(300).astype(np.float32)
    out = wq.weight_backward(g, W, wp, 1.0)
    assert np.all(np.sign(out) == np.sign(g))


def test_backward_locality():
    r = np.random.default_rng(5)
    W = r.standard_normal(50).astype(np.float32)
    wp, _ = fit(W)
    g = r.standard_normal(50).astype(np.float32)
    base = wq.weight_backward(g, W, wp, 1.0)
    W2, g2 = W.copy(), g.copy()
    W2[1:] = r.standard_normal(49)
    g2[1:] = 0
    assert wq.weight_backward(g2, W2, wp, 1.0)[0] == base[0]


def test_shape_mismatch():
    W = np.zeros(4, np.float32)
    wp, _ = fit(np.arange(4, dtype=np.float32))
    with pytest.raises(ValueError):
        wq.weight_backward(np.zeros(3, np.float32), W, wp, 1.0)

"""Numeric kernels against brute-force oracles and closed-form values."""

import math

import numpy as np
import pytest

from compvad.numerics import (bilinear_resize, distance, group_average_pool,
                              iou, kmeans, min_distance_search, softmax_pair)

# frozen via a 40-digit arbitrary-precision oracle: 1 / (1 + e^0.6)
SOFTMAX_08_02 = 0.35434369377420455


def brute_distance(a, b, metric):
    """Textbook formulas, no shared code with the implementation."""
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    if metric == "cosine":
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return 1.0 - dot / (na * nb)
    if metric == "l1":
        return sum(abs(x - y) for x, y in zip(a, b))
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


# ---------------------------------------------------------------------------
# distance / min_distance_search


def test_cosine_identical_is_exactly_zero():
    v = np.array([0.3, -1.2, 7.75, 0.1])
    assert distance(v, v.copy(), "cosine") == 0.0


def test_cosine_orthogonal_and_opposite():
    a = np.array([1.0, 0.0])
    assert distance(a, np.array([0.0, 5.0]), "cosine") == pytest.approx(1.0, abs=1e-12)
    assert distance(a, np.array([-2.0, 0.0]), "cosine") == pytest.approx(2.0, abs=1e-12)


def test_cosine_rejects_zero_vector():
    with pytest.raises(ValueError, match="zero-norm"):
        distance(np.zeros(3), np.ones(3), "cosine")


def test_distance_rejects_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        distance(np.ones(3), np.ones(4), "l2")


def test_unknown_metric_rejected():
    with pytest.raises(ValueError, match="metric"):
        distance(np.ones(3), np.ones(3), "chebyshev")


@pytest.mark.parametrize("metric", ["cosine", "l1", "l2"])
def test_min_distance_search_matches_brute_force(metric):
    rng = np.random.default_rng(42)
    for _ in range(25):
        q = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 7) + 1))
        r = rng.standard_normal((rng.integers(1, 11), q.shape[1]))
        got = min_distance_search(q, r, metric)
        want = [min(brute_distance(qi, ri, metric) for ri in r) for qi in q]
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_min_distance_search_self_row_exact_zero():
    rng = np.random.default_rng(7)
    refs = rng.standard_normal((20, 8))
    queries = refs[[3, 11, 19]].copy()
    d = min_distance_search(queries, refs, "cosine")
    assert np.array_equal(d, np.zeros(3))


def test_min_distance_search_duplicated_refs_invariant():
    rng = np.random.default_rng(8)
    q = rng.standard_normal((5, 6))
    r = rng.standard_normal((9, 6))
    once = min_distance_search(q, r, "cosine")
    twice = min_distance_search(q, np.vstack([r, r]), "cosine")
    assert np.array_equal(once, twice)


def test_min_distance_search_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        min_distance_search(np.ones((2, 3)), np.ones((2, 4)))


# ---------------------------------------------------------------------------
# softmax_pair


def test_softmax_pair_frozen_value():
    assert softmax_pair(0.8, 0.2, 1.0) == pytest.approx(SOFTMAX_08_02, abs=1e-15)


@pytest.mark.parametrize("tau", [0.1, 0.5, 1.0, 7.0])
def test_softmax_pair_equal_scores_exactly_half(tau):
    assert softmax_pair(0.42, 0.42, tau) == 0.5


def test_softmax_pair_complement_within_1e9():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a, b = rng.standard_normal(2) * 3
        tau = float(rng.uniform(0.05, 5.0))
        assert abs(softmax_pair(a, b, tau) + softmax_pair(b, a, tau) - 1.0) < 1e-9


def test_softmax_pair_monotonic_in_gap():
    taus = [0.2, 1.0, 3.0]
    for tau in taus:
        vals = [softmax_pair(0.0, b, tau) for b in np.linspace(-2, 2, 9)]
        assert all(x < y for x, y in zip(vals, vals[1:]))


def test_softmax_pair_extreme_scores_stable():
    assert softmax_pair(1000.0, -1000.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert softmax_pair(-1000.0, 1000.0, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_softmax_pair_rejects_bad_inputs():
    with pytest.raises(ValueError, match="finite"):
        softmax_pair(float("nan"), 0.0)
    with pytest.raises(ValueError, match="temperature"):
        softmax_pair(0.0, 0.0, 0.0)
    with pytest.raises(ValueError, match="temperature"):
        softmax_pair(0.0, 0.0, -1.0)


# ---------------------------------------------------------------------------
# kmeans


def _blobs(rng, n_per, centers, sigma=0.1):
    pts = np.concatenate([c + sigma * rng.standard_normal((n_per, len(c)))
                          for c in centers])
    member = np.repeat(np.arange(len(centers)), n_per)
    return pts, member


@pytest.mark.parametrize("seed", [0, 1, 17, 123])
def test_kmeans_two_blobs_recovers_membership(seed):
    rng = np.random.default_rng(seed)
    centers = [np.zeros(3), np.full(3, 10.0 / np.sqrt(3))]
    pts, member = _blobs(rng, 40, centers, sigma=0.1)
    _, assign = kmeans(pts, 2, seed=seed)
    # cluster indices are arbitrary; compare as a partition
    same_impl = assign[:, None] == assign[None, :]
    same_true = member[:, None] == member[None, :]
    assert np.array_equal(same_impl, same_true)


def test_kmeans_n_equals_p_objective_zero():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((6, 4))
    cents, assign, hist = kmeans(pts, 6, seed=0, return_history=True)
    assert hist[-1] == pytest.approx(0.0, abs=1e-20)
    assert sorted(assign.tolist()) == list(range(6))


def test_kmeans_objective_non_increasing():
    rng = np.random.default_rng(11)
    pts = rng.standard_normal((200, 5))
    for seed in range(5):
        _, _, hist = kmeans(pts, 7, seed=seed, return_history=True, tol=0.0,
                            max_iter=30)
        assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(13)
    pts = rng.standard_normal((100, 4))
    c1, a1 = kmeans(pts, 5, seed=99)
    c2, a2 = kmeans(pts, 5, seed=99)
    assert np.array_equal(c1, c2)
    assert np.array_equal(a1, a2)


def test_kmeans_permutation_stable_partition():
    rng = np.random.default_rng(21)
    centers = [np.zeros(4), np.full(4, 8.0), np.array([8.0, -8.0, 0.0, 0.0])]
    pts, member = _blobs(rng, 30, centers, sigma=0.05)
    perm = rng.permutation(pts.shape[0])
    _, a1 = kmeans(pts, 3, seed=2)
    _, a2 = kmeans(pts[perm], 3, seed=2)
    same1 = a1[perm][:, None] == a1[perm][None, :]
    same2 = a2[:, None] == a2[None, :]
    assert np.array_equal(same1, same2)


def test_kmeans_rejects_bad_sizes():
    with pytest.raises(ValueError, match="n_clusters"):
        kmeans(np.ones((3, 2)), 0)
    with pytest.raises(ValueError, match="at least"):
        kmeans(np.ones((3, 2)), 4)


# ---------------------------------------------------------------------------
# bilinear_resize


def test_bilinear_identity_bitwise():
    rng = np.random.default_rng(31)
    m = rng.standard_normal((5, 9))
    out = bilinear_resize(m, 5, 9)
    assert np.array_equal(out, m)


def test_bilinear_two_by_two_to_two_by_four():
    m = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = bilinear_resize(m, 2, 4)
    want = np.array([0.0, 1.0, 2.0, 3.0]) / 3.0
    np.testing.assert_allclose(out, np.stack([want, want]), atol=1e-12)


def test_bilinear_constant_stays_exactly_constant():
    m = np.full((3, 5), 3.0)
    for hw in ((7, 11), (1, 1), (2, 9), (64, 64)):
        out = bilinear_resize(m, *hw)
        assert np.all(out == 3.0)


def test_bilinear_output_dim_one_samples_position_zero():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(bilinear_resize(m, 1, 2), [[1.0, 2.0]])
    np.testing.assert_array_equal(bilinear_resize(m, 2, 1), [[1.0], [3.0]])
    np.testing.assert_array_equal(bilinear_resize(m, 1, 1), [[1.0]])


def test_bilinear_corners_exact():
    rng = np.random.default_rng(37)
    m = rng.standard_normal((4, 6))
    out = bilinear_resize(m, 13, 29)
    assert out[0, 0] == m[0, 0]
    assert out[0, -1] == m[0, -1]
    assert out[-1, 0] == m[-1, 0]
    assert out[-1, -1] == m[-1, -1]


def test_bilinear_affine_equivariance():
    rng = np.random.default_rng(41)
    for _ in range(20):
        m = rng.standard_normal((3, 4))
        a, b = rng.standard_normal(2)
        direct = bilinear_resize(a * m + b, 7, 9)
        mapped = a * bilinear_resize(m, 7, 9) + b
        np.testing.assert_allclose(direct, mapped, atol=1e-6)


def test_bilinear_channelwise_matches_per_channel():
    rng = np.random.default_rng(43)
    m = rng.standard_normal((4, 5, 3))
    out = bilinear_resize(m, 9, 7)
    for c in range(3):
        np.testing.assert_array_equal(out[:, :, c], bilinear_resize(m[:, :, c], 9, 7))


def test_bilinear_bounded_by_input_range():
    rng = np.random.default_rng(47)
    m = rng.standard_normal((6, 6))
    out = bilinear_resize(m, 50, 50)
    assert out.min() >= m.min() - 1e-12
    assert out.max() <= m.max() + 1e-12


# ---------------------------------------------------------------------------
# group_average_pool / iou


def test_group_average_pool_matches_loop():
    rng = np.random.default_rng(53)
    fm = rng.standard_normal((5, 6, 3))
    mask = rng.random((5, 6)) > 0.6
    mask[0, 0] = True
    got = group_average_pool(fm, mask)
    acc = np.zeros(3)
    n = 0
    for r in range(5):
        for c in range(6):
            if mask[r, c]:
                acc += fm[r, c]
                n += 1
    np.testing.assert_allclose(got, acc / n, atol=1e-9)


def test_group_average_pool_full_mask_is_global_mean():
    rng = np.random.default_rng(59)
    fm = rng.standard_normal((4, 4, 2))
    np.testing.assert_allclose(group_average_pool(fm, np.ones((4, 4))),
                               fm.reshape(-1, 2).mean(axis=0), atol=1e-12)


def test_group_average_pool_empty_mask_rejected():
    with pytest.raises(ValueError, match="no cells"):
        group_average_pool(np.zeros((3, 3, 2)), np.zeros((3, 3)))


def test_iou_basic_values():
    a = np.zeros((3, 3), dtype=np.uint8)
    b = np.zeros((3, 3), dtype=np.uint8)
    a[0:2] = 1   # rows 0, 1
    b[1:3] = 1   # rows 1, 2
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou(a, a) == 1.0
    assert iou(a, np.zeros_like(a)) == 0.0
    assert iou(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_iou_rejects_dim_mismatch():
    with pytest.raises(ValueError, match="differ"):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))

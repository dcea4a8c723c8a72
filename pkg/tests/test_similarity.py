import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubeannot.core import CHANNELS, ActionProposal, FeatureHistogram
from tubeannot.similarity import (
    SimilarityConfig,
    SimilarityRecord,
    batched_assignment_cost,
    chi2_kernel,
    class_similarities,
    cluster_raw_features,
    dtw_distance,
    dtw_distance_batch,
    fine_grain_distances,
    fine_grain_similarity,
    global_similarity,
    hungarian,
    matched_distance,
    shape_similarity,
)


def chi2_oracle(a, b, gamma):
    total = 0.0
    for x, y in zip(a, b):
        if x + y > 0:
            total += (x - y) ** 2 / (x + y)
    return math.exp(-gamma * total)


def perm_oracle(cost):
    n = cost.shape[0]
    best = None
    for p in itertools.permutations(range(n)):
        c = sum(cost[i, p[i]] for i in range(n))
        if best is None or c < best[0]:
            best = (c, p)
    return best


def dtw_oracle(a, b):
    """Enumerate every monotone alignment path; min cost, ties to shorter path."""

    @lru_cache(maxsize=None)
    def rec(i, j):
        local = abs(a[i] - b[j])
        if i == 0 and j == 0:
            return [(local, 1)]
        out = []
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i - di >= 0 and j - dj >= 0:
                out.extend((c + local, n + 1) for c, n in rec(i - di, j - dj))
        return out

    c, n = min(rec(len(a) - 1, len(b) - 1))
    return c / n


def random_hist(rng, d=6, zeros=True):
    h = rng.random(d)
    if zeros:
        h[rng.random(d) < 0.3] = 0.0
    if h.sum() == 0:
        h[0] = 1.0
    return h / h.sum()


def proposal(pid, video, rng, raw=None, coords=None, d=6):
    hists = {c: FeatureHistogram(c, np.stack([random_hist(rng, d) for _ in range(5)])) for c in CHANNELS}
    if raw is None:
        raw = {c: rng.normal(size=(10, 4)) for c in CHANNELS}
    if coords is None:
        coords = np.column_stack([np.zeros(5), np.zeros(5), rng.uniform(2, 9, 5), rng.uniform(2, 9, 5)])
    return ActionProposal(id=pid, video_id=video, start=0, coords=coords, histograms=hists, raw_features=raw)


# -- chi2 / global ----------------------------------------------------------


def test_chi2_examples():
    assert chi2_kernel([0.2, 0.8], [0.2, 0.8]) == 1.0
    assert chi2_kernel([1, 0], [0, 1], 1.0) == pytest.approx(math.exp(-2))
    assert chi2_kernel([0, 0, 1], [0, 0, 1]) == 1.0
    with pytest.raises(ValueError):
        chi2_kernel([1, 0], [1, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = random_hist(rng), random_hist(rng)
        g = float(rng.uniform(0.1, 5))
        assert chi2_kernel(a, b, g) == pytest.approx(chi2_oracle(a, b, g), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**20), st.floats(0.01, 5), st.floats(0.01, 5))
def test_chi2_symmetric_and_monotone_in_gamma(seed, g1, g2):
    rng = np.random.default_rng(seed)
    a, b = random_hist(rng), random_hist(rng)
    assert chi2_kernel(a, b, g1) == chi2_kernel(b, a, g1)
    lo, hi = sorted((g1, g2))
    assert chi2_kernel(a, b, hi) <= chi2_kernel(a, b, lo)
    assert 0 < chi2_kernel(a, b, g1) <= 1


def test_global_similarity():
    rng = np.random.default_rng(1)
    p = proposal("a", "v1", rng)
    assert global_similarity(p, p) == 1.0
    q = proposal("b", "v2", rng)
    ref = np.mean(
        [chi2_oracle(p.histograms[c].cells[k], q.histograms[c].cells[k], 0.7) for c in CHANNELS for k in range(5)]
    )
    assert global_similarity(p, q, 0.7) == pytest.approx(ref, abs=1e-12)
    # one-hot disjoint in every cell of every channel
    one = {c: FeatureHistogram(c, np.tile([1.0, 0.0], (5, 1))) for c in CHANNELS}
    two = {c: FeatureHistogram(c, np.tile([0.0, 1.0], (5, 1))) for c in CHANNELS}
    box = [[0, 0, 2, 2]]
    x = ActionProposal(id="x", video_id="v1", start=0, coords=box, histograms=one)
    y = ActionProposal(id="y", video_id="v2", start=0, coords=box, histograms=two)
    assert global_similarity(x, y) == pytest.approx(math.exp(-2))
    z = ActionProposal(id="z", video_id="v2", start=0, coords=box, histograms={"Traj": one["Traj"]})
    with pytest.raises(KeyError):
        global_similarity(x, z)


# -- k-means ----------------------------------------------------------------


def test_kmeans_trivial_cases():
    pts = np.arange(12, dtype=float).reshape(6, 2) ** 2
    cents = cluster_raw_features(pts, 6, seed=3)
    assert sorted(map(tuple, cents)) == sorted(map(tuple, pts))
    same = cluster_raw_features(np.ones((9, 3)), 6, seed=0)
    assert np.all(same == 1.0)
    assert cluster_raw_features(pts[:2], 6).shape == (2, 2)
    with pytest.raises(ValueError):
        cluster_raw_features(np.zeros((0, 3)))


def test_kmeans_order_independent_and_seeded():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(30, 3))
    a = cluster_raw_features(pts, seed=5)
    b = cluster_raw_features(pts[rng.permutation(30)], seed=5)
    assert np.array_equal(a, b)


def test_kmeans_recovers_planted_blobs():
    rng = np.random.default_rng(3)
    sep = 10.0
    hits = 0
    for trial in range(20):
        means = rng.normal(size=(6, 5))
        means *= sep / np.min([np.linalg.norm(means[i] - means[j]) for i in range(6) for j in range(i)])
        pts = np.concatenate([m + rng.normal(0, 0.05 * sep / 5, size=(8, 5)) for m in means])
        cents = cluster_raw_features(pts, 6, seed=trial)
        d = np.linalg.norm(cents[:, None] - means[None], axis=2)
        perm, _ = hungarian(d)
        hits += np.all(d[np.arange(6), perm] < 0.1 * sep)
    assert hits == 20


# -- hungarian --------------------------------------------------------------


def test_hungarian_examples():
    perm, cost = hungarian(np.zeros((3, 3)))
    assert perm.tolist() == [0, 1, 2] and cost == 0.0
    c = np.ones((4, 4))
    target = [2, 0, 3, 1]
    c[np.arange(4), target] = 0
    assert hungarian(c)[0].tolist() == target
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.nan], [1, 1]]))
    assert hungarian(np.zeros((0, 0)))[1] == 0.0


def test_hungarian_matches_permutation_oracle():
    rng = np.random.default_rng(4)
    for n in (1, 2, 3, 4, 5, 6):
        for _ in range(30):
            cost = rng.random((n, n)) * 10
            perm, total = hungarian(cost)
            best, _ = perm_oracle(cost)
            assert total == best
            assert total <= np.trace(cost)
            assert sorted(perm.tolist()) == list(range(n))


def test_hungarian_lexicographic_ties():
    rng = np.random.default_rng(5)
    for _ in range(40):
        cost = rng.integers(0, 3, size=(5, 5)).astype(float)
        perm, total = hungarian(cost)
        n = 5
        costs = {p: sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))}
        best = min(costs.values())
        assert tuple(perm.tolist()) == min(p for p, c in costs.items() if c == best)


def test_batched_assignment_matches_oracle():
    rng = np.random.default_rng(6)
    for r, c in ((1, 1), (3, 3), (2, 5), (4, 6), (6, 6)):
        cost = rng.random((25, r, c))
        got = batched_assignment_cost(cost)
        for k in range(25):
            ref = min(sum(cost[k, i, p[i]] for i in range(r)) for p in itertools.permutations(range(c), r))
            assert got[k] == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        batched_assignment_cost(np.zeros((1, 3, 2)))


# -- fine grain -------------------------------------------------------------


def test_fine_grain_identity_and_permutation():
    rng = np.random.default_rng(7)
    p = proposal("a", "v1", rng)
    assert fine_grain_similarity(p, p) == 1.0
    shuffled = {c: v[rng.permutation(len(v))] for c, v in p.raw_features.items()}
    q = proposal("b", "v2", rng, raw=shuffled)
    assert fine_grain_similarity(p, q, sigma=0.3) == 1.0


def test_matched_distance_rectangular():
    a = np.array([[0.0, 0.0], [10.0, 0.0]])
    b = np.array([[10.0, 1.0], [0.0, 2.0], [50.0, 50.0]])
    assert matched_distance(a, b) == pytest.approx(1.5)
    assert matched_distance(b, a) == pytest.approx(1.5)


def test_fine_grain_shared_blobs_rank_higher():
    rng = np.random.default_rng(8)
    wins = 0
    trials = 40
    for t in range(trials):
        pool = rng.normal(0, 6, size=(12, 4))

        def make(idx, pid, vid):
            raw = {c: np.concatenate([pool[i] + rng.normal(0, 0.3, (3, 4)) for i in idx]) for c in CHANNELS}
            return proposal(pid, vid, rng, raw=raw)

        base = make(range(6), "a", "v1")
        shared = make([0, 1, 2, 6, 7, 8], "b", "v2")
        disjoint = make(range(6, 12), "c", "v3")
        wins += fine_grain_similarity(base, shared, seed=t, sigma=5.0) > fine_grain_similarity(
            base, disjoint, seed=t, sigma=5.0
        )
    assert wins >= 0.95 * trials


# -- DTW --------------------------------------------------------------------


def test_dtw_examples():
    a = [1.0, 2.0, 0.5, 3.0]
    assert dtw_distance(a, a) == 0.0
    assert dtw_distance(a, np.repeat(a, 2)) == 0.0
    assert dtw_distance(np.repeat(a, 3), a) == 0.0
    assert dtw_distance([1.0], [3.0, 3.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        dtw_distance([], [1.0])


def test_dtw_matches_recursive_oracle():
    rng = np.random.default_rng(9)
    for _ in range(60):
        a = rng.uniform(0.3, 3, int(rng.integers(1, 7)))
        b = rng.uniform(0.3, 3, int(rng.integers(1, 7)))
        assert dtw_distance(a, b) == pytest.approx(dtw_oracle(tuple(a), tuple(b)), abs=1e-9)
        assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), abs=1e-12)
    # integer-valued series force cost ties between paths of different lengths
    for _ in range(60):
        a = rng.integers(0, 3, int(rng.integers(1, 7))).astype(float)
        b = rng.integers(0, 3, int(rng.integers(1, 7))).astype(float)
        assert dtw_distance(a, b) == pytest.approx(dtw_oracle(tuple(a), tuple(b)), abs=1e-12)


def test_dtw_batch_matches_single():
    rng = np.random.default_rng(10)
    a, b = rng.random((40, 7)), rng.random((40, 9))
    la, lb = rng.integers(1, 8, 40), rng.integers(1, 10, 40)
    got = dtw_distance_batch(a, la, b, lb)
    for k in range(40):
        assert got[k] == dtw_distance(a[k, : la[k]], b[k, : lb[k]])


def test_shape_similarity():
    assert shape_similarity([1, 2], [1, 2]) == 1.0
    d = dtw_distance([1, 2, 3], [2, 2.5])
    assert shape_similarity([1, 2, 3], [2, 2.5], sigma_shape=d) == pytest.approx(math.exp(-1))
    pairs = [([1, 1, 1], [1, 1.1]), ([1, 1, 1], [1, 1.5, 2]), ([1, 1, 1], [3, 3])]
    sims = [shape_similarity(x, y) for x, y in pairs]
    dists = [dtw_distance(x, y) for x, y in pairs]
    assert np.argsort(sims).tolist() == np.argsort(dists)[::-1].tolist()


# -- records and class matrices ----------------------------------------------


def test_similarity_record_invariants():
    r = SimilarityRecord((("v1", "a"), ("v2", "b")), 0.5, 1.0, 0.2)
    assert r.swapped().swapped() == r
    with pytest.raises(ValueError):
        SimilarityRecord((("v1", "a"), ("v1", "b")), 0.5, 1.0, 0.2)
    with pytest.raises(ValueError):
        SimilarityRecord((("v1", "a"), ("v2", "b")), 0.0, 1.0, 0.2)


def test_class_matrices_match_pairwise_functions():
    rng = np.random.default_rng(11)
    nodes, groups = [], []
    for v in range(3):
        for k in range(4):
            n = int(rng.integers(2, 6))
            coords = np.column_stack([np.zeros(n), np.zeros(n), rng.uniform(2, 9, n), rng.uniform(2, 9, n)])
            raw = {c: rng.normal(size=(int(rng.integers(2, 10)), 3)) for c in CHANNELS}
            nodes.append(proposal(f"p{k}", f"v{v}", rng, raw=raw, coords=coords))
            groups.append(v)
    cfg = SimilarityConfig(chunk_pairs=7)
    mats = class_similarities(nodes, groups, cfg)
    pairs = [(i, j) for i in range(12) for j in range(i + 1, 12) if groups[i] != groups[j]]
    chi = {c: [] for c in CHANNELS}
    fd = {c: [] for c in CHANNELS}
    dd = []
    for i, j in pairs:
        for c in CHANNELS:
            a, b = nodes[i].histograms[c].cells, nodes[j].histograms[c].cells
            chi[c].extend(-math.log(chi2_oracle(x, y, 1.0)) for x, y in zip(a, b))
        for c, v in fine_grain_distances(nodes[i], nodes[j]).items():
            fd[c].append(v)
        dd.append(dtw_distance(nodes[i].aspect_ratios, nodes[j].aspect_ratios))
    gam = {c: 1 / np.mean(chi[c]) for c in CHANNELS}
    sig = {c: float(np.median(fd[c])) for c in CHANNELS}
    sig_s = float(np.median(dd))
    assert mats.constants["sigma_shape"] == pytest.approx(sig_s)
    for i, j in pairs:
        assert mats.theta[i, j] == pytest.approx(global_similarity(nodes[i], nodes[j], gam), abs=1e-12)
        assert mats.gamma_fine[i, j] == pytest.approx(fine_grain_similarity(nodes[i], nodes[j], sigma=sig), abs=1e-12)
        assert mats.pi_shape[i, j] == pytest.approx(
            shape_similarity(nodes[i].aspect_ratios, nodes[j].aspect_ratios, sig_s), abs=1e-12
        )
        rec = mats.record(i, j, nodes)
        assert rec.swapped() == mats.record(j, i, nodes)
    same = [(i, j) for i in range(12) for j in range(12) if groups[i] == groups[j]]
    for i, j in same:
        assert mats.theta[i, j] == mats.gamma_fine[i, j] == mats.pi_shape[i, j] == 0.0

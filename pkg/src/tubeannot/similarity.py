"""Cross-video proposal similarities.

Three signals per proposal pair:

* ``theta``: chi-square kernel between bag-of-words histograms (4 channels x
  5 pyramid cells), averaged uniformly.
* ``gamma_fine``: per-channel k-means centroids of raw descriptors, matched
  one-to-one by minimum total distance, turned into ``exp(-d / sigma)``.
* ``pi_shape``: DTW distance between aspect-ratio series, turned into
  ``exp(-d / sigma)``.

Distances become similarities with dataset-level bandwidths (median matched
distance, median DTW distance, reciprocal mean chi-square statistic), which
are computed in a separate pass over all cross-video pairs of a class.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tubeannot.core import CHANNELS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityRecord:
    pair: tuple[tuple[str, str], tuple[str, str]]  # ((video, proposal), (video, proposal))
    theta: float
    gamma_fine: float
    pi_shape: float

    def __post_init__(self):
        if self.pair[0][0] == self.pair[1][0]:
            raise ValueError("similarity records pair proposals from distinct videos")
        for name in ("theta", "gamma_fine", "pi_shape"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} outside (0, 1]")

    def swapped(self) -> "SimilarityRecord":
        return SimilarityRecord((self.pair[1], self.pair[0]), self.theta, self.gamma_fine, self.pi_shape)


# -- global similarity ------------------------------------------------------


def chi2_statistic(h_i: np.ndarray, h_j: np.ndarray) -> np.ndarray:
    """Sum over the last axis of (a - b)^2 / (a + b); empty bin pairs add 0."""
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape[-1] != h_j.shape[-1]:
        raise ValueError(f"histogram dimensions differ: {h_i.shape[-1]} vs {h_j.shape[-1]}")
    num = (h_i - h_j) ** 2
    den = h_i + h_j
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0).sum(axis=-1)


def chi2_kernel(h_i, h_j, gamma_k: float = 1.0) -> float:
    if gamma_k <= 0:
        raise ValueError("gamma_k must be > 0")
    return float(np.exp(-gamma_k * chi2_statistic(h_i, h_j)))


def _channel_gammas(gamma_k, channels=CHANNELS) -> dict[str, float]:
    if isinstance(gamma_k, Mapping):
        return {c: float(gamma_k[c]) for c in channels}
    return {c: float(gamma_k) for c in channels}


def global_similarity(p_i, p_j, gamma_k: float | Mapping[str, float] = 1.0) -> float:
    """Uniform mean of the chi-square kernel over 4 channels x 5 cells."""
    gammas = _channel_gammas(gamma_k)
    vals = []
    for c in CHANNELS:
        if c not in p_i.histograms or c not in p_j.histograms:
            raise KeyError(f"missing {c} histogram on proposal {p_i.id!r} or {p_j.id!r}")
        a, b = p_i.histograms[c].cells, p_j.histograms[c].cells
        vals.extend(np.exp(-gammas[c] * chi2_statistic(a, b)))
    return float(np.mean(vals))


# -- fine grain similarity --------------------------------------------------


def cluster_raw_features(raw, c_r: int = 6, seed: int = 0, max_iterations: int = 50) -> np.ndarray:
    """Seeded k-means centroids of one proposal's raw descriptors.

    Input rows are put in lexicographic order first, so the result does not
    depend on the order the descriptors arrive in. Seeding picks one point
    with the seeded generator, then repeatedly the point farthest from all
    chosen centers. Fewer than ``c_r`` vectors means fewer clusters.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("clustering needs a non-empty (N, D) array")
    x = x[np.lexsort(x.T[::-1])]
    n = x.shape[0]
    k = min(c_r, n)
    rng = np.random.default_rng(seed)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(d2))
        centers.append(x[nxt])
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iterations):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point worst served by its center
                worst = int(np.argmax(dist[np.arange(n), labels]))
                centers[c] = x[worst]
    return centers


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path Kuhn-Munkres with potentials; returns col per row."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    out[match[1:] - 1] = np.arange(n)
    return out


def _assignment_value(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    perm = _hungarian_square(cost)
    return float(cost[np.arange(cost.shape[0]), perm].sum())


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching of a square matrix.

    Returns ``(perm, total)`` with row ``i`` matched to column ``perm[i]``.
    Among optimal permutations the lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    best = _assignment_value(cost)
    tol = 16 * n * np.finfo(float).eps * max(1.0, float(np.abs(cost).max()))
    perm = np.empty(n, dtype=np.int64)
    free = list(range(n))
    fixed = 0.0
    for i in range(n):
        for j in free:
            rest = [c for c in free if c != j]
            sub = cost[np.ix_(range(i + 1, n), rest)]
            if fixed + cost[i, j] + _assignment_value(sub) <= best + tol:
                perm[i] = j
                fixed += cost[i, j]
                free = rest
                break
    return perm, float(cost[np.arange(n), perm].sum())


def _popcount(x: int) -> int:
    return bin(x).count("1")


def batched_assignment_cost(cost: np.ndarray) -> np.ndarray:
    """Exact min-cost matching of every row to a distinct column, for a batch.

    ``cost`` has shape ``(B, r, c)`` with ``r <= c``. Dynamic programming
    over column subsets; meant for the small matrices (C_r <= ~8) used in
    cluster matching, where it is much faster than one solver call per pair.
    """
    cost = np.asarray(cost, dtype=np.float64)
    b, r, c = cost.shape
    if r > c:
        raise ValueError("batched assignment needs rows <= columns")
    if r == 0:
        return np.zeros(b)
    return _assignment_cost_last(np.ascontiguousarray(cost.transpose(1, 2, 0)))


def _assignment_cost_last(ct: np.ndarray) -> np.ndarray:
    """Same as ``batched_assignment_cost`` for a cost array laid out (r, c, B)."""
    r, c, b = ct.shape
    f = np.full((1 << c, b), np.inf)
    f[0] = 0.0
    tmp = np.empty(b)
    for mask in sorted(range(1 << c), key=_popcount):
        row = _popcount(mask)
        if row >= r:
            continue
        base = f[mask]
        for j in range(c):
            bit = 1 << j
            if mask & bit:
                continue
            np.add(base, ct[row, j], out=tmp)
            np.minimum(f[mask | bit], tmp, out=f[mask | bit])
    finals = [m for m in range(1 << c) if _popcount(m) == r]
    return f[finals].min(axis=0)


def centroid_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between two centroid sets."""
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1), 0.0))


def matched_distance(cent_i: np.ndarray, cent_j: np.ndarray) -> float:
    """Mean distance over the optimal one-to-one matching of two centroid sets.

    Unequal cluster counts are padded to square with the largest distance;
    padded pairs are left out of the mean.
    """
    d = centroid_distances(cent_i, cent_j)
    r, c = d.shape
    n = max(r, c)
    padded = np.full((n, n), d.max())
    padded[:r, :c] = d
    perm, _ = hungarian(padded)
    real = [(i, perm[i]) for i in range(r) if perm[i] < c]
    return float(np.mean([d[i, j] for i, j in real]))


def fine_grain_distances(p_i, p_j, c_r: int = 6, seed: int = 0) -> dict[str, float]:
    out = {}
    for c in CHANNELS:
        if c not in p_i.raw_features or c not in p_j.raw_features:
            raise KeyError(f"missing {c} raw features on proposal {p_i.id!r} or {p_j.id!r}")
        out[c] = matched_distance(
            cluster_raw_features(p_i.raw_features[c], c_r, seed),
            cluster_raw_features(p_j.raw_features[c], c_r, seed),
        )
    return out


def fine_grain_similarity(
    p_i, p_j, c_r: int = 6, seed: int = 0, sigma: float | Mapping[str, float] = 1.0
) -> float:
    """Uniform mean over channels of exp(-matched distance / sigma)."""
    sig = _channel_gammas(sigma)
    d = fine_grain_distances(p_i, p_j, c_r, seed)
    return float(np.mean([np.exp(-d[c] / sig[c]) for c in CHANNELS]))


# -- shape similarity -------------------------------------------------------


def dtw_distance(a, b) -> float:
    """DTW over |a - b| with unit steps, divided by the warping path length.

    The path minimizes total cost; among equal-cost paths the shortest one
    sets the normalization.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("DTW needs non-empty series")
    cost, length = _dtw_tables(a[None, :], b[None, :])
    return float(cost[0, a.size - 1, b.size - 1] / length[0, a.size - 1, b.size - 1])


def _dtw_tables(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accumulated cost and path length for a batch of series pairs ``(B, n)``, ``(B, m)``."""
    bsz, n = a.shape
    m = b.shape[1]
    cost = np.empty((bsz, n, m))
    length = np.empty((bsz, n, m))
    for i in range(n):
        for j in range(m):
            local = np.abs(a[:, i] - b[:, j])
            if i == 0 and j == 0:
                cost[:, 0, 0] = local
                length[:, 0, 0] = 1
                continue
            cands_c, cands_l = [], []
            if i > 0:
                cands_c.append(cost[:, i - 1, j])
                cands_l.append(length[:, i - 1, j])
            if j > 0:
                cands_c.append(cost[:, i, j - 1])
                cands_l.append(length[:, i, j - 1])
            if i > 0 and j > 0:
                cands_c.append(cost[:, i - 1, j - 1])
                cands_l.append(length[:, i - 1, j - 1])
            cc = np.stack(cands_c)
            ll = np.stack(cands_l)
            best = cc.min(axis=0)
            ll = np.where(cc == best, ll, np.inf)
            cost[:, i, j] = best + local
            length[:, i, j] = ll.min(axis=0) + 1
    return cost, length


def dtw_distance_batch(a: np.ndarray, la: np.ndarray, b: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """Normalized DTW for padded series batches; entry k uses a[k, :la[k]] and b[k, :lb[k]].

    Keeps one row of the tables in memory, laid out pair-last so every cell
    update is a contiguous vector operation. Cells past a series end never
    feed cells inside it, so padding does not change the result.
    """
    at = np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)  # (n, B)
    bt = np.ascontiguousarray(np.asarray(b, dtype=np.float64).T)  # (m, B)
    la = np.asarray(la)
    lb = np.asarray(lb)
    n, bsz = at.shape
    m = bt.shape[0]
    out = np.empty(bsz)
    cols = np.arange(bsz)
    prev_c = np.empty((m, bsz))
    prev_l = np.empty((m, bsz))
    cur_c = np.empty((m, bsz))
    cur_l = np.empty((m, bsz))
    local = np.empty(bsz)
    best = np.empty(bsz)
    ln = np.empty(bsz)
    tmp = np.empty(bsz)
    for i in range(n):
        for j in range(m):
            np.subtract(at[i], bt[j], out=local)
            np.abs(local, out=local)
            if i == 0 and j == 0:
                cur_c[0] = local
                cur_l[0] = 1.0
                continue
            if i == 0:
                np.add(cur_c[j - 1], local, out=cur_c[j])
                np.add(cur_l[j - 1], 1.0, out=cur_l[j])
                continue
            if j == 0:
                np.add(prev_c[0], local, out=cur_c[0])
                np.add(prev_l[0], 1.0, out=cur_l[0])
                continue
            up, left, diag = prev_c[j], cur_c[j - 1], prev_c[j - 1]
            np.minimum(up, left, out=best)
            np.minimum(best, diag, out=best)
            np.copyto(ln, np.inf)
            for cand_c, cand_l in ((up, prev_l[j]), (left, cur_l[j - 1]), (diag, prev_l[j - 1])):
                np.copyto(tmp, np.inf)
                np.copyto(tmp, cand_l, where=cand_c == best)
                np.minimum(ln, tmp, out=ln)
            np.add(best, local, out=cur_c[j])
            np.add(ln, 1.0, out=cur_l[j])
        done = la == i + 1
        if done.any():
            idx = cols[done]
            out[idx] = cur_c[lb[idx] - 1, idx] / cur_l[lb[idx] - 1, idx]
        prev_c, cur_c = cur_c, prev_c
        prev_l, cur_l = cur_l, prev_l
    return out


def shape_series(proposal) -> np.ndarray:
    return proposal.aspect_ratios


def shape_similarity(a, b, sigma_shape: float = 1.0) -> float:
    if sigma_shape <= 0:
        raise ValueError("sigma_shape must be > 0")
    return float(np.exp(-dtw_distance(a, b) / sigma_shape))


# -- class-level matrices ---------------------------------------------------


@dataclass(frozen=True)
class SimilarityConfig:
    c_r: int = 6
    seed: int = 0
    kmeans_iterations: int = 50
    # None: derive from the data (1 / mean chi2 statistic, median distances)
    chi2_gamma: float | None = None
    sigma_fine: float | None = None
    sigma_shape: float | None = None
    chunk_pairs: int = 50_000


@dataclass
class SimilarityMatrices:
    theta: np.ndarray
    gamma_fine: np.ndarray
    pi_shape: np.ndarray
    constants: dict = field(default_factory=dict)

    def record(self, i: int, j: int, nodes: Sequence) -> SimilarityRecord:
        a, b = nodes[i], nodes[j]
        return SimilarityRecord(
            ((a.video_id, a.id), (b.video_id, b.id)),
            float(self.theta[i, j]),
            float(self.gamma_fine[i, j]),
            float(self.pi_shape[i, j]),
        )


def _positive_or(value: float, fallback: float = 1.0) -> float:
    return float(value) if np.isfinite(value) and value > 0 else fallback


def cross_pairs(groups: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs i < j whose group labels differ."""
    g = np.asarray(groups)
    ii, jj = np.triu_indices(len(g), k=1)
    keep = g[ii] != g[jj]
    return ii[keep], jj[keep]


def class_similarities(
    nodes: Sequence, groups: Sequence[int], config: SimilarityConfig = SimilarityConfig()
) -> SimilarityMatrices:
    """Theta, Gamma, Pi for every cross-group node pair of one action class.

    Intra-group entries are zero. Dataset bandwidths are measured over all
    cross-group pairs before any distance is turned into a similarity.
    """
    n = len(nodes)
    ii, jj = cross_pairs(groups)
    npairs = len(ii)
    theta = np.zeros((n, n))
    fine = np.zeros((n, n))
    shape = np.zeros((n, n))
    if npairs == 0:
        return SimilarityMatrices(theta, fine, shape, {"pairs": 0})

    hist = np.stack([np.stack([p.histograms[c].cells for c in CHANNELS]) for p in nodes])  # (n, 4, 5, d)
    chi2 = np.empty((npairs, len(CHANNELS), hist.shape[2]))
    step = config.chunk_pairs
    for s in range(0, npairs, step):
        chi2[s : s + step] = chi2_statistic(hist[ii[s : s + step]], hist[jj[s : s + step]])

    centroids = [
        [cluster_raw_features(p.raw_features[c], config.c_r, config.seed, config.kmeans_iterations) for c in CHANNELS]
        for p in nodes
    ]
    matched = np.empty((npairs, len(CHANNELS)))
    for ci in range(len(CHANNELS)):
        matched[:, ci] = _matched_distances(centroids, ci, ii, jj, step)

    lengths = np.array([p.length for p in nodes])
    series = np.ones((n, lengths.max()))
    for k, p in enumerate(nodes):
        series[k, : p.length] = p.aspect_ratios
    dtw = np.empty(npairs)
    for s in range(0, npairs, step):
        a, b = ii[s : s + step], jj[s : s + step]
        dtw[s : s + step] = dtw_distance_batch(series[a], lengths[a], series[b], lengths[b])

    if config.chi2_gamma is None:
        gam = np.array([1.0 / _positive_or(chi2[:, c].mean(), 1.0) for c in range(len(CHANNELS))])
    else:
        gam = np.full(len(CHANNELS), float(config.chi2_gamma))
    if config.sigma_fine is None:
        sig_f = np.array([_positive_or(np.median(matched[:, c])) for c in range(len(CHANNELS))])
    else:
        sig_f = np.full(len(CHANNELS), float(config.sigma_fine))
    sig_s = _positive_or(np.median(dtw)) if config.sigma_shape is None else float(config.sigma_shape)

    t = np.exp(-gam[None, :, None] * chi2).mean(axis=(1, 2))
    f = np.exp(-matched / sig_f[None, :]).mean(axis=1)
    p = np.exp(-dtw / sig_s)
    for mat, vals in ((theta, t), (fine, f), (shape, p)):
        mat[ii, jj] = vals
        mat[jj, ii] = vals
    constants = {
        "pairs": int(npairs),
        "chi2_gamma": dict(zip(CHANNELS, gam.tolist())),
        "sigma_fine": dict(zip(CHANNELS, sig_f.tolist())),
        "sigma_shape": sig_s,
    }
    return SimilarityMatrices(theta, fine, shape, constants)


def _matched_distances(centroids, ci: int, ii: np.ndarray, jj: np.ndarray, step: int) -> np.ndarray:
    """Optimal mean matched centroid distance per pair, batched by cluster-count shape."""
    counts = np.array([cs[ci].shape[0] for cs in centroids])
    dim = centroids[0][ci].shape[1]
    kmax = counts.max()
    # node-last layout: gathers and per-dimension differences stay contiguous
    table = np.zeros((dim, kmax, len(centroids)))
    for k, cs in enumerate(centroids):
        table[:, : counts[k], k] = cs[ci].T
    out = np.empty(len(ii))
    ka, kb = counts[ii], counts[jj]
    lo, hi = np.minimum(ka, kb), np.maximum(ka, kb)
    for r, c in sorted(set(zip(lo.tolist(), hi.tolist()))):
        sel = np.flatnonzero((lo == r) & (hi == c))
        for s in range(0, len(sel), step):
            idx = sel[s : s + step]
            # orient so the side with fewer clusters supplies the rows
            flip = ka[idx] > kb[idx]
            a = np.take(table[:, :r], np.where(flip, jj[idx], ii[idx]), axis=2)  # (D, r, B)
            b = np.take(table[:, :c], np.where(flip, ii[idx], jj[idx]), axis=2)  # (D, c, B)
            d2 = np.zeros((r, c, len(idx)))
            diff = np.empty_like(d2)
            for k in range(dim):
                np.subtract(a[k][:, None, :], b[k][None, :, :], out=diff)
                np.multiply(diff, diff, out=diff)
                d2 += diff
            out[idx] = _assignment_cost_last(np.sqrt(d2)) / r
    return out


def pair_record(p_i, p_j, *, gamma_k=1.0, c_r: int = 6, seed: int = 0, sigma_fine=1.0, sigma_shape: float = 1.0):
    """Similarity triple for one cross-video pair with explicit bandwidths."""
    return SimilarityRecord(
        ((p_i.video_id, p_i.id), (p_j.video_id, p_j.id)),
        global_similarity(p_i, p_j, gamma_k),
        fine_grain_similarity(p_i, p_j, c_r, seed, sigma_fine),
        shape_similarity(shape_series(p_i), shape_series(p_j), sigma_shape),
    )


def exhaustive_assignment(cost: np.ndarray) -> float:
    """Reference min over all permutations (factorial time; tests only)."""
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))

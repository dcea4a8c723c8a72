"""Grouped maximum-clique selection: one proposal per video.

Nodes are laid out flat, with each group (video) occupying a contiguous run.
For a selection ``c`` with ``N`` groups the objective is

    sum_i sum_{j != i} (alpha * omega[c_i] + e[c_i, c_j])
      = alpha * (N - 1) * sum_i omega[c_i] + 2 * sum_{i < j} e[c_i, c_j]

where ``e_ij = eta_i * eta_j * (theta + gamma + pi)`` and there are no
intra-group edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


def length_penalty(m: int, n: int) -> float:
    """exp(-(m - n) / n) for a proposal of n frames in a video of m frames."""
    if n < 1 or n > m:
        raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
    return float(np.exp(-(m - n) / n))


def edge_weights(
    eta: np.ndarray,
    theta: np.ndarray,
    gamma_fine: np.ndarray,
    pi_shape: np.ndarray,
    use: tuple[bool, bool, bool] = (True, True, True),
) -> np.ndarray:
    """eta_i * eta_j * (sum of the enabled similarity channels)."""
    eta = np.asarray(eta, dtype=np.float64)
    total = np.zeros((eta.size, eta.size))
    for on, mat in zip(use, (theta, gamma_fine, pi_shape)):
        if on:
            total = total + np.asarray(mat, dtype=np.float64)
    return eta[:, None] * eta[None, :] * total


@dataclass(frozen=True, eq=False)
class GmcpGraph:
    group_ids: tuple[str, ...]
    node_ids: tuple[str, ...]
    group_of: np.ndarray  # (M,) group index per node, non-decreasing
    omega: np.ndarray  # (M,)
    eta: np.ndarray  # (M,)
    edges: np.ndarray  # (M, M)
    alpha: float = 0.07

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int64)
        m = len(self.node_ids)
        if g.shape != (m,) or np.shape(self.omega) != (m,) or np.shape(self.eta) != (m,):
            raise ValueError("node arrays disagree in length")
        if np.shape(self.edges) != (m, m):
            raise ValueError("edge matrix must be (M, M)")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if m and (np.any(np.diff(g) < 0) or g[0] != 0 or g[-1] != len(self.group_ids) - 1):
            raise ValueError("group_of must list groups contiguously in order")
        if len(np.unique(g)) != len(self.group_ids):
            raise ValueError("every group must be non-empty")
        e = np.asarray(self.edges, dtype=np.float64)
        if np.any(e < 0) or not np.array_equal(e, e.T):
            raise ValueError("edges must be symmetric and non-negative")
        if np.any(e[g[:, None] == g[None, :]] != 0):
            raise ValueError("intra-group edges must be zero")
        object.__setattr__(self, "group_of", g)
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64))
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=np.float64))
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_groups(
        cls,
        groups: Mapping[str, Sequence[str]],
        omega: Sequence[float],
        eta: Sequence[float],
        edges: np.ndarray,
        alpha: float = 0.07,
    ) -> "GmcpGraph":
        """Build from an ordered mapping group id -> node ids (flat arrays follow that order)."""
        gids, nids, gof = [], [], []
        for k, (gid, members) in enumerate(groups.items()):
            gids.append(gid)
            nids.extend(members)
            gof.extend([k] * len(members))
        return cls(tuple(gids), tuple(nids), np.array(gof, dtype=np.int64), np.asarray(omega), np.asarray(eta), edges, alpha)

    @property
    def num_groups(self) -> int:
        return len(self.group_ids)

    @property
    def offsets(self) -> np.ndarray:
        return np.searchsorted(self.group_of, np.arange(self.num_groups + 1))

    def members(self, g: int) -> np.ndarray:
        off = self.offsets
        return np.arange(off[g], off[g + 1])

    def subgraph(self, keep: np.ndarray) -> tuple["GmcpGraph", np.ndarray]:
        """Graph on the kept nodes; groups left empty disappear. Returns (graph, kept flat indices)."""
        idx = np.flatnonzero(keep)
        old_groups = self.group_of[idx]
        present, new_gof = np.unique(old_groups, return_inverse=True)
        sub = GmcpGraph(
            tuple(self.group_ids[g] for g in present),
            tuple(self.node_ids[i] for i in idx),
            new_gof.astype(np.int64),
            self.omega[idx],
            self.eta[idx],
            self.edges[np.ix_(idx, idx)],
            self.alpha,
        )
        return sub, idx

    def scaled(self, c: float) -> "GmcpGraph":
        """Omega multiplied by c and alpha divided by c."""
        return GmcpGraph(self.group_ids, self.node_ids, self.group_of, self.omega * c, self.eta, self.edges, self.alpha / c)


@dataclass(frozen=True)
class Selection:
    chosen: dict  # group id -> node id
    objective: float
    iterations: int = 0
    instance_round: int = 0
    trajectory: tuple[float, ...] = ()
    degenerate: bool = False
    indices: tuple[int, ...] = field(default=(), compare=False)


def _objective_idx(graph: GmcpGraph, c: np.ndarray) -> float:
    n = len(c)
    sub = graph.edges[np.ix_(c, c)]
    return float(graph.alpha * (n - 1) * graph.omega[c].sum() + sub.sum())


def objective(sel: Selection | Mapping[str, str], graph: GmcpGraph) -> float:
    """Double-sum objective of a selection given as group id -> node id."""
    chosen = sel.chosen if isinstance(sel, Selection) else sel
    if set(chosen) != set(graph.group_ids) or len(chosen) != graph.num_groups:
        raise ValueError("selection must pick exactly one node from every group")
    c = []
    for g, gid in enumerate(graph.group_ids):
        members = graph.members(g)
        hit = [i for i in members if graph.node_ids[i] == chosen[gid]]
        if len(hit) != 1:
            raise ValueError(f"node {chosen[gid]!r} is not a unique member of group {gid!r}")
        c.append(hit[0])
    return _objective_idx(graph, np.array(c))


def node_contributions(graph: GmcpGraph, c: Sequence[int]) -> np.ndarray:
    """Per-node share of the objective: alpha*(N-1)*omega_i + sum_{j != i} e_ij. Sums to the objective."""
    c = np.asarray(c)
    return graph.alpha * (len(c) - 1) * graph.omega[c] + graph.edges[np.ix_(c, c)].sum(axis=1)


def initial_choice(graph: GmcpGraph) -> np.ndarray:
    """Per-group argmax of omega; ties go to the earliest node."""
    off = graph.offsets
    return np.array([off[g] + int(np.argmax(graph.omega[off[g] : off[g + 1]])) for g in range(graph.num_groups)])


def _ascend(graph: GmcpGraph, c: np.ndarray, max_iterations: int) -> tuple[np.ndarray, list[float], int]:
    """Steepest ascent over single-node swaps from choice c."""
    n = len(c)
    scale = graph.alpha * (n - 1)
    value = _objective_idx(graph, c)
    trajectory = [value]
    it = 0
    while it < max_iterations:
        s = graph.edges[:, c].sum(axis=1)  # (M,): link of each node to the current choice outside its group
        cur = c[graph.group_of]
        gain = scale * (graph.omega - graph.omega[cur]) + 2.0 * (s - s[cur])
        best = int(np.argmax(gain))  # first maximum: lowest group, then lowest node
        tol = 1e-12 * max(1.0, abs(value))
        if gain[best] <= tol:
            break
        trial = c.copy()
        trial[graph.group_of[best]] = best
        new_value = _objective_idx(graph, trial)
        if new_value <= value:
            break
        c, value = trial, new_value
        trajectory.append(value)
        it += 1
    return c, trajectory, it


def solve(
    graph: GmcpGraph,
    max_iterations: int = 1000,
    seed: int = 0,
    restarts: int = 0,
    instance_round: int = 0,
) -> Selection:
    """Local-neighborhood search starting from the per-group omega argmax.

    ``restarts`` extra ascents start from seeded random choices; the best
    result wins (the earliest on ties, so the default start is preferred).
    """
    c0 = initial_choice(graph)
    if graph.num_groups == 1:
        log.warning("single-group graph %s: returning the omega argmax", graph.group_ids)
        return Selection(
            {graph.group_ids[0]: graph.node_ids[c0[0]]},
            _objective_idx(graph, c0),
            0,
            instance_round,
            (_objective_idx(graph, c0),),
            degenerate=True,
            indices=tuple(int(x) for x in c0),
        )
    best = _ascend(graph, c0, max_iterations)
    if restarts:
        rng = np.random.default_rng(seed)
        off = graph.offsets
        for _ in range(restarts):
            start = np.array([int(rng.integers(off[g], off[g + 1])) for g in range(graph.num_groups)])
            cand = _ascend(graph, start, max_iterations)
            if cand[1][-1] > best[1][-1]:
                best = cand
    c, trajectory, it = best
    return Selection(
        {graph.group_ids[g]: graph.node_ids[c[g]] for g in range(graph.num_groups)},
        trajectory[-1],
        it,
        instance_round,
        tuple(trajectory),
        indices=tuple(int(x) for x in c),
    )


def exhaustive_best(graph: GmcpGraph) -> float:
    """Maximum objective over every selection (product of group sizes must be small)."""
    off = graph.offsets
    ranges = [np.arange(off[g], off[g + 1]) for g in range(graph.num_groups)]
    grids = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, graph.num_groups)
    n = graph.num_groups
    omega = graph.omega[grids].sum(axis=1) * graph.alpha * (n - 1)
    pair = np.zeros(len(grids))
    for a in range(n):
        for b in range(n):
            if a != b:
                pair += graph.edges[grids[:, a], grids[:, b]]
    return float((omega + pair).max())


@dataclass(frozen=True)
class MultiInstanceResult:
    selections: tuple[Selection, ...]
    shortfall: dict  # group id -> number of instances not recovered


def solve_multi_instance(
    graph: GmcpGraph,
    instance_counts: Mapping[str, int],
    overlap: Callable[[int, int], float],
    overlap_threshold: float = 0.5,
    max_iterations: int = 1000,
    seed: int = 0,
    restarts: int = 0,
) -> MultiInstanceResult:
    """Repeated solves, one instance per video per round.

    ``overlap(i, j)`` gives the tube overlap of two flat node indices of
    ``graph`` (same video). After each round, videos that met their budget
    leave the graph, and nodes overlapping an earlier pick of their video by
    more than the threshold are removed. A video whose candidates run out is
    reported in ``shortfall`` and the remaining videos continue.
    """
    for gid in graph.group_ids:
        if instance_counts.get(gid, 1) < 1:
            raise ValueError(f"instance count for {gid!r} must be >= 1")
    remaining = {gid: int(instance_counts.get(gid, 1)) for gid in graph.group_ids}
    picked: dict[int, list[int]] = {g: [] for g in range(graph.num_groups)}
    alive = np.ones(len(graph.node_ids), dtype=bool)
    shortfall: dict[str, int] = {}
    selections = []
    rnd = 0
    while True:
        for g, gid in enumerate(graph.group_ids):
            if remaining[gid] == 0:
                alive[graph.group_of == g] = False
        if not alive.any():
            break
        sub, idx = graph.subgraph(alive)
        sel = solve(sub, max_iterations, seed, restarts, instance_round=rnd)
        selections.append(sel)
        for local in sel.indices:
            flat = int(idx[local])
            g = int(graph.group_of[flat])
            picked[g].append(flat)
            remaining[graph.group_ids[g]] -= 1
        for g, gid in enumerate(graph.group_ids):
            if remaining[gid] == 0:
                continue
            members = graph.members(g)
            for i in members:
                if alive[i] and any(i == p or overlap(i, p) > overlap_threshold for p in picked[g]):
                    alive[i] = False
            if not alive[members].any():
                shortfall[gid] = remaining[gid]
                log.warning("video %s: no candidates left for %d more instance(s)", gid, remaining[gid])
                remaining[gid] = 0
        rnd += 1
    return MultiInstanceResult(tuple(selections), shortfall)

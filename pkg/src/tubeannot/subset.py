"""MAP proposal subset selection.

Proposals are grouped around exemplars. Each non-exemplar is assigned either
to an exemplar ``j`` (weight ``IOU(i, j) * s``) or to background (weight
``lambda``). The prior penalizes overlap among exemplars (``-gamma`` per
ordered pair, times their IOU) and their count (``-phi`` each). Normalizing
constants are dropped, so posterior values only compare within one pool.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from tubeannot.core import tube_iou_matrix

log = logging.getLogger(__name__)

SCORE_SOURCES = ("member", "exemplar")
# pools up to this size are solved by exhaustive exemplar-set enumeration
EXACT_LIMIT = 10


@dataclass(frozen=True)
class SubsetParams:
    gamma_nms: float = 5.0
    phi: float = 0.0
    lambda_bg: float = 0.05
    target_count: int = 100
    # which proposal's score scales an assignment weight: the assigned member
    # (s_i, as the weight is written) or the exemplar it joins (s_j)
    score_source: str = "member"

    def __post_init__(self):
        if self.gamma_nms <= 0:
            raise ValueError("gamma_nms must be > 0")
        if not math.isfinite(self.phi):
            raise ValueError("phi must be finite")
        if self.lambda_bg <= 0:
            raise ValueError("lambda_bg must be > 0")
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {SCORE_SOURCES}")


@dataclass(frozen=True)
class SubsetSelection:
    exemplars: tuple[str, ...]
    assignment: Mapping[str, str | None]  # None = background
    log_posterior: float


class _Pool:
    """Index-space view of a proposal pool: IOU matrix, scores, log-weights."""

    def __init__(self, proposals: Sequence, params: SubsetParams, iou: np.ndarray | None = None):
        if not proposals:
            raise ValueError("subset selection needs at least one proposal")
        self.ids = [p.id for p in proposals]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("proposal ids must be unique within a video")
        self.params = params
        self.iou = tube_iou_matrix(proposals) if iou is None else np.asarray(iou, dtype=np.float64)
        self.scores = np.array([p.initial_score for p in proposals], dtype=np.float64)
        if params.score_source == "member":
            weight = self.iou * self.scores[:, None]
        else:
            weight = self.iou * self.scores[None, :]
        with np.errstate(divide="ignore"):
            self.log_w = np.log(weight)
        self.log_bg = math.log(params.lambda_bg)

    def _rebind(self, other: "_Pool", phi: float) -> "_Pool":
        """Copy of ``other`` with a different exemplar-count rate."""
        self.__dict__.update(other.__dict__)
        self.params = replace(other.params, phi=phi)
        return self

    @property
    def n(self) -> int:
        return len(self.ids)

    def weight(self, i: int, j: int | None) -> float:
        if j is None:
            return self.params.lambda_bg
        s = self.scores[i] if self.params.score_source == "member" else self.scores[j]
        return float(self.iou[i, j] * s)

    def best_assignment(self, members: Sequence[int]) -> tuple[np.ndarray, float]:
        """Optimal Z for a fixed exemplar set; returns (z with -1 = background, log posterior)."""
        n = self.n
        members = list(members)
        z = np.full(n, -1, dtype=np.int64)
        if members:
            sub = self.log_w[:, members]
            pick = sub.argmax(axis=1)
            best = sub[np.arange(n), pick]
            use = best > self.log_bg
            z[use] = np.asarray(members)[pick[use]]
        z[members] = members
        return z, self.log_posterior(members, z)

    def log_posterior(self, members: Sequence[int], z: np.ndarray) -> float:
        p = self.params
        members = list(members)
        rows = np.arange(self.n)
        lw = np.where(z < 0, self.log_bg, self.log_w[rows, np.maximum(z, 0)])
        if np.any(lw == -math.inf):
            return -math.inf
        total = float(lw.sum())
        if len(members) > 1:
            block = self.iou[np.ix_(members, members)]
            total -= p.gamma_nms * (block.sum() - np.trace(block))
        return total - p.phi * len(members)


def _greedy(pool: _Pool, phi: float, forced: int = 1, limit: int | None = None) -> tuple[list[int], list[float]]:
    """Forward ascent; returns exemplar order and each addition's phi-free gain."""
    p = pool.params
    n = pool.n
    limit = min(p.target_count if limit is None else limit, n)
    in_set = np.zeros(n, dtype=bool)
    log_best = np.full(n, pool.log_bg)
    overlap = np.zeros(n)  # sum of IOU with current exemplars
    order: list[int] = []
    gains: list[float] = []
    diag = np.diag(pool.log_w).copy()
    with np.errstate(invalid="ignore"):
        while len(order) < limit:
            free = ~in_set
            # reassignment gain of member i if candidate c joins: max(0, log_w[i, c] - log_best[i])
            lift = np.maximum(pool.log_w - log_best[:, None], 0.0)
            lift[~free, :] = 0.0
            np.fill_diagonal(lift, 0.0)
            base = diag - log_best + lift.sum(axis=0) - 2.0 * p.gamma_nms * overlap
            base[in_set] = -math.inf
            base[np.isnan(base)] = -math.inf
            c = int(np.argmax(base))  # first maximum = lowest index
            if base[c] == -math.inf:
                break
            if len(order) >= forced and base[c] - phi <= 0:
                break
            order.append(c)
            gains.append(float(base[c]))
            in_set[c] = True
            log_best = np.maximum(log_best, pool.log_w[:, c])
            overlap += pool.iou[:, c]
    return order, gains


def _removal_deltas(pool: _Pool, order: list[int]) -> np.ndarray:
    """Posterior change from dropping each exemplar (with optimal reassignment)."""
    p = pool.params
    members = np.asarray(order)
    sub = pool.log_w[:, members]  # (n, |S|)
    top2 = np.argsort(-sub, axis=1, kind="stable")[:, :2]
    rows = np.arange(pool.n)
    best1 = sub[rows, top2[:, 0]]
    best2 = sub[rows, top2[:, 1]]
    cur = np.maximum(best1, pool.log_bg)
    non_ex = np.ones(pool.n, dtype=bool)
    non_ex[members] = False
    deltas = np.empty(len(order))
    with np.errstate(invalid="ignore"):
        for k, e in enumerate(order):
            # members whose best exemplar was e fall back to their runner-up
            hit = non_ex & (top2[:, 0] == k)
            change = (np.maximum(best2[hit], pool.log_bg) - cur[hit]).sum()
            others = np.delete(sub[e], k)
            own = max(pool.log_bg, float(others.max()))
            change += own - pool.log_w[e, e]
            change += 2.0 * p.gamma_nms * float(np.delete(pool.iou[e, members], k).sum()) + p.phi
            deltas[k] = change
    return deltas


def _addition_deltas(pool: _Pool, order: list[int]) -> np.ndarray:
    p = pool.params
    in_set = np.zeros(pool.n, dtype=bool)
    in_set[order] = True
    log_best = np.full(pool.n, pool.log_bg)
    if order:
        log_best = np.maximum(log_best, pool.log_w[:, order].max(axis=1))
    log_best[in_set] = np.diag(pool.log_w)[in_set]
    with np.errstate(invalid="ignore"):
        lift = np.maximum(pool.log_w - log_best[:, None], 0.0)
        lift[in_set, :] = 0.0
        np.fill_diagonal(lift, 0.0)
        overlap = pool.iou[:, order].sum(axis=1) if order else np.zeros(pool.n)
        d = np.diag(pool.log_w) - log_best + lift.sum(axis=0) - 2.0 * p.gamma_nms * overlap - p.phi
    d[in_set] = -math.inf
    d[np.isnan(d)] = -math.inf
    return d


def _refine(
    pool: _Pool, order: list[int], limit: int, swaps: bool = False
) -> tuple[list[int], np.ndarray, float]:
    """Best-improvement add/remove moves (then swaps) until none improves the posterior."""
    z, value = pool.best_assignment(order)
    while True:
        tol = 1e-12 * max(1.0, abs(value)) if math.isfinite(value) else 0.0
        best_gain, best_move = tol, None
        if len(order) > 1:
            dels = _removal_deltas(pool, order)
            k = int(np.argmax(dels))
            if dels[k] > best_gain:
                best_gain, best_move = dels[k], ("del", k)
        if len(order) < limit:
            adds = _addition_deltas(pool, order)
            c = int(np.argmax(adds))
            if adds[c] > best_gain:
                best_gain, best_move = adds[c], ("add", c)
        if best_move is None and swaps:
            members = set(order)
            for k in range(len(order)):
                for c in range(pool.n):
                    if c in members:
                        continue
                    _, v = pool.best_assignment(order[:k] + [c] + order[k + 1 :])
                    if v - value > best_gain:
                        best_gain, best_move = v - value, ("swap", (k, c))
        if best_move is None:
            return order, z, value
        kind, arg = best_move
        if kind == "del":
            trial = order[:arg] + order[arg + 1 :]
        elif kind == "add":
            trial = order + [arg]
        else:
            trial = order[: arg[0]] + [arg[1]] + order[arg[0] + 1 :]
        z_new, v_new = pool.best_assignment(trial)
        if not v_new > value:
            # the incremental estimate disagreed with the exact value; stop here
            return order, z, value
        order, z, value = trial, z_new, v_new


def _selection(pool: _Pool, order: list[int], z: np.ndarray, value: float) -> SubsetSelection:
    assignment = {pool.ids[i]: (None if z[i] < 0 else pool.ids[z[i]]) for i in range(pool.n)}
    return SubsetSelection(
        exemplars=tuple(pool.ids[i] for i in order), assignment=assignment, log_posterior=value
    )


def _exact(pool: _Pool, limit: int) -> tuple[list[int], np.ndarray, float]:
    """Enumerate every non-empty exemplar set of at most ``limit`` members."""
    best = None
    for r in range(1, limit + 1):
        for members in itertools.combinations(range(pool.n), r):
            z, v = pool.best_assignment(members)
            if best is None or v > best[2] + 1e-12 * max(1.0, abs(best[2])):
                best = (list(members), z, v)
    return best


def select_subset(
    proposals: Sequence,
    params: SubsetParams = SubsetParams(),
    *,
    iou: np.ndarray | None = None,
    refine: bool = True,
    swaps: bool = False,
    exact_limit: int = EXACT_LIMIT,
) -> SubsetSelection:
    """MAP exemplar set with optimal reassignment.

    Pools of at most ``exact_limit`` proposals are solved by enumerating
    exemplar sets. Larger pools use greedy forward ascent (the exemplar order
    is the ranking) followed by add/remove refinement, optionally swaps.
    Ties go to the earliest proposal in the input, so callers wanting
    id-order tie-breaks should pass proposals sorted by id (the pipeline does).
    """
    pool = _Pool(proposals, params, iou)
    order, z, value = _solve(pool, params.phi, refine, swaps, exact_limit)
    return _selection(pool, order, z, value)


def _solve(pool: _Pool, phi: float, refine: bool = True, swaps: bool = False, exact_limit: int = EXACT_LIMIT):
    if phi != pool.params.phi:
        pool = _Pool.__new__(_Pool)._rebind(pool, phi)
    limit = min(pool.params.target_count, pool.n)
    if pool.n <= exact_limit:
        return _exact(pool, limit)
    order, _ = _greedy(pool, phi)
    if refine:
        return _refine(pool, order, limit, swaps=swaps)
    z, value = pool.best_assignment(order)
    return order, z, value


def tune_phi(
    proposals: Sequence, params: SubsetParams = SubsetParams(), *, iou: np.ndarray | None = None, steps: int = 20
) -> float:
    """Largest phi (found by bisection) for which at least min(K, n) exemplars survive."""
    pool = _Pool(proposals, params, iou)
    want = min(params.target_count, pool.n)
    _, gains = _greedy(pool, -math.inf, forced=want, limit=want)
    finite = [g for g in gains if math.isfinite(g)]
    if not finite:
        return 0.0
    hi = min(finite)
    margin = 1e-6 * max(1.0, abs(hi))
    phi = hi - margin

    def enough(ph: float) -> bool:
        order, _, _ = _solve(pool, ph)
        return len(order) >= min(want, len(finite))

    if enough(phi):
        return phi
    lo = phi - max(1.0, abs(phi))
    while not enough(lo):
        lo -= 2 * max(1.0, abs(lo))
    for _ in range(steps):
        mid = 0.5 * (lo + phi)
        if enough(mid):
            lo = mid
        else:
            phi = mid
    return lo


def log_posterior(
    exemplars: Sequence[str],
    assignment: Mapping[str, str | None],
    proposals: Sequence,
    params: SubsetParams = SubsetParams(),
) -> float:
    """Unnormalized log P(S, Z | V) for an explicit (S, Z)."""
    pool = _Pool(proposals, params)
    index = {pid: k for k, pid in enumerate(pool.ids)}
    members = [index[e] for e in exemplars]
    if len(set(members)) != len(members):
        raise ValueError("duplicate exemplar")
    z = np.full(pool.n, -1, dtype=np.int64)
    for pid, target in assignment.items():
        if pid not in index:
            raise ValueError(f"unknown proposal {pid!r} in assignment")
        if target is not None:
            if target not in exemplars:
                raise ValueError(f"{pid!r} is assigned to non-exemplar {target!r}")
            z[index[pid]] = index[target]
    for e in members:
        if z[e] != e:
            raise ValueError(f"exemplar {pool.ids[e]!r} must be assigned to itself")
    return pool.log_posterior(members, z)


def assignment_weight(proposal_i, proposal_j, params: SubsetParams = SubsetParams(), iou: float | None = None) -> float:
    """Unnormalized P(z_i = j | V); ``proposal_j=None`` means background."""
    if proposal_j is None:
        return params.lambda_bg
    from tubeannot.core import tube_iou

    ov = tube_iou(proposal_i, proposal_j) if iou is None else iou
    s = proposal_i.initial_score if params.score_source == "member" else proposal_j.initial_score
    return ov * s

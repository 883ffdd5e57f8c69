"""Ordered Search: LIME scores, then exactly-k selections in descending linear-score order."""

from __future__ import annotations

import heapq
import math
from typing import Iterator

import numpy as np

from ..core import BudgetMeter, Instance, InvalidInput
from ..metrics import ObjectiveSpec
from ..saliency import lime
from .common import BestTracker, SearchResult, level_shares, level_spaces, make_objective, meter_for

LIME_SHARE = 0.25


def enumerate_topk(theta: np.ndarray, k: int) -> Iterator[tuple[int, ...]]:
    """All k-subsets of indices in non-increasing order of their theta sum.

    Equal sums come out in ascending order of the sorted index tuple. Subsets are
    walked over ranks (theta descending, index ascending): the root is ranks
    0..k-1, and a subset's successors move one of its ranks up by one into a free
    slot. Each successor's sum is no larger and, on an equal sum, its index tuple
    is larger, so a best-first heap pops subsets in the required order.
    """
    theta = np.asarray(theta, dtype=float)
    n = len(theta)
    if not 0 <= k <= n:
        raise InvalidInput(f"cannot choose {k} of {n}")
    rank_to_index = np.lexsort((np.arange(n), -theta))
    values = [float(v) for v in theta[rank_to_index]]
    index_of = [int(i) for i in rank_to_index]

    def entry(ranks: tuple[int, ...]):
        idx = tuple(sorted(index_of[r] for r in ranks))
        return (-math.fsum(values[r] for r in ranks), idx, ranks)

    root = tuple(range(k))
    heap = [entry(root)]
    queued = {root}
    while heap:
        _, idx, ranks = heapq.heappop(heap)
        yield idx
        taken = set(ranks)
        for p, r in enumerate(ranks):
            nxt = r + 1
            if nxt < n and nxt not in taken:
                child = ranks[:p] + (nxt,) + ranks[p + 1:]
                if child not in queued:
                    queued.add(child)
                    heapq.heappush(heap, entry(child))
        queued.discard(ranks)


def ordered_search(model, instance: Instance, spec: ObjectiveSpec, budget: int | None = 1000,
                   rng: np.random.Generator | None = None, meter: BudgetMeter | None = None,
                   imputer=None, lime_share: float = LIME_SHARE, theta: np.ndarray | None = None) -> SearchResult:
    """LIME on ``lime_share`` of the budget, then score selections in descending LIME order.

    The selection is the kept set for Sufficiency and the removed set for
    Comprehensiveness; both prefer tokens with large LIME coefficients. Passing
    ``theta`` (scores over free positions) skips the LIME stage.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    meter = meter_for(budget, meter)
    if meter.limit is None and theta is None:
        raise InvalidInput("ordered search needs a budget")
    spaces = level_spaces(instance, spec)
    if theta is None:
        total = int(meter.remaining)
        if total < 8:
            raise InvalidInput("ordered search needs a budget of at least 8")
        n_lime = int(total * lime_share)
        scores = lime(model, instance, n_samples=n_lime, rng=rng, meter=meter).scores
        theta = scores[instance.free_positions]
    theta = np.asarray(theta, dtype=float)
    if len(theta) != instance.n_free:
        raise InvalidInput("theta must score every free position")
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    shares = level_shares(meter, spaces)
    levels = []
    for space, share in zip(spaces, shares):
        objective.meter = meter.child(share)
        n_evals = objective.affordable(share if share is not None else space.size)
        tracker = BestTracker(space, objective)
        popped = []
        for idx in enumerate_topk(theta, space.m):
            if len(popped) >= n_evals:
                break
            popped.append(space.from_indices(idx))
        if popped:
            sels = np.array(popped)
            tracker.offer(sels, objective.evaluate(space.keeps(sels)))
        levels.append(tracker.result())
    return SearchResult("ordered", spec.metric, levels, meter.forward_count, meter.backward_count, instance.id)

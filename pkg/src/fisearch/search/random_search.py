"""Random Search and Exhaustive Search."""

from __future__ import annotations

import numpy as np

from ..core import BudgetMeter, Instance, SpaceTooLarge
from ..metrics import ObjectiveSpec
from .common import (
    BestTracker,
    LevelSpace,
    SearchResult,
    key,
    level_shares,
    level_spaces,
    make_objective,
    meter_for,
)

EXHAUSTIVE_CAP = 50_000


def sample_unseen(space: LevelSpace, count: int, rng: np.random.Generator, seen: set) -> np.ndarray:
    """Up to ``count`` distinct uniformly random selections not in ``seen`` (which is updated)."""
    remaining = space.size - len(seen)
    count = min(count, remaining)
    if count <= 0:
        return np.zeros((0, space.n), dtype=bool)
    if space.size <= 4 * count or space.size <= EXHAUSTIVE_CAP and remaining <= 2 * count:
        pool = [s for s in space.all_selections() if key(s) not in seen]
        chosen = [pool[i] for i in rng.permutation(len(pool))[:count]]
    else:
        chosen = []
        while len(chosen) < count:
            for s in space.random_batch(count - len(chosen), rng):
                k = key(s)
                if k not in seen:
                    seen.add(k)
                    chosen.append(s)
        return np.array(chosen)
    for s in chosen:
        seen.add(key(s))
    return np.array(chosen)


def random_search(model, instance: Instance, spec: ObjectiveSpec, budget: int | None = 1000,
                  rng: np.random.Generator | None = None, meter: BudgetMeter | None = None,
                  imputer=None) -> SearchResult:
    """Best of uniformly sampled, never repeated, exactly-k-sparse masks per level."""
    rng = rng if rng is not None else np.random.default_rng(0)
    meter = meter_for(budget, meter)
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    spaces = level_spaces(instance, spec)
    shares = level_shares(meter, spaces)
    levels = []
    for space, share in zip(spaces, shares):
        level_meter = meter.child(share)
        objective.meter = level_meter
        tracker = BestTracker(space, objective)
        seen: set = set()
        n = objective.affordable(space.size if share is None else share)
        sels = sample_unseen(space, n, rng, seen)
        if len(sels):
            tracker.offer(sels, objective.evaluate(space.keeps(sels)))
        levels.append(tracker.result())
    return SearchResult("random", spec.metric, levels, meter.forward_count, meter.backward_count, instance.id)


def exhaustive_search(model, instance: Instance, spec: ObjectiveSpec, cap: int = EXHAUSTIVE_CAP,
                      imputer=None, rng=None, chunk: int = 4096) -> SearchResult:
    """Global optimum per level. Ignores budget limits; passes are still recorded."""
    spaces = level_spaces(instance, spec)
    for space in spaces:
        if space.size > cap:
            raise SpaceTooLarge(f"C({space.n},{space.m}) = {space.size} exceeds cap {cap}")
    meter = BudgetMeter(None)
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    levels = []
    for space in spaces:
        tracker = BestTracker(space, objective)
        sels = space.all_selections()
        for start in range(0, len(sels), chunk):
            part = sels[start:start + chunk]
            tracker.offer(part, objective.evaluate(space.keeps(part)))
        levels.append(tracker.result())
    return SearchResult("exhaustive", spec.metric, levels, meter.forward_count, meter.backward_count, instance.id)

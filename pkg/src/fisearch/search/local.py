"""Parallel Local Search: r hill-climbing runs sharing one seen-set."""

from __future__ import annotations

import numpy as np

from ..core import BudgetMeter, Instance, InvalidInput
from ..metrics import ObjectiveSpec
from .common import BestTracker, LevelSpace, SearchResult, level_shares, level_spaces, make_objective, meter_for
from .random_search import sample_unseen

DEFAULT_RUNS = 10
MAX_WALK = 1000


class UniformStream:
    """Uniform draws from a generator, fetched in blocks to keep per-step cost low."""

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng = rng
        self.block = block
        self.buf: list[float] = []
        self.pos = 0

    def next(self) -> float:
        if self.pos == len(self.buf):
            self.buf = self.rng.random(self.block).tolist()
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]


def propose(on: list[int], off: list[int], seen: set, uniforms: UniformStream,
            max_walk: int = MAX_WALK) -> tuple[list[int], list[int]] | None:
    """Random walk over Hamming-distance-2 neighbours until an unseen selection turns up.

    ``on``/``off`` are the selected and unselected indices of the current state;
    each step swaps one uniformly chosen member of each. The new selection is
    added to ``seen``. Returns None if the walk gives up after ``max_walk`` steps.
    """
    if not on or not off:
        return None
    on, off = list(on), list(off)
    m, rest = len(on), len(off)
    for _ in range(max_walk):
        a = int(uniforms.next() * m)
        b = int(uniforms.next() * rest)
        on[a], off[b] = off[b], on[a]
        k = tuple(sorted(on))
        if k not in seen:
            seen.add(k)
            return on, off
    return None


def _split(sel: np.ndarray) -> tuple[list[int], list[int]]:
    return np.flatnonzero(sel).tolist(), np.flatnonzero(~sel).tolist()


def parallel_local_search(model, instance: Instance, spec: ObjectiveSpec, budget: int | None = 1000,
                          runs: int = DEFAULT_RUNS, rng: np.random.Generator | None = None,
                          meter: BudgetMeter | None = None, imputer=None, max_walk: int = MAX_WALK) -> SearchResult:
    """Per level: ``runs`` searches from distinct random starts, each step proposing an unseen
    neighbour and moving only on strict improvement.

    Proposals are made serially against the shared seen-set; the proposals of one
    step are then scored together as a batch. Each run gets ``level_budget // runs``
    evaluations, with the remainder handed to the first runs. A walk that stalls
    falls back to a uniformly random unseen selection.
    """
    if runs < 1:
        raise InvalidInput("runs must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    meter = meter_for(budget, meter)
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    spaces = level_spaces(instance, spec)
    shares = level_shares(meter, spaces)
    uniforms = UniformStream(rng)
    levels = []
    for space, share in zip(spaces, shares):
        objective.meter = meter.child(share)
        levels.append(_search_level(space, objective, objective.affordable(space.size if share is None else share), runs, rng, uniforms,
                                    max_walk))
    return SearchResult("pls", spec.metric, levels, meter.forward_count, meter.backward_count, instance.id)


def _search_level(space: LevelSpace, objective, n_evals: int, runs: int, rng, uniforms, max_walk):
    per_run = [n_evals // runs + (1 if r < n_evals % runs else 0) for r in range(runs)]
    tracker = BestTracker(space, objective)
    seen: set = set()
    starts = sample_unseen(space, sum(1 for b in per_run if b > 0), rng, seen)
    if len(starts) == 0:
        return tracker.result()
    start_values = objective.evaluate(space.keeps(starts))
    tracker.offer(starts, start_values)
    current = [_split(s) for s in starts]
    current_loss = [float(v) for v in objective.loss(start_values)]
    used = [1] * len(starts)
    active = [r for r in range(len(starts)) if used[r] < per_run[r]]
    while active and len(seen) < space.size:
        proposals, owners = [], []
        for r in active:
            if len(seen) >= space.size:
                break
            p = propose(*current[r], seen, uniforms, max_walk)
            if p is None:
                fallback = sample_unseen(space, 1, rng, seen)
                if len(fallback) == 0:
                    break
                p = _split(fallback[0])
            proposals.append(p)
            owners.append(r)
        if not proposals:
            break
        sels = np.zeros((len(proposals), space.n), dtype=bool)
        for row, (on, _) in enumerate(proposals):
            sels[row, on] = True
        values = objective.evaluate(space.keeps(sels))
        tracker.offer(sels, values)
        for r, p, loss in zip(owners, proposals, objective.loss(values)):
            used[r] += 1
            if loss < current_loss[r]:
                current[r], current_loss[r] = p, float(loss)
        active = [r for r in active if used[r] < per_run[r]]
    return tracker.result()

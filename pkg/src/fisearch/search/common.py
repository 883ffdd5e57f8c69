"""Shared machinery for mask-space search: the k-sparse space, result types, budget split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ..core import BudgetMeter, Direction, ExplanationMask, Instance, SparsitySpec
from ..metrics import Objective, ObjectiveSpec


class LevelSpace:
    """Exactly-k-sparse selections over the free positions for one sparsity level.

    A *selection* is a boolean vector over free positions marking the explanation:
    the kept tokens for Sufficiency, the removed tokens for Comprehensiveness.
    """

    def __init__(self, instance: Instance, direction: Direction, level: float, n_selected: int):
        self.instance = instance
        self.direction = Direction(direction)
        self.level = level
        self.free = instance.free_positions
        self.n = len(self.free)
        self.m = n_selected
        self.protected = np.asarray(instance.protected, dtype=bool)

    @property
    def size(self) -> int:
        return math.comb(self.n, self.m)

    def keeps(self, selections) -> np.ndarray:
        sel = np.atleast_2d(np.asarray(selections, dtype=bool))
        out = np.tile(self.protected, (len(sel), 1))
        if self.direction is Direction.SUFFICIENCY:
            out[:, self.free] = sel
        else:
            out[:, self.free] = ~sel
        return out

    def selection_of(self, keep) -> np.ndarray:
        keep = np.asarray(keep, dtype=bool)[self.free]
        return keep if self.direction is Direction.SUFFICIENCY else ~keep

    def from_indices(self, idx) -> np.ndarray:
        sel = np.zeros(self.n, dtype=bool)
        sel[list(idx)] = True
        return sel

    def random(self, rng: np.random.Generator) -> np.ndarray:
        return self.random_batch(1, rng)[0]

    def random_batch(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """``count`` independent uniform selections (repeats possible)."""
        idx = np.argsort(rng.random((count, self.n)), axis=1)[:, :self.m]
        out = np.zeros((count, self.n), dtype=bool)
        np.put_along_axis(out, idx, True, axis=1)
        return out

    def all_selections(self) -> np.ndarray:
        out = np.zeros((self.size, self.n), dtype=bool)
        for row, idx in enumerate(combinations(range(self.n), self.m)):
            out[row, list(idx)] = True
        return out

    def mask(self, selection, value_level: float | None = None) -> ExplanationMask:
        return ExplanationMask(tuple(self.keeps(selection)[0]), self.level if value_level is None else value_level)


def key(sel: np.ndarray) -> tuple[int, ...]:
    """Seen-set key of a selection: its sorted selected indices."""
    return tuple(np.flatnonzero(sel).tolist())


@dataclass
class LevelResult:
    level: float
    mask: ExplanationMask
    value: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    evaluations: int = 0

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "keep": [int(k) for k in self.mask.keep],
            "value": self.value,
            "evaluations": self.evaluations,
            "trace": [[int(s), float(v)] for s, v in self.trace],
        }


@dataclass
class SearchResult:
    method: str
    direction: Direction
    levels: list[LevelResult]
    forward_passes: int = 0
    backward_passes: int = 0
    instance_id: str = ""

    @property
    def objective(self) -> float:
        return float(np.mean([lv.value for lv in self.levels]))

    @property
    def masks(self) -> list[ExplanationMask]:
        return [lv.mask for lv in self.levels]

    @property
    def passes(self) -> int:
        return self.forward_passes + self.backward_passes

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "method": self.method,
            "direction": self.direction.value,
            "objective": self.objective,
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "levels": [lv.to_json() for lv in self.levels],
        }


class BestTracker:
    """Best mask so far in the optimisation direction, ties to the lexicographically smallest keep vector."""

    def __init__(self, space: LevelSpace, objective: Objective):
        self.space = space
        self.objective = objective
        self.best_loss = math.inf
        self.best_keep: np.ndarray | None = None
        self.best_value = math.nan
        self.trace: list[tuple[int, float]] = []
        self.count = 0

    def offer(self, selections, values) -> None:
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if len(values) == 0:
            return
        losses = np.asarray(self.objective.loss(values), dtype=float)
        running = np.minimum.accumulate(np.concatenate([[self.best_loss], losses]))[1:]
        sign = 1.0 if self.objective.direction.minimize else -1.0
        best = float(running[-1])
        if best < self.best_loss or (best == self.best_loss and self.best_keep is not None):
            keeps = self.space.keeps(selections)
            tied = np.flatnonzero(losses == best)
            candidates = [keeps[i] for i in tied]
            if best == self.best_loss:
                candidates.append(self.best_keep)
            self.best_keep = min(candidates, key=lambda k: tuple(k))
            self.best_loss = best
            self.best_value = sign * best
        start = self.count
        self.count += len(values)
        # the stored value is exactly +-loss, so the trace can be rebuilt from the running minimum
        self.trace.extend(zip(range(start + 1, self.count + 1), (sign * running).tolist()))

    def result(self) -> LevelResult:
        if self.best_keep is None:
            raise RuntimeError("no mask was evaluated")
        return LevelResult(self.space.level, ExplanationMask(tuple(self.best_keep), self.space.level),
                           self.best_value, self.trace, self.count)


def split_budget(total: int, spaces: list[LevelSpace]) -> list[int]:
    """Equal shares per level; the remainder goes to the level selecting the fewest tokens."""
    n = len(spaces)
    shares = [total // n] * n
    sparsest = min(range(n), key=lambda i: (spaces[i].m, i))
    shares[sparsest] += total - sum(shares)
    return shares


def level_shares(meter: BudgetMeter, spaces: list[LevelSpace]) -> list[int | None]:
    """Per-level budgets from what the meter has left; None everywhere when unlimited."""
    if meter.limit is None:
        return [None] * len(spaces)
    return split_budget(int(meter.remaining), spaces)


def level_spaces(instance: Instance, spec: ObjectiveSpec) -> list[LevelSpace]:
    sparsity: SparsitySpec = spec.sparsity_spec
    return [LevelSpace(instance, spec.metric, s, m)
            for s, m in zip(sparsity.levels, sparsity.selected_counts(instance))]


def make_objective(spec: ObjectiveSpec, model, instance: Instance, meter: BudgetMeter | None,
                   rng: np.random.Generator | None = None, imputer=None) -> Objective:
    return Objective(model, instance, spec.metric, spec.scale, spec.replace_fn, meter, rng, imputer)


def meter_for(budget: int | None, meter: BudgetMeter | None) -> BudgetMeter:
    if meter is not None:
        return meter
    return BudgetMeter(budget)

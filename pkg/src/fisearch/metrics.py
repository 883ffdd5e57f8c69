"""Sufficiency / Comprehensiveness, weight-of-evidence variants, and the cached objective."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    BudgetMeter,
    Direction,
    ExplanationMask,
    Instance,
    InvalidInput,
    SparsitySpec,
    argmax_lowest,
    mask_digest,
    substream,
)
from .replace import ATTENTION, Imputer, ReplaceFn, ReplaceKind, apply_batch

WOE_EPS = 1e-12


class Scale(str, enum.Enum):
    PROB = "prob"
    WOE = "woe"


@dataclass(frozen=True)
class MetricValue:
    value: float
    scale: Scale = Scale.PROB
    sparsity: float = 1.0

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class ObjectiveSpec:
    metric: Direction = Direction.SUFFICIENCY
    scale: Scale = Scale.PROB
    sparsity_spec: SparsitySpec | None = None
    replace_fn: ReplaceFn = ATTENTION

    def __post_init__(self):
        object.__setattr__(self, "metric", Direction(self.metric))
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.sparsity_spec is None:
            object.__setattr__(self, "sparsity_spec", SparsitySpec.default(self.metric))
        elif self.sparsity_spec.direction is not self.metric:
            raise InvalidInput("sparsity spec direction does not match the metric")

    @property
    def levels(self) -> tuple[float, ...]:
        return self.sparsity_spec.levels

    @property
    def direction(self) -> Direction:
        return self.metric


def log_odds(p: np.ndarray, cls: int) -> np.ndarray:
    """ln[p_cls / (1 - p_cls)] with probabilities clamped to [eps, 1 - eps]."""
    p = np.atleast_2d(p)
    pc = np.clip(p[:, cls], WOE_EPS, 1 - WOE_EPS)
    rest = np.clip(p.sum(axis=1) - p[:, cls], WOE_EPS, 1 - WOE_EPS)
    return np.log(pc) - np.log(rest)


def metric_from_probs(base: np.ndarray, ablated: np.ndarray, y_hat: int,
                      scale: Scale = Scale.PROB) -> np.ndarray:
    """Difference between the unablated and ablated outputs on class ``y_hat``."""
    ablated = np.atleast_2d(ablated)
    if Scale(scale) is Scale.PROB:
        return base[y_hat] - ablated[:, y_hat]
    return log_odds(base, y_hat) - log_odds(ablated, y_hat)


def _metric(model, instance, mask, replace_fn, scale, rng, imputer, meter, base, level):
    keep = mask.array if isinstance(mask, ExplanationMask) else np.asarray(mask, dtype=bool)
    if base is None:
        base = full_prediction(model, instance)
    y_hat = argmax_lowest(base)
    ablated = apply_batch(replace_fn, model, instance, keep[None], rng, imputer, meter)
    value = float(metric_from_probs(base, ablated, y_hat, scale)[0])
    if level is None:
        level = getattr(mask, "sparsity_target", 1.0)
    return MetricValue(value, Scale(scale), level)


def full_prediction(model, instance: Instance) -> np.ndarray:
    """Unablated class probabilities. Not charged: every method needs it once."""
    n = len(instance)
    tokens = np.asarray(instance.tokens, dtype=np.int64)[None]
    return model.predict_inputs(tokens, np.ones((1, n)), np.ones((1, n)))[0]


def suff(model, instance: Instance, mask, replace_fn: ReplaceFn = ATTENTION, scale: Scale = Scale.PROB,
         rng=None, imputer: Imputer | None = None, meter: BudgetMeter | None = None,
         base: np.ndarray | None = None, level: float | None = None) -> MetricValue:
    """f(x)_y - f(Replace(x, e))_y for the predicted class y; lower is better."""
    return _metric(model, instance, mask, replace_fn, scale, rng, imputer, meter, base, level)


def comp(model, instance: Instance, mask, replace_fn: ReplaceFn = ATTENTION, scale: Scale = Scale.PROB,
         rng=None, imputer: Imputer | None = None, meter: BudgetMeter | None = None,
         base: np.ndarray | None = None, level: float | None = None) -> MetricValue:
    """Same quantity as :func:`suff`, evaluated on a removal mask; higher is better."""
    return _metric(model, instance, mask, replace_fn, scale, rng, imputer, meter, base, level)


def woe(model, instance: Instance, mask, replace_fn: ReplaceFn = ATTENTION, **kwargs) -> MetricValue:
    return _metric(model, instance, mask, replace_fn, Scale.WOE, kwargs.get("rng"),
                   kwargs.get("imputer"), kwargs.get("meter"), kwargs.get("base"), kwargs.get("level"))


def objective_score(spec: ObjectiveSpec, model, instance: Instance, masks: Sequence,
                    rng=None, imputer: Imputer | None = None, meter: BudgetMeter | None = None) -> float:
    """Mean per-level metric for one mask per sparsity level."""
    if len(masks) != len(spec.levels):
        raise InvalidInput(f"expected {len(spec.levels)} masks, got {len(masks)}")
    base = full_prediction(model, instance)
    values = [
        _metric(model, instance, m, spec.replace_fn, spec.scale, rng, imputer, meter, base, s).value
        for m, s in zip(masks, spec.levels)
    ]
    return float(np.mean(values))


@dataclass
class Objective:
    """Metric evaluator for one instance, with a digest-keyed cache.

    Masks are passed as boolean keep vectors. A mask already in the cache is never
    re-evaluated and never re-charged.
    """

    model: object
    instance: Instance
    direction: Direction = Direction.SUFFICIENCY
    scale: Scale = Scale.PROB
    replace_fn: ReplaceFn = ATTENTION
    meter: BudgetMeter | None = None
    rng: np.random.Generator | None = None
    imputer: Imputer | None = None
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.direction = Direction(self.direction)
        self.scale = Scale(self.scale)
        self.base = full_prediction(self.model, self.instance)
        self.y_hat = argmax_lowest(self.base)
        self.evaluations = 0
        # Marginalize draws its imputations from a stream keyed by the mask, so a
        # mask's value does not depend on evaluation order or batching.
        self._mc_seed = int((self.rng or np.random.default_rng(0)).integers(2**63))

    @classmethod
    def from_spec(cls, spec: ObjectiveSpec, model, instance: Instance, **kwargs) -> "Objective":
        return cls(model, instance, spec.metric, spec.scale, spec.replace_fn, **kwargs)

    def affordable(self, n: int) -> int:
        """How many new masks the meter can still pay for (capped at ``n``)."""
        if self.meter is None:
            return n
        return int(min(n, self.meter.remaining // self.replace_fn.passes_per_mask))

    def evaluate(self, keeps) -> np.ndarray:
        """Metric values for each row of ``keeps``; charges only for unseen masks."""
        keeps = np.atleast_2d(np.asarray(keeps, dtype=bool))
        digests = [row.tobytes() for row in np.packbits(keeps, axis=1)]
        fresh, seen_now = [], set()
        for i, d in enumerate(digests):
            if d not in self.cache and d not in seen_now:
                fresh.append(i)
                seen_now.add(d)
        if fresh:
            rng = self.rng
            if self.replace_fn.kind is ReplaceKind.MARGINALIZE:
                rng = [substream(self._mc_seed, mask_digest(keeps[i])) for i in fresh]
            probs = apply_batch(self.replace_fn, self.model, self.instance, keeps[fresh], rng,
                                self.imputer, self.meter)
            vals = metric_from_probs(self.base, probs, self.y_hat, self.scale)
            for i, v in zip(fresh, vals):
                self.cache[digests[i]] = float(v)
            self.evaluations += len(fresh)
        return np.array([self.cache[d] for d in digests])

    def loss(self, values: np.ndarray | float):
        """Map metric values to a minimisation scale (negated for Comprehensiveness)."""
        return values if self.direction.minimize else -np.asarray(values)

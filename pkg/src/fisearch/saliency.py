"""Score-then-threshold explainers and top-k binarization."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    MASK_ID,
    BudgetMeter,
    Capability,
    Direction,
    ExplanationMask,
    Instance,
    InvalidInput,
    argmax_lowest,
    charge,
    require,
)
from .metrics import ObjectiveSpec, full_prediction
from .replace import ATTENTION, apply_batch

logger = logging.getLogger(__name__)

# LIME package defaults: kernel width 25 on cosine distance scaled by 100, Ridge(alpha=1).
LIME_KERNEL_WIDTH = 25.0
LIME_DISTANCE_SCALE = 100.0
LIME_RIDGE_ALPHA = 1.0
LIME_FORWARD_SELECTION_MAX = 6


@dataclass
class SalienceVector:
    scores: np.ndarray
    method: str
    passes_used: int = 0

    def to_json(self) -> dict:
        return {"method": self.method, "passes_used": self.passes_used,
                "scores": [float(s) for s in self.scores]}


def lime_kernel(distances: np.ndarray, width: float = LIME_KERNEL_WIDTH) -> np.ndarray:
    """The LIME package's default kernel, sqrt(exp(-d^2 / width^2))."""
    return np.sqrt(np.exp(-(distances**2) / width**2))


def lime_samples(n_features: int, n_samples: int, rng: np.random.Generator,
                 allow_empty: bool = True) -> np.ndarray:
    """Binary perturbations: row 0 is all ones, each other row zeroes a uniformly
    random number of uniformly located features."""
    data = np.ones((n_samples, n_features), dtype=bool)
    upper = n_features if allow_empty else n_features - 1
    if upper < 1:
        return data
    sizes = rng.integers(1, upper + 1, size=n_samples - 1)
    for row, size in enumerate(sizes, start=1):
        data[row, rng.choice(n_features, size=size, replace=False)] = False
    return data


def weighted_ridge(X: np.ndarray, y: np.ndarray, w: np.ndarray, alpha: float = LIME_RIDGE_ALPHA):
    """Ridge with an unpenalised intercept under sample weights; returns (coef, intercept)."""
    X = np.asarray(X, dtype=float)
    sw = w / w.sum()
    x_mean = sw @ X
    y_mean = sw @ y
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ (Xc * w[:, None]) + alpha * np.eye(X.shape[1])
    coef = np.linalg.solve(A, Xc.T @ (w * yc))
    return coef, float(y_mean - x_mean @ coef)


def _weighted_r2(X, y, w, features, alpha):
    if not features:
        return -np.inf
    coef, b = weighted_ridge(X[:, features], y, w, alpha)
    pred = X[:, features] @ coef + b
    y_mean = np.average(y, weights=w)
    ss_tot = np.sum(w * (y - y_mean) ** 2)
    return 1.0 - np.sum(w * (y - pred) ** 2) / ss_tot if ss_tot > 0 else 0.0


def forward_selection(X, y, w, n_select: int, alpha: float = LIME_RIDGE_ALPHA) -> list[int]:
    """Greedy feature addition maximising weighted R^2, as LIME does for few features."""
    chosen: list[int] = []
    for _ in range(min(n_select, X.shape[1])):
        rest = [j for j in range(X.shape[1]) if j not in chosen]
        best = max(rest, key=lambda j: _weighted_r2(X, y, w, chosen + [j], alpha))
        chosen.append(best)
    return chosen


def lime_scores(score_fn: Callable[[np.ndarray], np.ndarray], n_features: int, n_samples: int,
                rng: np.random.Generator, kernel_width: float = LIME_KERNEL_WIDTH,
                alpha: float = LIME_RIDGE_ALPHA, forward_select: bool = False,
                allow_empty: bool = True) -> np.ndarray:
    """Fit LIME's weighted linear surrogate to ``score_fn`` over binary feature masks."""
    if n_samples < n_features + 1:
        warnings.warn(f"LIME with {n_samples} samples for {n_features} features is underdetermined; "
                      "relying on ridge regularisation", RuntimeWarning, stacklevel=2)
    data = lime_samples(n_features, n_samples, rng, allow_empty)
    y = np.asarray(score_fn(data), dtype=float)
    kept = data.sum(axis=1)
    # cosine distance to the all-ones row
    cos = np.divide(kept, np.sqrt(kept * n_features), out=np.zeros(len(kept)), where=kept > 0)
    weights = lime_kernel(LIME_DISTANCE_SCALE * (1.0 - cos), kernel_width)
    X = data.astype(float)
    if forward_select and n_features <= LIME_FORWARD_SELECTION_MAX:
        chosen = forward_selection(X, y, weights, n_features, alpha)
        coef = np.zeros(n_features)
        coef[chosen] = weighted_ridge(X[:, chosen], y, weights, alpha)[0]
        return coef
    return weighted_ridge(X, y, weights, alpha)[0]


def lime(model, instance: Instance, budget: int | None = 1000, n_samples: int | None = None,
         kernel_width: float = LIME_KERNEL_WIDTH, rng: np.random.Generator | None = None,
         meter: BudgetMeter | None = None, n_levels: int = 4, forward_select: bool = False) -> SalienceVector:
    """LIME over attention masks of the unprotected positions.

    By default uses ``budget - n_levels`` samples, leaving one forward pass per
    sparsity level for scoring the binarized explanations.
    """
    if n_samples is None:
        if budget is None:
            raise InvalidInput("need a budget or an explicit sample count")
        n_samples = budget - n_levels
    if n_samples < 1:
        raise InvalidInput("LIME needs at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    y_hat = argmax_lowest(full_prediction(model, instance))
    free = instance.free_positions
    protected = np.asarray(instance.protected, dtype=bool)

    def score(data):
        keeps = np.tile(protected, (len(data), 1))
        keeps[:, free] = data
        return apply_batch(ATTENTION, model, instance, keeps, meter=meter)[:, y_hat]

    coef = lime_scores(score, len(free), n_samples, rng, kernel_width,
                       forward_select=forward_select, allow_empty=bool(protected.any()))
    scores = np.zeros(len(instance))
    scores[free] = coef
    return SalienceVector(scores, "lime", n_samples)


def vanilla_gradient(model, instance: Instance, meter: BudgetMeter | None = None) -> SalienceVector:
    """d p_y / d embeddings, summed over the embedding dimension (1 forward + 1 backward)."""
    require(model, Capability.EMBEDDING_GRADIENTS)
    y_hat = argmax_lowest(full_prediction(model, instance))
    grad = model.backward_embeddings(instance, None, y_hat, meter=meter, of="prob")
    return SalienceVector(grad.sum(axis=1), "vanilla_gradient", 2)


def integrated_gradients(model, instance: Instance, steps: int = 498, meter: BudgetMeter | None = None,
                         baseline: np.ndarray | None = None, batch: int = 128) -> SalienceVector:
    """Midpoint-rule IG of the predicted-class probability from a repeated-MASK baseline."""
    require(model, Capability.EMBEDDING_GRADIENTS)
    if steps < 1:
        raise InvalidInput("IG needs at least one step")
    y_hat = argmax_lowest(full_prediction(model, instance))
    x = model.embeddings[np.asarray(instance.tokens)]
    if baseline is None:
        baseline = np.tile(model.embeddings[MASK_ID], (len(instance), 1))
    diff = x - baseline
    charge(meter, steps, steps)
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x)
    for start in range(0, steps, batch):
        a = alphas[start:start + batch]
        path = baseline[None] + a[:, None, None] * diff[None]
        total += model.embedding_grad_batch(path, y_hat, of="prob")[1].sum(axis=0)
    attributions = diff * total / steps
    return SalienceVector(attributions.sum(axis=1), "integrated_gradients", 2 * steps)


def binarize_topk(scores: SalienceVector | np.ndarray, instance: Instance,
                  spec: ObjectiveSpec) -> list[ExplanationMask]:
    """One mask per sparsity level from salience scores.

    Sufficiency keeps up to the top-k positively scored free tokens; Comprehensiveness
    removes up to the top-k positively scored ones. Ties go to the lower index. At
    least one free token is always kept so the mask is never empty.
    """
    s = np.asarray(getattr(scores, "scores", scores), dtype=float)
    free = instance.free_positions
    order = free[np.lexsort((free, -s[free]))]
    positive = order[s[order] > 0]
    sparsity = spec.sparsity_spec
    masks = []
    for level, n_sel in zip(sparsity.levels, sparsity.selected_counts(instance)):
        chosen = positive[:n_sel]
        keep = np.asarray(instance.protected, dtype=bool).copy()
        if sparsity.direction is Direction.SUFFICIENCY:
            if len(chosen) == 0:
                chosen = order[:1]
            keep[chosen] = True
        else:
            keep[free] = True
            keep[chosen] = False
        masks.append(ExplanationMask(tuple(keep), level))
    return masks

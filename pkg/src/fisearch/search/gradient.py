"""Gradient Search (straight-through Gumbel state) and Taylor Search (first-order beam swaps)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import BudgetMeter, Capability, Direction, Instance, InvalidInput, require, sparsity_count
from ..metrics import ObjectiveSpec
from .common import BestTracker, SearchResult, key, level_shares, level_spaces, make_objective, meter_for
from .random_search import sample_unseen

GRADIENT_LR = 0.1
SPARSITY_WEIGHT = 1e-3
TARGET_SPARSITY = 0.05
CHECKPOINT_EVERY = 20
GUMBEL_TAU = 1.0
# canonical decoupled-weight-decay Adam defaults
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAM_WEIGHT_DECAY = 0.01

BEAM_WIDTH = 5
TAYLOR_STEPS = 50


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def gumbel_binary_sample(logits: np.ndarray, rng: np.random.Generator, tau: float = GUMBEL_TAU):
    """Binary Gumbel-Softmax draw: (hard sample, soft relaxation).

    The difference of two Gumbel variables is logistic, so the hard sample is
    1[s + logistic noise > 0], which is 1 with probability sigmoid(s).
    """
    s = np.asarray(logits, dtype=float)
    noise = rng.logistic(size=s.shape)
    soft = sigmoid((s + noise) / tau)
    hard = (s + noise) > 0
    return hard, soft


@dataclass
class AdamW:
    lr: float = GRADIENT_LR
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    weight_decay: float = ADAM_WEIGHT_DECAY
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        b1, b2 = self.betas
        params = params * (1.0 - self.lr * self.weight_decay)
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad**2
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class GradientSearchState:
    s: np.ndarray
    target_sparsity: int
    sparsity_weight: float = SPARSITY_WEIGHT
    optimizer: AdamW = field(default_factory=AdamW)
    updates: int = 0

    def penalty(self) -> float:
        return self.sparsity_weight * (float(sigmoid(self.s).sum()) - self.target_sparsity) ** 2

    def penalty_grad(self) -> np.ndarray:
        p = sigmoid(self.s)
        return 2.0 * self.sparsity_weight * (p.sum() - self.target_sparsity) * p * (1 - p)


def selection_loss_grad(model, instance: Instance, direction: Direction, sel: np.ndarray, y_hat: int,
                        meter: BudgetMeter | None):
    """Loss to minimise over a selection vector and its gradient w.r.t. the selection.

    Sufficiency: cross-entropy of y_hat with only the selection kept.
    Comprehensiveness: negated cross-entropy with the selection removed.
    Either way the chain rule gives d loss / d sel = d CE / d keep on free positions.
    """
    keep = np.asarray(instance.protected, dtype=float)
    free = instance.free_positions
    keep[free] = sel if direction is Direction.SUFFICIENCY else 1.0 - sel
    ce, grad = model.loss_and_mask_grad(instance, keep, y_hat, meter)
    sign = 1.0 if direction is Direction.SUFFICIENCY else -1.0
    return sign * ce, grad[free]


def _usable_selection(sel: np.ndarray, direction: Direction, instance: Instance, s: np.ndarray) -> np.ndarray:
    """Avoid an all-hidden input, which the model cannot score."""
    if np.asarray(instance.protected).any():
        return sel
    sel = sel.copy()
    if direction is Direction.SUFFICIENCY and not sel.any():
        sel[int(np.argmax(s))] = True
    elif direction is Direction.COMPREHENSIVENESS and sel.all():
        sel[int(np.argmin(s))] = False
    return sel


def topk_selection(s: np.ndarray, m: int) -> np.ndarray:
    """The m largest coordinates of s, ties to the lower index."""
    order = np.lexsort((np.arange(len(s)), -s))
    sel = np.zeros(len(s), dtype=bool)
    sel[order[:m]] = True
    return sel


def gradient_search(model, instance: Instance, spec: ObjectiveSpec, budget: int | None = 1000,
                    rng: np.random.Generator | None = None, meter: BudgetMeter | None = None,
                    imputer=None, learning_rate: float = GRADIENT_LR,
                    sparsity_weight: float = SPARSITY_WEIGHT, tau: float = GUMBEL_TAU,
                    checkpoint_every: int = CHECKPOINT_EVERY, max_updates: int | None = None) -> SearchResult:
    """One continuous state shared by all levels, trained with straight-through Gumbel samples.

    Every ``checkpoint_every`` updates the state is binarized by top-k at each level
    and the true objective is scored. A final checkpoint is always reserved, so the
    search never ends without a scored mask per level.
    """
    require(model, Capability.MASK_GRADIENTS)
    rng = rng if rng is not None else np.random.default_rng(0)
    meter = meter_for(budget, meter)
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    spaces = level_spaces(instance, spec)
    trackers = [BestTracker(sp, objective) for sp in spaces]
    n = instance.n_free
    direction = spec.metric
    state = GradientSearchState(rng.standard_normal(n), sparsity_count(n, TARGET_SPARSITY), sparsity_weight,
                                AdamW(lr=learning_rate))
    if meter.limit is None and max_updates is None:
        raise InvalidInput("gradient search needs a budget or max_updates")
    checkpoint_cost = len(spaces) * spec.replace_fn.passes_per_mask
    if meter.remaining < checkpoint_cost:
        raise InvalidInput(f"budget {meter.remaining} cannot cover one checkpoint ({checkpoint_cost} passes)")

    def checkpoint():
        for sp, tr in zip(spaces, trackers):
            sel = topk_selection(state.s, sp.m)
            tr.offer(sel[None], objective.evaluate(sp.keeps(sel)))

    since = 0
    while True:
        if max_updates is not None and state.updates >= max_updates:
            break
        if meter.remaining < 2 + checkpoint_cost:
            break
        hard, soft = gumbel_binary_sample(state.s, rng, tau)
        sel = _usable_selection(hard.astype(float), direction, instance, state.s)
        _, g_sel = selection_loss_grad(model, instance, direction, sel, objective.y_hat, meter)
        grad = g_sel * soft * (1 - soft) / tau + state.penalty_grad()
        state.s = state.optimizer.step(state.s, grad)
        state.updates += 1
        since += 1
        if since == checkpoint_every:
            since = 0
            checkpoint()
    if since or trackers[0].count == 0:
        checkpoint()
    levels = [tr.result() for tr in trackers]
    result = SearchResult("gradient", direction, levels, meter.forward_count, meter.backward_count, instance.id)
    result.state = state
    return result


def swap_forecasts(grad: np.ndarray, sel: np.ndarray):
    """First-order loss change for every swap of a selected index i with an unselected j.

    Returns (i indices, j indices, forecast) with forecast[a, b] = grad[j_b] - grad[i_a].
    """
    sel = np.asarray(sel, dtype=bool)
    on = np.flatnonzero(sel)
    off = np.flatnonzero(~sel)
    return on, off, grad[off][None, :] - grad[on][:, None]


def taylor_search(model, instance: Instance, spec: ObjectiveSpec, budget: int | None = 1000,
                  beam_width: int = BEAM_WIDTH, steps: int = TAYLOR_STEPS,
                  rng: np.random.Generator | None = None, meter: BudgetMeter | None = None,
                  imputer=None) -> SearchResult:
    """Beam search over exactly-k selections, expanding the swaps with the best first-order forecast.

    Each beam state costs one gradient (1 forward + 1 backward) and expands into its
    ``beam_width`` best-forecast unseen swaps, each scored once. The next beam is the
    best ``beam_width`` of the new states.
    """
    require(model, Capability.MASK_GRADIENTS)
    if beam_width < 1 or steps < 0:
        raise InvalidInput("beam_width must be >= 1 and steps >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    meter = meter_for(budget, meter)
    objective = make_objective(spec, model, instance, meter, rng, imputer)
    spaces = level_spaces(instance, spec)
    shares = level_shares(meter, spaces)
    per_eval = spec.replace_fn.passes_per_mask
    levels = []
    for space, share in zip(spaces, shares):
        level_meter = meter.child(share)
        objective.meter = level_meter
        tracker = BestTracker(space, objective)
        seen: set = set()
        beam = sample_unseen(space, min(beam_width, objective.affordable(space.size if share is None else share)), rng, seen)
        if len(beam):
            values = objective.evaluate(space.keeps(beam))
            tracker.offer(beam, values)
        for _ in range(steps):
            if len(beam) == 0 or space.m in (0, space.n):
                break
            children, child_keys = [], set()
            for sel in beam:
                if level_meter.remaining < 2 + per_eval:
                    break
                _, g = selection_loss_grad(model, instance, space.direction, sel.astype(float),
                                           objective.y_hat, level_meter)
                on, off, fc = swap_forecasts(g, sel)
                flat = fc.ravel()
                a_idx, b_idx = np.divmod(np.arange(flat.size), len(off))
                # best forecast first, ties to the lower (i, j)
                order = np.lexsort((off[b_idx], on[a_idx], flat))
                picked = 0
                for t in order:
                    if picked == beam_width:
                        break
                    child = sel.copy()
                    child[on[a_idx[t]]] = False
                    child[off[b_idx[t]]] = True
                    k = key(child)
                    if k in seen or k in child_keys:
                        continue
                    child_keys.add(k)
                    children.append(child)
                    picked += 1
            n_afford = len(children) if level_meter.limit is None else int(level_meter.remaining // per_eval)
            children = children[:n_afford]
            if not children:
                break
            for c in children:
                seen.add(key(c))
            children = np.array(children)
            values = objective.evaluate(space.keeps(children))
            tracker.offer(children, values)
            losses = np.asarray(objective.loss(values), dtype=float)
            keep_order = sorted(range(len(children)),
                                key=lambda c: (losses[c], tuple(space.keeps(children[c])[0])))
            beam = children[keep_order[:beam_width]]
        levels.append(tracker.result())
    return SearchResult("taylor", spec.metric, levels, meter.forward_count, meter.backward_count, instance.id)

import math
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance, random_model
from fisearch.core import BudgetMeter, Capability, Direction, Instance, InvalidInput, SpaceTooLarge, UnsupportedModel
from fisearch.metrics import Objective, ObjectiveSpec
from fisearch.search import (
    AdamW,
    LevelSpace,
    enumerate_topk,
    exhaustive_search,
    gradient_search,
    gumbel_binary_sample,
    ordered_search,
    parallel_local_search,
    random_search,
    split_budget,
    swap_forecasts,
    taylor_search,
)
from fisearch.search.gradient import selection_loss_grad, sigmoid, topk_selection
from fisearch.search.local import UniformStream, propose

SPECS = [ObjectiveSpec(Direction.SUFFICIENCY), ObjectiveSpec(Direction.COMPREHENSIVENESS)]
BUDGETED = {
    "random": random_search,
    "pls": parallel_local_search,
    "ordered": ordered_search,
    "taylor": taylor_search,
    "gradient": gradient_search,
}


def case(seed, n=9, protected=1):
    return random_model(seed), random_instance(np.random.default_rng(seed), n, n_protected=protected, id=f"i{seed}")


def brute_force(model, inst, spec):
    """Independent per-level optimum: score every exact-k mask with a fresh objective."""
    out = []
    for s in spec.levels:
        obj = Objective(model, inst, spec.metric)
        space = LevelSpace(inst, spec.metric, s, spec.sparsity_spec.selected_counts(inst)[spec.levels.index(s)])
        best = None
        for idx in combinations(range(space.n), space.m):
            keep = space.keeps(space.from_indices(idx))[0]
            v = obj.evaluate(keep[None])[0]
            if best is None or (v < best if spec.metric.minimize else v > best):
                best = v
        out.append(best)
    return out


@pytest.mark.parametrize("spec", SPECS, ids=["suff", "comp"])
def test_exhaustive_matches_brute_force(spec):
    model, inst = case(0, 8)
    res = exhaustive_search(model, inst, spec)
    assert [lv.value for lv in res.levels] == brute_force(model, inst, spec)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("spec", SPECS, ids=["suff", "comp"])
@pytest.mark.parametrize("method", ["random", "pls"])
def test_full_budget_recovers_exhaustive_optimum(seed, spec, method):
    model, inst = case(seed, 9)
    ex = exhaustive_search(model, inst, spec)
    budget = 4 * max(math.comb(inst.n_free, m) for m in spec.sparsity_spec.selected_counts(inst))
    res = BUDGETED[method](model, inst, spec, budget=budget, rng=np.random.default_rng(seed))
    for a, b in zip(res.levels, ex.levels):
        assert a.value == b.value and a.mask == b.mask


def test_ordered_with_full_budget_recovers_optimum():
    model, inst = case(3, 8)
    spec = SPECS[0]
    ex = exhaustive_search(model, inst, spec)
    res = ordered_search(model, inst, spec, budget=None, theta=np.zeros(inst.n_free), meter=BudgetMeter(None))
    assert [lv.value for lv in res.levels] == [lv.value for lv in ex.levels]


def test_exhaustive_cap():
    model, inst = case(0, 30, 0)
    with pytest.raises(SpaceTooLarge):
        exhaustive_search(model, inst, SPECS[1], cap=1000)


@pytest.mark.parametrize("method", sorted(BUDGETED))
@pytest.mark.parametrize("spec", SPECS, ids=["suff", "comp"])
def test_budget_masks_and_traces(method, spec):
    model, inst = case(11, 16, 2)
    meter = BudgetMeter(400)
    res = BUDGETED[method](model, inst, spec, meter=meter, rng=np.random.default_rng(1))
    assert meter.total <= 400
    assert res.forward_passes + res.backward_passes == meter.total
    counts = spec.sparsity_spec.selected_counts(inst)
    evaluations = 0
    for lv, m in zip(res.levels, counts):
        space = LevelSpace(inst, spec.metric, lv.level, m)
        assert space.selection_of(lv.mask.array).sum() == m
        assert all(lv.mask.keep[:2])
        values = [v for _, v in lv.trace]
        assert len(values) == lv.evaluations
        assert [s for s, _ in lv.trace] == list(range(1, lv.evaluations + 1))
        diffs = np.diff(values)
        assert np.all(diffs <= 0) if spec.metric.minimize else np.all(diffs >= 0)
        assert values[-1] == lv.value
        evaluations += lv.evaluations
    charged = meter.forward_count - meter.backward_count
    if method == "ordered":
        charged -= int(400 * 0.25)
    if method == "gradient":
        # repeated checkpoints hit the cache and are not charged again
        assert charged <= evaluations
    else:
        assert charged == evaluations


@pytest.mark.parametrize("method", sorted(BUDGETED))
def test_results_are_seed_deterministic(method):
    model, inst = case(12, 12)
    a = BUDGETED[method](model, inst, SPECS[0], budget=200, rng=np.random.default_rng(5))
    b = BUDGETED[method](model, inst, SPECS[0], budget=200, rng=np.random.default_rng(5))
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("method", sorted(BUDGETED) + ["exhaustive"])
def test_single_free_position(method):
    model = random_model(0)
    inst = Instance((3, 4, 5), (True, True, False), 0, "one")
    fn = exhaustive_search if method == "exhaustive" else BUDGETED[method]
    kwargs = {} if method == "exhaustive" else {"budget": 100, "rng": np.random.default_rng(0)}
    for spec in SPECS:
        res = fn(model, inst, spec, **kwargs)
        # Suff keeps the one free token; Comp removes n_free - ceil(s * n_free) = 0 tokens
        assert all(lv.mask.keep == (True, True, True) for lv in res.levels)


def test_split_budget_gives_remainder_to_sparsest_level():
    inst = Instance.plain(list(range(1, 21)))
    spec = SPECS[0]
    spaces = [LevelSpace(inst, spec.metric, s, m) for s, m in zip(spec.levels, spec.sparsity_spec.selected_counts(inst))]
    assert split_budget(1003, spaces) == [253, 250, 250, 250]
    comp = SPECS[1]
    spaces = [LevelSpace(inst, comp.metric, s, m) for s, m in zip(comp.levels, comp.sparsity_spec.selected_counts(inst))]
    # Comp removes 1, 2, 4, 10 tokens
    assert split_budget(1003, spaces) == [253, 250, 250, 250]


# ---------------------------------------------------------------- local search

def test_propose_moves_to_unseen_hamming_two_neighbour():
    seen = {(0, 1)}
    nxt = propose([0, 1], [2, 3, 4], seen, UniformStream(np.random.default_rng(0)))
    on, off = nxt
    assert len(set(on) & {0, 1}) == 1 and sorted(on + off) == [0, 1, 2, 3, 4]
    assert tuple(sorted(on)) in seen and len(seen) == 2


def test_propose_gives_up_when_neighbourhood_is_exhausted():
    seen = {(0,), (1,)}
    assert propose([0], [1], seen, UniformStream(np.random.default_rng(0)), max_walk=10) is None


def test_pls_needs_a_run():
    with pytest.raises(InvalidInput):
        parallel_local_search(*case(0), SPECS[0], runs=0)


# ---------------------------------------------------------------- gradient search

class LinearLossModel:
    """CE(keep) = a . keep + b, the setting where first-order forecasts are exact."""

    capabilities = frozenset(Capability)

    def __init__(self, a, b=0.3):
        self.a, self.b = np.asarray(a, dtype=float), b

    def loss_and_mask_grad(self, instance, keep, target, meter=None):
        if meter is not None:
            meter.charge(1, 1)
        return float(self.a @ keep + self.b), self.a.copy()


@pytest.mark.parametrize("direction", list(Direction))
def test_swap_forecast_is_exact_for_linear_losses(direction):
    rng = np.random.default_rng(0)
    inst = Instance((1,) * 10, (True, True) + (False,) * 8, 0)
    model = LinearLossModel(rng.normal(size=10))
    sel = np.zeros(8, dtype=bool)
    sel[[1, 4, 6]] = True
    base, g = selection_loss_grad(model, inst, direction, sel.astype(float), 0, None)
    on, off, fc = swap_forecasts(g, sel)
    for a, i in enumerate(on):
        for b, j in enumerate(off):
            child = sel.copy()
            child[i], child[j] = False, True
            exact = selection_loss_grad(model, inst, direction, child.astype(float), 0, None)[0] - base
            assert abs(fc[a, b] - exact) <= 1e-9


def test_taylor_with_zero_steps_scores_only_the_initial_beam():
    model, inst = case(4, 12)
    res = taylor_search(model, inst, SPECS[0], budget=400, beam_width=1, steps=0)
    assert all(lv.evaluations == 1 for lv in res.levels)
    assert res.backward_passes == 0


def test_taylor_beam_width_one_follows_best_forecast():
    model, inst = case(5, 10, 0)
    spec = SPECS[0]
    res = taylor_search(model, inst, spec, budget=None, beam_width=1, steps=3, meter=BudgetMeter(None))
    # one gradient per step, one child per step, plus the starting state
    assert all(lv.evaluations <= 4 for lv in res.levels)
    assert res.backward_passes <= 3 * len(spec.levels)


def test_gradient_search_needs_mask_gradients():
    model, inst = case(0)
    with pytest.raises(UnsupportedModel):
        gradient_search(model.without(Capability.MASK_GRADIENTS), inst, SPECS[0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_gumbel_marginals_match_sigmoid(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(scale=2.0, size=1)
    draws = np.array([gumbel_binary_sample(s, rng)[0][0] for _ in range(2000)])
    p = sigmoid(s)[0]
    assert abs(draws.mean() - p) <= 4 * math.sqrt(p * (1 - p) / 2000) + 1e-9


def test_gumbel_soft_sample_is_tempered_logistic():
    rng = np.random.default_rng(0)
    hard, soft = gumbel_binary_sample(np.zeros(1000), rng, tau=0.5)
    assert np.array_equal(hard, soft > 0.5)


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(30, 3))
    opt = AdamW(lr=0.05, weight_decay=0.1)
    p = np.array([0.5, -1.0, 2.0])
    for g in grads:
        p = opt.step(p, g)
    for d in range(3):
        x, m, v = [0.5, -1.0, 2.0][d], 0.0, 0.0
        for t, g in enumerate(grads[:, d], start=1):
            x -= 0.05 * 0.1 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p[d] == pytest.approx(x, abs=1e-12)


def test_sparsity_penalty_shrinks_state_on_constant_model():
    model, inst = case(6, 20, 0)
    model.w_out[...] = 0
    res = gradient_search(model, inst, SPECS[0], budget=None, meter=BudgetMeter(None), max_updates=200,
                          rng=np.random.default_rng(0))
    state = res.state
    start = np.random.default_rng(0).standard_normal(20)
    assert sigmoid(state.s).sum() < sigmoid(start).sum()


def test_topk_selection_ties_go_low():
    assert topk_selection(np.array([1.0, 2.0, 2.0, 0.0]), 2).tolist() == [False, True, True, False]
    assert topk_selection(np.array([1.0, 1.0, 1.0]), 2).tolist() == [True, True, False]


# ---------------------------------------------------------------- ordered search

def brute_topk(theta, k):
    exact = [Fraction(float(t)) for t in theta]
    combos = list(combinations(range(len(theta)), k))
    return sorted(combos, key=lambda c: (-sum(exact[i] for i in c), c))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9), st.integers(0, 9))
def test_enumerate_topk_matches_brute_force(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    # quarter-integers: exact sums and plenty of ties
    theta = rng.integers(-6, 7, size=n) / 4
    got = list(enumerate_topk(theta, k))
    assert got == brute_topk(theta, k)


def test_enumerate_topk_rejects_bad_k():
    with pytest.raises(InvalidInput):
        list(enumerate_topk(np.zeros(3), 4))


def test_ordered_search_scores_masks_in_theta_order():
    model, inst = case(7, 10, 0)
    theta = np.arange(10, dtype=float)
    res = ordered_search(model, inst, SPECS[0], meter=BudgetMeter(None), theta=theta, budget=None)
    # Suff at 5% keeps one token; the best single-token mask is among all 10 candidates
    ex = exhaustive_search(model, inst, SPECS[0])
    assert res.levels[0].value == ex.levels[0].value


def test_ordered_search_needs_budget():
    model, inst = case(0)
    with pytest.raises(InvalidInput):
        ordered_search(model, inst, SPECS[0], budget=5)

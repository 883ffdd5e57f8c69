import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance, random_model
from fisearch.core import BudgetMeter, Capability, Direction, Instance, UnsupportedModel
from fisearch.experiments import run_method
from fisearch.metrics import ObjectiveSpec
from fisearch.saliency import (
    binarize_topk,
    integrated_gradients,
    lime,
    lime_kernel,
    lime_samples,
    lime_scores,
    vanilla_gradient,
    weighted_ridge,
)


def test_lime_kernel_values():
    assert lime_kernel(np.array([0.0]))[0] == 1.0
    assert lime_kernel(np.array([25.0]))[0] == pytest.approx(np.exp(-0.5))


def test_lime_samples_first_row_is_unperturbed():
    data = lime_samples(6, 50, np.random.default_rng(0))
    assert data[0].all() and not data[1:].all(axis=1).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_weighted_ridge_matches_augmented_lstsq(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    w = rng.uniform(0.1, 1, size=30)
    coef, b = weighted_ridge(X, y, w, alpha=0.7)
    # oracle: minimise sum w (y - Xc - b)^2 + alpha |c|^2 as one least-squares system
    A = np.vstack([np.sqrt(w)[:, None] * np.column_stack([X, np.ones(30)]),
                   np.column_stack([np.sqrt(0.7) * np.eye(4), np.zeros(4)])])
    rhs = np.concatenate([np.sqrt(w) * y, np.zeros(4)])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    assert np.allclose(coef, sol[:4], atol=1e-9) and b == pytest.approx(sol[4], abs=1e-9)


def test_lime_recovers_a_linear_score_function():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=10)
    est = lime_scores(lambda d: d.astype(float) @ theta, 10, 996, rng)
    ranks = lambda v: np.argsort(np.argsort(v))
    rho = np.corrcoef(ranks(est), ranks(theta))[0, 1]
    assert rho >= 0.95


def test_lime_on_model_charges_sample_count():
    model = random_model(1)
    inst = random_instance(np.random.default_rng(1), 9, n_protected=2)
    meter = BudgetMeter(None)
    sv = lime(model, inst, n_samples=50, rng=np.random.default_rng(0), meter=meter)
    assert meter.forward_count == 50 and sv.scores[:2].tolist() == [0, 0]


def test_vanilla_gradient_matches_finite_differences():
    model = random_model(3)
    inst = random_instance(np.random.default_rng(3), 6)
    y = int(np.argmax(model.forward(inst)))
    X = model.embeddings[np.asarray(inst.tokens)]
    h = 1e-6
    num = np.zeros(len(inst))
    for i in range(len(inst)):
        for d in range(X.shape[1]):
            up, dn = X.copy(), X.copy()
            up[i, d] += h
            dn[i, d] -= h
            num[i] += (model.forward_embedded(up)[y] - model.forward_embedded(dn)[y]) / (2 * h)
    assert np.allclose(vanilla_gradient(model, inst).scores, num, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_integrated_gradients_completeness(seed):
    model = random_model(seed)
    inst = random_instance(np.random.default_rng(seed), 7)
    p = model.forward(inst)
    y = int(np.argmax(p))
    base = model.forward_embedded(np.tile(model.embeddings[0], (7, 1)))
    ig = integrated_gradients(model, inst, steps=498)
    assert abs(ig.scores.sum() - (p[y] - base[y])) < 1e-3


def test_gradient_explainers_need_gradients():
    model = random_model(0).without(Capability.EMBEDDING_GRADIENTS)
    with pytest.raises(UnsupportedModel):
        integrated_gradients(model, Instance.plain([1, 2]))


def test_binarize_suff_keeps_top_positive_scores():
    inst = Instance((1, 2, 3, 4, 5), (True, False, False, False, False), 0)
    spec = ObjectiveSpec(Direction.SUFFICIENCY)
    masks = binarize_topk(np.array([9.0, 0.5, 2.0, 2.0, -1.0]), inst, spec)
    # 4 free tokens: kept counts 1, 1, 1, 2; ties go to the lower index
    assert [m.keep for m in masks] == [(True, False, True, False, False)] * 3 + [(True, False, True, True, False)]


def test_binarize_comp_removes_only_positive_scores():
    inst = Instance.plain([1, 2, 3, 4])
    spec = ObjectiveSpec(Direction.COMPREHENSIVENESS)
    masks = binarize_topk(np.array([-1.0, 3.0, -2.0, -3.0]), inst, spec)
    # removal counts 0, 0, 0, 2, but only one token scores positive
    assert masks[-1].keep == (True, False, True, True)
    assert masks[0].keep == (True, True, True, True)


def test_binarize_suff_never_returns_empty():
    inst = Instance.plain([1, 2, 3])
    masks = binarize_topk(np.array([-1.0, -0.5, -2.0]), inst, ObjectiveSpec(Direction.SUFFICIENCY))
    assert all(m.keep == (False, True, False) for m in masks)


def test_budget_ledger_for_saliency_methods():
    model = random_model(4)
    inst = random_instance(np.random.default_rng(4), 12)
    spec = ObjectiveSpec(Direction.SUFFICIENCY)
    _, m, _ = run_method("lime", model, inst, spec, 1000, False, np.random.default_rng(0))
    assert (m.forward_count, m.backward_count) == (1000, 0)
    _, m, _ = run_method("integrated_gradients", model, inst, spec, 1000, False, np.random.default_rng(0))
    assert (m.forward_count, m.backward_count) == (498 + 4, 498)
    meter = BudgetMeter(None)
    lime(model, inst, budget=1000, rng=np.random.default_rng(0), meter=meter)
    assert meter.forward_count == 996

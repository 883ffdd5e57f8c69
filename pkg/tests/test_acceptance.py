"""Acceptance criteria, each at its stated scale and tolerance.

Each test prints one PASS/FAIL line (also repeated in the terminal summary).
The robustness and PLS-vs-Random checks train and evaluate at full scale and
take several minutes on one CPU.
"""

import math
import time
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from conftest import random_instance, random_model, report_criterion
from fisearch.core import BudgetMeter, Capability, Direction, Instance, mask_digest
from fisearch.experiments import (
    BootstrapConfig,
    benchmark,
    block_bootstrap_test,
    robustness_experiment,
    run_method,
)
from fisearch.metrics import Objective, ObjectiveSpec
from fisearch.replace import ReplaceKind, fit_imputer
from fisearch.search import (
    enumerate_topk,
    exhaustive_search,
    gumbel_binary_sample,
    parallel_local_search,
    random_search,
    swap_forecasts,
)
from fisearch.search.gradient import selection_loss_grad, sigmoid
from fisearch.search.random_search import EXHAUSTIVE_CAP
from fisearch.toymodel import TrainConfig, generate_corpus, train

SUFF = ObjectiveSpec(Direction.SUFFICIENCY)
COMP = ObjectiveSpec(Direction.COMPREHENSIVENESS)
N_SEEDS = 10
N_TRAIN = 1000
N_TEST = 3000


@pytest.fixture(scope="module")
def ct_setup():
    """Corpus split, bigram imputer and 10 standard-trained seeds."""
    corpus = generate_corpus(N_TRAIN + N_TEST, seed=1)
    train_set, test_set = corpus.split(N_TRAIN)
    imputer = fit_imputer(train_set, order=2)
    standard = [train(train_set, TrainConfig(mode="standard", seed=s)) for s in range(N_SEEDS)]
    return train_set, test_set, imputer, standard


def _short_instances(n, seed, min_len, max_len, query_len=0):
    return generate_corpus(n, seed=seed, min_len=min_len, max_len=max_len, query_len=query_len).documents


# ---------------------------------------------------------------- 1

def test_c01_random_and_pls_recover_exhaustive_optimum(ct_setup):
    model = ct_setup[3][0]
    docs = _short_instances(50, 11, 6, 10)
    start = time.perf_counter()
    mismatches = 0
    for i, inst in enumerate(docs):
        for spec in (SUFF, COMP):
            ex = exhaustive_search(model, inst, spec)
            biggest = max(math.comb(inst.n_free, m) for m in spec.sparsity_spec.selected_counts(inst))
            budget = biggest * len(spec.levels)
            for fn in (random_search, parallel_local_search):
                res = fn(model, inst, spec, budget=budget, rng=np.random.default_rng(i))
                mismatches += sum(a.value != b.value or a.mask != b.mask for a, b in zip(res.levels, ex.levels))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 120
    report_criterion(1, ok, f"50 instances, L<=10: {mismatches} level mismatches, {elapsed:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_c02_pls_beats_random(ct_setup):
    _, test_set, _, standard = ct_setup
    instances = test_set.documents[:200]
    rep = benchmark(["random", "pls"], {"standard": standard}, instances, budget=1000,
                    bootstrap=BootstrapConfig(), trajectories=False)
    assert not rep.failures
    suff = block_bootstrap_test(rep.grid("pls", "suff"), rep.grid("random", "suff"))
    comp = block_bootstrap_test(rep.grid("pls", "comp"), rep.grid("random", "comp"))
    ok = suff.difference <= 0 and comp.difference >= 0 and suff.p_value < 0.05 and comp.p_value < 0.05
    report_criterion(2, ok, f"200 instances x 10 seeds, budget 1000/level: "
                            f"Suff PLS-Random {suff.difference:+.3g} (p={suff.p_value:.4f}), "
                            f"Comp PLS-Random {comp.difference:+.3g} (p={comp.p_value:.4f})")
    assert ok


# ---------------------------------------------------------------- 3

def test_c03_pls_within_001_of_optimum(ct_setup):
    _, test_set, _, standard = ct_setup
    feasible = [d for d in test_set.documents
                if all(math.comb(d.n_free, m) <= EXHAUSTIVE_CAP for m in SUFF.sparsity_spec.selected_counts(d))]
    insts = feasible[:50]
    gaps = []
    for s, model in enumerate(standard[:3]):
        for inst in insts:
            ex = exhaustive_search(model, inst, SUFF).objective
            pls = parallel_local_search(model, inst, SUFF, budget=1000 * len(SUFF.levels),
                                        rng=np.random.default_rng(s)).objective
            gaps.append(pls - ex)
    gap = float(np.mean(gaps))
    ok = len(insts) >= 20 and abs(gap) <= 0.01
    report_criterion(3, ok, f"{len(insts)} exhaustible instances x 3 seeds: mean Suff(PLS) - Suff(Exhaustive) "
                            f"= {gap:.2e} (<= 0.01)")
    assert ok


# ---------------------------------------------------------------- 4

def test_c04_integrated_gradients_completeness():
    from fisearch.saliency import integrated_gradients
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        model = random_model(i)
        inst = random_instance(rng, int(rng.integers(3, 15)))
        p = model.forward(inst)
        y = int(np.argmax(p))
        baseline = model.forward_embedded(np.tile(model.embeddings[0], (len(inst), 1)))
        ig = integrated_gradients(model, inst, steps=498)
        worst = max(worst, abs(ig.scores.sum() - (p[y] - baseline[y])))
    ok = worst <= 1e-3
    report_criterion(4, ok, f"100 random models: max |sum IG - (f(x) - f(baseline))| = {worst:.2e} (<= 1e-3)")
    assert ok


# ---------------------------------------------------------------- 5

def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_c05_gradients_match_finite_differences():
    h = 1e-5
    worst_mask = worst_emb = 0.0
    for i in range(100):
        rng = np.random.default_rng(2000 + i)
        model = random_model(i, dim=int(rng.integers(1, 5)), hidden=int(rng.integers(1, 6)),
                             classes=int(rng.integers(2, 5)))
        n_cls = model.w_out.shape[1]
        inst = random_instance(rng, int(rng.integers(2, 9)))
        w = rng.uniform(0.1, 1.0, size=len(inst))
        target = int(rng.integers(n_cls))
        ce = lambda ww: -np.log(model.forward(inst, ww)[target])  # noqa: E731
        num = np.array([(ce(w + h * e) - ce(w - h * e)) / (2 * h) for e in np.eye(len(w))])
        worst_mask = max(worst_mask, _rel(model.backward_mask(inst, w, target), num))
        X = model.embeddings[np.asarray(inst.tokens)]
        num_x = np.zeros_like(X)
        for idx in np.ndindex(*X.shape):
            d = np.zeros_like(X)
            d[idx] = h
            num_x[idx] = (model.forward_embedded(X + d, w)[target] - model.forward_embedded(X - d, w)[target]) / (2 * h)
        worst_emb = max(worst_emb, _rel(model.backward_embeddings(inst, w, target, of="prob"), num_x))
    ok = worst_mask <= 1e-6 and worst_emb <= 1e-6
    report_criterion(5, ok, f"100 random configurations: max relative error mask {worst_mask:.1e}, "
                            f"embedding {worst_emb:.1e} (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------- 6

class LinearLossModel:
    """Cross-entropy that is exactly linear in the keep weights."""

    capabilities = frozenset(Capability)

    def __init__(self, a, b):
        self.a, self.b = a, b

    def loss_and_mask_grad(self, instance, keep, target, meter=None):
        return float(self.a @ keep + self.b), self.a.copy()


def test_c06_taylor_forecast_exact_on_linear_models():
    worst, checked = 0.0, 0
    for i in range(50):
        rng = np.random.default_rng(3000 + i)
        n_prot = int(rng.integers(0, 3))
        n = n_prot + int(rng.integers(2, 12))
        inst = Instance((1,) * n, (True,) * n_prot + (False,) * (n - n_prot), 0)
        model = LinearLossModel(rng.normal(size=n), float(rng.normal()))
        for direction in Direction:
            free = n - n_prot
            m = int(rng.integers(1, free))
            sel = np.zeros(free, dtype=bool)
            sel[rng.choice(free, m, replace=False)] = True
            base, g = selection_loss_grad(model, inst, direction, sel.astype(float), 0, None)
            on, off, fc = swap_forecasts(g, sel)
            for a, ii in enumerate(on):
                for b, jj in enumerate(off):
                    child = sel.copy()
                    child[ii], child[jj] = False, True
                    exact = selection_loss_grad(model, inst, direction, child.astype(float), 0, None)[0] - base
                    worst = max(worst, abs(fc[a, b] - exact))
                    checked += 1
    ok = worst <= 1e-9
    report_criterion(6, ok, f"{checked} swaps on 50 linear models x 2 directions: max |forecast - exact| "
                            f"= {worst:.1e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 7

def test_c07_ordered_enumeration_matches_brute_force():
    bad = 0
    for i in range(20):
        rng = np.random.default_rng(4000 + i)
        n = int(rng.integers(4, 13))
        k = int(rng.integers(1, n))
        theta = rng.normal(size=n)
        if i % 2:
            # coarse values force ties, exercising the tie rule
            theta = np.round(theta * 2) / 2
        exact = [Fraction(float(t)) for t in theta]
        brute = sorted(combinations(range(n), k), key=lambda c: (-sum(exact[j] for j in c), c))[:200]
        got = []
        for idx in enumerate_topk(theta, k):
            got.append(idx)
            if len(got) == 200:
                break
        bad += got != brute
    ok = bad == 0
    report_criterion(7, ok, f"20 random theta, L <= 12: {bad} enumerations differ from the brute-force order "
                            "(ties: ascending sorted index tuple)")
    assert ok


# ---------------------------------------------------------------- 8

def test_c08_budget_ledger(monkeypatch):
    model = random_model(7, vocab=64)
    inst = generate_corpus(3, seed=5).documents[0]
    lines, ok = [], True
    from fisearch.saliency import integrated_gradients, lime
    scores_meter = BudgetMeter(None)
    lime(model, inst, budget=1000, rng=np.random.default_rng(0), meter=scores_meter)
    _, m, _ = run_method("lime", model, inst, SUFF, 1000, False, np.random.default_rng(0))
    ok &= scores_meter.forward_count == 996 and (m.forward_count, m.backward_count) == (1000, 0)
    lines.append(f"LIME {scores_meter.forward_count} + {m.forward_count - scores_meter.forward_count} forwards")
    scores_meter = BudgetMeter(None)
    integrated_gradients(model, inst, steps=498, meter=scores_meter)
    _, m, _ = run_method("integrated_gradients", model, inst, SUFF, 1000, False, np.random.default_rng(0))
    ok &= (scores_meter.forward_count, scores_meter.backward_count) == (498, 498)
    ok &= (m.forward_count, m.backward_count) == (502, 498)
    lines.append(f"IG {scores_meter.forward_count}f + {scores_meter.backward_count}b + "
                 f"{m.forward_count - scores_meter.forward_count} forwards")

    seen: list[set] = []
    original = Objective.evaluate

    def recording(self, keeps):
        seen[-1].update(mask_digest(k) for k in np.atleast_2d(keeps))
        return original(self, keeps)

    monkeypatch.setattr(Objective, "evaluate", recording)
    for method in ("random", "pls", "ordered", "taylor", "gradient"):
        for spec in (SUFF, COMP):
            for reduced in (True, False):
                seen.append(set())
                _, m, _ = run_method(method, model, inst, spec, 1000, reduced, np.random.default_rng(1))
                limit = 1000 if reduced else 1000 * len(spec.levels)
                spent_on_masks = m.forward_count - m.backward_count
                if method == "ordered":
                    spent_on_masks -= int(limit * 0.25)
                cell_ok = m.total <= limit and spent_on_masks == len(seen[-1])
                ok &= cell_ok
                if not cell_ok:
                    lines.append(f"{method}/{spec.metric.value}/reduced={reduced}: {m.total} passes, "
                                 f"{spent_on_masks} charged masks vs {len(seen[-1])} distinct")
    lines.append("5 search methods x 2 metrics x 2 budget modes within limit with charged evaluations = "
                 "distinct masks" if ok else "search ledger mismatch")
    report_criterion(8, ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- 9

def test_c09_counterfactual_training_is_more_robust(ct_setup):
    train_set, test_set, imputer, standard = ct_setup
    parts, ok = [], True
    for kind in [k.value for k in ReplaceKind]:
        ct = [train(train_set, TrainConfig(mode="ct", seed=s, replace=kind), imputer=imputer)
              for s in range(N_SEEDS)]
        rep = robustness_experiment({"standard": standard, "ct": ct}, test_set.documents, [kind], (0.5, 0.8),
                                    imputer=imputer, seed=0)
        cells = []
        for prop in (0.5, 0.8):
            res = rep.compare(kind, prop)
            std, ctd = rep.mean_drop(kind, prop, "standard"), rep.mean_drop(kind, prop, "ct")
            ok &= ctd < std and res.p_value < 0.05
            cells.append(f"{prop}: {std:.4f}->{ctd:.4f} p={res.p_value:.4f}")
        parts.append(f"{kind} [{', '.join(cells)}]")
    report_criterion(9, ok, "accuracy drop standard->CT at hide 0.5/0.8, 10 seeds: " + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 10

def test_c10_majority_vote_stabilises(ct_setup):
    _, test_set, _, standard = ct_setup
    kinds = ["attention", "mask", "slice", "zero"]
    voted = robustness_experiment({"standard": standard}, test_set.documents, kinds, (0.2,), masks_per_point=10)
    single = robustness_experiment({"standard": standard}, test_set.documents, kinds, (0.2,), masks_per_point=1)
    parts, ok = [], True
    for kind in kinds:
        acc10 = {c.seed: c.accuracy_after for c in voted.cells if c.replace == kind}
        acc1 = {c.seed: c.accuracy_after for c in single.cells if c.replace == kind}
        wins = sum(acc10[s] >= acc1[s] for s in range(N_SEEDS))
        ok &= wins >= 8
        parts.append(f"{kind} {wins}/10")
    report_criterion(10, ok, "10-mask vote accuracy >= single-mask accuracy at hide 0.2 in: " + ", ".join(parts)
                             + " seeds (>= 8)")
    assert ok


# ---------------------------------------------------------------- 11

def test_c11_gumbel_marginals():
    rng = np.random.default_rng(5)
    outside, total = 0, 0
    for _ in range(20):
        s = rng.normal(scale=2.0, size=8)
        draws = np.array([gumbel_binary_sample(s, rng)[0] for _ in range(10_000)])
        p = sigmoid(s)
        sigma = np.sqrt(p * (1 - p) / 10_000)
        outside += int((np.abs(draws.mean(axis=0) - p) > 3 * sigma).sum())
        total += len(s)
    ok = outside == 0
    report_criterion(11, ok, f"20 random s (8 coordinates each), 10k draws: {outside}/{total} marginals "
                             "outside 3 sigma")
    assert ok


# ---------------------------------------------------------------- 12

def test_c12_bootstrap_coverage():
    rng = np.random.default_rng(6)
    planted, covered = 0.25, 0
    for sim in range(500):
        # point effects, seed effects and cell noise around a planted mean difference
        a = planted + rng.normal(size=(50, 1)) + 0.3 * rng.normal(size=(1, 10)) + rng.normal(size=(50, 10))
        b = np.zeros((50, 10))
        res = block_bootstrap_test(a, b, BootstrapConfig(resamples=1000, seed=sim))
        covered += res.ci_low <= planted <= res.ci_high
    rate = covered / 500
    ok = rate >= 0.93
    report_criterion(12, ok, f"500 simulations (50 points x 10 seeds): 95% CI covers the planted difference "
                             f"in {rate:.1%} (>= 93%)")
    assert ok

"""Replace-function robustness, the explanation benchmark, and block-bootstrap statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    BudgetMeter,
    Capability,
    Direction,
    FISearchError,
    Instance,
    InsufficientData,
    InvalidInput,
    has_capability,
    sparsity_count,
    substream,
)
from .metrics import ObjectiveSpec, Scale, objective_score
from .replace import Imputer, ReplaceFn, ReplaceKind, build_inputs
from .saliency import binarize_topk, integrated_gradients, lime, vanilla_gradient
from .search import SEARCH_METHODS, SearchResult
from .toymodel import pad_batch, predict_docs, random_keep

logger = logging.getLogger(__name__)

DEFAULT_PROPORTIONS = (0.2, 0.5, 0.8)
MASKS_PER_POINT = 10
MARGINALIZE_MASKS_PER_POINT = 1
DEFAULT_BUDGET = 1000
SALIENCY_METHODS = ("lime", "vanilla_gradient", "integrated_gradients")


# ---------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 10_000
    seed: int = 0
    confidence: float = 0.95

    def __post_init__(self):
        if self.resamples < 1000:
            raise InvalidInput("bootstrap needs at least 1000 resamples")
        if not 0 < self.confidence < 1:
            raise InvalidInput("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class BootstrapResult:
    difference: float
    p_value: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return asdict(self)


def _as_grid(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise InvalidInput("values must be indexed by (data point, seed)")
    return v


def block_bootstrap_means(values, config: BootstrapConfig = BootstrapConfig()) -> np.ndarray:
    """Resampled grand means of a (point, seed) grid, resampling points and seeds independently."""
    v = _as_grid(values)
    n_p, n_s = v.shape
    rng = substream(config.seed, "bootstrap")
    out = np.empty(config.resamples)
    chunk = 2000
    for start in range(0, config.resamples, chunk):
        r = min(chunk, config.resamples - start)
        cp = np.stack([np.bincount(row, minlength=n_p) for row in rng.integers(n_p, size=(r, n_p))])
        cs = np.stack([np.bincount(row, minlength=n_s) for row in rng.integers(n_s, size=(r, n_s))])
        out[start:start + r] = np.einsum("rp,ps,rs->r", cp, v, cs) / (n_p * n_s)
    return out


def _percentile_ci(samples: np.ndarray, confidence: float) -> tuple[float, float]:
    tail = 100 * (1 - confidence) / 2
    lo, hi = np.percentile(samples, [tail, 100 - tail])
    return float(lo), float(hi)


def block_bootstrap_test(values_a, values_b, config: BootstrapConfig = BootstrapConfig(),
                         require_seeds: bool = True) -> BootstrapResult:
    """Two-sided test of mean(a) - mean(b) on paired (point, seed) grids.

    The p-value is twice the fraction of resamples whose difference does not share
    the observed sign (capped at 1); the CI is the percentile interval.
    """
    a, b = _as_grid(values_a), _as_grid(values_b)
    if a.shape != b.shape:
        raise InvalidInput(f"paired grids differ in shape: {a.shape} vs {b.shape}")
    n_p, n_s = a.shape
    if n_p < 2 or (require_seeds and n_s < 2):
        raise InsufficientData(f"need at least 2 points and 2 seeds, got {n_p} x {n_s}")
    d = a - b
    observed = float(d.mean())
    boots = block_bootstrap_means(d, config)
    if observed == 0:
        p = 1.0
    else:
        flipped = np.mean(boots <= 0) if observed > 0 else np.mean(boots >= 0)
        p = min(1.0, 2.0 * float(flipped))
    lo, hi = _percentile_ci(boots, config.confidence)
    return BootstrapResult(observed, p, lo, hi)


def mean_ci(values, config: BootstrapConfig = BootstrapConfig()) -> tuple[float, float, float]:
    """(mean, ci_low, ci_high) of a (point, seed) grid; the interval always contains the mean."""
    v = _as_grid(values)
    m = float(v.mean())
    if v.shape[0] < 2:
        return m, m, m
    lo, hi = _percentile_ci(block_bootstrap_means(v, config), config.confidence)
    return m, min(lo, m), max(hi, m)


# ---------------------------------------------------------------- robustness

def majority_vote(probs: np.ndarray, num_classes: int) -> int:
    """Most frequent argmax over the rows; ties go to the lowest class index."""
    votes = np.bincount(np.argmax(probs, axis=1), minlength=num_classes)
    return int(np.argmax(votes))


@dataclass
class RobustnessCell:
    replace: str
    proportion: float
    mode: str
    seed: int
    accuracy_before: float
    accuracy_after: float

    @property
    def drop(self) -> float:
        return self.accuracy_before - self.accuracy_after

    def to_row(self) -> dict:
        return {**asdict(self), "drop": self.drop}


@dataclass
class RobustnessReport:
    cells: list[RobustnessCell]
    # (replace, proportion, mode) -> points x seeds grid of per-point drops (correct before - after)
    point_drops: dict[tuple[str, float, str], np.ndarray] = field(default_factory=dict)

    def mean_drop(self, replace: str, proportion: float, mode: str) -> float:
        return float(np.mean([c.drop for c in self.cells
                              if (c.replace, c.proportion, c.mode) == (replace, proportion, mode)]))

    def compare(self, replace: str, proportion: float, mode_a: str = "standard", mode_b: str = "ct",
                config: BootstrapConfig = BootstrapConfig()) -> BootstrapResult:
        """Bootstrap test of drop(mode_a) - drop(mode_b); positive means mode_b is more robust."""
        return block_bootstrap_test(self.point_drops[(replace, proportion, mode_a)],
                                    self.point_drops[(replace, proportion, mode_b)], config)

    def write_csv(self, path: str | Path, digest: str | None = None) -> None:
        rows = [c.to_row() for c in self.cells]
        _write_csv(path, rows, ["replace", "proportion", "mode", "seed", "accuracy_before",
                                "accuracy_after", "drop"], digest)


def _ablated_rows(fn: ReplaceFn, docs: Sequence[Instance], proportion: float, masks: int,
                  rng: np.random.Generator, imputer: Imputer | None):
    keep_share = float(1 - Fraction(str(proportion)))
    rows = []
    for d in docs:
        n_keep = sparsity_count(d.n_free, keep_share) if keep_share > 0 else 1
        for _ in range(masks):
            keep = random_keep(d, n_keep, rng)
            rows.extend(build_inputs(fn, d, keep, rng, imputer, samples=1))
    return rows


def _predict_rows(model, rows, batch: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, len(rows), batch):
        out.append(model.predict_inputs(*pad_batch(rows[start:start + batch])))
    return np.concatenate(out)


def robustness_experiment(models: Mapping[str, Sequence], docs: Sequence[Instance],
                          replace_fns: Sequence[ReplaceFn | str] = tuple(ReplaceKind),
                          proportions: Sequence[float] = DEFAULT_PROPORTIONS,
                          masks_per_point: int = MASKS_PER_POINT,
                          marginalize_masks: int = MARGINALIZE_MASKS_PER_POINT,
                          imputer: Imputer | None = None, seed: int = 0) -> RobustnessReport:
    """Accuracy under random ablations, by majority vote over sampled masks.

    ``models`` maps a training-mode name to one model per seed. For a given seed,
    replace function and proportion, every mode sees the same sampled masks and
    imputations, so mode differences are paired.
    """
    if masks_per_point < 1 or marginalize_masks < 1:
        raise InvalidInput("masks per point must be >= 1")
    for p in proportions:
        if not 0 <= p <= 1:
            raise InvalidInput(f"hide proportion {p} outside [0, 1]")
    modes = list(models)
    n_seeds = {len(models[m]) for m in modes}
    if len(n_seeds) != 1:
        raise InvalidInput("every mode needs the same number of seeds")
    n_seeds = n_seeds.pop()
    labels = np.array([d.label for d in docs])
    fns = [f if isinstance(f, ReplaceFn) else ReplaceFn(f) for f in replace_fns]
    correct_before = {(m, s): np.argmax(predict_docs(models[m][s], docs), axis=1) == labels
                      for m in modes for s in range(n_seeds)}
    cells, grids = [], {}
    for fn in fns:
        masks = marginalize_masks if fn.kind is ReplaceKind.MARGINALIZE else masks_per_point
        for prop in proportions:
            for s in range(n_seeds):
                rng = substream(seed, "robustness", fn.kind.value, repr(float(prop)), s)
                rows = _ablated_rows(fn, docs, prop, masks, rng, imputer)
                for m in modes:
                    model = models[m][s]
                    probs = _predict_rows(model, rows).reshape(len(docs), masks, -1)
                    votes = np.array([majority_vote(p, probs.shape[-1]) for p in probs])
                    after = votes == labels
                    before = correct_before[(m, s)]
                    cells.append(RobustnessCell(fn.kind.value, float(prop), m, s,
                                                float(before.mean()), float(after.mean())))
                    grids.setdefault((fn.kind.value, float(prop), m), np.zeros((len(docs), n_seeds)))[:, s] = (
                        before.astype(float) - after.astype(float))
    return RobustnessReport(cells, grids)


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchmarkCell:
    mode: str
    seed: int
    instance_id: str
    method: str
    metric: str
    value: float
    forward_passes: int
    backward_passes: int

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkSummary:
    mode: str
    method: str
    metric: str
    mean: float
    ci_low: float
    ci_high: float
    mean_passes: float
    n_cells: int
    best: bool = False
    best_p_value: float | None = None


@dataclass
class BenchmarkReport:
    cells: list[BenchmarkCell]
    summaries: list[BenchmarkSummary]
    failures: list[dict]
    trajectories: dict[tuple[str, str, str], np.ndarray]
    config: dict

    def summary(self, method: str, metric: str, mode: str = "standard") -> BenchmarkSummary:
        for s in self.summaries:
            if (s.method, s.metric, s.mode) == (method, metric, mode):
                return s
        raise KeyError((method, metric, mode))

    def grid(self, method: str, metric: str, mode: str = "standard") -> np.ndarray:
        return _grid(self.cells, mode, method, metric)

    def write(self, out_dir: str | Path, digest: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "benchmark_cells.csv", out / "benchmark_summary.csv", out / "benchmark_summary.json"]
        _write_csv(paths[0], [c.to_row() for c in self.cells], list(BenchmarkCell.__dataclass_fields__),
                   digest)
        summary_rows = [asdict(s) for s in self.summaries]
        _write_csv(paths[1], summary_rows, list(BenchmarkSummary.__dataclass_fields__), digest)
        paths[2].write_text(json.dumps({"config_digest": digest, "config": self.config,
                                        "summaries": summary_rows, "failures": self.failures},
                                       indent=2, sort_keys=True) + "\n")
        for (mode, method, metric), traj in sorted(self.trajectories.items()):
            p = out / f"trajectory_{mode}_{method}_{metric}.csv"
            rows = [{"step": int(r[0]), "mean_best": r[1], "ci_low": r[2], "ci_high": r[3]} for r in traj]
            _write_csv(p, rows, ["step", "mean_best", "ci_low", "ci_high"], digest)
            paths.append(p)
        return paths


def _grid(cells: Sequence[BenchmarkCell], mode: str, method: str, metric: str) -> np.ndarray:
    sel = [c for c in cells if (c.mode, c.method, c.metric) == (mode, method, metric)]
    ids = sorted({c.instance_id for c in sel})
    seeds = sorted({c.seed for c in sel})
    grid = np.full((len(ids), len(seeds)), np.nan)
    row = {k: i for i, k in enumerate(ids)}
    col = {k: j for j, k in enumerate(seeds)}
    for c in sel:
        grid[row[c.instance_id], col[c.seed]] = c.value
    return grid


def saliency_masks(method: str, model, instance: Instance, spec: ObjectiveSpec, budget: int,
                   rng: np.random.Generator, meter: BudgetMeter):
    """Score-then-threshold masks; spends all but one pass per level on the scores."""
    n_levels = len(spec.levels)
    if method == "lime":
        scores = lime(model, instance, budget=budget, n_levels=n_levels, rng=rng, meter=meter)
    elif method == "integrated_gradients":
        scores = integrated_gradients(model, instance, steps=(budget - n_levels) // 2, meter=meter)
    elif method == "vanilla_gradient":
        scores = vanilla_gradient(model, instance, meter=meter)
    else:
        raise InvalidInput(f"unknown saliency method {method!r}")
    return binarize_topk(scores, instance, spec)


def run_method(method: str, model, instance: Instance, spec: ObjectiveSpec, budget_per_level: int,
               reduced: bool, rng: np.random.Generator, imputer: Imputer | None = None):
    """(objective value, meter, search result or None) for one method on one instance.

    Searches get ``budget_per_level`` passes per level (or that total in reduced
    mode). Saliency methods always get ``budget_per_level`` in total: their scores
    are computed once and reused across levels.
    """
    n_levels = len(spec.levels)
    if method in SALIENCY_METHODS:
        meter = BudgetMeter(budget_per_level)
        masks = saliency_masks(method, model, instance, spec, budget_per_level, rng, meter)
        value = objective_score(spec, model, instance, masks, rng, imputer, meter)
        return value, meter, None
    if method not in SEARCH_METHODS:
        raise InvalidInput(f"unknown method {method!r}")
    fn: Callable = SEARCH_METHODS[method]
    if method == "exhaustive":
        result: SearchResult = fn(model, instance, spec, imputer=imputer, rng=rng)
        meter = BudgetMeter(None)
        meter.forward_count, meter.backward_count = result.forward_passes, result.backward_passes
        return result.objective, meter, result
    total = budget_per_level if reduced else budget_per_level * n_levels
    meter = BudgetMeter(total)
    result = fn(model, instance, spec, meter=meter, rng=rng, imputer=imputer)
    return result.objective, meter, result


def _trajectory(results: list[SearchResult]) -> np.ndarray:
    """Per evaluation step: mean over cells of the level-averaged best-so-far value, with a normal 95% CI."""
    curves = []
    for r in results:
        per_level = []
        length = max(len(lv.trace) for lv in r.levels)
        for lv in r.levels:
            vals = np.array([v for _, v in lv.trace])
            per_level.append(np.concatenate([vals, np.full(length - len(vals), vals[-1])]))
        curves.append(np.mean(per_level, axis=0))
    length = max(len(c) for c in curves)
    mat = np.array([np.concatenate([c, np.full(length - len(c), c[-1])]) for c in curves])
    mean = mat.mean(axis=0)
    half = 1.96 * mat.std(axis=0, ddof=1) / math.sqrt(len(mat)) if len(mat) > 1 else np.zeros(length)
    return np.column_stack([np.arange(1, length + 1), mean, mean - half, mean + half])


def benchmark(methods: Sequence[str], models: Mapping[str, Sequence], instances: Sequence[Instance],
              metrics: Sequence[Direction | str] = (Direction.SUFFICIENCY, Direction.COMPREHENSIVENESS),
              budget: int = DEFAULT_BUDGET, reduced: bool = False, replace_fn: ReplaceFn | str = "attention",
              scale: Scale | str = Scale.PROB, imputer: Imputer | None = None, seed: int = 0,
              bootstrap: BootstrapConfig = BootstrapConfig(), trajectories: bool = True,
              progress: Callable[[str], None] | None = None) -> BenchmarkReport:
    """Run every method on every (mode, seed, instance, metric) cell and aggregate.

    A method that fails on a cell is recorded in ``failures`` and excluded from the
    aggregate for that method. The best method per (mode, metric) is flagged when its
    paired bootstrap test against every other method gives p < .05.
    """
    fn = replace_fn if isinstance(replace_fn, ReplaceFn) else ReplaceFn(replace_fn)
    cells: list[BenchmarkCell] = []
    failures: list[dict] = []
    traces: dict[tuple[str, str, str], list[SearchResult]] = {}
    for metric in metrics:
        spec = ObjectiveSpec(Direction(metric), Scale(scale), replace_fn=fn)
        for mode in sorted(models):
            for s, model in enumerate(models[mode]):
                for inst in instances:
                    for method in methods:
                        rng = substream(seed, "benchmark", mode, s, inst.id, method, spec.metric.value)
                        try:
                            value, meter, result = run_method(method, model, inst, spec, budget, reduced, rng,
                                                              imputer)
                        except FISearchError as exc:
                            failures.append({"mode": mode, "seed": s, "instance_id": inst.id, "method": method,
                                             "metric": spec.metric.value, "error": type(exc).__name__,
                                             "code": getattr(exc, "code", ""), "message": str(exc)})
                            continue
                        cells.append(BenchmarkCell(mode, s, inst.id, method, spec.metric.value, float(value),
                                                   meter.forward_count, meter.backward_count))
                        if result is not None and trajectories:
                            traces.setdefault((mode, method, spec.metric.value), []).append(result)
                if progress:
                    progress(f"{spec.metric.value} {mode} seed {s} done")
    if failures:
        logger.warning("%d method/instance cells failed and were excluded", len(failures))
    summaries = _summarise(cells, bootstrap)
    trajs = {k: _trajectory(v) for k, v in traces.items()}
    config = {"methods": list(methods), "modes": sorted(models), "n_seeds": {m: len(models[m]) for m in models},
              "n_instances": len(instances), "metrics": [Direction(m).value for m in metrics],
              "budget": budget, "reduced": reduced, "replace_fn": fn.kind.value, "scale": Scale(scale).value,
              "seed": seed, "bootstrap_resamples": bootstrap.resamples}
    return BenchmarkReport(cells, summaries, failures, trajs, config)


def _complete(grid: np.ndarray) -> np.ndarray:
    return grid[~np.isnan(grid).any(axis=1)]


def _summarise(cells: list[BenchmarkCell], config: BootstrapConfig) -> list[BenchmarkSummary]:
    groups = sorted({(c.mode, c.metric) for c in cells})
    out = []
    for mode, metric in groups:
        methods = sorted({c.method for c in cells if (c.mode, c.metric) == (mode, metric)})
        direction = Direction(metric)
        grids = {m: _grid(cells, mode, m, metric) for m in methods}
        rows = []
        for m in methods:
            g = _complete(grids[m])
            sel = [c for c in cells if (c.mode, c.metric, c.method) == (mode, metric, m)]
            mean, lo, hi = mean_ci(g, config) if len(g) else (math.nan, math.nan, math.nan)
            rows.append(BenchmarkSummary(mode, m, metric, mean, lo, hi,
                                         float(np.mean([c.forward_passes + c.backward_passes for c in sel])),
                                         len(sel)))
        valid = [r for r in rows if not math.isnan(r.mean)]
        if len(valid) > 1:
            best = (min if direction.minimize else max)(valid, key=lambda r: r.mean)
            worst_p = 0.0
            for other in valid:
                if other is best:
                    continue
                a, b = grids[best.method], grids[other.method]
                both = ~(np.isnan(a).any(axis=1) | np.isnan(b).any(axis=1))
                try:
                    res = block_bootstrap_test(a[both], b[both], config, require_seeds=False)
                except FISearchError:
                    worst_p = 1.0
                    continue
                worst_p = max(worst_p, res.p_value)
            best.best_p_value = worst_p
            best.best = worst_p < 0.05
        out.extend(rows)
    return out


# ---------------------------------------------------------------- io

def _write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str], digest: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns) + (["config_digest"] if digest else []))
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, **({"config_digest": digest} if digest else {})})


def model_supports(method: str, model) -> bool:
    """Whether ``model`` exposes what ``method`` needs."""
    if method in ("gradient", "taylor"):
        return has_capability(model, Capability.MASK_GRADIENTS)
    if method in ("vanilla_gradient", "integrated_gradients"):
        return has_capability(model, Capability.EMBEDDING_GRADIENTS)
    return True

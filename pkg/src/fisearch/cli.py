"""Command-line front end: corpus generation, training, robustness, explanation, benchmark, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

from .core import Capability, Direction, FISearchError, InvalidInput, SparsitySpec, substream
from .experiments import (
    SALIENCY_METHODS,
    BootstrapConfig,
    benchmark,
    model_supports,
    robustness_experiment,
    run_method,
)
from .metrics import ObjectiveSpec, Scale
from .plotting import render_report
from .replace import Imputer, ReplaceFn, ReplaceKind, fit_imputer
from .search import SEARCH_METHODS
from .toymodel import SyntheticCorpus, ToyClassifier, TrainConfig, TrainMode, checkpoint_meta, generate_corpus, train

logger = logging.getLogger("fisearch")

COMMANDS = ("gen-corpus", "train", "robustness", "explain", "benchmark", "report")
OUTPUT_ROOT_ENV = "FISEARCH_OUTPUT_ROOT"
LOCK_NAME = ".fisearch.lock"
ALL_METHODS = tuple(SEARCH_METHODS) + SALIENCY_METHODS


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    output: str | None = None
    corpus: str | None = None
    models: list[str] = field(default_factory=list)
    imputer: str | None = None
    methods: list[str] = field(default_factory=lambda: ["random", "pls"])
    replace: str = "attention"
    budget: int = 1000
    reduced: bool = False
    metrics: list[str] = field(default_factory=lambda: ["suff", "comp"])
    levels: list[float] | None = None
    scale: str = "prob"
    # corpus
    n_docs: int = 4000
    n_train: int = 1000
    query_len: int = 0
    topic_share: float = 0.5
    # training
    modes: list[str] = field(default_factory=lambda: ["standard", "ct"])
    n_seeds: int = 10
    epochs: int = 20
    learning_rate: float = 0.5
    batch_size: int = 16
    capabilities: list[str] | None = None
    # evaluation
    proportions: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.8])
    masks_per_point: int = 10
    replace_fns: list[str] = field(default_factory=lambda: [k.value for k in ReplaceKind])
    n_instances: int = 200
    instance_ids: list[str] | None = None
    resamples: int = 10_000
    input: str | None = None

    def resolved_output(self) -> Path:
        if self.output:
            return Path(self.output)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.command

    def digest(self) -> str:
        """Hash of every setting that affects results (the output location does not)."""
        d = asdict(self)
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def snapshot(self) -> dict:
        d = asdict(self)
        d["output"] = str(self.resolved_output())
        return {"config": d, "config_digest": self.digest()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    code: str
    message: str


def _sparsity_diagnostics(levels) -> list[Diagnostic]:
    out = []
    for s in levels or []:
        if not 0 < float(s) <= 1:
            out.append(Diagnostic("error", "invalid-sparsity", f"sparsity level {s} is outside (0, 1]"))
    return out


def _needs_models(cmd: str) -> bool:
    return cmd in ("robustness", "explain", "benchmark")


def validate(config: RunConfig) -> list[Diagnostic]:
    """Static checks of a run configuration; returns diagnostics instead of raising."""
    diags: list[Diagnostic] = []
    err = lambda code, msg: diags.append(Diagnostic("error", code, msg))  # noqa: E731
    if config.command not in COMMANDS:
        err("unknown-command", f"unknown command {config.command!r}; expected one of {COMMANDS}")
        return diags
    for m in config.methods:
        if m not in ALL_METHODS:
            err("unknown-method", f"unknown method {m!r}; expected one of {ALL_METHODS}")
    for r in [config.replace, *config.replace_fns]:
        if r not in {k.value for k in ReplaceKind}:
            err("unknown-replace", f"unknown replace function {r!r}")
    for m in config.metrics:
        if m not in {d.value for d in Direction}:
            err("unknown-metric", f"unknown metric {m!r}")
    for m in config.modes:
        if m not in {t.value for t in TrainMode}:
            err("unknown-mode", f"unknown training mode {m!r}")
    if config.scale not in {s.value for s in Scale}:
        err("unknown-scale", f"unknown scale {config.scale!r}")
    diags += _sparsity_diagnostics(config.levels)
    for p in config.proportions:
        if not 0 <= p <= 1:
            err("invalid-proportion", f"hide proportion {p} is outside [0, 1]")
    if config.budget < 1:
        err("invalid-budget", "budget must be positive")
    if config.resamples < 1000:
        err("invalid-resamples", "bootstrap needs at least 1000 resamples")
    if config.n_train < 1:
        err("invalid-split", f"n_train={config.n_train} must be positive")
    if config.n_docs < 1:
        err("invalid-corpus-size", "n_docs must be positive")
    if config.capabilities is not None:
        for c in config.capabilities:
            if c not in {k.value for k in Capability}:
                err("unknown-capability", f"unknown capability {c!r}")

    cmd = config.command
    if cmd in ("train", "robustness", "explain", "benchmark"):
        if not config.corpus:
            err("missing-input", f"{cmd} needs a corpus path")
        elif not Path(config.corpus).exists():
            err("missing-input", f"corpus file {config.corpus} does not exist")
    if cmd == "report":
        if not config.input or not Path(config.input).is_dir():
            err("missing-input", f"report needs an existing input directory, got {config.input!r}")
    if _needs_models(cmd):
        if not config.models:
            err("missing-input", f"{cmd} needs at least one model checkpoint")
        for path in config.models:
            if not Path(path).exists():
                err("missing-input", f"model checkpoint {path} does not exist")
                continue
            try:
                model = ToyClassifier.load(path)
            except (OSError, ValueError, KeyError, FISearchError) as exc:
                err("bad-checkpoint", f"cannot read checkpoint {path}: {exc}")
                continue
            if cmd in ("explain", "benchmark"):
                for m in config.methods:
                    if m in ALL_METHODS and not model_supports(m, model):
                        err("unsupported-model", f"method {m!r} needs gradients but {path} is "
                                                 f"{'/'.join(sorted(c.value for c in model.capabilities))}")
    uses_marginalize = (
        (cmd in ("explain", "benchmark") and config.replace == ReplaceKind.MARGINALIZE.value)
        or (cmd == "robustness" and ReplaceKind.MARGINALIZE.value in config.replace_fns)
    )
    if uses_marginalize:
        if not config.imputer:
            err("missing-imputer", "marginalize needs an imputer artifact (imputer.json from the train command)")
        elif not Path(config.imputer).exists():
            err("missing-imputer", f"imputer artifact {config.imputer} does not exist")
    if cmd in ("explain", "benchmark") and config.levels:
        n_levels = len(config.levels)
        if config.budget < n_levels:
            err("invalid-budget", f"budget {config.budget} is smaller than the {n_levels} sparsity levels")
    return diags


# ---------------------------------------------------------------- run plumbing

@contextmanager
def run_lock(out_dir: Path) -> Iterator[None]:
    """Exclusive writer lock on an output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError("locked", f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class RunError(Exception):
    def __init__(self, code: str, message: str, diagnostics: Sequence[Diagnostic] = ()):
        super().__init__(message)
        self.code = code
        self.diagnostics = list(diagnostics)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, rows: list[dict], columns: list[str], digest: str) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns + ["config_digest"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_digest": digest})
    return path


def _load_corpus(config: RunConfig) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    corpus = SyntheticCorpus.read_jsonl(config.corpus)
    if config.n_train >= len(corpus):
        raise InvalidInput(f"corpus has {len(corpus)} documents, cannot hold out after n_train={config.n_train}")
    return corpus.split(config.n_train)


def _load_models(config: RunConfig) -> dict[str, list[ToyClassifier]]:
    """Checkpoints grouped by the training mode recorded in their metadata, ordered by seed."""
    groups: dict[str, list[tuple[int, str, ToyClassifier]]] = {}
    for i, path in enumerate(config.models):
        meta = checkpoint_meta(path)
        groups.setdefault(meta.get("mode", "standard"), []).append((meta.get("seed", i), path,
                                                                     ToyClassifier.load(path)))
    return {m: [t[2] for t in sorted(v, key=lambda t: (t[0], t[1]))] for m, v in sorted(groups.items())}


def _load_imputer(config: RunConfig) -> Imputer | None:
    return Imputer.load(config.imputer) if config.imputer else None


def _spec(config: RunConfig, metric: str) -> ObjectiveSpec:
    direction = Direction(metric)
    levels = SparsitySpec(tuple(config.levels), direction) if config.levels else None
    return ObjectiveSpec(direction, Scale(config.scale), levels, ReplaceFn(config.replace))


def _instances(config: RunConfig, docs):
    if config.instance_ids:
        by_id = {d.id: d for d in docs}
        missing = [i for i in config.instance_ids if i not in by_id]
        if missing:
            raise InvalidInput(f"unknown instance ids: {missing}")
        return [by_id[i] for i in config.instance_ids]
    return list(docs)[:config.n_instances]


def cmd_gen_corpus(config: RunConfig, out: Path, digest: str) -> list[Path]:
    corpus = generate_corpus(config.n_docs, seed=config.seed, query_len=config.query_len,
                             topic_share=config.topic_share)
    path = out / "corpus.jsonl"
    corpus.write_jsonl(path)
    return [path]


def cmd_train(config: RunConfig, out: Path, digest: str) -> list[Path]:
    tr, _ = _load_corpus(config)
    imputer = fit_imputer(tr)
    paths = [out / "imputer.json"]
    imputer.save(paths[0])
    log_rows, manifest = [], []
    caps = frozenset(Capability(c) for c in config.capabilities) if config.capabilities is not None else None
    for mode in config.modes:
        for s in range(config.n_seeds):
            tc = TrainConfig(epochs=config.epochs, learning_rate=config.learning_rate,
                             batch_size=config.batch_size, mode=mode, replace=config.replace,
                             seed=config.seed * 1000 + s)
            history: list = []
            model = train(tr, tc, imputer=imputer, history=history)
            if caps is not None:
                model = model.without(*(set(Capability) - caps))
            path = out / f"model_{mode}_s{s:02d}.json"
            model.save(path, meta={"mode": mode, "seed": s, "train_config": tc.to_dict(), "config_digest": digest})
            paths.append(path)
            manifest.append(str(path))
            log_rows += [{"mode": mode, "seed": s, **h} for h in history]
            logger.info("trained %s seed %d: final train accuracy %.4f", mode, s, history[-1]["train_accuracy"])
    paths.append(_write_rows(out / "train_log.csv", log_rows, ["mode", "seed", "epoch", "loss", "train_accuracy"],
                             digest))
    paths.append(_write_json(out / "models.json", {"models": manifest, "config_digest": digest}))
    return paths


def cmd_robustness(config: RunConfig, out: Path, digest: str) -> list[Path]:
    _, test = _load_corpus(config)
    models = _load_models(config)
    report = robustness_experiment(models, test.documents, config.replace_fns, config.proportions,
                                   config.masks_per_point, imputer=_load_imputer(config), seed=config.seed)
    paths = [out / "robustness_cells.csv"]
    report.write_csv(paths[0], digest)
    tests = []
    modes = sorted(models)
    if "standard" in models and "ct" in models and len(models["standard"]) > 1:
        boot = BootstrapConfig(config.resamples, config.seed)
        for rep in config.replace_fns:
            for p in config.proportions:
                r = report.compare(rep, float(p), "standard", "ct", boot)
                tests.append({"replace": rep, "proportion": float(p), "drop_standard_minus_ct": r.difference,
                              "p_value": r.p_value, "ci_low": r.ci_low, "ci_high": r.ci_high})
    paths.append(_write_rows(out / "robustness_tests.csv", tests,
                             ["replace", "proportion", "drop_standard_minus_ct", "p_value", "ci_low", "ci_high"],
                             digest))
    means = [{"replace": rep, "proportion": float(p), "mode": m,
              "mean_drop": report.mean_drop(rep, float(p), m)}
             for rep in config.replace_fns for p in config.proportions for m in modes]
    paths.append(_write_json(out / "robustness_summary.json",
                             {"config_digest": digest, "mean_drops": means, "tests": tests}))
    return paths


def cmd_explain(config: RunConfig, out: Path, digest: str) -> list[Path]:
    _, test = _load_corpus(config)
    imputer = _load_imputer(config)
    insts = _instances(config, test.documents)
    rows, paths, failures = [], [], []
    res_dir = out / "explanations"
    res_dir.mkdir(parents=True, exist_ok=True)
    for mi, path in enumerate(config.models):
        model = ToyClassifier.load(path)
        for inst in insts:
            for metric in config.metrics:
                spec = _spec(config, metric)
                for method in config.methods:
                    rng = substream(config.seed, "explain", mi, inst.id, method, metric)
                    try:
                        value, meter, result = run_method(method, model, inst, spec, config.budget,
                                                          config.reduced, rng, imputer)
                    except FISearchError as exc:
                        failures.append({"model": str(path), "instance_id": inst.id, "method": method,
                                         "metric": metric, "code": exc.code, "message": str(exc)})
                        logger.warning("%s on %s (%s) failed: %s", method, inst.id, metric, exc)
                        continue
                    record = result.to_json() if result is not None else {
                        "instance_id": inst.id, "method": method, "direction": metric, "objective": value,
                        "forward_passes": meter.forward_count, "backward_passes": meter.backward_count}
                    record.update({"model": str(path), "config_digest": digest})
                    p = res_dir / f"m{mi:02d}_{inst.id}_{method}_{metric}.json"
                    paths.append(_write_json(p, record))
                    rows.append({"model": str(path), "instance_id": inst.id, "method": method, "metric": metric,
                                 "value": value, "forward_passes": meter.forward_count,
                                 "backward_passes": meter.backward_count})
    paths.append(_write_rows(out / "metrics.csv", rows, ["model", "instance_id", "method", "metric", "value",
                                                         "forward_passes", "backward_passes"], digest))
    paths.append(_write_json(out / "failures.json", {"config_digest": digest, "failures": failures}))
    if not rows:
        raise RunError("all-failed", f"every explanation failed; first: {failures[0]['message']}")
    return paths


def cmd_benchmark(config: RunConfig, out: Path, digest: str) -> list[Path]:
    _, test = _load_corpus(config)
    models = _load_models(config)
    insts = _instances(config, test.documents)
    if config.levels:
        logger.warning("benchmark uses the default sparsity levels; 'levels' is ignored")
    report = benchmark(config.methods, models, insts, config.metrics, config.budget, config.reduced,
                       config.replace, config.scale, _load_imputer(config), config.seed,
                       BootstrapConfig(config.resamples, config.seed), progress=logger.info)
    return report.write(out, digest)


def cmd_report(config: RunConfig, out: Path, digest: str) -> list[Path]:
    paths = render_report(config.input, out)
    if not paths:
        raise RunError("missing-input", f"no trajectory or robustness CSVs found in {config.input}")
    return paths


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "robustness": cmd_robustness,
    "explain": cmd_explain,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def run(config: RunConfig) -> tuple[int, list[Path]]:
    """Execute one command. Returns (exit status, written artifacts).

    Failures write ``error.json`` (when an output directory is available) and a
    one-line JSON error record on stderr.
    """
    out = config.resolved_output()
    diags = validate(config)
    errors = [d for d in diags if d.level == "error"]
    try:
        if errors:
            raise RunError(errors[0].code, errors[0].message, errors)
        digest = config.digest()
        with run_lock(out):
            (out / "error.json").unlink(missing_ok=True)
            paths = [_write_json(out / "config.json", config.snapshot())]
            paths += HANDLERS[config.command](config, out, digest)
        return 0, paths
    except (RunError, FISearchError, OSError, ValueError) as exc:
        record = {"status": "error", "command": config.command,
                  "code": getattr(exc, "code", type(exc).__name__),
                  "error": type(exc).__name__, "message": str(exc),
                  "diagnostics": [asdict(d) for d in getattr(exc, "diagnostics", [])]}
        if not isinstance(exc, RunError):
            logger.debug("%s", traceback.format_exc())
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if not (isinstance(exc, RunError) and exc.code == "locked"):
            try:
                out.mkdir(parents=True, exist_ok=True)
                _write_json(out / "error.json", record)
            except OSError:
                pass
        return (2 if isinstance(exc, RunError) else 1), []


# ---------------------------------------------------------------- argparse

def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _strs(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fisearch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
        s.add_argument("--seed", type=int)
        s.add_argument("--output", "-o")
        s.add_argument("--validate-only", action="store_true", help="print diagnostics and exit")
        if name in ("gen-corpus",):
            s.add_argument("--n-docs", type=int)
            s.add_argument("--query-len", type=int)
            s.add_argument("--topic-share", type=float)
        if name in ("train", "robustness", "explain", "benchmark"):
            s.add_argument("--corpus")
            s.add_argument("--n-train", type=int)
        if name in ("robustness", "explain", "benchmark"):
            s.add_argument("--models", type=_strs, help="comma-separated checkpoint paths")
            s.add_argument("--imputer")
        if name == "train":
            s.add_argument("--modes", type=_strs)
            s.add_argument("--n-seeds", type=int)
            s.add_argument("--epochs", type=int)
            s.add_argument("--learning-rate", type=float)
            s.add_argument("--batch-size", type=int)
            s.add_argument("--replace")
            s.add_argument("--capabilities", type=_strs)
        if name == "robustness":
            s.add_argument("--replace-fns", type=_strs)
            s.add_argument("--proportions", type=_floats)
            s.add_argument("--masks-per-point", type=int)
            s.add_argument("--resamples", type=int)
        if name in ("explain", "benchmark"):
            s.add_argument("--methods", type=_strs)
            s.add_argument("--replace")
            s.add_argument("--budget", type=int)
            s.add_argument("--reduced", action="store_true", default=None,
                           help="budget is the total across levels instead of per level")
            s.add_argument("--metrics", type=_strs)
            s.add_argument("--scale")
            s.add_argument("--n-instances", type=int)
            s.add_argument("--instance-ids", type=_strs)
        if name == "explain":
            s.add_argument("--levels", type=_floats)
        if name == "benchmark":
            s.add_argument("--resamples", type=int)
        if name == "report":
            s.add_argument("--input")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    base["command"] = args.command
    skip = {"config", "command", "verbose", "validate_only"}
    for k, v in vars(args).items():
        if k not in skip and v is not None:
            base[k] = v
    return RunConfig.from_dict(base)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
    except (OSError, ValueError, TypeError, FISearchError) as exc:
        print(json.dumps({"status": "error", "command": args.command, "code": "bad-config",
                          "error": type(exc).__name__, "message": str(exc), "diagnostics": []}), file=sys.stderr)
        return 2
    if args.validate_only:
        diags = validate(config)
        for d in diags:
            print(json.dumps(asdict(d)))
        return 2 if any(d.level == "error" for d in diags) else 0
    status, paths = run(config)
    if status == 0:
        for p in paths:
            print(p)
    return status


if __name__ == "__main__":
    sys.exit(main())

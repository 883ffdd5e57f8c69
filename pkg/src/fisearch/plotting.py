"""SVG charts for benchmark trajectories and robustness summaries."""

from __future__ import annotations

import csv
import re
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib.figure import Figure

# fixed ids and no timestamp, so identical data gives identical files
SVG_RC = {"svg.hashsalt": "fisearch", "svg.fonttype": "none", "font.size": 9}
TRAJECTORY_RE = re.compile(r"trajectory_(?P<mode>[^_]+)_(?P<method>.+)_(?P<metric>suff|comp)\.csv$")


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _save_svg(fig: Figure, path: Path, data_comment: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "fisearch"})
    text = path.read_text()
    # "--" is not allowed inside an XML comment
    comment = "<!-- data\n" + data_comment.replace("--", "- -") + "-->\n"
    head, sep, rest = text.partition("<svg")
    path.write_text(head + comment + sep + rest)
    return path


def trajectory_chart(curves: Mapping[str, np.ndarray], path: str | Path, title: str = "",
                     ylabel: str = "mean best objective") -> Path:
    """Best-so-far curves, one line per method with a shaded CI band.

    Each curve is an array of rows (step, mean, ci_low, ci_high).
    """
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        lines = ["method,step,mean_best,ci_low,ci_high"]
        for name in sorted(curves):
            c = np.asarray(curves[name], dtype=float)
            ax.plot(c[:, 0], c[:, 1], label=name, lw=1.2)
            ax.fill_between(c[:, 0], c[:, 2], c[:, 3], alpha=0.2)
            lines += [f"{name},{int(r[0])},{r[1]:.6g},{r[2]:.6g},{r[3]:.6g}" for r in c]
        ax.set_xlabel("objective evaluations per level")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save_svg(fig, Path(path), "\n".join(lines) + "\n")


def box_stats(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": len(v), "min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())}


def robustness_summary(rows: Sequence[dict]) -> list[dict]:
    """Box statistics of the accuracy drop per (replace, proportion, mode), over seeds."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r["replace"], float(r["proportion"]), r["mode"])].append(float(r["drop"]))
    return [{"replace": k[0], "proportion": k[1], "mode": k[2], **box_stats(v)}
            for k, v in sorted(groups.items())]


def robustness_chart(rows: Sequence[dict], path: str | Path) -> Path:
    """Box plots of accuracy drop, one panel per replace function."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r["replace"], float(r["proportion"]), r["mode"])].append(float(r["drop"]))
    replaces = sorted({k[0] for k in groups})
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(3 * len(replaces), 3.5))
        axes = fig.subplots(1, len(replaces), squeeze=False, sharey=True)[0]
        for ax, rep in zip(axes, replaces):
            keys = sorted(k for k in groups if k[0] == rep)
            ax.boxplot([groups[k] for k in keys], widths=0.6)
            ax.set_xticks(range(1, len(keys) + 1))
            ax.set_xticklabels([f"{k[1]:g}\n{k[2]}" for k in keys], fontsize=7)
            ax.set_title(rep)
        axes[0].set_ylabel("accuracy drop")
        fig.tight_layout()
    lines = ["replace,proportion,mode,drops"]
    lines += [f"{k[0]},{k[1]:g},{k[2]},{' '.join(f'{x:.6g}' for x in v)}" for k, v in sorted(groups.items())]
    return _save_svg(fig, Path(path), "\n".join(lines) + "\n")


def render_report(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Turn a run directory's CSVs into SVG charts and box-summary CSVs."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    written: list[Path] = []
    grouped: dict[tuple[str, str], dict[str, np.ndarray]] = defaultdict(dict)
    for p in sorted(in_dir.glob("trajectory_*.csv")):
        m = TRAJECTORY_RE.match(p.name)
        if not m:
            continue
        rows = read_csv(p)
        if not rows:
            continue
        arr = np.array([[float(r["step"]), float(r["mean_best"]), float(r["ci_low"]), float(r["ci_high"])]
                        for r in rows])
        grouped[(m["mode"], m["metric"])][m["method"]] = arr
    for (mode, metric), curves in sorted(grouped.items()):
        written.append(trajectory_chart(curves, out_dir / f"trajectories_{mode}_{metric}.svg",
                                        title=f"{metric} ({mode})", ylabel=f"mean best {metric}"))
    rob = in_dir / "robustness_cells.csv"
    if rob.exists():
        rows = read_csv(rob)
        summary = robustness_summary(rows)
        out = out_dir / "robustness_box_summary.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]))
            w.writeheader()
            w.writerows(summary)
        written += [out, robustness_chart(rows, out_dir / "robustness_drops.svg")]
    return written

"""Report documents, delimited tables and figures."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ddnav.errors import ParseError  # noqa: E402
from ddnav.eval import EpisodeResult, MetricsReport, RoundsResult  # noqa: E402
from ddnav.world import Scene  # noqa: E402

REPORT_VERSION = 1
COLUMNS = ("method", "split", "episodes", "NSR", "SPL", "SSR", "hindrances", "mean_steps")


def report_schema() -> dict:
    return json.loads(resources.files("ddnav.data").joinpath("report_schema.json").read_text(encoding="utf-8"))


def suite_document(report: MetricsReport, results: Sequence[EpisodeResult], config: dict) -> dict:
    return {
        "v": REPORT_VERSION,
        "kind": "suite",
        "config": config,
        "rows": [report.to_dict()],
        "episodes": [r.to_dict(with_trajectory=False) for r in results],
    }


def ablation_document(rows: Sequence[MetricsReport], config: dict) -> dict:
    return {"v": REPORT_VERSION, "kind": "ablation", "config": config, "rows": [r.to_dict() for r in rows]}


def rounds_document(rounds: RoundsResult, config: dict) -> dict:
    return {
        "v": REPORT_VERSION,
        "kind": "rounds",
        "config": config,
        "rows": [r.to_dict() for r in rounds.reports],
        "kb_counts": list(rounds.kb_counts),
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_document(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("v") != REPORT_VERSION or "rows" not in doc:
        raise ParseError(f"{path}: not a version-{REPORT_VERSION} report document")
    return doc


# --------------------------------------------------------------------------- tables


def table_rows(doc: dict) -> list[list[str]]:
    """One line per (row, split); splits expand into seen/unseen lines like the usual results table."""
    out = []
    for row in doc["rows"]:
        parts = [("all", row)] + sorted(row.get("splits", {}).items())
        for split, m in parts:
            out.append([
                row["label"], split, str(m["episodes"]),
                f"{m['NSR']:.3f}", f"{m['SPL']:.3f}", f"{m['SSR']:.3f}",
                str(m["hindrances"]), f"{m['mean_steps']:.1f}",
            ])
    return out


def render_table(doc: dict, sep: str = " | ") -> str:
    rows = [list(COLUMNS)] + table_rows(doc)
    widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
    lines = [sep.join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_tsv(doc: dict, path: str | Path) -> None:
    rows = [list(COLUMNS)] + table_rows(doc)
    Path(path).write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")


# --------------------------------------------------------------------------- figures


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rows(doc: dict, path: str | Path) -> Path:
    """Grouped NSR/SPL/SSR bars, one group per report row."""
    rows = doc["rows"]
    labels = [r["label"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(rows) + 1), 3.2))
    width = 0.26
    for k, metric in enumerate(("NSR", "SPL", "SSR")):
        xs = [i + (k - 1) * width for i in range(len(rows))]
        ax.bar(xs, [r[metric] for r in rows], width, label=metric)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=15, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("rate")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_rounds(doc: dict, path: str | Path) -> Path:
    """SPL/NSR and hindrance count per reflection round."""
    rows = doc["rows"]
    xs = list(range(1, len(rows) + 1))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, [r["SPL"] for r in rows], marker="o", label="SPL")
    ax.plot(xs, [r["NSR"] for r in rows], marker="s", label="NSR")
    ax.set_xlabel("round")
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1)
    ax.set_xticks(xs)
    ax2 = ax.twinx()
    ax2.bar(xs, [r["hindrances"] for r in rows], alpha=0.25, color="tab:red", label="hindrances")
    ax2.set_ylabel("hindrances")
    lines = ax.get_legend_handles_labels()
    bars = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + bars[0], lines[1] + bars[1], fontsize=8, loc="lower right")
    return _save(fig, Path(path))


def plot_trajectory(scene: Scene, result: EpisodeResult, path: str | Path) -> Path:
    """Top-down map with the agent's path; hindered moves are marked with x."""
    grid = [[0.0 if ch == "." else (1.0 if ch == "#" else 0.55) for ch in row] for row in scene.occupancy]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(grid, cmap="Greys", origin="lower", vmin=0, vmax=1)
    for obj in scene.objects:
        ax.text(obj.position.x, obj.position.z, obj.category[:3], fontsize=5, ha="center", va="center",
                color="tab:blue")
    xs = [s.pos.x for s in result.trajectory]
    zs = [s.pos.z for s in result.trajectory]
    ax.plot(xs, zs, color="tab:orange", linewidth=1.2)
    if xs:
        ax.plot(xs[0], zs[0], "go", markersize=5)
        ax.plot(xs[-1], zs[-1], "r*", markersize=7)
    for s in result.trajectory:
        if s.hindered:
            ax.plot(s.pos.x, s.pos.z, "rx", markersize=5)
    ax.set_title(f"{scene.name}: {result.instruction}", fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, Path(path))


def render_figures(doc: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_rows(doc, out / "metrics.png")]
    if doc.get("kind") == "rounds":
        paths.append(plot_rounds(doc, out / "rounds.png"))
    return paths

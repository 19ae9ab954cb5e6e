# ui/plots.py

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from utils.helpers import log, read_json  # noqa: E402

LOSS_SERIES = ("total", "scene_loss", "action_loss")

# fixed ids, no timestamps, no path simplification: identical metrics give identical bytes
SVG_STYLE = {
    "svg.hashsalt": "actllm",
    "svg.fonttype": "none",
    "path.simplify": False,
}


class PlotInputError(ValueError):
    pass


def load_metrics(filepath: Path) -> List[Dict[str, float]]:
    """Read a training metrics JSONL; every line must carry a step and the loss series"""
    rows = []
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                record = json.loads(line)
                missing = [k for k in ("step",) + LOSS_SERIES if k not in record]
                if missing:
                    raise PlotInputError(f"{filepath}:{number} lacks {missing}")
                rows.append(record)
    except json.JSONDecodeError as e:
        raise PlotInputError(f"{filepath}: malformed JSON line ({e})") from e
    if not rows:
        raise PlotInputError(f"{filepath}: no metrics lines")
    return rows


def plot_loss_curve(metrics: Sequence[Dict[str, float]], filepath: Path) -> Path:
    """Loss-curve SVG; the ``loss-curve`` group holds one vertex per metrics line"""
    if not metrics:
        raise PlotInputError("no metrics to plot")
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    steps = [m["step"] for m in metrics]

    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, [m["total"] for m in metrics], color="black", linewidth=1.2, gid="loss-curve", label="total")
        ax.plot(steps, [m["scene_loss"] for m in metrics], color="tab:blue", linewidth=0.8, gid="scene-loss", label="scene")
        ax.plot(steps, [m["action_loss"] for m in metrics], color="tab:orange", linewidth=0.8, gid="action-loss", label="action")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("loss")
        ax.grid(True, alpha=0.3)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(filepath, format="svg", metadata={"Date": None})
        plt.close(fig)

    log(f"💾 Loss curve saved: {filepath}")
    return filepath


def load_reports(paths: Sequence[Path]) -> List[dict]:
    reports = []
    for path in paths:
        try:
            report = read_json(path)
        except (OSError, json.JSONDecodeError) as e:
            raise PlotInputError(f"{path}: unreadable report ({e})") from e
        if not isinstance(report, dict) or "level" not in report or "success_rate" not in report:
            raise PlotInputError(f"{path}: not a success report")
        reports.append(report)
    return reports


def _write_rows(filepath: Path, header: List[str], rows: List[list]) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return filepath


def _row(report: dict) -> list:
    return [
        report["level"],
        report.get("template_id", "all"),
        report.get("n_episodes", 0),
        f"{report['success_rate']:.4f}",
        f"{report.get('mean_f1', 0.0):.4f}",
    ]


HEADER = ["level", "template_id", "n_episodes", "success_rate", "mean_f1"]


def write_success_by_level(reports: Sequence[dict], filepath: Path) -> Path:
    rows = sorted((_row(r) for r in reports), key=lambda r: (r[0], r[1]))
    path = _write_rows(filepath, HEADER, rows)
    log(f"💾 Success-by-level table saved: {path}")
    return path


def write_per_template(reports: Sequence[dict], filepath: Path) -> Path:
    """One row per (level, template); None when no report carries a breakdown"""
    rows = sorted((_row(t) for r in reports for t in r.get("per_template", [])), key=lambda r: (r[0], r[1]))
    if not rows:
        return None
    path = _write_rows(filepath, HEADER, rows)
    log(f"💾 Per-template table saved: {path}")
    return path

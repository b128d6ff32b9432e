"""
Report Generators for the MABE Laboratory
CSV and JSON writers, SVG line charts and the plain-text summary table
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from config import CSV_FLOAT_FORMAT, SVG_HASH_SALT


logger = logging.getLogger(__name__)

TRAIN_METRICS = ["greedy_exact_match", "j_token"]


def setup_matplotlib_for_plotting():
    """
    Configure matplotlib and seaborn for deterministic SVG output.
    Call this before creating any chart.
    """
    plt.switch_backend("Agg")
    sns.set_theme(style="whitegrid", palette="deep")
    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    plt.rcParams["svg.fonttype"] = "none"
    plt.rcParams["font.family"] = "DejaVu Sans"
    plt.rcParams["axes.unicode_minus"] = False


def write_csv(frame: pd.DataFrame, path: Path) -> str:
    """Comma-separated, header row, LF line endings, 9 significant digits"""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"CSV written: {path} ({len(frame)} rows)")
    return str(path)


def jsonable(value: Any) -> Any:
    """Replace non-finite floats with the tokens 'inf', '-inf' and 'nan'"""
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {key: jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    return value


def write_json(data: Any, path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(jsonable(data), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"JSON written: {path}")
    return str(path)


class ChartGenerator:
    """SVG line charts over training logs, lambda sweeps and beam-size sweeps"""

    def __init__(self):
        setup_matplotlib_for_plotting()

    def _save(self, fig, path: Path) -> str:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        logger.info(f"Chart written: {path}")
        return str(path)

    def training_chart(self, log: pd.DataFrame, path: Path) -> str:
        fig, axes = plt.subplots(1, len(TRAIN_METRICS), figsize=(10, 4))
        for ax, metric in zip(axes, TRAIN_METRICS):
            ax.plot(log["step"], log[metric], marker="o", markersize=3)
            ax.set_xlabel("step")
            ax.set_ylabel(metric)
        return self._save(fig, path)

    def lambda_sweep_chart(self, sweep: pd.DataFrame, path: Path, metric: str = "greedy_exact_match") -> str:
        """One curve per lambda: the per-step mean of `metric` over seeds"""
        curves = sweep.groupby(["lambda", "step"], sort=True)[metric].mean().reset_index()
        fig, ax = plt.subplots(figsize=(7, 4.5))
        palette = sns.color_palette("deep", n_colors=curves["lambda"].nunique())
        for color, (lam, curve) in zip(palette, curves.groupby("lambda", sort=True)):
            ax.plot(curve["step"], curve[metric], color=color, label=f"lambda={lam:g}")
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.legend(loc="best")
        return self._save(fig, path)

    def beam_size_chart(self, table: pd.DataFrame, path: Path) -> str:
        """Task metric and mean log10 probability against beam size, one series per scorer"""
        beams = table[table["rule"].str.startswith("beam")].copy()
        fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
        for scorer, rows in beams.groupby("scorer", sort=True):
            rows = rows.sort_values("beam_size")
            left.plot(rows["beam_size"], rows["exact_match_pct"], marker="o", label=scorer)
            right.plot(rows["beam_size"], rows["own_log10_mean"], marker="o", label=scorer)
        left.set_xlabel("beam size")
        left.set_ylabel("exact match (%)")
        right.set_xlabel("beam size")
        right.set_ylabel("mean log10 probability")
        left.legend(loc="best")
        return self._save(fig, path)


def summary_table(table: pd.DataFrame) -> str:
    """Plain-text table: one row per decision rule, task metric and log10 probability per scorer"""
    wide = table.pivot_table(index="rule", columns="scorer",
                             values=["exact_match_pct", "own_log10_mean", "reference_zero_count"],
                             aggfunc="first", sort=True)
    wide.columns = [f"{scorer}:{value}" for value, scorer in wide.columns]
    return wide.to_string(float_format=lambda v: f"{v:.4g}") + "\n"


REPORT_INPUTS = {
    "train_log.csv": "training curves",
    "sweep.csv": "lambda sweep",
    "eval_table.csv": "decoder evaluation",
}


def emit_report(run_dir: str) -> Dict[str, Any]:
    """
    Render the charts and summary of a completed run directory

    Inputs that are absent are listed and skipped; the report fails when
    the manifest or every input is missing.
    """
    root = Path(run_dir)
    report_dir = root / "report"
    files: List[str] = []
    missing: List[str] = []

    if not (root / "manifest.json").exists():
        missing.append("manifest.json")
    present = {name: root / name for name in REPORT_INPUTS if (root / name).exists()}
    missing.extend(name for name in REPORT_INPUTS if name not in present)

    charts = ChartGenerator()
    if "train_log.csv" in present:
        files.append(charts.training_chart(pd.read_csv(present["train_log.csv"]), report_dir / "training.svg"))
    if "sweep.csv" in present:
        sweep = pd.read_csv(present["sweep.csv"])
        files.append(charts.lambda_sweep_chart(sweep, report_dir / "lambda_sweep.svg"))
        curves = sweep.groupby(["lambda", "step"], sort=True).mean(numeric_only=True).reset_index()
        files.append(write_csv(curves.drop(columns=["seed"], errors="ignore"), report_dir / "lambda_curves.csv"))
    if "eval_table.csv" in present:
        table = pd.read_csv(present["eval_table.csv"])
        files.append(charts.beam_size_chart(table, report_dir / "beam_size.svg"))
        summary_path = report_dir / "summary.txt"
        with open(summary_path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(summary_table(table))
        files.append(str(summary_path))

    for name in missing:
        logger.warning(f"Report input missing, skipped: {name}")
    success = "manifest.json" not in missing and bool(present)
    return {
        "success": success,
        "files": files,
        "missing": missing,
        "message": f"Report rendered {len(files)} files" if success else "Report inputs missing: " + ", ".join(missing),
    }

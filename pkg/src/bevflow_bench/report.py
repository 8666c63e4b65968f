"""
Writes a run report to disk: the results CSV, latency-sweep plots and a
snapshot of the resolved configuration.
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path

import matplotlib
import pandas as pd
from matplotlib.figure import Figure

from .config import to_dict
from .pipeline import CSV_COLUMNS, RunReport

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
CONFIG_FILE = "config.json"


def results_frame(report: RunReport) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in report.rows], columns=CSV_COLUMNS)


def plot_latency_sweep(frame: pd.DataFrame, path: Path, title: str) -> None:
    """
    AP@0.5 and AP@0.7 against the interval expectation, one line per method.
    """
    matplotlib.rcParams["svg.hashsalt"] = "bevflow-bench"
    fig = Figure(figsize=(10, 4))
    axes = fig.subplots(1, 2, sharey=True)
    for ax, metric, label in zip(axes, ("ap50", "ap70"), ("AP@0.5", "AP@0.7")):
        for method, group in frame.groupby("method", sort=False):
            group = group.sort_values("interval_expectation_ms")
            ax.plot(group["interval_expectation_ms"], group[metric], marker="o", label=method)
        ax.set_xlabel("Expected time interval [ms]")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


def emit_report(report: RunReport, out_dir: Path | str) -> list[Path]:
    """
    Writes results.csv, one SVG latency sweep per (pose noise, K_roi) level and
    config.json.

    Args:
        report: The finished run.
        out_dir: Target directory, created if needed.

    Returns:
        list[Path]: The written files.

    Raises:
        OSError: If the directory cannot be written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = results_frame(report)
    written = []

    csv_path = out_dir / RESULTS_FILE
    frame.to_csv(csv_path, index=False, float_format="%.6f", lineterminator="\n")
    written.append(csv_path)

    levels = frame[["sigma_t", "sigma_r", "k_roi"]].drop_duplicates()
    for sigma_t, sigma_r, k_roi in levels.itertuples(index=False):
        subset = frame[(frame.sigma_t == sigma_t) & (frame.sigma_r == sigma_r) & (frame.k_roi == k_roi)]
        svg_path = out_dir / f"latency_sweep_t{sigma_t:g}_r{sigma_r:g}_k{k_roi}.svg"
        plot_latency_sweep(subset, svg_path, f"pose noise {sigma_t:g} m / {sigma_r:g} deg, K_roi {k_roi}")
        written.append(svg_path)

    config_path = out_dir / CONFIG_FILE
    snapshot = {
        "config_hash": report.config_hash,
        "config": to_dict(report.config) if report.config is not None else None,
    }
    config_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    written.append(config_path)
    logger.info("Wrote %d report files to %s.", len(written), out_dir)
    return written

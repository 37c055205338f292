"""
Summary and paired comparison tables, recomputed from RunReports alone.

summary.csv has one row per grid cell. comparison.csv pairs every two cells
by seed and reports the mean and std of the accuracy differences, win/loss
counts and a Student-t 95% confidence interval.
"""

import logging
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from src.state import ExperimentState, RunReport

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["method", "meta_mode", "mean_acc", "std_acc", "n_seeds", "s_per_outer_iter", "label", "n_failed"]
COMPARISON_COLUMNS = [
    "cell_a", "cell_b", "n_pairs", "mean_diff", "std_diff", "wins", "losses", "ties", "ci95_low", "ci95_high",
]
FLOAT_FORMAT = "%.17g"


def load_reports(report_dir) -> List[RunReport]:
    paths = sorted(Path(report_dir).glob("*__seed*.json"))
    return [RunReport.model_validate_json(p.read_text()) for p in paths]


def _cells(reports: Sequence[RunReport]) -> Dict[str, List[RunReport]]:
    """Reports grouped by label, cells in order of first appearance."""
    cells: Dict[str, List[RunReport]] = {}
    for report in reports:
        cells.setdefault(report.label, []).append(report)
    return cells


def _sample_std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.shape[0] > 1 else 0.0


def summarize_reports(reports: Sequence[RunReport]) -> pd.DataFrame:
    rows = []
    for label, cell in _cells(reports).items():
        ok = [r for r in cell if r.status == "ok"]
        accs = np.array([r.final_acc for r in ok], dtype=np.float64)
        config = cell[0].config
        rows.append({
            "method": config.method.kind if config else "",
            "meta_mode": config.meta_mode if config else "",
            "mean_acc": float(accs.mean()) if accs.size else float("nan"),
            "std_acc": _sample_std(accs),
            "n_seeds": len(ok),
            "s_per_outer_iter": float(np.mean([r.timing_s_per_outer_iter for r in ok])) if ok else float("nan"),
            "label": label,
            "n_failed": len(cell) - len(ok),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def paired_difference(a: Dict[int, float], b: Dict[int, float], name_a: str = "a", name_b: str = "b") -> dict:
    """Statistics of a[seed] - b[seed] over the seeds both cells share; unpaired seeds are dropped with a warning."""
    shared = sorted(set(a) & set(b))
    unpaired = sorted(set(a) ^ set(b))
    if unpaired:
        logger.warning(f"{name_a} vs {name_b}: seeds {unpaired} are not paired and are excluded")
    diffs = np.array([a[s] - b[s] for s in shared], dtype=np.float64)
    n = diffs.shape[0]
    mean = float(diffs.mean()) if n else float("nan")
    std = _sample_std(diffs)
    if n > 1:
        half = float(stats.t.ppf(0.975, n - 1)) * std / np.sqrt(n)
        ci = (mean - half, mean + half)
    else:
        ci = (float("nan"), float("nan"))
    return {
        "cell_a": name_a,
        "cell_b": name_b,
        "n_pairs": n,
        "mean_diff": mean,
        "std_diff": std,
        "wins": int(np.sum(diffs > 0)),
        "losses": int(np.sum(diffs < 0)),
        "ties": int(np.sum(diffs == 0)),
        "ci95_low": ci[0],
        "ci95_high": ci[1],
    }


def compare_cells(reports: Sequence[RunReport]) -> pd.DataFrame:
    """Every pair of cells (earlier label first), paired by seed over successful runs."""
    by_seed = {
        label: {r.seed: r.final_acc for r in cell if r.status == "ok"}
        for label, cell in _cells(reports).items()
    }
    rows = []
    for name_a, name_b in combinations(by_seed, 2):
        row = paired_difference(by_seed[name_a], by_seed[name_b], name_a, name_b)
        if row["n_pairs"] == 0:
            logger.warning(f"{name_a} vs {name_b}: no paired seeds, comparison skipped")
            continue
        rows.append(row)
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def aggregate_runs(report_dir) -> pd.DataFrame:
    """Comparison table of every report file in a directory."""
    return compare_cells(load_reports(report_dir))


def write_table(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_outputs(reports: Sequence[RunReport], output_dir) -> tuple:
    """summary.csv and comparison.csv into output_dir; returns both paths."""
    summary = write_table(summarize_reports(reports), Path(output_dir) / "summary.csv")
    comparison = write_table(compare_cells(reports), Path(output_dir) / "comparison.csv")
    return summary, comparison


def log_summary(frame: pd.DataFrame):
    for row in frame.itertuples(index=False):
        logger.info(
            f"{row.label:<28} {row.method:<14} {row.meta_mode:<12} acc={row.mean_acc:.4f}±{row.std_acc:.4f} "
            f"n={row.n_seeds} failed={row.n_failed} s/iter={row.s_per_outer_iter:.4g}"
        )


# --- Graph nodes ---

def summarize(state: ExperimentState) -> dict:
    """Node: summary.csv over every report of this invocation."""
    logger.info("--- Aggregator: Summary ---")
    frame = summarize_reports(state["reports"])
    log_summary(frame)
    path = write_table(frame, Path(state["output_dir"]) / "summary.csv")
    return {"summary_path": str(path)}


def aggregate(state: ExperimentState) -> dict:
    """Node: paired comparison table; exit code 1 when any run failed."""
    logger.info("--- Aggregator: PairedComparison ---")
    frame = compare_cells(state["reports"])
    for row in frame.itertuples(index=False):
        logger.info(
            f"{row.cell_a} - {row.cell_b}: {row.mean_diff:+.4f} (95% CI {row.ci95_low:+.4f}..{row.ci95_high:+.4f}) "
            f"W/L/T {row.wins}/{row.losses}/{row.ties}"
        )
    path = write_table(frame, Path(state["output_dir"]) / "comparison.csv")
    failed = any(r.status == "failed" for r in state["reports"])
    return {"comparison_path": str(path), "exit_code": 1 if failed else 0}

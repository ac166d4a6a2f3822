"""
CSV reports for evaluation runs, the summary tables with per-dataset subtotals,
and the per-nutrient regression / Bland-Altman plots.

Every CSV starts with a '#' metadata line carrying the config hash and seed.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from agreement import intake_error_row, mean_sd, nutrient_accuracy, nutrient_agreement
from errors import NoData
from nutrients import NUTRIENTS, NUTRIENT_UNITS
from pipeline import STAGES, EvaluationResult, PlateOutcome

logger = logging.getLogger(__name__)

PROJECT = "plate-nutrient-tracker"
FLOAT_FORMAT = "%.10g"

PLATE_COLUMNS = [
    "dataset", "meal_id", "series_id", "intake_index", "intake_level", "n_classes", "iou", "flagged",
    "top1", "clamped_pixels", "bulk_fraction", "est_volume_ml", "true_volume_ml", "est_intake_ml",
    "true_intake_ml",
] + [f"vol_{n}" for n in NUTRIENTS] + [f"mass_{n}" for n in NUTRIENTS]
ERROR_COLUMNS = ["series_id", "intake_index", "error", "message"]
INTAKE_METRICS = ["volume_error_abs", "volume_error_signed", "intake_error_abs",
                  "intake_error_signed", "pct3d_abs", "pct3d_signed"]
BULK_COLUMNS = ["dataset", "meal_id", "n_classes", "n_images"] + [
    f"{m}_{stat}" for m in INTAKE_METRICS for stat in ("mean", "sd")]
SEGMENTATION_METRICS = ["iou", "top1"]
SEGMENTATION_COLUMNS = ["dataset", "meal_id", "n_classes", "n_images",
                        "iou_mean", "iou_sd", "top1_mean", "top1_sd", "flagged"]
AGREEMENT_COLUMNS = ["nutrient", "n", "slope", "intercept", "r_squared", "constant_y",
                     "bias", "sd", "loa_lower", "loa_upper", "zero_within_loa"]
PAIR_COLUMNS = ["nutrient", "plate", "mass", "volume", "mean", "difference"]
ACCURACY_COLUMNS = ["meal_id", "nutrient", "n", "abs_error_mean", "abs_error_sd", "signed_error_mean",
                    "pct_of_portion_mean", "pct_of_portion_sd",
                    "pct_of_daily_value_mean", "pct_of_daily_value_sd"]
PAIRWISE_COLUMNS = ["series_id", "scope", "from_index", "to_index", "estimated_change", "true_change"]
TIMING_COLUMNS = ["stage", "mean_seconds", "plates"]

EVALUATION_FILES = {
    "plates": "plates.csv",
    "errors": "errors.csv",
    "bulk_intake": "bulk_intake.csv",
    "segmentation": "segmentation.csv",
    "agreement": "agreement.csv",
    "agreement_pairs": "agreement_pairs.csv",
    "nutrient_accuracy": "nutrient_accuracy.csv",
    "pairwise": "pairwise.csv",
}


def metadata_header(config_sha256: str, seed: int) -> str:
    return f"# {PROJECT} config_sha256={config_sha256} seed={seed}"


def write_csv(path: Union[str, Path], rows: Iterable[Mapping[str, Any]], columns: Sequence[str],
              header: str) -> Path:
    """Header line, then a pandas CSV with a fixed column order (empty tables keep their header)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header + "\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_report(path: Union[str, Path]) -> Tuple[str, pd.DataFrame]:
    """(metadata line, table) of a CSV written by write_csv"""
    path = Path(path)
    if not path.exists():
        raise NoData(f"missing report {path}; run evaluate first")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
    if not header.startswith("#"):
        raise NoData(f"{path} has no metadata line")
    return header, pd.read_csv(path, skiprows=1)


# --- per-meal tables ---

def _by_meal(plates: Sequence[PlateOutcome]) -> Dict[Tuple[str, str], List[PlateOutcome]]:
    groups: Dict[Tuple[str, str], List[PlateOutcome]] = {}
    for plate in plates:
        groups.setdefault((plate.dataset, plate.meal_id), []).append(plate)
    return groups


def bulk_intake_rows(plates: Sequence[PlateOutcome]) -> List[Dict[str, Any]]:
    """One intake-accuracy row per meal over its plates after intake"""
    rows = []
    for (dataset, meal_id), group in _by_meal([p for p in plates if not p.is_reference]).items():
        volume_pairs = [pair for p in group for pair in p.volume_pairs()]
        intake_rows = [row for p in group for row in p.intake_rows()]
        if not intake_rows:
            continue
        row = intake_error_row(dataset, meal_id, max(p.n_classes for p in group), len(group),
                               volume_pairs, intake_rows)
        rows.append(row.as_record())
    return rows


def _nan_mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    values = [v for v in values if not math.isnan(v)]
    return mean_sd(values) if values else (math.nan, math.nan)


def segmentation_rows(plates: Sequence[PlateOutcome]) -> List[Dict[str, Any]]:
    rows = []
    for (dataset, meal_id), group in _by_meal(plates).items():
        iou_mean, iou_sd = _nan_mean_sd([p.iou for p in group])
        top1_mean, top1_sd = _nan_mean_sd([p.top1 for p in group])
        rows.append({
            "dataset": dataset, "meal_id": meal_id,
            "n_classes": max(p.n_classes for p in group), "n_images": len(group),
            "iou_mean": iou_mean, "iou_sd": iou_sd, "top1_mean": top1_mean, "top1_sd": top1_sd,
            "flagged": sum(p.flagged for p in group),
        })
    return rows


def agreement_tables(plates: Sequence[PlateOutcome]) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    """(per-nutrient regression + Bland-Altman rows, per-plate (mean, difference) rows)"""
    after = [p for p in plates if not p.is_reference]
    volume = [p.volume_nutrients for p in after]
    mass = [p.mass_nutrients for p in after]
    reports = nutrient_agreement(volume, mass, strict=False)

    summary, pairs = [], []
    for nutrient, report in reports.items():
        summary.append(report.as_record())
        for plate in after:
            v, m = plate.volume_nutrients.get(nutrient), plate.mass_nutrients.get(nutrient)
            if v is None or m is None:
                continue
            pairs.append({"nutrient": nutrient, "plate": plate.key, "mass": m, "volume": v,
                          "mean": (v + m) / 2, "difference": v - m})
    return summary, pairs


def accuracy_rows(plates: Sequence[PlateOutcome]) -> List[Dict[str, Any]]:
    rows = []
    for (_, meal_id), group in _by_meal([p for p in plates if not p.is_reference]).items():
        for row in nutrient_accuracy([p.volume_nutrients for p in group],
                                     [p.mass_nutrients for p in group],
                                     [p.portion_content for p in group]):
            rows.append({"meal_id": meal_id, **row})
    return rows


def write_evaluation_reports(evaluation: EvaluationResult, report_dir: Union[str, Path],
                             header: str) -> Dict[str, Path]:
    report_dir = Path(report_dir)
    plates = evaluation.plates
    agreement, pairs = agreement_tables(plates)
    tables = {
        "plates": ([p.as_record() for p in plates], PLATE_COLUMNS),
        "errors": (evaluation.errors, ERROR_COLUMNS),
        "bulk_intake": (bulk_intake_rows(plates), BULK_COLUMNS),
        "segmentation": (segmentation_rows(plates), SEGMENTATION_COLUMNS),
        "agreement": (agreement, AGREEMENT_COLUMNS),
        "agreement_pairs": (pairs, PAIR_COLUMNS),
        "nutrient_accuracy": (accuracy_rows(plates), ACCURACY_COLUMNS),
        "pairwise": (evaluation.pairwise, PAIRWISE_COLUMNS),
    }
    written = {}
    for name, (rows, columns) in tables.items():
        written[name] = write_csv(report_dir / EVALUATION_FILES[name], rows, columns, header)
    logger.info("Wrote %d reports to %s", len(written), report_dir)
    return written


def write_timing(evaluation: EvaluationResult, path: Union[str, Path], header: str) -> Path:
    means = evaluation.stage_means()
    rows = [{"stage": stage, "mean_seconds": means[stage], "plates": len(evaluation.plates)}
            for stage in STAGES]
    return write_csv(path, rows, TIMING_COLUMNS, header)


# --- summary tables ---

def combine_rows(frame: pd.DataFrame, metrics: Sequence[str]) -> Dict[str, Any]:
    """
    Merge per-meal mean/SD rows as if their images were pooled: means are
    weighted by n_images and SDs combine within- and between-meal variance.
    """
    row: Dict[str, Any] = {"n_classes": int(frame["n_classes"].sum()),
                           "n_images": int(frame["n_images"].sum())}
    for metric in metrics:
        part = frame[[f"{metric}_mean", f"{metric}_sd", "n_images"]].dropna(
            subset=[f"{metric}_mean"])
        n = part["n_images"].to_numpy(dtype=np.float64)
        means = part[f"{metric}_mean"].to_numpy(dtype=np.float64)
        sds = part[f"{metric}_sd"].fillna(0.0).to_numpy(dtype=np.float64)
        total = n.sum()
        if total == 0:
            row[f"{metric}_mean"], row[f"{metric}_sd"] = math.nan, math.nan
            continue
        mean = float(np.sum(n * means) / total)
        if total > 1:
            ss = np.sum((n - 1) * sds ** 2) + np.sum(n * (means - mean) ** 2)
            sd = math.sqrt(max(float(ss), 0.0) / (total - 1))
        else:
            sd = 0.0
        row[f"{metric}_mean"], row[f"{metric}_sd"] = mean, sd
    if "flagged" in frame:
        row["flagged"] = int(frame["flagged"].sum())
    return row


def summary_table(frame: pd.DataFrame, metrics: Sequence[str]) -> List[Dict[str, Any]]:
    """Meal rows grouped by dataset, a subtotal per dataset, then the overall total"""
    if frame.empty:
        raise NoData("no per-meal rows to summarise")
    rows = []
    for dataset, group in frame.groupby("dataset", sort=False):
        for record in group.to_dict("records"):
            rows.append({"row_type": "meal", **record})
        rows.append({"row_type": "subtotal", "dataset": dataset, "meal_id": "",
                     **combine_rows(group, metrics)})
    rows.append({"row_type": "total", "dataset": "all", "meal_id": "", **combine_rows(frame, metrics)})
    return rows


def write_summaries(report_dir: Union[str, Path]) -> Dict[str, Path]:
    report_dir = Path(report_dir)
    written = {}
    for source, metrics, columns in (
        ("bulk_intake", INTAKE_METRICS, BULK_COLUMNS),
        ("segmentation", SEGMENTATION_METRICS, SEGMENTATION_COLUMNS),
    ):
        header, frame = read_report(report_dir / EVALUATION_FILES[source])
        rows = summary_table(frame, metrics)
        written[f"summary_{source}"] = write_csv(
            report_dir / f"summary_{source}.csv", rows, ["row_type"] + columns, header)
    return written


def plot_agreement(report_dir: Union[str, Path]) -> List[Path]:
    """
    Two-panel SVG per nutrient: volume vs mass regression above, Bland-Altman
    below. The report header goes into the SVG description.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    header, summary = read_report(report_dir / EVALUATION_FILES["agreement"])
    _, pairs = read_report(report_dir / EVALUATION_FILES["agreement_pairs"])
    plot_dir = report_dir / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    for record in summary.to_dict("records"):
        nutrient = record["nutrient"]
        points = pairs[pairs["nutrient"] == nutrient]
        unit = NUTRIENT_UNITS.get(nutrient, "")

        plt.figure(figsize=(7, 10))
        plt.subplot(2, 1, 1)
        plt.scatter(points["mass"], points["volume"], s=14, color="tab:blue", label="plates")
        lo = float(min(points["mass"].min(), points["volume"].min()))
        hi = float(max(points["mass"].max(), points["volume"].max()))
        plt.plot([lo, hi], [lo, hi], "k--", linewidth=1, label="identity")
        if not pd.isna(record["slope"]):
            xs = np.array([lo, hi])
            plt.plot(xs, record["slope"] * xs + record["intercept"], "r-", linewidth=1.5,
                     label=f"fit, r² = {record['r_squared']:.3f}")
        plt.title(f"{nutrient}: volume vs weighed intake", fontsize=13, fontweight="bold")
        plt.xlabel(f"mass method ({unit})")
        plt.ylabel(f"volume method ({unit})")
        plt.grid(True, alpha=0.3)
        plt.legend()

        plt.subplot(2, 1, 2)
        plt.scatter(points["mean"], points["difference"], s=14, color="tab:green")
        plt.axhline(record["bias"], color="r", linewidth=1.5, label=f"bias {record['bias']:.3g}")
        for limit in (record["loa_lower"], record["loa_upper"]):
            plt.axhline(limit, color="gray", linestyle="--", linewidth=1)
        plt.title(f"{nutrient}: Bland-Altman", fontsize=13, fontweight="bold")
        plt.xlabel(f"mean of methods ({unit})")
        plt.ylabel(f"volume − mass ({unit})")
        plt.grid(True, alpha=0.3)
        plt.legend()

        plt.tight_layout(pad=2.0)
        path = plot_dir / f"{nutrient}.svg"
        plt.savefig(path, format="svg", metadata={"Date": None, "Description": header})
        plt.close()
        paths.append(path)
    return paths

"""
Report emission: rate CSV, pixel-count histogram CSV, class-matrix CSV, JSON
report and a markdown run summary. The rate CSV is read back with pandas and
validated after every write.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from errors import DataValidationError
from evaluation import EvalReport
from geodata import atomic_write_text, write_json

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "exp_id", "mode", "n", "element_size_m", "frames_attacked", "scope",
    "result_count", "frame_count", "success_rate", "error_rate",
    "sequence_count", "sequence_success_rate", "sequence_error_rate",
    "mean_pixels_success", "mean_pixels_failure",
]
HISTOGRAM_COLUMNS = ["exp_id", "mode", "scope", "bin_start", "bin_end", "successes", "failures", "errors", "correct"]
MATRIX_COLUMNS = ["exp_id", "mode", "scope", "row_rank", "true_label", "target_label", "successes", "frames", "rate"]
CRITICAL_FIELDS = ["exp_id", "scope", "success_rate", "error_rate"]
FLOAT_FORMAT = "%.6f"


def _write_frame(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    return path


def report_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    rows = [{col: (r.mode if col == "mode" else getattr(r, col)) for col in REPORT_COLUMNS} for r in reports]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def histogram_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    rows = [
        {"exp_id": r.exp_id, "mode": r.mode, "scope": r.scope, "bin_start": b.bin_start, "bin_end": b.bin_end,
         "successes": b.successes, "failures": b.failures, "errors": b.errors, "correct": b.correct}
        for r in reports for b in r.histogram
    ]
    return pd.DataFrame(rows, columns=HISTOGRAM_COLUMNS)


def class_matrix_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Matrix cells, rows ranked by decreasing mean manipulated-pixel count."""
    rows = []
    for r in reports:
        rank = {label: i for i, label in enumerate(r.row_order)}
        cells = sorted(r.class_matrix, key=lambda c: (rank.get(c.true_label, len(rank)),
                                                      -1 if c.target_label is None else c.target_label))
        for c in cells:
            rows.append({"exp_id": r.exp_id, "mode": r.mode, "scope": r.scope, "row_rank": rank.get(c.true_label),
                         "true_label": c.true_label,
                         "target_label": "any" if c.target_label is None else str(c.target_label),
                         "successes": c.successes, "frames": c.frames, "rate": c.rate})
    return pd.DataFrame(rows, columns=MATRIX_COLUMNS)


def write_report_csv(reports: Sequence[EvalReport], path) -> Path:
    return _write_frame(report_frame(reports), path)


def read_report_csv(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path, dtype={"exp_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"{path}: unreadable report: {exc}") from exc


def validate_report_csv(path) -> Dict[str, bool]:
    """Read the rate CSV back and check columns, nulls and rate identities."""
    path = Path(path)
    checks = {
        "file_exists": path.exists(),
        "has_data": False,
        "has_required_columns": False,
        "no_null_critical_fields": False,
        "rate_identities": False,
    }
    if not checks["file_exists"]:
        logger.warning("%s: report file is missing", path)
        return checks
    df = read_report_csv(path)
    checks["has_data"] = len(df) > 0
    missing = set(REPORT_COLUMNS) - set(df.columns)
    checks["has_required_columns"] = not missing
    if missing:
        logger.warning("%s: missing columns %s", path, sorted(missing))
        return checks
    nulls = [f for f in CRITICAL_FIELDS if df[f].isnull().any()]
    checks["no_null_critical_fields"] = not nulls
    if nulls:
        logger.warning("%s: null values in %s", path, nulls)
    ok = True
    for prefix in ("", "sequence_"):
        s, e = df[f"{prefix}success_rate"], df[f"{prefix}error_rate"]
        ok &= bool(((s >= 0) & (s <= e) & (e <= 1)).all())
    checks["rate_identities"] = ok
    if not ok:
        logger.warning("%s: a row violates 0 <= success <= error <= 1", path)
    return checks


def write_summary(reports: Sequence[EvalReport], outputs: Dict[str, Path], path,
                  validation: Optional[Dict[str, bool]] = None) -> Path:
    """Markdown run summary: experiment table, pixel-count means and output files."""
    lines = ["# Patch attack evaluation summary", "", "## Experiments", "",
             "| exp_id | mode | n | m/element | frames attacked | scope | frames | success | error "
             "| seq. success | seq. error |",
             "|---|---|---|---|---|---|---|---|---|---|---|"]
    for r in reports:
        lines.append(
            f"| {r.exp_id} | {r.mode} | {r.n} | {r.element_size_m:g} | {r.frames_attacked} | {r.scope} "
            f"| {r.frame_count} | {100 * r.success_rate:.1f}% | {100 * r.error_rate:.1f}% "
            f"| {100 * r.sequence_success_rate:.1f}% | {100 * r.sequence_error_rate:.1f}% |")

    lines += ["", "## Manipulated pixels", ""]
    for r in reports:
        hit = "n/a" if r.mean_pixels_success is None else f"{r.mean_pixels_success:.1f}"
        miss = "n/a" if r.mean_pixels_failure is None else f"{r.mean_pixels_failure:.1f}"
        lines.append(f"- {r.exp_id} {r.mode} ({r.scope}): successful {hit}, unsuccessful {miss}")
        if r.mixed:
            lines.append("  - pooled results from differing attack configurations")

    lines += ["", "## Output files", ""]
    lines += [f"- {name}: {p.name}" for name, p in outputs.items()]
    if validation is not None:
        lines += ["", "## Validation", ""]
        lines += [f"- {check}: {'passed' if ok else 'FAILED'}" for check, ok in validation.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")
    return Path(path)


def write_reports(reports: List[EvalReport], out_dir) -> Dict[str, Path]:
    """Write every report artifact into ``out_dir`` and validate the rate CSV."""
    out_dir = Path(out_dir)
    if not reports:
        raise DataValidationError("no evaluation reports to write")
    outputs = {
        "rates": write_report_csv(reports, out_dir / "report.csv"),
        "histograms": _write_frame(histogram_frame(reports), out_dir / "pixel_histograms.csv"),
        "class_matrix": _write_frame(class_matrix_frame(reports), out_dir / "class_matrix.csv"),
    }
    outputs["json"] = out_dir / "report.json"
    write_json({"reports": [r.to_dict() for r in reports]}, outputs["json"])

    validation = validate_report_csv(outputs["rates"])
    if not all(validation.values()):
        failed = [k for k, ok in validation.items() if not ok]
        raise DataValidationError(f"{outputs['rates']}: report validation failed ({', '.join(failed)})")
    outputs["summary"] = write_summary(reports, dict(outputs), out_dir / "summary.md", validation)
    for name, p in outputs.items():
        logger.info("wrote %s: %s", name, p)
    return outputs

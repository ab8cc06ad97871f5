"""CSV and SVG emission of metric, pose and bound rows"""

import io
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from ..models.schemas import BoundRecord, MetricRow, PoseRecord  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["variable", "value", "estimator", "rmse_position", "nmse_rotation",
                  "bound_position", "bound_rotation", "trials", "failed"]
POSE_COLUMNS = ["ms", "x", "y", "z", "roll", "pitch", "yaw", "position_error", "rotation_nmse"]
BOUND_COLUMNS = ["ms", "position_bound", "attitude_bound", "rotation_nmse_bound"]

FLOAT_FORMAT = "%.17g"
LINE_TERMINATOR = "\r\n"
SVG_SALT = "nearfield-pae"


def records_frame(records: Sequence[BaseModel], columns: List[str]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records], columns=columns)


def to_csv_text(records: Sequence[BaseModel], columns: List[str]) -> str:
    """RFC-4180 CSV with 17 significant digits and a fixed header"""
    buffer = io.StringIO()
    records_frame(records, columns).to_csv(buffer, index=False, float_format=FLOAT_FORMAT,
                                           lineterminator=LINE_TERMINATOR)
    return buffer.getvalue()


def _write(text: str, path: Optional[Union[str, Path]]) -> str:
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        logger.info(f"Wrote {path}")
    return text


def write_metrics_csv(rows: Sequence[MetricRow], path: Optional[Union[str, Path]] = None) -> str:
    return _write(to_csv_text(rows, METRIC_COLUMNS), path)


def write_poses_csv(records: Sequence[PoseRecord], path: Optional[Union[str, Path]] = None) -> str:
    return _write(to_csv_text(records, POSE_COLUMNS), path)


def write_bounds_csv(records: Sequence[BoundRecord], path: Optional[Union[str, Path]] = None) -> str:
    return _write(to_csv_text(records, BOUND_COLUMNS), path)


def _axis_values(values: List[str]):
    try:
        return [float(v) for v in values], False
    except ValueError:
        return list(range(len(values))), True


def write_metrics_svg(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    """Static line charts of RMSE and NMSE (with bounds when present) against the sweep value"""
    plt.rcParams["svg.hashsalt"] = SVG_SALT
    frame = records_frame(rows, METRIC_COLUMNS)
    fig, (ax_pos, ax_rot) = plt.subplots(1, 2, figsize=(10, 4))
    for estimator, group in frame.groupby("estimator", sort=False):
        x, categorical = _axis_values(list(group["value"]))
        ax_pos.plot(x, group["rmse_position"], marker="o", label=estimator)
        ax_rot.plot(x, group["nmse_rotation"], marker="o", label=estimator)
    if frame["bound_position"].notna().any():
        first = frame.drop_duplicates("value")
        x, categorical = _axis_values(list(first["value"]))
        ax_pos.plot(x, first["bound_position"], linestyle="--", color="black", label="MCRB")
        ax_rot.plot(x, first["bound_rotation"], linestyle="--", color="black", label="MCRB")
    values = list(frame.drop_duplicates("value")["value"])
    x, categorical = _axis_values(values)
    for ax, label in ((ax_pos, "RMSE position (m)"), (ax_rot, "NMSE rotation")):
        ax.set_yscale("log")
        ax.set_ylabel(label)
        ax.set_xlabel(frame["variable"].iloc[0] if len(frame) else "")
        if categorical:
            ax.set_xticks(x)
            ax.set_xticklabels(values)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path

"""
Evaluation
Per-pixel losses, region averages, method comparison tables, ground-truth
parameter errors and scan-line profiles.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .data import ParamMap, RegionMask, THzVolume, atomic_path
from .errors import DimensionMismatchError
from .model import PARAM_NAMES, PHASE, pixel_loss, wrap_phase

logger = logging.getLogger(__name__)

METHODS = ("tra", "ae", "ae+tra")
REPORT_NOTE = "Average Loss is the per-pixel arithmetic mean of the squared residual norm over each region."


@dataclass
class MethodResult:
    method: str
    param_map: ParamMap
    wall_time: float
    per_pixel_loss: np.ndarray
    mean_iterations: Optional[float] = None

    def __post_init__(self):
        self.per_pixel_loss = np.asarray(self.per_pixel_loss, dtype=np.float64)
        if self.per_pixel_loss.shape != self.param_map.shape:
            raise DimensionMismatchError(
                f"{self.method}: loss grid {self.per_pixel_loss.shape} vs map {self.param_map.shape}"
            )
        if (self.per_pixel_loss < 0).any():
            raise ValueError(f"{self.method}: negative per-pixel losses")


def per_pixel_losses(pm: ParamMap, v: THzVolume) -> np.ndarray:
    """Loss of each pixel's parameters against its own signal, shape (n_x, n_y)"""
    if pm.shape != (v.n_x, v.n_y):
        raise DimensionMismatchError(f"map {pm.shape} does not match volume ({v.n_x}, {v.n_y})")
    return pixel_loss(pm.params, np.asarray(v.data, dtype=np.float64), v.cfg)


def region_average_loss(losses: np.ndarray, mask: RegionMask) -> float:
    losses = np.asarray(losses)
    if losses.shape != mask.mask.shape:
        raise DimensionMismatchError(f"mask {mask.name!r} {mask.mask.shape} vs losses {losses.shape}")
    if not mask.mask.any():
        raise ValueError(f"mask {mask.name!r} is empty")
    return float(losses[mask.mask].mean())


@dataclass
class ComparisonReport:
    losses: pd.DataFrame
    timing: pd.DataFrame

    def to_text(self) -> str:
        lines = [
            REPORT_NOTE,
            "",
            "Average Loss",
            self.losses.to_string(float_format=lambda x: f"{x:.4f}"),
            "",
            "Run time (sec.)",
            self.timing.to_string(float_format=lambda x: f"{x:.4f}"),
        ]
        return "\n".join(lines)

    def save(self, directory) -> Dict[str, Path]:
        directory = Path(directory)
        written = {}
        with atomic_path(directory / "report.txt") as tmp:
            tmp.write_text(self.to_text() + "\n", encoding="utf-8")
        written["report.txt"] = directory / "report.txt"
        with atomic_path(directory / "losses.csv") as tmp:
            self.losses.to_csv(tmp, float_format="%.17g", lineterminator="\n")
        written["losses.csv"] = directory / "losses.csv"
        with atomic_path(directory / "timing.csv") as tmp:
            self.timing.to_csv(tmp, float_format="%.17g", lineterminator="\n")
        written["timing.csv"] = directory / "timing.csv"
        payload = {
            "note": REPORT_NOTE,
            "losses": json.loads(self.losses.to_json(orient="index")),
            "timing": json.loads(self.timing.to_json(orient="index")),
        }
        with atomic_path(directory / "report.json") as tmp:
            tmp.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        written["report.json"] = directory / "report.json"
        return written


def compare_methods(results: Sequence[MethodResult], masks: Sequence[RegionMask]) -> ComparisonReport:
    """Region-by-method table of average losses plus wall times and speedups"""
    losses = pd.DataFrame(
        {r.method: [region_average_loss(r.per_pixel_loss, m) for m in masks] for r in results},
        index=pd.Index([m.name for m in masks], name="region"),
    )
    timing = pd.DataFrame(
        {
            "wall_time": [r.wall_time for r in results],
            "mean_iterations": [np.nan if r.mean_iterations is None else r.mean_iterations for r in results],
        },
        index=pd.Index([r.method for r in results], name="method"),
    )
    reference = next((r for r in results if r.method == "tra"), None)
    if reference is not None:
        timing["speedup_vs_tra"] = [
            reference.wall_time / r.wall_time if r.wall_time > 0 else np.inf for r in results
        ]
    return ComparisonReport(losses, timing)


def param_errors(pm: ParamMap, truth: ParamMap) -> pd.DataFrame:
    """Mean absolute error and RMSE per parameter; phase differences are wrapped"""
    if pm.shape != truth.shape:
        raise DimensionMismatchError(f"map {pm.shape} vs truth {truth.shape}")
    diff = pm.params - truth.params
    diff[..., PHASE] = wrap_phase(diff[..., PHASE])
    abs_diff = np.abs(diff).reshape(-1, 4)
    return pd.DataFrame(
        {
            "mae": abs_diff.mean(axis=0),
            "rmse": np.sqrt((abs_diff ** 2).mean(axis=0)),
        },
        index=pd.Index(PARAM_NAMES, name="parameter"),
    )


def line_profile(grid: np.ndarray, row: int, cols: Optional[range] = None) -> pd.DataFrame:
    """
    Values along the scan line at second index `row`, over positions `cols`
    of the first axis (the full width when omitted).
    """
    grid = np.asarray(grid)
    n_x, n_y = grid.shape
    if not 0 <= row < n_y:
        raise IndexError(f"row {row} out of range [0, {n_y})")
    cols = range(n_x) if cols is None else cols
    if len(cols) == 0 or min(cols) < 0 or max(cols) >= n_x:
        raise IndexError(f"columns {cols} out of range [0, {n_x})")
    positions = np.asarray(list(cols))
    return pd.DataFrame({"position": positions, "value": grid[positions, row]})


def line_profile_frame(grids: Dict[str, np.ndarray], row: int, cols: Optional[range] = None) -> pd.DataFrame:
    """One column per named grid along the same scan line"""
    frame = None
    for name, grid in grids.items():
        profile = line_profile(grid, row, cols).rename(columns={"value": name})
        frame = profile if frame is None else frame.merge(profile, on="position")
    return frame


def save_profile_csv(profile: pd.DataFrame, path) -> Path:
    path = Path(path)
    with atomic_path(path) as tmp:
        profile.to_csv(tmp, index=False, float_format="%.17g", lineterminator="\n")
    return path


def homogeneity(values) -> float:
    """Variance along a profile; lower means a more homogeneous region"""
    return float(np.var(np.asarray(values, dtype=np.float64)))


def mask_partition_mean(losses: np.ndarray, masks: List[RegionMask]) -> float:
    """Pixel-count-weighted mean of region averages"""
    total = sum(m.count for m in masks)
    return sum(region_average_loss(losses, m) * m.count for m in masks) / total

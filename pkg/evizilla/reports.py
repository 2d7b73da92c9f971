"""Report records, their text formatters, and the small statistics the CLI tabulates.

A report is a long-format table of metric rows plus a JSON manifest. Formatters
are plain callables ``ReportRecord -> str`` so a different layout can be swapped
in without touching the commands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import TrainConfig, snapshot_hash
from .errors import InputError
from .paths import ensure_out_dir

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NA = "NA"
COLUMNS = ("series", "name", "split", "coordinate", "value", "config_hash")


def _format_number(value: float) -> str:
    return f"{value:.10g}"


@dataclass(frozen=True)
class MetricRow:
    """One metric value; ``value`` is None when the metric is undefined (e.g. no nodes)."""

    name: str
    value: Optional[float]
    split: str = ""
    series: str = ""
    coordinate: Any = ""

    def __post_init__(self):
        if self.value is None:
            return
        v = float(self.value)
        if not math.isfinite(v):
            raise InputError(f"metric {self.name!r} is not finite: {v}")
        object.__setattr__(self, "value", v)


@dataclass
class ReportRecord:
    experiment: str
    config: Dict[str, Any]
    rows: List[MetricRow] = field(default_factory=list)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def for_config(cls, experiment: str, config: TrainConfig | Mapping[str, Any]) -> "ReportRecord":
        snapshot = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
        return cls(experiment=experiment, config=snapshot)

    @property
    def config_hash(self) -> str:
        return snapshot_hash(self.config)

    def add(self, name: str, value, *, split: str = "", series: str = "", coordinate: Any = "") -> MetricRow:
        """Append a row; NaN is recorded as an absent value."""
        if value is not None and isinstance(value, (float, np.floating)) and math.isnan(value):
            value = None
        row = MetricRow(name=name, value=value, split=split, series=series, coordinate=coordinate)
        self.rows.append(row)
        return row

    def values(self, name: str, series: str | None = None) -> List[Optional[float]]:
        return [r.value for r in self.rows if r.name == name and (series is None or r.series == series)]


class DelimitedReportFormatter:
    """Header line plus one line per metric row; every row repeats the config hash.

    The cell renderers can be replaced to change number or coordinate layout.
    """

    def __init__(
        self,
        *,
        delimiter: str = "\t",
        na: str = NA,
        number: Callable[[float], str] | None = None,
        coordinate: Callable[[Any], str] | None = None,
    ) -> None:
        self._delimiter = delimiter
        self._na = na
        self._number = number or _format_number
        self._coordinate = coordinate or self._default_coordinate

    def __call__(self, record: ReportRecord) -> str:
        digest = record.config_hash
        lines = [self._delimiter.join(COLUMNS)]
        for row in record.rows:
            value = self._na if row.value is None else self._number(row.value)
            cells = [row.series, row.name, row.split, self._coordinate(row.coordinate), value, digest]
            lines.append(self._delimiter.join(cells))
        return "\n".join(lines) + "\n"

    def _default_coordinate(self, coordinate: Any) -> str:
        if coordinate is None or coordinate == "":
            return ""
        if isinstance(coordinate, (float, np.floating)):
            return self._number(float(coordinate))
        return str(coordinate)


def manifest(record: ReportRecord, files: Sequence[str]) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": record.experiment,
        "config": record.config,
        "config_hash": record.config_hash,
        "row_count": len(record.rows),
        "columns": list(COLUMNS),
        "files": list(files),
        "extra": record.extra,
    }


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def table_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(sep="\t", index=False, na_rep=NA, float_format="%.10g", lineterminator="\n")


def write_report(
    record: ReportRecord,
    out_dir: Path | str,
    formatter: Callable[[ReportRecord], str] | None = None,
) -> Path:
    """Write ``<experiment>.tsv``, any side tables and ``<experiment>.manifest.json``."""
    out = ensure_out_dir(out_dir)
    formatter = formatter or DelimitedReportFormatter()
    main = out / f"{record.experiment}.tsv"
    files = [main.name]
    _write_text(main, formatter(record))
    for name, frame in record.tables.items():
        path = out / f"{record.experiment}.{name}.tsv"
        _write_text(path, table_text(frame))
        files.append(path.name)
    manifest_path = out / f"{record.experiment}.manifest.json"
    _write_text(manifest_path, json.dumps(manifest(record, files), indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (%d rows) to %s", record.experiment, len(record.rows), out)
    return manifest_path


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def default_thresholds(step: float = 0.05) -> np.ndarray:
    count = int(round(1.0 / step))
    return np.round(np.arange(1, count + 1) * step, 10)


def parse_thresholds(text: str | None) -> np.ndarray:
    if text is None or not text.strip():
        return default_thresholds()
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"bad threshold list {text!r}") from exc
    return np.asarray(values)


@dataclass(frozen=True)
class ThresholdPoint:
    threshold: float
    accuracy: Optional[float]
    retained: int
    retained_fraction: float


def threshold_curve(uncertainty: np.ndarray, correct: np.ndarray, thresholds) -> List[ThresholdPoint]:
    """Accuracy over nodes with û ≤ τ for each τ, sorted by τ."""
    taus = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if taus.size == 0:
        raise InputError("at least one threshold is required")
    bad = taus[(taus <= 0.0) | (taus > 1.0) | ~np.isfinite(taus)]
    if bad.size:
        raise InputError(f"thresholds must lie in (0, 1], got {bad.tolist()}")
    u = np.asarray(uncertainty, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    total = u.size
    points = []
    for tau in np.sort(taus):
        keep = u <= tau
        n_keep = int(np.count_nonzero(keep))
        acc = float(np.mean(ok[keep])) if n_keep else None
        points.append(ThresholdPoint(float(tau), acc, n_keep, n_keep / total if total else 0.0))
    return points


@dataclass(frozen=True)
class Density:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def density(self) -> np.ndarray:
        total = self.counts.sum()
        widths = np.diff(self.edges)
        if total == 0:
            return np.zeros_like(widths)
        return self.counts / (total * widths)


def binned_density(values, bins: int = 20, value_range: Tuple[float, float] = (0.0, 1.0)) -> Density:
    """Histogram over a fixed range; out-of-range values land in the edge bins."""
    lo, hi = value_range
    if bins < 1 or not hi > lo:
        raise InputError(f"need bins >= 1 and a non-empty range, got {bins} over {value_range}")
    v = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), lo, hi)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return Density(edges=edges, counts=counts)


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def probability_std(probabilities: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Per-row standard deviation of a class-probability matrix."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise InputError(f"probabilities must be n x K with K >= 2, got shape {p.shape}")
    if p.size and np.max(np.abs(p.sum(axis=1) - 1.0)) > tol:
        raise InputError("probability rows must sum to 1")
    return p.std(axis=1)


def true_class_summary(probabilities: np.ndarray, labels: np.ndarray, class_count: int) -> pd.DataFrame:
    """Mean and spread of the true-class probability per class."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    tcp = p[np.arange(y.size), y] if y.size else np.zeros(0)
    rows = []
    for c in range(class_count):
        vals = tcp[y == c]
        rows.append(
            {
                "class": c,
                "count": int(vals.size),
                "mean_true_class_probability": float(vals.mean()) if vals.size else float("nan"),
                "std_true_class_probability": float(vals.std()) if vals.size else float("nan"),
            }
        )
    return pd.DataFrame(rows)


__all__ = [
    "COLUMNS",
    "DelimitedReportFormatter",
    "Density",
    "MetricRow",
    "NA",
    "ReportRecord",
    "SCHEMA_VERSION",
    "ThresholdPoint",
    "binned_density",
    "default_thresholds",
    "manifest",
    "parse_thresholds",
    "probability_std",
    "softmax",
    "table_text",
    "threshold_curve",
    "true_class_summary",
    "write_report",
]

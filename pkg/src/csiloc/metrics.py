"""Per-axis localization error metrics: MAE, NMAE, RMSE and NRMSE.

Two RMSE conventions are available:

``paper_literal``
    ``RMSE_m = sqrt(sum_i (p - y)^2) / n`` -- the ``1/n`` sits outside the root.
``conventional``
    ``RMSE_m = sqrt(sum_i (p - y)^2 / n)``.

so ``paper_literal == conventional / sqrt(n)``.  Normalized variants divide
by the ground-truth coordinate range of each axis, and every "average" is
the mean of the three per-axis values.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

AXES = ("x", "y", "z")
METRICS = ("MAE", "NMAE", "RMSE", "NRMSE")
MODES = ("paper_literal", "conventional")


@dataclass(frozen=True)
class AxisValues:
    x: float
    y: float
    z: float

    @property
    def average(self) -> float:
        return (self.x + self.y + self.z) / 3.0

    def as_dict(self) -> dict[str, float]:
        return {"x": self.x, "y": self.y, "z": self.z, "average": self.average}

    @classmethod
    def from_array(cls, a) -> "AxisValues":
        return cls(float(a[0]), float(a[1]), float(a[2]))


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_").lower()
    if m not in MODES:
        raise ValueError(f"unknown RMSE mode {mode!r}; expected one of {MODES}")
    return m


def _check(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"expected two [n, 3] arrays, got {list(p.shape)} and {list(y.shape)}")
    if p.shape[0] == 0:
        raise DomainError("metrics need at least one sample")
    return p, y


def axis_ranges(p: np.ndarray) -> np.ndarray:
    """max - min of each ground-truth axis; zero ranges are rejected."""
    p = np.asarray(p, dtype=np.float64)
    r = p.max(axis=0) - p.min(axis=0)
    for axis, value in zip(AXES, r):
        if not value > 0:
            raise DomainError(f"ground-truth {axis} range is zero; normalized metrics undefined")
    return r


def mae(p, y) -> AxisValues:
    """Mean absolute error per axis; ``p`` is ground truth, ``y`` the estimate."""
    p, y = _check(p, y)
    return AxisValues.from_array(np.abs(p - y).mean(axis=0))


def nmae(p, y) -> AxisValues:
    p, y = _check(p, y)
    return AxisValues.from_array(np.abs(p - y).mean(axis=0) / axis_ranges(p))


def _root_sum_sq(p, y) -> np.ndarray:
    return np.sqrt(((p - y) ** 2).sum(axis=0))


def rmse(p, y, mode: str = "paper_literal") -> AxisValues:
    p, y = _check(p, y)
    n = p.shape[0]
    if normalize_mode(mode) == "paper_literal":
        return AxisValues.from_array(_root_sum_sq(p, y) / n)
    return AxisValues.from_array(np.sqrt(((p - y) ** 2).mean(axis=0)))


def nrmse(p, y, mode: str = "paper_literal") -> AxisValues:
    p, _ = _check(p, y)
    r = rmse(p, y, mode)
    ranges = axis_ranges(p)
    return AxisValues.from_array([r.x / ranges[0], r.y / ranges[1], r.z / ranges[2]])


@dataclass
class MetricsReport:
    values: dict[str, AxisValues]
    mode: str
    n: int
    ranges: AxisValues

    def get(self, metric: str, axis: str = "average") -> float:
        return self.values[metric].as_dict()[axis]

    def rows(self) -> list[tuple[str, str, float, str]]:
        out = []
        for metric in METRICS:
            for axis, value in self.values[metric].as_dict().items():
                out.append((metric, axis, value, self.mode))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "axis", "value", "mode"])
        for metric, axis, value, mode in self.rows():
            w.writerow([metric, axis, repr(float(value)), mode])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "ranges": {"x": self.ranges.x, "y": self.ranges.y, "z": self.ranges.z},
            "metrics": {m: self.values[m].as_dict() for m in METRICS},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        vals = {m: AxisValues(v["x"], v["y"], v["z"]) for m, v in d["metrics"].items()}
        r = d["ranges"]
        return cls(vals, d["mode"], int(d["n"]), AxisValues(r["x"], r["y"], r["z"]))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_csv(cls, text: str, n: int = 0, ranges: AxisValues | None = None) -> "MetricsReport":
        table: dict[str, dict[str, float]] = {}
        mode = None
        for row in csv.DictReader(io.StringIO(text)):
            table.setdefault(row["metric"], {})[row["axis"]] = float(row["value"])
            mode = row["mode"]
        vals = {m: AxisValues(v["x"], v["y"], v["z"]) for m, v in table.items()}
        return cls(vals, mode, n, ranges or AxisValues(float("nan"), float("nan"), float("nan")))


def compute_report(p, y, mode: str = "paper_literal") -> MetricsReport:
    """All four metric families from one (ground truth, estimate) pair."""
    mode = normalize_mode(mode)
    p, y = _check(p, y)
    values = {"MAE": mae(p, y), "NMAE": nmae(p, y), "RMSE": rmse(p, y, mode),
              "NRMSE": nrmse(p, y, mode)}
    return MetricsReport(values, mode, int(p.shape[0]), AxisValues.from_array(axis_ranges(p)))


def per_sample_errors(p, y) -> np.ndarray:
    """``[n, 4]`` array of |dx|, |dy|, |dz| and Euclidean error per sample."""
    p, y = _check(p, y)
    d = np.abs(p - y)
    return np.column_stack([d, np.sqrt((d ** 2).sum(axis=1))])

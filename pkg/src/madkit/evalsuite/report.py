"""Structured metric reports with range validation and canonical output.

Reports serialize to canonical JSON (sorted keys, no timestamps) and to a
flat CSV, so identical runs produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

# metric name prefix -> inclusive (lo, hi); None disables one side
_RANGES: dict[str, tuple[float | None, float | None]] = {
    "ari": (-1.0, 1.0),
    "purity": (0.0, 1.0),
    "pearson": (-1.0, 1.0),
    "cca": (0.0, 1.0),
    "recall": (0.0, 1.0),
    "accuracy": (0.0, 1.0),
    "mae": (0.0, None),
    "heterogeneity": (0.0, None),
    "mse": (0.0, None),
    "entropy": (0.0, None),
    "loss": (None, None),
    "rank": (0.0, None),
}


def _range_for(name: str) -> tuple[float | None, float | None]:
    key = name.split("/")[-1]
    for prefix, bounds in _RANGES.items():
        if key == prefix or key.startswith(prefix + "_"):
            return bounds
    return (None, None)


@dataclass
class MetricsReport:
    """Named scalar metrics plus free-form metadata for one evaluation."""
    metrics: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        lo, hi = _range_for(name)
        if not math.isnan(value):
            if lo is not None and value < lo - 1e-12:
                raise ValidationError(f"{name}={value} below its range [{lo}, {hi}]")
            if hi is not None and value > hi + 1e-12:
                raise ValidationError(f"{name}={value} above its range [{lo}, {hi}]")
        self.metrics[name] = value

    def update(self, values: dict[str, float], prefix: str = "") -> None:
        for k, v in values.items():
            self.add(prefix + k if prefix else k, v)

    def to_json(self) -> str:
        payload = {"metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
                   "meta": self.meta}
        return json.dumps(payload, sort_keys=True, indent=2,
                          allow_nan=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for k in sorted(self.metrics):
            buf.write(f"{k},{self.metrics[k]!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        payload = json.loads(text)
        report = MetricsReport(meta=payload.get("meta", {}))
        for k, v in payload.get("metrics", {}).items():
            report.add(k, v)
        return report


def summarize_over_seeds(per_seed: dict[str, list[float]],
                         n_resamples: int = 10000,
                         seed: int = 0) -> dict[str, dict[str, float]]:
    """Median and 95% bootstrap interval per metric across seeds."""
    from .metrics import bootstrap_ci
    out: dict[str, dict[str, float]] = {}
    for name in sorted(per_seed):
        values = np.asarray(per_seed[name], dtype=np.float64)
        med, lo, hi = bootstrap_ci(values, stat=np.median,
                                   n_resamples=n_resamples, seed=seed)
        out[name] = {"median": med, "lo": lo, "hi": hi,
                     "n": int(values.size)}
    return out

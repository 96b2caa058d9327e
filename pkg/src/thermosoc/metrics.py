"""Estimation error metrics in percent SoC."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    n_samples: int
    per_cycle: dict = field(default_factory=dict)  # cycle id -> {"rmse", "mae", "n_samples"}
    similarity_H: float | None = None
    runtime_s: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _errors(y_true, y_pred) -> np.ndarray:
    y, p = np.asarray(y_true, dtype=float).ravel(), np.asarray(y_pred, dtype=float).ravel()
    if len(y) != len(p):
        raise ValueError(f"length mismatch: {len(y)} labels vs {len(p)} estimates")
    if len(y) == 0:
        raise ValueError("empty input")
    return p - y


def compute_metrics(y_true, y_pred, similarity_H: float | None = None,
                    runtime_s: float | None = None) -> MetricsReport:
    """RMSE and MAE over every sample of the given series."""
    e = _errors(y_true, y_pred)
    return MetricsReport(float(np.sqrt(np.mean(e ** 2))), float(np.mean(np.abs(e))), len(e),
                         similarity_H=similarity_H, runtime_s=runtime_s)


def cycle_metrics(pairs: dict, similarity_H: float | None = None, runtime_s: float | None = None) -> MetricsReport:
    """Pooled metrics plus a per-cycle breakdown from ``{cycle_id: (y_true, y_pred)}``."""
    if not pairs:
        raise ValueError("empty input")
    per, errs = {}, []
    for cid, (y, p) in pairs.items():
        e = _errors(y, p)
        errs.append(e)
        per[str(cid)] = {"rmse": float(np.sqrt(np.mean(e ** 2))), "mae": float(np.mean(np.abs(e))),
                         "n_samples": len(e)}
    e = np.concatenate(errs)
    return MetricsReport(float(np.sqrt(np.mean(e ** 2))), float(np.mean(np.abs(e))), len(e), per,
                         similarity_H, runtime_s)

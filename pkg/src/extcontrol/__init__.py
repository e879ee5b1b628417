"""External control arms for master-protocol trials: construction, ATE estimation,
fit-for-use scoring, sensitivity analysis and a counterfactual simulator."""

from __future__ import annotations

__version__ = "0.1.0"

from . import controls, data, estimand, estimators, fitness, sensitivity, simulate  # noqa: E402
from .data import Dataset, ingest_csv, export_csv  # noqa: E402
from .estimand import EstimandSpec, IndexWindow, classify_control  # noqa: E402

__all__ = [
    "Dataset",
    "EstimandSpec",
    "IndexWindow",
    "__version__",
    "classify_control",
    "controls",
    "data",
    "estimand",
    "estimators",
    "export_csv",
    "fitness",
    "ingest_csv",
    "sensitivity",
    "simulate",
]

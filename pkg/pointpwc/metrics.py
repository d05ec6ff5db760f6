from __future__ import annotations

from dataclasses import asdict
from dataclasses import dataclass
from typing import Any
from typing import Dict

import numpy as np

from pointpwc.autodiff import Tensor
from pointpwc.errors import ShapeError

# Thresholds follow the scene-flow literature's convention and are labelled so in every output.
STRICT_EPE = 0.05
STRICT_RELATIVE = 0.05
RELAXED_EPE = 0.1
RELAXED_RELATIVE = 0.1
OUTLIER_EPE = 0.3
OUTLIER_RELATIVE = 0.1
THRESHOLDS_LABEL = "convention"
RELATIVE_EPS = 1e-20


@dataclass
class FlowMetrics:
    epe3d: float
    acc_strict: float
    acc_relaxed: float
    outlier: float
    n_points: int

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["thresholds"] = THRESHOLDS_LABEL
        return payload


def evaluate(pred: Any, gt: Any) -> FlowMetrics:
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3 or pred.shape[0] == 0:
        raise ShapeError("evaluate", [pred.shape, gt.shape])
    error = np.linalg.norm(pred - gt, axis=1)
    relative = error / np.maximum(np.linalg.norm(gt, axis=1), RELATIVE_EPS)
    return FlowMetrics(
        epe3d=float(error.mean()),
        acc_strict=float(np.mean((error < STRICT_EPE) | (relative < STRICT_RELATIVE))),
        acc_relaxed=float(np.mean((error < RELAXED_EPE) | (relative < RELAXED_RELATIVE))),
        outlier=float(np.mean((error > OUTLIER_EPE) | (relative > OUTLIER_RELATIVE))),
        n_points=int(pred.shape[0]),
    )

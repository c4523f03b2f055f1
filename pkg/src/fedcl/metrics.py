"""Regression metrics averaged across the 8 action targets: MSE, RMSE, PCC.

The reported average RMSE is sqrt(average MSE) so that every (loss, rmse)
pair satisfies rmse = sqrt(loss); the mean of per-action RMSEs is emitted
as a secondary field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_STD = 1e-12


@dataclass
class MetricsReport:
    per_action_mse: np.ndarray          # (8,)
    avg_mse: float                      # the reported "loss"
    avg_rmse: float                     # sqrt(avg_mse)
    mean_per_action_rmse: float         # secondary column
    per_action_pcc: np.ndarray          # (8,), nan where degenerate
    avg_pcc: float                      # mean over non-degenerate actions
    degenerate_actions: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "per_action_mse": [float(v) for v in self.per_action_mse],
            "avg_mse": self.avg_mse,
            "avg_rmse": self.avg_rmse,
            "mean_per_action_rmse": self.mean_per_action_rmse,
            "per_action_pcc": [float(v) for v in self.per_action_pcc],
            "avg_pcc": self.avg_pcc,
            "degenerate_actions": list(self.degenerate_actions),
        }


def pcc(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation; None when either side has (near-)zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pcc expects two equal-length vectors, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("pcc needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).mean())
    sy = np.sqrt((yc ** 2).mean())
    if sx < DEGENERATE_STD or sy < DEGENERATE_STD:
        return None
    return float((xc * yc).mean() / (sx * sy))


def compute_report(pred: np.ndarray, target: np.ndarray) -> MetricsReport:
    """Per-action and averaged MSE/RMSE/PCC for one evaluation pass."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.shape[0] < 2:
        raise ValueError("PCC needs at least 2 samples")
    per_action_mse = ((pred - target) ** 2).mean(axis=0)
    avg_mse = float(per_action_mse.mean())
    per_action_pcc = np.full(pred.shape[1], np.nan)
    degenerate = []
    for a in range(pred.shape[1]):
        r = pcc(pred[:, a], target[:, a])
        if r is None:
            degenerate.append(a)
        else:
            per_action_pcc[a] = r
    finite = per_action_pcc[~np.isnan(per_action_pcc)]
    avg_pcc = float(finite.mean()) if finite.size else float("nan")
    return MetricsReport(
        per_action_mse=per_action_mse,
        avg_mse=avg_mse,
        avg_rmse=float(np.sqrt(avg_mse)),
        mean_per_action_rmse=float(np.sqrt(per_action_mse).mean()),
        per_action_pcc=per_action_pcc,
        avg_pcc=avg_pcc,
        degenerate_actions=degenerate,
    )

"""Evaluation: BEV IoU, cross-client evaluation matrices, convergence
diagnostics and rounds-to-target accounting.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import EmptySupportError, _sigmoid
from .model import ModelConfig, ToyBevt
from .params import ParamStore


def iou(pred_logits: np.ndarray, gt: np.ndarray, mask: np.ndarray,
        threshold: float = 0.5) -> float:
    """Vehicle-class intersection-over-union on the unmasked cells.

    Predictions are sigmoid(logit) >= threshold. An empty union (no
    predicted and no true cells) counts as a perfect 1.0.
    """
    z = np.asarray(pred_logits, dtype=np.float64)
    if z.shape != gt.shape or z.shape != mask.shape:
        raise ValueError("iou: shape mismatch")
    active = mask == 1.0
    if not active.any():
        raise EmptySupportError("iou: every cell is masked out")
    pred = _sigmoid(z) >= threshold
    truth = gt == 1.0
    inter = np.sum(pred & truth & active)
    union = np.sum((pred | truth) & active)
    if union == 0:
        return 1.0
    return float(inter / union)


@dataclass
class CrossEvalMatrix:
    """IoU of every personalized model (column) on every testset (row)."""
    client_ids: list
    values: np.ndarray

    def diagonal_is_row_max(self) -> int:
        """Number of rows whose diagonal entry is the row maximum."""
        count = 0
        for i in range(len(self.client_ids)):
            if self.values[i, i] >= self.values[i].max():
                count += 1
        return count

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = ["testset"] + [f"model_{c}" for c in self.client_ids]
            fh.write(",".join(header) + "\n")
            for i, cid in enumerate(self.client_ids):
                row = [f"testset_{cid}"] + [repr(v) for v in self.values[i]]
                fh.write(",".join(row) + "\n")


@dataclass
class CrossEvalEntry:
    client_id: int
    rig: object
    test_points: list
    mask: np.ndarray
    private_values: np.ndarray


def cross_evaluate(config: ModelConfig, segment_sizes: list,
                   base_values: np.ndarray, private_idx: np.ndarray,
                   entries: list) -> CrossEvalMatrix:
    """Evaluate each client's personalized model on every client's testset.

    Entry (i, j) couples model j's private slice with testset i's rig
    geometry and mask: a model visiting a foreign rig keeps its own
    personalization, which is exactly the mismatch being measured.
    """
    if not entries:
        raise ValueError("cross_evaluate needs at least one client")
    shapes = {e.mask.shape for e in entries}
    if len(shapes) != 1:
        raise ValueError("testset grids have incompatible shapes")
    k = len(entries)
    values = np.zeros((k, k))
    for j, model_entry in enumerate(entries):
        full = base_values.copy()
        full[private_idx] = model_entry.private_values
        model = ToyBevt(config, ParamStore(segment_sizes, values=full))
        for i, data_entry in enumerate(entries):
            scores = [iou(model.forward(p.views, data_entry.rig,
                                        data_entry.mask).data,
                          p.bev_gt, data_entry.mask)
                      for p in data_entry.test_points]
            values[i, j] = float(np.mean(scores)) if scores else float("nan")
    return CrossEvalMatrix(client_ids=[e.client_id for e in entries],
                           values=values)


def convergence_diagnostic(series, warmup: int = 0) -> float:
    """Log-log least-squares slope of the series against round index.

    A series decaying like c / sqrt(t) fits slope -0.5; a flat series fits
    slope 0. Only the post-warmup window is fitted.
    """
    y = np.asarray(series, dtype=np.float64)
    if y.size < 20:
        raise ValueError("need a series of at least 20 rounds")
    window = y[warmup:]
    if np.any(window <= 0.0):
        raise ValueError("series values must be positive for a log-log fit")
    t = np.arange(warmup + 1, y.size + 1, dtype=np.float64)
    lx, ly = np.log(t), np.log(window)
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


def rounds_to_target(iou_series, fraction: float = 0.95) -> int:
    """First round (1-based) reaching `fraction` of the final IoU."""
    y = np.asarray(iou_series, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty series")
    target = fraction * y[-1]
    for i, v in enumerate(y):
        if v >= target:
            return i + 1
    return int(y.size)


@dataclass
class EvalReport:
    """Per-client end-of-run summary."""
    client_id: int
    final_iou: float
    final_train_loss: float
    rounds_used: int
    rounds_to_target_95: int
    bits_up_total: int
    bits_down_total: int

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "final_iou": self.final_iou,
            "final_train_loss": self.final_train_loss,
            "rounds_used": self.rounds_used,
            "rounds_to_target_95": self.rounds_to_target_95,
            "bits_up_total": self.bits_up_total,
            "bits_down_total": self.bits_down_total,
        }

"""Mutual-information diagnostics over softmax predictions."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import rel_entr

from ..utils.compatibility import DatasetError, InputError

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-6
CSV_ROW_TOLERANCE = 1e-3


@dataclass(frozen=True)
class PredictionSet:
    """n rows of class probabilities"""

    p: np.ndarray

    @classmethod
    def from_rows(cls, rows, tolerance: float = ROW_TOLERANCE, source: str = "predictions") -> "PredictionSet":
        p = np.asarray(rows, dtype=np.float64)
        if p.ndim == 1 and p.size:
            p = p[np.newaxis, :]
        if p.ndim != 2 or p.shape[1] < 1:
            raise InputError(f"{source}: expected an n x C probability table, got shape {p.shape}")
        for i, row in enumerate(p):
            if not np.all(np.isfinite(row)) or row.min() < -tolerance or row.max() > 1 + tolerance:
                raise InputError(f"{source}: row {i} has entries outside [0, 1]")
            if abs(row.sum() - 1.0) > tolerance:
                raise InputError(f"{source}: row {i} sums to {row.sum():.6g}, not 1")
        return cls(np.clip(p, 0.0, 1.0))

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def n_classes(self) -> int:
        return self.p.shape[1]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.p, axis=1)


def save_predictions(preds: PredictionSet, path: str) -> None:
    header = ",".join(f"p{j}" for j in range(preds.n_classes))
    try:
        np.savetxt(path, preds.p, delimiter=",", fmt="%.17g", header=header, comments="")
    except OSError as e:
        raise DatasetError(f"{path}: cannot write predictions ({e.strerror})") from e


def load_predictions(path: str, tolerance: float = CSV_ROW_TOLERANCE) -> PredictionSet:
    """Read an n x C CSV; a non-numeric first line is taken as the header"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip() and not line.startswith("#")]
    except OSError as e:
        raise DatasetError(f"{path}: cannot read predictions ({e.strerror})") from e

    if lines and not _is_numeric_row(lines[0]):
        lines = lines[1:]
    rows = []
    width: Optional[int] = None
    for i, line in enumerate(lines):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise InputError(f"{path}: row {i} is not numeric: {line!r}") from None
        if width is not None and len(row) != width:
            raise InputError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        width = len(row)
        rows.append(row)
    if not rows:
        raise InputError(f"{path}: no prediction rows")
    return PredictionSet.from_rows(rows, tolerance=tolerance, source=path)


def _is_numeric_row(line: str) -> bool:
    try:
        [float(v) for v in line.split(",")]
    except ValueError:
        return False
    return True


def mi_param_output(preds: PredictionSet) -> float:
    """Softmax-variance surrogate: (1/C) Σ_j (1/n) Σ_i (p_ij − p̂_j)²"""
    if preds.n < 1:
        raise InputError("mi_param_output needs at least one prediction row")
    return float(np.var(preds.p, axis=0).mean())


def joint_distribution(preds_a: PredictionSet, preds_b: PredictionSet) -> np.ndarray:
    """P = (1/n) Σᵢ pᵢ qᵢᵀ, renormalized to unit total"""
    if preds_a.p.shape != preds_b.p.shape:
        raise InputError(f"prediction sets differ in shape: {preds_a.p.shape} vs {preds_b.p.shape}")
    joint = preds_a.p.T @ preds_b.p / preds_a.n
    return joint / joint.sum()


def mi_pairwise(preds_a: PredictionSet, preds_b: PredictionSet) -> float:
    """Discrete mutual information of the joint prediction distribution"""
    joint = joint_distribution(preds_a, preds_b)
    independent = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    value = float(rel_entr(joint, independent).sum())
    return max(value, 0.0)

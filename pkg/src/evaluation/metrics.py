"""
Evaluation: confusion matrix, precision/recall/F1 (per class, macro or micro),
accuracy, ROC-AUC as the Mann-Whitney statistic, and PCA projection of pooled
features. Reports export to CSV for external plotting.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.error_handling import DataError, NumericalError

logger = logging.getLogger(__name__)

Average = Literal["macro", "micro"]

METRICS_FILE = "metrics.csv"
CONFUSION_FILE = "confusion_matrix.csv"
PROJECTION_COLUMNS = ["x", "y", "z"]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K x K, rows true, columns predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class EvalReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    average: str
    avg_precision: float
    avg_recall: float
    avg_f1: float
    confusion: ConfusionMatrix
    auc: Optional[float] = None
    class_names: List[str] = field(default_factory=list)
    zero_division: List[str] = field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        values = {
            "accuracy": self.accuracy,
            f"{self.average}_precision": self.avg_precision,
            f"{self.average}_recall": self.avg_recall,
            f"{self.average}_f1": self.avg_f1,
        }
        if self.auc is not None:
            values["auc"] = self.auc
        return values

    def _names(self) -> List[str]:
        return self.class_names or [str(i) for i in range(self.confusion.num_classes)]

    def to_frame(self) -> pd.DataFrame:
        rows = [{"metric": name, "class": "all", "value": value} for name, value in self.summary().items()]
        for i, name in enumerate(self._names()):
            rows.append({"metric": "precision", "class": name, "value": float(self.precision[i])})
            rows.append({"metric": "recall", "class": name, "value": float(self.recall[i])})
            rows.append({"metric": "f1", "class": name, "value": float(self.f1[i])})
        return pd.DataFrame(rows, columns=["metric", "class", "value"])

    def confusion_frame(self) -> pd.DataFrame:
        names = self._names()
        return pd.DataFrame(self.confusion.counts, index=pd.Index(names, name="true"), columns=names)

    def to_csv(self, out_dir: Union[str, Path]) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / METRICS_FILE, index=False)
        self.confusion_frame().to_csv(out_dir / CONFUSION_FILE)
        logger.info(f"Wrote evaluation report to {out_dir}")


def confusion_matrix(true_labels: Sequence[int], predicted_labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise DataError(f"label length mismatch: {true_labels.shape[0]} true vs {predicted_labels.shape[0]} predicted")
    for name, labels in (("true", true_labels), ("predicted", predicted_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return ConfusionMatrix(counts)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def classification_metrics(
    cm: ConfusionMatrix, average: Average = "macro", class_names: Optional[List[str]] = None
) -> EvalReport:
    """
    Per-class precision, recall and F1 plus their average and accuracy.

    A zero denominator yields 0 and is listed in ``zero_division`` as
    ``<metric>:<class index>``. ``micro`` pools TP/FP/FN over classes.
    """
    counts = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise DataError("confusion matrix is empty: no samples were evaluated")
    if average not in ("macro", "micro"):
        raise DataError(f"unknown averaging mode: {average}")

    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, actual)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)

    flags = [f"precision:{i}" for i in np.flatnonzero(predicted == 0)]
    flags += [f"recall:{i}" for i in np.flatnonzero(actual == 0)]
    flags += [f"f1:{i}" for i in np.flatnonzero(precision + recall == 0)]
    if flags:
        logger.warning(f"Zero denominators set to 0: {', '.join(flags)}")

    if average == "macro":
        avg_p, avg_r, avg_f = float(precision.mean()), float(recall.mean()), float(f1.mean())
    else:
        pooled_p = tp.sum() / predicted.sum()
        pooled_r = tp.sum() / actual.sum()
        avg_p, avg_r = float(pooled_p), float(pooled_r)
        avg_f = float(2 * pooled_p * pooled_r / (pooled_p + pooled_r)) if pooled_p + pooled_r > 0 else 0.0

    return EvalReport(
        accuracy=float(tp.sum() / counts.sum()),
        precision=precision,
        recall=recall,
        f1=f1,
        average=average,
        avg_precision=avg_p,
        avg_recall=avg_r,
        avg_f1=avg_f,
        confusion=cm,
        class_names=list(class_names or []),
        zero_division=flags,
    )


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Binary AUC: fraction of (positive, negative) pairs where the positive
    scores higher, ties counting one half. Labels are 0/1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise DataError(f"score/label length mismatch: {scores.shape} vs {labels.shape}")
    pos, neg = scores[labels == 1], scores[labels != 1]
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUC is undefined when only one class is present")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (pos.size * neg.size))


def multiclass_roc_auc(probabilities: np.ndarray, labels: Sequence[int]) -> float:
    """Binary: AUC of class 1's probability. Multi-class: one-vs-rest macro over classes present."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probabilities.shape[1]
    if k == 2:
        return roc_auc(probabilities[:, 1], labels)
    per_class = []
    for c in range(k):
        binary = (labels == c).astype(np.int64)
        if binary.all() or not binary.any():
            logger.warning(f"Class {c} skipped in one-vs-rest AUC: needs positives and negatives")
            continue
        per_class.append(roc_auc(probabilities[:, c], binary))
    if not per_class:
        raise DataError("AUC is undefined when only one class is present")
    return float(np.mean(per_class))


@dataclass
class PcaResult:
    projection: np.ndarray  # N x dims
    components: np.ndarray  # m x dims, orthonormal columns
    explained_variance: np.ndarray  # eigenvalues, descending
    explained_variance_ratio: np.ndarray
    degenerate: bool = False  # fewer than ``dims`` informative components


def pca_project(features: np.ndarray, dims: int = 3) -> PcaResult:
    """
    Project mean-centered rows onto the top ``dims`` covariance eigenvectors.

    Each component's largest-magnitude entry is made positive (first such entry
    on ties). Zero-variance directions are kept but flagged as ``degenerate``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected an N x m feature matrix, got shape {x.shape}")
    n, m = x.shape
    if n <= dims:
        raise DataError(f"PCA to {dims} dimensions needs more than {dims} samples, got {n}")
    if dims > m:
        raise DataError(f"cannot project {m}-dimensional features to {dims} dimensions")
    if not np.all(np.isfinite(x)):
        raise NumericalError("PCA input contains non-finite values")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1][:dims]
    values = np.clip(eigvals[order], 0.0, None)
    vectors = eigvecs[:, order]
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(dims)])
    vectors = vectors * np.where(signs == 0, 1.0, signs)

    total = float(np.clip(eigvals, 0.0, None).sum())
    ratio = values / total if total > 0 else np.zeros(dims)
    tol = max(total, 1.0) * 1e-12 * m
    degenerate = bool(np.any(values <= tol))
    if degenerate:
        logger.warning(f"PCA: only {int(np.sum(values > tol))} of {dims} components carry variance")
    return PcaResult(centered @ vectors, vectors, values, ratio, degenerate)


def projection_frame(projection: np.ndarray, labels: Sequence[Union[int, str]]) -> pd.DataFrame:
    if projection.shape[1] != len(PROJECTION_COLUMNS):
        raise DataError(f"projection CSV needs {len(PROJECTION_COLUMNS)} columns, got {projection.shape[1]}")
    frame = pd.DataFrame(projection, columns=PROJECTION_COLUMNS)
    frame["label"] = list(labels)
    return frame

"""Evaluation metrics: accuracy matrix, backward transfer, ECE, Gram drift.

The accuracy matrix is a lower-triangular list of lists: row t holds the
accuracy of every task i <= t measured after training through task t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import as_matrix
from .losses import DistanceVariant, median_sigma, relation_matrix


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches the label column.

    Ties in the logits resolve to the lowest class index so that
    reimplementations agree exactly.
    """
    lg = as_matrix(logits, "logits")
    y = as_matrix(labels, "labels")
    if lg.shape[0] == 0:
        raise ValueError("accuracy: empty input")
    if y.shape != (lg.shape[0], 1):
        raise ValueError(f"accuracy: labels {y.shape} vs logits {lg.shape}")
    pred = lg.argmax(axis=1)
    return float(np.mean(pred == y.astype(np.int64).ravel()))


def backward_transfer(matrix) -> float:
    """Mean change of earlier-task accuracy after the final task.

    BWT = (1/(T-1)) * sum_{i<T} (R[T-1][i] - R[i][i]); negative values mean
    forgetting. Requires at least two tasks.
    """
    rows = [list(r) for r in matrix]
    t = len(rows)
    if t < 2:
        raise ValueError("backward_transfer needs at least 2 tasks")
    for i, row in enumerate(rows):
        if len(row) < i + 1:
            raise ValueError(f"accuracy matrix row {i} is too short")
    return float(np.mean([rows[-1][i] - rows[i][i] for i in range(t - 1)]))


@dataclass
class CalibrationBins:
    """Per-bin confidence/accuracy sums over equal-width confidence bins."""

    edges: np.ndarray
    confidence_sum: np.ndarray
    accuracy_sum: np.ndarray
    count: np.ndarray

    @property
    def total(self) -> int:
        return int(self.count.sum())


def calibration_bins(logits, labels, bins: int = 10) -> CalibrationBins:
    """Histogram max-softmax confidence against correctness.

    Confidence 1.0 lands in the last bin; empty bins keep zero sums.
    """
    if bins < 2:
        raise ValueError("calibration needs at least 2 bins")
    lg = as_matrix(logits, "logits")
    y = as_matrix(labels, "labels")
    if lg.shape[0] == 0:
        raise ValueError("calibration: empty input")
    shifted = lg - lg.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    conf = p.max(axis=1)
    correct = (lg.argmax(axis=1) == y.astype(np.int64).ravel()).astype(np.float64)
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    conf_sum = np.zeros(bins)
    acc_sum = np.zeros(bins)
    count = np.zeros(bins)
    np.add.at(conf_sum, idx, conf)
    np.add.at(acc_sum, idx, correct)
    np.add.at(count, idx, 1.0)
    return CalibrationBins(np.linspace(0.0, 1.0, bins + 1), conf_sum, acc_sum, count)


def ece(logits, labels, bins: int = 10) -> float:
    """Expected Calibration Error over equal-width confidence bins.

    sum_b (n_b / N) * |acc_b - conf_b|, empty bins contributing zero.
    """
    cb = calibration_bins(logits, labels, bins)
    total = cb.total
    out = 0.0
    for b in range(len(cb.count)):
        n_b = cb.count[b]
        if n_b == 0:
            continue
        out += (n_b / total) * abs(cb.accuracy_sum[b] / n_b - cb.confidence_sum[b] / n_b)
    return float(out)


def gram_deviation(z_new, z_old, variant: DistanceVariant) -> float:
    """Relation-structure gap (1/N^2) * ||M(z_new) - M(z_old)||_F.

    Diagnostic only, no gradients. For rbf_gram without an explicit sigma
    the bandwidth is the median heuristic over both batches stacked, which
    keeps the result symmetric in its arguments.
    """
    a = as_matrix(z_new, "z_new")
    b = as_matrix(z_old, "z_old")
    if a.shape != b.shape:
        raise ValueError(f"gram_deviation: shapes differ, {a.shape} vs {b.shape}")
    sigma = None
    if variant.kind == "rbf_gram":
        sigma = variant.sigma if variant.sigma is not None else median_sigma(np.vstack([a, b]))
    n = a.shape[0]
    diff = relation_matrix(a, variant, sigma) - relation_matrix(b, variant, sigma)
    return float(np.linalg.norm(diff, "fro") / (n * n))


def export_embeddings(m, x, path) -> None:
    """Write encode(m, x) as CSV, one latent row per input.

    Values use repr formatting, so reading them back reproduces the doubles
    bit-for-bit. An empty input yields a header-only file.
    """
    x = as_matrix(x, "x")
    latent = m.encoder.latent_dim
    header = ",".join(f"z{j}" for j in range(latent))
    lines = [header]
    if x.shape[0] > 0:
        z = m.encode_values(x)
        for row in z:
            lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")

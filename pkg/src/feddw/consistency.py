"""Soft-label / class-relation consistency kernel.

The soft-label (SL) matrix stacks per-class average softmax outputs; the
class-relation (CR) matrix is the Gram matrix of the classification-layer
weight rows. Both express inter-class similarity, and the regularizer here
penalizes the squared Frobenius distance between the global SL matrix and
the row-softmaxed CR matrix:

    L(omega) = (1 / C^2) * || SL - softmax_rows(omega @ omega.T) ||_F^2

which is bounded by 2 / C for any row-stochastic SL matrix. The exact
gradient, a linearized convex surrogate, and count-weighted SL aggregation
live here as pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidInputError
from .numerics import as_matrix, frobenius_sq_dist, gram, softmax_rows

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SLMatrix:
    """Per-class average soft labels plus coverage flags.

    Row i is the mean softmax output over samples of class i. Classes with
    no source samples have an all-zero row flagged uncovered.
    """

    values: np.ndarray  # (C, C) float64
    covered: np.ndarray  # (C,) bool

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InvalidInputError(f"SL matrix must be square, got shape {v.shape}")
        if self.covered.shape != (v.shape[0],):
            raise InvalidInputError("covered flags must have one entry per class")
        cov = self.covered
        if np.any(v[~cov] != 0.0):
            raise InvalidInputError("uncovered SL rows must be all-zero")
        if cov.any():
            rows = v[cov]
            if rows.min() < -ROW_SUM_TOL or rows.max() > 1.0 + ROW_SUM_TOL:
                raise InvalidInputError("covered SL rows must have entries in [0, 1]")
            sums = rows.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
                raise InvalidInputError("covered SL rows must sum to 1")

    @property
    def class_count(self) -> int:
        return self.values.shape[0]

    @classmethod
    def uniform(cls, class_count: int) -> "SLMatrix":
        """Maximum-entropy prior used as the initial global SL matrix."""
        if class_count < 2:
            raise InvalidInputError(f"class_count must be >= 2, got {class_count}")
        return cls(
            values=np.full((class_count, class_count), 1.0 / class_count),
            covered=np.ones(class_count, dtype=bool),
        )

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "values": self.values.tolist(),
            "covered": [bool(c) for c in self.covered],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SLMatrix":
        values = np.asarray(payload["values"], dtype=np.float64)
        covered = np.asarray(payload["covered"], dtype=bool)
        return cls(values, covered)


def local_sl_matrix(model: nn.Model, features, labels, class_count: int,
                    batch_size: int = 1024) -> SLMatrix:
    """Per-class mean softmax outputs of a model over a data shard."""
    if model.class_count != class_count:
        raise InvalidInputError(
            f"model outputs {model.class_count} classes, expected {class_count}"
        )
    x = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    sums = np.zeros((class_count, class_count))
    counts = np.zeros(class_count, dtype=np.int64)
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits, _ = nn.forward(model, xb)
        np.add.at(sums, yb, softmax_rows(logits))
        counts += np.bincount(yb, minlength=class_count)
    covered = counts > 0
    values = np.zeros_like(sums)
    values[covered] = sums[covered] / counts[covered, None]
    return SLMatrix(values, covered)


def aggregate_sl(reports: list[tuple[SLMatrix, np.ndarray]],
                 previous_global: SLMatrix) -> SLMatrix:
    """Count-weighted per-row mean of client SL matrices.

    Row i weights each client by its class-i sample count. Rows no
    participating client covers are carried over from the previous global
    matrix, so every output row stays row-stochastic.
    """
    c = previous_global.class_count
    if not reports:
        raise InvalidInputError("aggregate_sl needs at least one report")
    all_counts = []
    for sl, counts in reports:
        if sl.values.shape != (c, c):
            raise InvalidInputError(f"SL matrix shape {sl.values.shape} != ({c}, {c})")
        counts = np.asarray(counts, dtype=np.float64)
        if counts.shape != (c,):
            raise InvalidInputError(f"count vector shape {counts.shape} != ({c},)")
        if counts.min() < 0:
            raise InvalidInputError("class counts must be non-negative")
        all_counts.append(counts)
    totals = np.sum(all_counts, axis=0)
    fresh = totals > 0
    safe_totals = np.where(fresh, totals, 1.0)
    acc = np.zeros((c, c))
    for (sl, _), counts in zip(reports, all_counts):
        acc += (counts / safe_totals)[:, None] * sl.values
    values = np.where(fresh[:, None], acc, previous_global.values)
    covered = fresh | previous_global.covered
    return SLMatrix(values, covered)


def cr_matrix(classifier_weights) -> np.ndarray:
    """Class-relation matrix: Gram matrix of classifier weight rows."""
    return gram(classifier_weights)


def reg_loss_bound(class_count: int) -> float:
    """Strict upper bound 2 / C on the consistency loss."""
    if class_count < 2:
        raise InvalidInputError(f"class_count must be >= 2, got {class_count}")
    return 2.0 / class_count


def _check_reg_shapes(global_sl: SLMatrix, w: np.ndarray) -> int:
    c = global_sl.class_count
    if w.shape[0] != c:
        raise InvalidInputError(
            f"classifier weights have {w.shape[0]} rows, SL matrix expects {c}"
        )
    return c


def reg_loss(global_sl: SLMatrix, classifier_weights) -> float:
    """Consistency loss between the global SL matrix and softmaxed CR matrix.

    Uncovered SL rows are excluded from the sum; comparing against an
    all-zero pseudo-row would inject spurious signal.
    """
    w = as_matrix(classifier_weights, "classifier_weights")
    c = _check_reg_shapes(global_sl, w)
    s = softmax_rows(cr_matrix(w))
    mask = global_sl.covered
    diff = global_sl.values[mask] - s[mask]
    value = float(np.sum(diff * diff)) / (c * c)
    assert 0.0 <= value < reg_loss_bound(c), f"consistency loss {value} escaped [0, 2/{c})"
    return value


def reg_grad(global_sl: SLMatrix, classifier_weights) -> np.ndarray:
    """Exact gradient of :func:`reg_loss` w.r.t. the classifier weights.

    Chain rule through row softmax and the Gram map; depends only on the
    SL matrix and the weights, never on a data batch.
    """
    w = as_matrix(classifier_weights, "classifier_weights")
    c = _check_reg_shapes(global_sl, w)
    s = softmax_rows(cr_matrix(w))
    d_s = np.zeros_like(s)
    mask = global_sl.covered
    d_s[mask] = (-2.0 / (c * c)) * (global_sl.values[mask] - s[mask])
    # row-softmax backward: dG = S * (dS - <dS, S> per row)
    d_g = s * (d_s - np.sum(d_s * s, axis=1, keepdims=True))
    return (d_g + d_g.T) @ w


def reg_loss_linearized(global_sl: SLMatrix, classifier_weights, reference) -> float:
    """Convex quadratic surrogate of the unsoftmaxed consistency objective.

    First-order expansion of the quadratic weight term around ``reference``
    (same shape as the weights). At ``reference == classifier_weights`` the
    surrogate equals || SL - w @ w.T ||_F^2 exactly.
    """
    w = as_matrix(classifier_weights, "classifier_weights")
    _check_reg_shapes(global_sl, w)
    ref = as_matrix(reference, "reference")
    if ref.shape != w.shape:
        raise InvalidInputError(f"reference shape {ref.shape} != weight shape {w.shape}")
    m = global_sl.values - ref @ w.T - w @ ref.T + ref @ ref.T
    return float(np.sum(m * m))


def reg_grad_linearized(global_sl: SLMatrix, classifier_weights, reference) -> np.ndarray:
    """Gradient of :func:`reg_loss_linearized` w.r.t. the weights."""
    w = as_matrix(classifier_weights, "classifier_weights")
    _check_reg_shapes(global_sl, w)
    ref = as_matrix(reference, "reference")
    if ref.shape != w.shape:
        raise InvalidInputError(f"reference shape {ref.shape} != weight shape {w.shape}")
    m = global_sl.values - ref @ w.T - w @ ref.T + ref @ ref.T
    return -2.0 * (m + m.T) @ ref


def sl_cr_distance(global_sl: SLMatrix, classifier_weights) -> float:
    """Frobenius distance between the SL matrix and the softmaxed CR matrix."""
    w = as_matrix(classifier_weights, "classifier_weights")
    _check_reg_shapes(global_sl, w)
    return float(np.sqrt(frobenius_sq_dist(global_sl.values, softmax_rows(cr_matrix(w)))))

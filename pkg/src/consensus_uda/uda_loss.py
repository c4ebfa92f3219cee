"""Weighted cross-entropy, branch-disagreement uncertainty and the rectified loss.

All functions take arrays whose last axis is the class axis, so they work
on a single (H, W, C) map or a batch (N, H, W, C) alike. Sums accumulate in
float64. Probabilities are clamped to ``[EPS, 1]`` before any log.

Rectified loss per labeled pixel::

    exp(-D) * CE + D,   D = sum_c P_c * log(P_c / Q_c)

with P the primary branch, Q the auxiliary branch. Pixels labeled 255
contribute to neither term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .taxonomy import IGNORE_ID

EPS = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce_term: float
    kld_term: float
    pixel_count: int


class CrossEntropy(NamedTuple):
    per_pixel: np.ndarray
    total: float
    pixel_count: int


def class_frequency_weights(labelmaps: Sequence[np.ndarray], n_classes: int) -> np.ndarray:
    """Weights proportional to class pixel frequency, normalized to mean 1 over present classes.

    Frequent classes get larger weights; absent classes get 0.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    for lm in labelmaps:
        lm = np.asarray(lm)
        vals = lm[lm != IGNORE_ID].astype(np.int64)
        if vals.size and vals.max() >= n_classes:
            raise DataError(f"label {int(vals.max())} out of range for {n_classes} classes")
        counts += np.bincount(vals, minlength=n_classes)
    total = counts.sum()
    if total == 0:
        raise DataError("empty dataset: every pixel is ignored")
    freq = counts / total
    present = freq > 0
    return np.where(present, freq / freq[present].mean(), 0.0)


def _check(probs, labels=None):
    probs = np.asarray(probs)
    if labels is not None and np.shape(labels) != probs.shape[:-1]:
        raise ShapeError(f"labels shape {np.shape(labels)} != probability map shape {probs.shape[:-1]}")
    return probs


def _weights(weights, n_classes):
    if weights is None:
        return np.ones(n_classes)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ShapeError(f"{weights.shape[0]} class weights for {n_classes} channels")
    return weights


def _true_class_prob(probs, labels):
    valid = labels != IGNORE_ID
    idx = np.where(valid, labels, 0).astype(np.intp)
    if valid.any() and idx[valid].max() >= probs.shape[-1]:
        raise ShapeError(f"label {int(idx[valid].max())} has no channel in a {probs.shape[-1]}-class map")
    p_true = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0].astype(np.float64)
    return valid, idx, p_true


def cross_entropy(probs: np.ndarray, labels: np.ndarray, weights=None) -> CrossEntropy:
    """Per-pixel ``-w_y log p_y`` (0 at ignored pixels) and its sum."""
    probs = _check(probs, labels)
    labels = np.asarray(labels)
    w = _weights(weights, probs.shape[-1])
    valid, idx, p_true = _true_class_prob(probs, labels)
    ce = np.where(valid, -w[idx] * np.log(np.clip(p_true, EPS, 1.0)), 0.0)
    return CrossEntropy(ce, float(ce.sum(dtype=np.float64)), int(valid.sum()))


def kld_uncertainty(primary: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """Per-pixel KL(primary || aux) in nats."""
    primary = np.asarray(primary)
    aux = np.asarray(aux)
    if primary.shape != aux.shape:
        raise ShapeError(f"primary shape {primary.shape} != auxiliary shape {aux.shape}")
    p = np.clip(primary.astype(np.float64), EPS, 1.0)
    q = np.clip(aux.astype(np.float64), EPS, 1.0)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def rectified_loss(primary, aux, pseudo, weights=None) -> LossBreakdown:
    return _rectified(primary, aux, pseudo, weights)[0]


def _rectified(primary, aux, pseudo, weights):
    primary = _check(primary, pseudo)
    if np.shape(aux) != primary.shape:
        raise ShapeError(f"primary shape {primary.shape} != auxiliary shape {np.shape(aux)}")
    ce = cross_entropy(primary, pseudo, weights)
    d = kld_uncertainty(primary, aux)
    valid = np.asarray(pseudo) != IGNORE_ID
    damp = np.exp(-d)
    ce_term = float(np.sum(np.where(valid, damp * ce.per_pixel, 0.0)))
    kld_term = float(np.sum(np.where(valid, d, 0.0)))
    breakdown = LossBreakdown(ce_term + kld_term, ce_term, kld_term, ce.pixel_count)
    return breakdown, ce, d, valid, damp


def rectified_loss_grads(primary, aux, pseudo, weights=None):
    """Rectified loss and its gradient with respect to both branches' logits.

    Takes the softmax outputs (primary P, auxiliary Q); returns
    ``(LossBreakdown, dL/dz_primary, dL/dz_aux)`` where ``z`` are the
    pre-softmax logits. Clamped probabilities have zero derivative.
    """
    P = np.asarray(primary, dtype=np.float64)
    Q = np.asarray(aux, dtype=np.float64)
    breakdown, ce, d, valid, damp = _rectified(P, Q, pseudo, weights)
    w = _weights(weights, P.shape[-1])

    Pc = np.clip(P, EPS, 1.0)
    Qc = np.clip(Q, EPS, 1.0)
    dl_dd = np.where(valid, 1.0 - damp * ce.per_pixel, 0.0)[..., None]
    dl_dce = np.where(valid, damp, 0.0)

    g_p = dl_dd * (np.log(Pc) - np.log(Qc) + 1.0)
    labels = np.asarray(pseudo)
    _, idx, p_true = _true_class_prob(P, labels)
    ce_grad = np.where(
        p_true > EPS, -dl_dce * w[idx] / np.clip(p_true, EPS, 1.0), 0.0
    )
    np.put_along_axis(g_p, idx[..., None], np.take_along_axis(g_p, idx[..., None], -1) + ce_grad[..., None], -1)
    g_p = np.where(P > EPS, g_p, 0.0)
    g_q = np.where(Q > EPS, -dl_dd * Pc / Qc, 0.0)

    dz = P * (g_p - np.sum(P * g_p, axis=-1, keepdims=True))
    du = Q * (g_q - np.sum(Q * g_q, axis=-1, keepdims=True))
    return breakdown, dz, du

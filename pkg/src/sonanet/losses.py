"""Batch-hard triplet loss and label-smoothed cross-entropy."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import ContractError, ShapeError
from .nn import log_softmax_rows, relu
from .tensor import Tensor, add, make_op, mul, sub, take, tsum

DIST_CLAMP = 1e-12


def pairwise_euclidean(features: Tensor) -> Tensor:
    """``B x B`` Euclidean distances, ``sqrt(max(|f_i - f_j|^2, 1e-12))``."""
    f = features.data
    diff = f[:, None, :] - f[None, :, :]
    sq = (diff * diff).sum(axis=2)
    live = sq > DIST_CLAMP
    dist = np.sqrt(np.where(live, sq, DIST_CLAMP))

    def bw(g):
        coef = np.where(live, g / dist, 0.0)
        coef = coef + coef.T
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return make_op(dist, (features,), bw, "pdist")


def _check_triplet_labels(labels: np.ndarray) -> None:
    counts = Counter(labels.tolist())
    for lab, cnt in counts.items():
        if cnt < 2:
            raise ContractError(f"label {lab} occurs once; batch-hard mining needs a positive")
    if len(counts) < 2:
        raise ContractError("batch-hard mining needs at least two distinct labels")


def batch_hard_triplet(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Mean over anchors of ``max(0, margin + max_pos d - min_neg d)``."""
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} do not match {labels.shape[0]} labels")
    _check_triplet_labels(labels)
    b = labels.shape[0]
    dist = pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    rows = np.arange(b)
    hardest_pos = np.where(pos, dist.data, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, dist.data, np.inf).argmin(axis=1)
    d_ap = take(dist, (rows, hardest_pos))
    d_an = take(dist, (rows, hardest_neg))
    return mul(tsum(relu(add(sub(d_ap, d_an), margin))), 1.0 / b)


def label_smoothed_ce(logits: Tensor, labels, epsilon: float = 0.1) -> Tensor:
    labels = np.asarray(labels)
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"epsilon must lie in [0, 1), got {epsilon}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    q = np.full((b, c), epsilon / c)
    q[np.arange(b), labels] += 1.0 - epsilon
    logp = log_softmax_rows(logits)
    return mul(tsum(mul(logp, Tensor(q))), -1.0 / b)


def reid_loss(outputs: dict, labels, margin: float = 0.3, epsilon: float = 0.1, weights=(1.0, 1.0, 1.0, 1.0)):
    """Four-term objective over both branches; returns ``(total, terms)``
    where ``terms`` maps term name to its scalar Tensor."""
    terms = {
        "triplet_global": batch_hard_triplet(outputs["global_feat"], labels, margin),
        "ce_global": label_smoothed_ce(outputs["global_logits"], labels, epsilon),
        "triplet_local": batch_hard_triplet(outputs["local_feat"], labels, margin),
        "ce_local": label_smoothed_ce(outputs["local_logits"], labels, epsilon),
    }
    total = None
    for wt, t in zip(weights, terms.values()):
        piece = t if wt == 1.0 else mul(t, wt)
        total = piece if total is None else add(total, piece)
    return total, terms

# gmmcomet/services/losses.py
"""
Adaptation losses. Each loss returns its value together with the gradient
w.r.t. the network output it consumes (reduced embeddings, logits or
features), so the network's backward pass can chain them.

Pseudo-labels arrive as integer codes: 0..C-1 known, C unknown, -1 ignored.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from ..core.errors import ContractViolation, NonFiniteLossError, NumericalError
from ..schemas.config_schemas import LossWeights

logger = logging.getLogger(__name__)

LOSS_TERMS = ("contrastive", "entropy", "consistency_src", "consistency_mt")


@dataclass
class LabeledEmbeddings:
    reduced: np.ndarray           # (2N, d) student projections of the originals followed by augmentations
    labels: np.ndarray            # (2N,) integer codes; augmentation i + N shares label i
    means: np.ndarray             # (C, d) GMM means, constants
    mean_mask: Optional[np.ndarray] = None  # (C,) bool, classes whose mean takes part

    def __post_init__(self):
        n2 = self.reduced.shape[0]
        if n2 % 2 or self.labels.shape != (n2,):
            raise ContractViolation("expected 2N embeddings and 2N labels")
        half = n2 // 2
        if not np.array_equal(self.labels[:half], self.labels[half:]):
            raise ContractViolation("augmentations must inherit the label of their original")
        if self.mean_mask is None:
            self.mean_mask = np.ones(self.means.shape[0], dtype=bool)


def _normalize_rows(x: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise NumericalError(f"zero-norm {what}: cosine similarity undefined")
    return x / norms[:, None], norms


def contrastive_loss(emb: LabeledEmbeddings, temperature: float,
                     exclude_self_pairs: bool = True) -> Tuple[float, np.ndarray]:
    """
    Supervised contrastive loss on cosine similarities with a second,
    prototype term anchoring every known sample to its GMM class mean.

    Sample term: for every anchor i with a known label, averaged over its
    positives j sharing the label (j != i unless `exclude_self_pairs` is False),
        -sim(j, i) / T + logsumexp_l sim(l, i) / T
    where l ranges over all 2N samples (l != i when excluding self pairs).
    Mean term: for every known anchor i of class c,
        -sim(mu_c, i) / T + logsumexp_c' sim(mu_c', i) / T.
    Both terms are averaged over the known anchors, so the value does not
    grow with the batch size. Returns (loss, d loss / d reduced).
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    z = np.asarray(emb.reduced, dtype=np.float64)
    labels = emb.labels
    num_classes = emb.means.shape[0]
    known = (labels >= 0) & (labels < num_classes)
    if not np.any(known):
        return 0.0, np.zeros_like(z)
    num_anchors = int(known.sum())

    u, norms = _normalize_rows(z, "embedding")
    sim = u @ u.T / temperature                   # sim[l, i]

    # --- sample term -----------------------------------------------------
    positive = (labels[:, None] == labels[None, :]) & known[None, :]   # [j, i]
    logits = sim.copy()
    if exclude_self_pairs:
        np.fill_diagonal(positive, False)
        np.fill_diagonal(logits, -np.inf)
    log_denominator = logsumexp(logits, axis=0)   # per anchor i
    n_pos = positive.sum(axis=0)                  # per anchor i
    has_pos = n_pos > 0
    anchor_weight = np.where(has_pos, 1.0 / np.where(has_pos, n_pos, 1), 0.0) / num_anchors
    loss_samples = np.sum(anchor_weight * (n_pos * log_denominator - np.sum(np.where(positive, sim, 0.0), axis=0)))

    weights = softmax(logits, axis=0)             # [l, i], zero on the diagonal when excluded
    d_sim = (n_pos[None, :] * weights - positive) * anchor_weight[None, :]   # d loss / d sim[l, i]
    d_sim /= temperature

    # --- mean term ---------------------------------------------------------
    mask = emb.mean_mask
    valid_means = np.flatnonzero(mask)
    if np.any(~mask[labels[known]]):
        raise ContractViolation("known pseudo-label refers to a class without a mean")
    v, _ = _normalize_rows(np.asarray(emb.means, dtype=np.float64)[valid_means], "class mean")
    proto = u[known] @ v.T / temperature          # (K, C_valid)
    column = np.searchsorted(valid_means, labels[known])
    rows = np.arange(proto.shape[0])
    loss_means = (-np.sum(proto[rows, column]) + np.sum(logsumexp(proto, axis=1))) / num_anchors
    d_proto = softmax(proto, axis=1)
    d_proto[rows, column] -= 1.0
    d_proto /= temperature * num_anchors

    # --- back to the embeddings ---------------------------------------------
    d_u = (d_sim + d_sim.T) @ u
    d_u[known] += d_proto @ v
    # Through the row normalization u = z / |z|.
    radial = np.sum(d_u * u, axis=1, keepdims=True)
    d_z = (d_u - radial * u) / norms[:, None]
    return float(loss_samples + loss_means), d_z


def normalized_entropy(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    return float(-np.sum(xlogy(probs, probs)) / np.log(probs.shape[-1]))


def entropy_loss(student_probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean normalized entropy of known-labelled samples minus that of
    unknown-labelled ones, both divided by the full batch size.
    Returns (loss, d loss / d logits).
    """
    p = np.asarray(student_probs, dtype=np.float64)
    n, num_classes = p.shape
    log_c = np.log(num_classes)
    plogp = xlogy(p, p)
    entropy = -plogp.sum(axis=1) / log_c
    sign = np.zeros(n)
    sign[(labels >= 0) & (labels < num_classes)] = 1.0
    sign[labels == num_classes] = -1.0
    loss = float(np.sum(sign * entropy) / n)
    # dI/dz_k = -p_k (log p_k + H) / log C, with H the unnormalized entropy.
    log_p = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    d_entropy = -(p * log_p + p * (entropy * log_c)[:, None]) / log_c
    return loss, (sign / n)[:, None] * d_entropy


def _mean_distance(student_feats: np.ndarray, other_feats: np.ndarray) -> Tuple[float, np.ndarray]:
    if student_feats.shape != other_feats.shape:
        raise ContractViolation(f"feature shapes differ: {student_feats.shape} vs {other_feats.shape}")
    n = student_feats.shape[0]
    diff = student_feats - other_feats
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / n
    return float(dist.sum() / n), grad


def consistency_src(student_feats: np.ndarray, source_feats: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean Euclidean distance between student and frozen source features."""
    return _mean_distance(np.asarray(student_feats, dtype=np.float64), np.asarray(source_feats, dtype=np.float64))


def consistency_mt(student_feats: np.ndarray, teacher_feats: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean Euclidean distance between student and teacher features."""
    return _mean_distance(np.asarray(student_feats, dtype=np.float64), np.asarray(teacher_feats, dtype=np.float64))


def total_loss(parts: Dict[str, float], weights: LossWeights) -> float:
    for term in LOSS_TERMS:
        value = parts[term]
        if not np.isfinite(value):
            raise NonFiniteLossError(term, float(value))
    return float(
        parts["contrastive"]
        + weights.lambda_entropy * parts["entropy"]
        + weights.lambda_src * parts["consistency_src"]
        + weights.lambda_mt * parts["consistency_mt"]
    )


def smoothed_cross_entropy(logits: np.ndarray, targets: np.ndarray, smoothing: float) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy against label-smoothed one-hot targets; returns (loss, d loss / d logits)."""
    n, num_classes = logits.shape
    q = np.full((n, num_classes), smoothing / num_classes)
    q[np.arange(n), targets] += 1.0 - smoothing
    log_p = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = float(-np.sum(q * log_p) / n)
    return loss, (np.exp(log_p) - q) / n

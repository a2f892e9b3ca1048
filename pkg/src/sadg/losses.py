"""Loss terms of the composite objective and the alternative scale-alignment strategies.

Tensor-level functions (``*_from_logits`` / ``*_from_embeddings``) are what the
trainer uses on a single shared forward pass. The model-level wrappers
(``adversarial_domain_loss``, ``scale_alignment_loss``, ...) run the networks
themselves and are convenient for tests and notebooks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import DomainDiscriminator, FeatureGenerator, TaskNetwork, discriminate_domain, embed
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # adversarial domain loss
    lambda2: float = 0.2  # cross-domain triplet loss
    lambda3: float = 0.1  # scale alignment
    margin_alpha: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "margin_alpha"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.margin_alpha <= 0:
            raise ValueError("margin_alpha must be positive")


def _check_labels(labels, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    return y


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise T.ShapeError(f"cross_entropy: logits must be [batch, K], got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(labels, k)
    if y.size != n:
        raise T.ShapeError(f"cross_entropy: {n} logit rows but {y.size} labels")
    logp = T.reshape(T.log_softmax(logits, axis=1), (n * k,))
    picked = T.take(logp, np.arange(n) * k + y)
    return T.neg(T.mean(picked))


# ---------------------------------------------------------------------------
# adversarial domain loss
# ---------------------------------------------------------------------------

def domain_loss_from_features(d: DomainDiscriminator, feats, domain_labels,
                              lambda_grl: float = 1.0) -> Tensor:
    return cross_entropy(discriminate_domain(d, feats, lambda_grl), domain_labels)


def adversarial_domain_loss(g: FeatureGenerator, d: DomainDiscriminator, images, domain_labels,
                            lambda_grl: float = 1.0) -> Tensor:
    """CE of D on reversed-gradient features: one backward pass trains D to
    minimise and G to maximise the domain confusion loss."""
    return domain_loss_from_features(d, embed(g, images), domain_labels, lambda_grl)


def grl_lambda(schedule: str, progress: float, base: float = 1.0) -> float:
    """GRL coefficient. ``ramp`` is 2/(1+exp(-10 p)) - 1 scaled by ``base``."""
    if schedule == "constant":
        return base
    if schedule == "ramp":
        return base * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    raise ValueError(f"unknown GRL schedule {schedule!r}")


# ---------------------------------------------------------------------------
# symmetric KL
# ---------------------------------------------------------------------------

def clamp_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(p, PROB_EPS)


def symmetric_kl(p, q) -> float:
    """0.5 * (KL(p||q) + KL(q||p)) for probability vectors (last axis), after clamping."""
    p, q = clamp_distribution(p), clamp_distribution(q)
    if p.shape != q.shape:
        raise T.ShapeError(f"symmetric_kl: shapes {p.shape} and {q.shape} differ")
    # KL(p||q) + KL(q||p) == sum (p - q)(log p - log q); this form is exactly symmetric
    return 0.5 * np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)


def symmetric_kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Differentiable row-wise symmetric KL between two [n, K] probability tensors -> [n]."""
    p = T.clamp_min(p, PROB_EPS)
    q = T.clamp_min(q, PROB_EPS)
    return T.mul(0.5, T.tsum(T.mul(T.sub(p, q), T.sub(T.log(p), T.log(q))), axis=1))


def _class_average(values: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``values`` within each class present, then mean over those classes."""
    classes = [c for c in np.unique(labels)]
    if not classes:
        return Tensor(0.0)
    terms = [T.mean(T.take(values, np.flatnonzero(labels == c))) for c in classes]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.div(total, float(len(terms)))


# ---------------------------------------------------------------------------
# scale alignment strategies
# ---------------------------------------------------------------------------

def pairwise_alignment_from_logits(logits_large, logits_small, labels) -> Tensor:
    """Per-pair symmetric KL between task softmax at both scales, averaged per class then over classes."""
    logits_large, logits_small = T.as_tensor(logits_large), T.as_tensor(logits_small)
    if logits_large.shape != logits_small.shape:
        raise T.ShapeError(f"scale alignment: {logits_large.shape} vs {logits_small.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        return Tensor(0.0)
    kl = symmetric_kl_rows(T.softmax(logits_large, axis=1), T.softmax(logits_small, axis=1))
    return _class_average(kl, y)


def _scale_groups(labels, scale_tags):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    s = np.asarray(scale_tags, dtype=np.int64).reshape(-1)
    groups = []
    for c in np.unique(y):
        large = np.flatnonzero((y == c) & (s == 1))
        small = np.flatnonzero((y == c) & (s == 0))
        if large.size and small.size:
            groups.append((large, small))
    return groups


def _mean_over(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.div(total, float(len(terms)))


def feature_alignment_from_embeddings(t: TaskNetwork, embeddings, labels, scale_tags) -> Tensor:
    """Average embeddings per (class, scale), classify the centroids, symmetric KL between scales."""
    e = T.as_tensor(embeddings)
    terms = []
    for large, small in _scale_groups(labels, scale_tags):
        zl = T.mean(T.take(e, large), axis=0, keepdims=True)
        zs = T.mean(T.take(e, small), axis=0, keepdims=True)
        kl = symmetric_kl_rows(T.softmax(t(zl), axis=1), T.softmax(t(zs), axis=1))
        terms.append(T.tsum(kl))
    return _mean_over(terms)


def avg_score_alignment_from_logits(logits, labels, scale_tags) -> Tensor:
    """Average softmax scores per (class, scale), symmetric KL between the averaged scales."""
    probs = T.softmax(T.as_tensor(logits), axis=1)
    terms = []
    for large, small in _scale_groups(labels, scale_tags):
        sl = T.mean(T.take(probs, large), axis=0, keepdims=True)
        ss = T.mean(T.take(probs, small), axis=0, keepdims=True)
        terms.append(T.tsum(symmetric_kl_rows(sl, ss)))
    return _mean_over(terms)


def scale_alignment_loss(g: FeatureGenerator, t: TaskNetwork, large_images, small_images, labels) -> Tensor:
    """Pairwise strategy on index-aligned large/small image batches."""
    fl = t(embed(g, large_images))
    fs = t(embed(g, small_images))
    return pairwise_alignment_from_logits(fl, fs, labels)


def _stack_scales(large_images, small_images, labels):
    images = np.concatenate([np.asarray(large_images), np.asarray(small_images)])
    y = np.concatenate([np.asarray(labels), np.asarray(labels)])
    tags = np.r_[np.ones(len(large_images), dtype=np.int64), np.zeros(len(small_images), dtype=np.int64)]
    return images, y, tags


def feature_alignment_loss(g: FeatureGenerator, t: TaskNetwork, large_images, small_images, labels) -> Tensor:
    images, y, tags = _stack_scales(large_images, small_images, labels)
    return feature_alignment_from_embeddings(t, embed(g, images), y, tags)


def avg_score_alignment_loss(g: FeatureGenerator, t: TaskNetwork, large_images, small_images, labels) -> Tensor:
    images, y, tags = _stack_scales(large_images, small_images, labels)
    return avg_score_alignment_from_logits(t(embed(g, images)), y, tags)


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------

def valid_triplets(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (anchor, positive, negative) index triples, lexicographic order."""
    y = np.asarray(labels).reshape(-1)
    n = y.size
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    mask = pos[:, :, None] & neg[:, None, :]
    return np.nonzero(mask)


def pairwise_sq_distances(embeddings) -> Tensor:
    e = T.as_tensor(embeddings)
    n, d = e.shape
    diff = T.sub(T.reshape(e, (n, 1, d)), T.reshape(e, (1, n, d)))
    return T.tsum(T.square(diff), axis=2)


def triplet_loss(embeddings, labels, margin: float = 0.3, mining: str = "all") -> Tensor:
    """Hinge on squared distances, ignoring domain and scale when forming triplets.

    ``mining="all"`` averages over every valid in-batch triplet; ``"hard"``
    keeps, per anchor, only the farthest positive and the nearest negative.
    """
    e = T.as_tensor(embeddings)
    if e.ndim != 2:
        raise T.ShapeError(f"triplet_loss: embeddings must be [batch, dim], got {e.shape}")
    y = np.asarray(labels).reshape(-1)
    if y.size != e.shape[0]:
        raise T.ShapeError(f"triplet_loss: {e.shape[0]} embeddings but {y.size} labels")
    n = y.size
    dist = T.reshape(pairwise_sq_distances(e), (n * n,))
    if mining == "all":
        a, p, q = valid_triplets(y)
        if a.size == 0:
            logger.warning("triplet_loss: batch has no valid triplet; returning 0")
            return Tensor(0.0)
        margins = T.add(T.sub(T.take(dist, a * n + p), T.take(dist, a * n + q)), margin)
        return T.mean(T.relu(margins))
    if mining == "hard":
        dm = dist.data.reshape(n, n)
        same = y[:, None] == y[None, :]
        pos = same & ~np.eye(n, dtype=bool)
        neg = ~same
        anchors = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
        if anchors.size == 0:
            logger.warning("triplet_loss: batch has no valid triplet; returning 0")
            return Tensor(0.0)
        hard_p = np.array([np.flatnonzero(pos[i])[np.argmax(dm[i, pos[i]])] for i in anchors])
        hard_n = np.array([np.flatnonzero(neg[i])[np.argmin(dm[i, neg[i]])] for i in anchors])
        margins = T.add(T.sub(T.take(dist, anchors * n + hard_p), T.take(dist, anchors * n + hard_n)), margin)
        return T.mean(T.relu(margins))
    raise ValueError(f"unknown triplet mining mode {mining!r}")


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

def composite_loss(weights: LossWeights, l_cls, l_ada, l_trip, l_sa) -> Tensor:
    """L_cls + lambda1 * L_ada + lambda2 * L_trip + lambda3 * L_sa."""
    terms = [T.as_tensor(x) for x in (l_cls, l_ada, l_trip, l_sa)]
    for name, term in zip(("l_cls", "l_ada", "l_trip", "l_sa"), terms):
        if term.size != 1:
            raise T.ShapeError(f"composite_loss: {name} must be scalar, got shape {term.shape}")
    l_cls, l_ada, l_trip, l_sa = terms
    total = T.add(l_cls, T.mul(weights.lambda1, l_ada))
    total = T.add(total, T.mul(weights.lambda2, l_trip))
    return T.add(total, T.mul(weights.lambda3, l_sa))

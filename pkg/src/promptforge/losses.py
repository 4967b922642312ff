"""Scalar objectives: prompt diversity, semantic contrastive, targeted
supervised contrastive, and additive angular margin (ArcFace)."""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ad


@dataclass(frozen=True)
class ArcFaceConfig:
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("ArcFace scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("ArcFace margin must lie in [0, pi/2)")


def _one_hot(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def diversity_loss(prompts):
    """Mean absolute pairwise cosine between distinct prompts.

    ``prompts`` is a (N_v, l, d) or (N_v, l*d) tensor, or a prompt bank.
    """
    if hasattr(prompts, "tokens"):
        prompts = prompts.tokens
    n = prompts.shape[0]
    if n < 2:
        raise ValueError(f"diversity loss needs at least 2 prompts, got {n}")
    flat = ad.reshape(prompts, (n, -1)) if prompts.ndim > 2 else prompts
    pn = ad.l2_normalize(flat)
    gram = ad.absolute(pn @ pn.T)
    off = Tensor(1.0 - np.eye(n))
    return ad.scale(ad.sum(ad.mul(gram, off)), 1.0 / (n * (n - 1)))


def semantic_contrastive_loss(semantic, labels, class_features, signed=False):
    """Cross-entropy of |cos| similarities to the class anchors (no temperature).

    ``semantic`` are already-adapted features; ``class_features`` are fixed.
    """
    cls = class_features if isinstance(class_features, Tensor) else Tensor(class_features)
    sim = ad.cosine_similarity(semantic, cls)
    if not signed:
        sim = ad.absolute(sim)
    onehot = Tensor(_one_hot(labels, cls.shape[0]))
    return ad.neg(ad.mean(ad.sum(ad.mul(onehot, ad.log_softmax(sim)), axis=1)))


def tsc_loss(visual, targets, semantic, tau=0.07):
    """Targeted supervised contrastive loss.

    ``targets`` is an (N_v, m) integer array of row indices into
    ``semantic``; the denominator runs over every semantic feature.
    Semantic features are detached, so only ``visual`` receives gradient.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    targets = np.asarray(targets, dtype=np.int64)
    n_s = semantic.shape[0]
    if targets.ndim != 2 or targets.shape[0] != visual.shape[0]:
        raise ValueError(f"targets must be ({visual.shape[0]}, m), got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_s):
        raise ValueError("target index does not refer to a semantic feature")
    sem = ad.l2_normalize(ad.detach(semantic) if isinstance(semantic, Tensor) else Tensor(semantic))
    logits = ad.scale(ad.l2_normalize(visual) @ sem.T, 1.0 / tau)
    weights = np.zeros((targets.shape[0], n_s))
    m = targets.shape[1]
    np.add.at(weights, (np.repeat(np.arange(targets.shape[0]), m), targets.reshape(-1)), 1.0 / m)
    return ad.neg(ad.mean(ad.sum(ad.mul(Tensor(weights), ad.log_softmax(logits)), axis=1)))


def arcface_logits(features, class_weights, labels, config):
    cos = ad.cosine_similarity(features, class_weights)
    onehot = Tensor(_one_hot(labels, class_weights.shape[0]))
    phi = ad.arc_margin(cos, config.margin)
    return ad.scale(cos + ad.mul(onehot, phi - cos), config.scale), onehot


def arcface_loss(features, labels, class_weights, config=ArcFaceConfig()):
    logits, onehot = arcface_logits(features, class_weights, labels, config)
    return ad.neg(ad.mean(ad.sum(ad.mul(onehot, ad.log_softmax(logits)), axis=1)))


def cosine_softmax_loss(features, labels, class_weights, scale=1.0):
    """Plain scaled-cosine cross-entropy (ArcFace without margin)."""
    logits = ad.scale(ad.cosine_similarity(features, class_weights), scale)
    onehot = Tensor(_one_hot(labels, class_weights.shape[0]))
    return ad.neg(ad.mean(ad.sum(ad.mul(onehot, ad.log_softmax(logits)), axis=1)))

"""Text side: description corpora, describe/combined/adapted features,
class-prompt anchors, and top-c + Gamma target selection."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .encoders import encode_text
from .numerics import Tensor, ad, parameter

DOMAIN_SLOT, CLASS_SLOT, DESC_SLOT = "[Domain]", "[Class]", "[Description]"
DEFAULT_TEMPLATE = "[Domain] photo of [Class] [Description]."


@dataclass
class ClassDescriptions:
    name: str
    descriptions: list


@dataclass
class DescriptionCorpus:
    domain: str
    classes: list
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        for c in self.classes:
            if not c.descriptions or any(not d.strip() for d in c.descriptions):
                raise ValueError(f"class {c.name!r} needs at least one non-empty description")

    @property
    def class_names(self):
        return [c.name for c in self.classes]

    def subset(self, names):
        """Corpus restricted to ``names`` in the given order."""
        lookup = {c.name: c for c in self.classes}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"classes not in corpus: {missing}")
        return DescriptionCorpus(self.domain, [lookup[n] for n in names], self.template)

    def to_dict(self):
        return {
            "domain": self.domain,
            "template": self.template,
            "classes": [{"name": c.name, "descriptions": list(c.descriptions)} for c in self.classes],
        }

    @classmethod
    def from_dict(cls, doc):
        classes = [ClassDescriptions(c["name"], list(c["descriptions"])) for c in doc["classes"]]
        return cls(doc["domain"], classes, doc.get("template", DEFAULT_TEMPLATE))


def load_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return DescriptionCorpus.from_dict(json.load(fh))


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(corpus.to_dict(), fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def render_prompt(template, domain, class_name, description=""):
    """Fill the template slots; an empty description drops its slot cleanly."""
    for slot in (DOMAIN_SLOT, CLASS_SLOT):
        if slot not in template:
            raise ValueError(f"template {template!r} is missing the {slot} slot")
    if description:
        description = description[:1].lower() + description[1:]
    text = template.replace(DOMAIN_SLOT, domain).replace(CLASS_SLOT, class_name.lower())
    text = text.replace(DESC_SLOT, description)
    text = re.sub(r"\s+", " ", text).strip()
    return re.sub(r"\s+([.,;:!?])", r"\1", text)


# ------------------------------------------------------------------- features


@dataclass
class DescribeFeatureSet:
    features: np.ndarray  # (N, n_s, d)
    class_names: list

    @property
    def per_class(self):
        return self.features.shape[1]


@dataclass
class CombinedFeatureSet:
    features: np.ndarray  # (N_s, d), unit rows
    labels: np.ndarray  # (N_s,)


def build_describe_features(corpus, weights):
    """Encode every description through the template; classes padded by cycling."""
    if DESC_SLOT not in corpus.template:
        raise ValueError(f"template {corpus.template!r} is missing the {DESC_SLOT} slot")
    n_s = max(len(c.descriptions) for c in corpus.classes)
    texts = []
    for c in corpus.classes:
        descs = [c.descriptions[i % len(c.descriptions)] for i in range(n_s)]
        texts.extend(render_prompt(corpus.template, corpus.domain, c.name, d) for d in descs)
    emb = encode_text(texts, weights)
    return DescribeFeatureSet(emb.reshape(len(corpus.classes), n_s, -1), corpus.class_names)


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def combine_describe_features(describe, t_s, rng):
    """Expand each class's n_s features t_s-fold by random subset averaging.

    Each combined feature is the normalized mean of a uniformly random
    subset whose size is uniform on {2, ..., n_s}. With t_s == 1 the
    originals are returned (normalized).
    """
    if t_s < 1:
        raise ValueError(f"t_s must be >= 1, got {t_s}")
    feats = describe.features
    n_cls, n_s, _ = feats.shape
    if t_s == 1:
        out = _unit(feats.reshape(n_cls * n_s, -1))
        return CombinedFeatureSet(out, np.repeat(np.arange(n_cls), n_s))
    if n_s < 2:
        raise ValueError("random combination needs at least 2 descriptions per class")
    rows = []
    for c in range(n_cls):
        for _ in range(t_s * n_s):
            size = int(rng.integers(2, n_s + 1))
            pick = rng.choice(n_s, size, replace=False)
            rows.append(feats[c, np.sort(pick)].mean(axis=0))
    out = _unit(np.stack(rows))
    return CombinedFeatureSet(out, np.repeat(np.arange(n_cls), t_s * n_s))


def build_class_prompt_features(corpus, weights):
    """One anchor per class from the template with an empty description."""
    texts = [render_prompt(corpus.template, corpus.domain, c.name) for c in corpus.classes]
    return encode_text(texts, weights)


# -------------------------------------------------------------------- adapter


@dataclass
class Adapter:
    """Residual bottleneck MLP: alpha * MLP(x) + (1 - alpha) * x.

    Layer widths are (d, d/4, d) with ReLU after the first two layers.
    """

    layers: list  # [(W, b), ...] as trainable tensors
    alpha: float = 0.2

    @classmethod
    def init(cls, dim, rng, alpha=0.2, bottleneck=None):
        widths = [dim, bottleneck or max(1, dim // 4), dim]
        layers, fan_in = [], dim
        for i, w in enumerate(widths):
            bound = 1.0 / np.sqrt(fan_in)
            W = parameter(rng.uniform(-bound, bound, size=(fan_in, w)), name=f"adapter.{i}.weight")
            b = parameter(np.zeros(w), name=f"adapter.{i}.bias")
            layers.append((W, b))
            fan_in = w
        return cls(layers, alpha)

    def parameters(self):
        return [t for pair in self.layers for t in pair]

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = x
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return ad.scale(h, self.alpha) + ad.scale(x, 1.0 - self.alpha)


def adapter_forward(combined, adapter):
    """Diversity semantic features F_s as a graph tensor (labels unchanged)."""
    feats = combined.features if isinstance(combined, CombinedFeatureSet) else combined
    return adapter(feats)


# ------------------------------------------------------------------ selection


@dataclass(frozen=True)
class SelectionConfig:
    c: int = 300
    m: int = 100
    gamma_shape: float = 2.0
    gamma_scale: float = 75.0
    mode: str = "gamma"  # "gamma" or "top" (first m ranks, no randomness)

    def __post_init__(self):
        if not 1 <= self.m <= self.c:
            raise ValueError(f"need 1 <= m <= c, got m={self.m}, c={self.c}")
        if self.mode not in ("gamma", "top"):
            raise ValueError(f"unknown selection mode {self.mode!r}")


def top_c_indices(v, pool, c):
    """Indices (into ``pool``) of the c rows most cosine-similar to ``v``, best first."""
    sims = _unit(pool) @ _unit(np.asarray(v))
    order = np.argsort(-sims, kind="stable")
    return order[:c]


def draw_gamma_ranks(rng, n, shape_k, scale_theta):
    """Raw floor(Gamma) rank draws, before clamping to the pool."""
    return np.floor(rng.gamma(shape_k, scale_theta, size=n)).astype(np.int64)


def _gamma_distinct_ranks(rng, config):
    c, m = config.c, config.m
    chosen, seen = [], set()
    draws = 0
    while len(chosen) < m:
        batch = np.minimum(draw_gamma_ranks(rng, max(2 * (m - len(chosen)), 8), config.gamma_shape, config.gamma_scale), c - 1)
        for r in batch:
            r = int(r)
            if r not in seen:
                seen.add(r)
                chosen.append(r)
                if len(chosen) == m:
                    break
        draws += batch.size
        if draws > 10_000 * m:
            raise RuntimeError(f"gamma rank sampling stalled ({len(chosen)}/{m} distinct after {draws} draws)")
    return np.array(chosen, dtype=np.int64)


def select_semantic_targets(v, class_label, semantic, labels, config, rng):
    """Indices into ``semantic`` of m distinct same-class targets for ``v``.

    Ranks the class pool by cosine to ``v``, keeps the top c, then picks
    m distinct ranks via floor(Gamma(k, theta)) clamped to [0, c - 1].
    """
    pool_idx = np.flatnonzero(np.asarray(labels) == class_label)
    if pool_idx.size < config.c:
        raise ValueError(f"class {class_label} pool has {pool_idx.size} features; need c={config.c}")
    top = top_c_indices(v, np.asarray(semantic)[pool_idx], config.c)
    if config.mode == "top" or config.m == config.c:
        ranks = np.arange(config.m)
    else:
        ranks = _gamma_distinct_ranks(rng, config)
    return pool_idx[top[ranks]]


def select_all_targets(visual, visual_labels, semantic, semantic_labels, config, rng):
    """Row-wise ``select_semantic_targets`` for a batch; returns (N_v, m) indices."""
    return np.stack(
        [
            select_semantic_targets(v, y, semantic, semantic_labels, config, rng)
            for v, y in zip(np.asarray(visual), visual_labels)
        ]
    )


@dataclass
class SemanticState:
    """Precomputed text-side features for one episode."""

    describe: DescribeFeatureSet
    combined: CombinedFeatureSet
    class_features: np.ndarray
    extras: dict = field(default_factory=dict)

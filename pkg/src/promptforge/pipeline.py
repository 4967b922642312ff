"""Two-step training: prompt tuning guided by text, then a margin classifier
on generated features. Also the ablation baselines and the one-step variant."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoders import encode_visual, tokenize_image
from .losses import ArcFaceConfig, arcface_loss, cosine_softmax_loss, diversity_loss, semantic_contrastive_loss, tsc_loss
from .numerics import Adam, SeededRng, Tensor, ad, backward
from .prompts import init_deep_stack, init_diversity_bank
from .semantic import (
    Adapter,
    CombinedFeatureSet,
    SelectionConfig,
    build_class_prompt_features,
    build_describe_features,
    combine_describe_features,
    select_all_targets,
)

VARIANTS = ("full", "clip_base", "b1", "b2", "b3", "b4", "one_step")
ABLATION_ORDER = ("clip_base", "b1", "b2", "b3", "b4", "one_step", "full")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration, name):
        self.iteration = iteration
        super().__init__(f"non-finite {name} at iteration {iteration}")


@dataclass(frozen=True)
class PipelineConfig:
    n_v: int = 4
    iterations: int = 40
    lr_prompts: float = 1e-3
    lr_div_prompts: float | None = None  # None: same as lr_prompts
    lr_adapter: float = 1e-3
    cls_epochs: int = 100
    lr_cls: float = 1e-3
    t_s: int = 8
    selection: SelectionConfig = SelectionConfig(c=24, m=8, gamma_shape=2.0, gamma_scale=6.0)
    tau: float = 0.07
    arcface: ArcFaceConfig = ArcFaceConfig()
    variant: str = "full"
    prompt_length: int = 1
    deep_tokens: int = 5
    adapter_alpha: float = 0.2
    feature_budget: int | None = None
    prompt_originals: bool = False
    signed_sim: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_v < 1 or self.iterations < 0 or self.cls_epochs < 0:
            raise ValueError("n_v must be >= 1 and iteration counts non-negative")

    def budget_for(self, k_shot):
        budget = k_shot * (1 + self.n_v)
        if self.feature_budget is not None and budget != self.feature_budget:
            raise ValueError(f"K*(1+n_v) = {budget} does not match feature_budget {self.feature_budget}")
        return budget


# ---------------------------------------------------------------- augmentation


def _translate(img, dy, dx):
    s = img.shape[0]
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad - dy : pad - dy + s, pad - dx : pad - dx + s]


def augment_image(img, rng, max_shift, rotate=False):
    out = img[:, ::-1] if rng.uniform() < 0.5 else img
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    out = _translate(out, dy, dx)
    if rotate:
        out = np.rot90(out, int(rng.integers(4)))
    return np.ascontiguousarray(out)


def augment_support(images, n_v, rng, patch_size=8, rotate=False):
    """n_v flip/translate variants per image, grouped per source image.

    Returns (augmented images, index of each variant's source image).
    """
    if n_v < 1:
        raise ValueError("n_v must be >= 1")
    out = [augment_image(img, rng, patch_size // 2, rotate) for img in images for _ in range(n_v)]
    return np.stack(out), np.repeat(np.arange(len(images)), n_v)


# ------------------------------------------------------------------ semantics


@dataclass
class SemanticPool:
    features: np.ndarray  # inputs to the text adapter (F_dp)
    labels: np.ndarray
    class_features: np.ndarray  # F_cls


def prepare_semantics(episode, corpus, weights, t_s, rng, describe=True):
    """F_dt -> F_dp and F_cls for the episode's classes, in local label order.

    Without describe prompts the pool degenerates to the class prompts.
    """
    sub = corpus.subset(episode.class_names)
    f_cls = build_class_prompt_features(sub, weights)
    if not describe:
        unit = f_cls / np.linalg.norm(f_cls, axis=1, keepdims=True)
        return SemanticPool(unit, np.arange(len(f_cls)), f_cls)
    combined = combine_describe_features(build_describe_features(sub, weights), t_s, rng)
    return SemanticPool(combined.features, combined.labels, f_cls)


# ----------------------------------------------------------------- classifier


@dataclass
class Classifier:
    """Adapter followed by a cosine head; the probe baseline has no adapter."""

    head: Tensor  # (N, d)
    adapter: Adapter | None = None
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, n_way, dim, rng, alpha=0.2, with_adapter=True):
        head = Tensor(rng.normal(0.0, 0.02, size=(n_way, dim)), requires_grad=True, name="head")
        adapter = Adapter.init(dim, rng.substream("adapter"), alpha) if with_adapter else None
        return cls(head, adapter)

    def parameters(self):
        return [self.head] + (self.adapter.parameters() if self.adapter else [])

    def embed(self, features):
        x = features if isinstance(features, Tensor) else Tensor(features)
        return self.adapter(x) if self.adapter else x

    def logits(self, features):
        return ad.cosine_similarity(self.embed(features), Tensor(self.head.data)).data

    def predict(self, features):
        # np.argmax breaks ties toward the lowest class index
        return np.argmax(self.logits(features), axis=1)


def step2_train_classifier(features, labels, n_way, config, rng, with_adapter=True):
    """Full-batch Adam epochs on the ArcFace loss (cosine softmax for the probe)."""
    features = np.asarray(features)
    if len(features) == 0:
        raise ValueError("classifier needs at least one feature")
    labels = np.asarray(labels)
    if labels.max() >= n_way:
        raise ValueError(f"labels exceed head size {n_way}")
    clf = Classifier.init(n_way, features.shape[1], rng, config.adapter_alpha, with_adapter)
    if clf.head.shape[0] != n_way:
        raise ValueError("classifier head rows must equal episode N")
    opt = Adam(clf.parameters(), lr=config.lr_cls)
    x = Tensor(features)
    for _ in range(config.cls_epochs):
        if with_adapter:
            loss = arcface_loss(clf.embed(x), labels, clf.head, config.arcface)
        else:
            loss = cosine_softmax_loss(x, labels, clf.head, config.arcface.scale)
        backward(loss)
        opt.step()
        opt.zero_grad()
        clf.history.append(loss.item())
    return clf


# ------------------------------------------------------------------- step one


@dataclass
class VariantSpec:
    diversity_prompts: bool
    describe_prompts: bool
    diversity_loss: bool
    selection_mode: str


VARIANT_SPECS = {
    "full": VariantSpec(True, True, True, "gamma"),
    "b1": VariantSpec(False, False, False, "top"),
    "b2": VariantSpec(True, False, True, "top"),
    "b3": VariantSpec(True, True, False, "top"),
    "b4": VariantSpec(True, True, False, "gamma"),
    "one_step": VariantSpec(True, True, True, "gamma"),
}


@dataclass
class Step1Result:
    bank: object  # DiversityPromptBank or None
    deep: object  # DeepPromptStack
    adapter: Adapter
    aug_images: np.ndarray
    aug_source: np.ndarray
    aug_tokens: np.ndarray
    diagnostics: dict
    classifier: Classifier | None = None


def _snapshot(params):
    return [p.data.copy() for p in params]


def _max_delta(params, snap):
    return max((float(np.max(np.abs(p.data - s))) for p, s in zip(params, snap)), default=0.0)


def step1_train(episode, corpus, weights, config, rng):
    """Joint prompt/adapter optimisation with separately routed backward passes.

    Prompts (diversity + deep) step on L_TSC (+ L_div); the text adapter
    steps on L_se only. Diagnostics hold per-iteration losses and, per
    phase, the largest change seen on the parameters that phase must not
    touch.
    """
    spec = VARIANT_SPECS[config.variant]
    one_step = config.variant == "one_step"
    wcfg = weights.config
    d = wcfg.embed_dim
    n_way, k_shot = episode.n_way, episode.k_shot

    aug, src = augment_support(episode.support_images, config.n_v, rng.substream("augment"), wcfg.patch_size)
    labels_v = episode.support_labels[src]
    tokens = tokenize_image(aug, weights)

    prompt_rng = rng.substream("prompts")
    bank = None
    if spec.diversity_prompts:
        bank = init_diversity_bank(n_way, k_shot, config.n_v, config.prompt_length, d, prompt_rng.substream("div"))
        if bank.size != len(aug):
            raise ValueError(f"prompt bank size {bank.size} != augmented image count {len(aug)}")
    deep = init_deep_stack(wcfg.layers, config.deep_tokens, d, prompt_rng.substream("deep"))
    adapter = Adapter.init(d, rng.substream("text-adapter"), config.adapter_alpha)
    pool = prepare_semantics(episode, corpus, weights, config.t_s, rng.substream("combine"), spec.describe_prompts)

    selection = config.selection
    per_class = int(np.min(np.bincount(pool.labels)))
    if not spec.describe_prompts:
        selection = SelectionConfig(c=1, m=1, mode="top")
    elif spec.selection_mode != selection.mode or selection.c > per_class:
        selection = replace(selection, mode=spec.selection_mode, c=min(selection.c, per_class), m=min(selection.m, per_class))

    visual_tokens, visual_labels, visual_prompted = tokens, labels_v, True
    if config.prompt_originals:
        orig = tokenize_image(episode.support_images, weights)
        visual_tokens = np.concatenate([tokens, orig])
        visual_labels = np.concatenate([labels_v, episode.support_labels])

    prompt_params = deep.parameters() + (bank.parameters() if bank is not None else [])
    opt_prompts = Adam(deep.parameters(), lr=config.lr_prompts)
    opt_div = None
    if bank is not None:
        lr_div = config.lr_prompts if config.lr_div_prompts is None else config.lr_div_prompts
        opt_div = Adam(bank.parameters(), lr=lr_div)
    opt_adapter = Adam(adapter.parameters(), lr=config.lr_adapter)
    classifier = opt_cls = None
    if one_step:
        classifier = Classifier.init(n_way, d, rng.substream("classifier"), config.adapter_alpha)
        opt_cls = Adam(classifier.parameters(), lr=config.lr_cls)

    diag = {
        "variant": config.variant,
        "phases": 1 if one_step else 2,
        "selection_mode": selection.mode,
        "loss_terms": ["L_TSC"] + (["L_div"] if spec.diversity_loss else []) + (["L_cls"] if one_step else []),
        "iterations": [],
        "adapter_delta_in_prompt_phase": 0.0,
        "prompt_delta_in_adapter_phase": 0.0,
    }
    sel_rng = rng.substream("select")
    for it in range(config.iterations):
        div_tokens = bank.tokens if bank is not None else None
        if config.prompt_originals and div_tokens is not None:
            f_v = ad.concat(
                [
                    encode_visual(None, div_tokens, deep.groups, weights, patch_tokens=tokens),
                    encode_visual(None, None, deep.groups, weights, patch_tokens=visual_tokens[len(tokens) :]),
                ],
                axis=0,
            )
        else:
            f_v = encode_visual(None, div_tokens, deep.groups, weights, patch_tokens=visual_tokens)
        f_s = adapter(pool.features)
        targets = select_all_targets(f_v.data, visual_labels, f_s.data, pool.labels, selection, sel_rng)
        l_tsc = tsc_loss(f_v, targets, f_s, config.tau)
        l_div = diversity_loss(bank) if bank is not None else None
        loss_v = l_tsc + l_div if spec.diversity_loss else l_tsc
        l_cls = None
        if one_step:
            l_cls = arcface_loss(classifier.embed(f_v), visual_labels, classifier.head, config.arcface)
            loss_v = loss_v + l_cls
        if not np.isfinite(loss_v.item()):
            raise NonFiniteLossError(it, "prompt-side loss")

        # prompt phase: only prompts (and the one-step classifier) may move
        snap = _snapshot(adapter.parameters())
        backward(loss_v)
        opt_prompts.step()
        if opt_div is not None:
            opt_div.step()
            opt_div.zero_grad()
        if one_step:
            opt_cls.step()
            opt_cls.zero_grad()
        opt_prompts.zero_grad()
        diag["adapter_delta_in_prompt_phase"] = max(
            diag["adapter_delta_in_prompt_phase"], _max_delta(adapter.parameters(), snap)
        )

        # adapter phase: only the text adapter may move
        l_se = semantic_contrastive_loss(f_s, pool.labels, pool.class_features, config.signed_sim)
        if not np.isfinite(l_se.item()):
            raise NonFiniteLossError(it, "L_se")
        snap = _snapshot(prompt_params)
        backward(l_se)
        opt_adapter.step()
        opt_adapter.zero_grad()
        diag["prompt_delta_in_adapter_phase"] = max(
            diag["prompt_delta_in_adapter_phase"], _max_delta(prompt_params, snap)
        )
        record = {"iter": it, "L_div": None if l_div is None else l_div.item(), "L_se": l_se.item(), "L_TSC": l_tsc.item()}
        if l_cls is not None:
            record["L_cls"] = l_cls.item()
        diag["iterations"].append(record)
    return Step1Result(bank, deep, adapter, aug, src, tokens, diag, classifier)


# ------------------------------------------------------------- generation / inference


@dataclass
class GeneratedFeatureSet:
    features: np.ndarray
    labels: np.ndarray
    roles: np.ndarray  # "support" or "generated"

    def per_class_counts(self, n_way):
        return np.bincount(self.labels, minlength=n_way)


def _frozen_copy(t):
    return None if t is None else Tensor(t.data)


def generate_features(episode, bank, deep, weights, aug_images=None, aug_source=None, aug_tokens=None):
    """Originals without a diversity prompt plus every augmented image with its own prompt."""
    if aug_tokens is None:
        aug_tokens = tokenize_image(aug_images, weights)
    if bank is not None and bank.size != len(aug_tokens):
        raise ValueError(f"prompt bank size {bank.size} != augmented image count {len(aug_tokens)}")
    groups = None if deep is None else [Tensor(g.data) for g in deep.groups]
    originals = encode_visual(episode.support_images, None, groups, weights).data
    div = None if bank is None else _frozen_copy(bank.tokens)
    generated = encode_visual(None, div, groups, weights, patch_tokens=aug_tokens).data
    feats = np.concatenate([originals, generated])
    labels = np.concatenate([episode.support_labels, episode.support_labels[aug_source]])
    roles = np.array(["support"] * len(originals) + ["generated"] * len(generated))
    return GeneratedFeatureSet(feats, labels, roles)


def infer(images, deep, classifier, weights):
    """argmax of the classifier over deep-prompted visual features; no text path."""
    groups = None if deep is None else [Tensor(g.data) for g in deep.groups]
    feats = encode_visual(images, None, groups, weights).data
    single = feats.ndim == 1
    pred = classifier.predict(feats[None] if single else feats)
    return int(pred[0]) if single else pred


# -------------------------------------------------------------------- variants


@dataclass
class VariantRun:
    predictions: np.ndarray
    accuracy: float
    diagnostics: dict
    deep: object = None
    classifier: Classifier | None = None
    features: GeneratedFeatureSet | None = None


def _clip_base(episode, weights, config, rng):
    budget = config.budget_for(episode.k_shot)
    n_aug = budget // episode.k_shot - 1
    aug, src = augment_support(episode.support_images, n_aug, rng.substream("augment"), weights.config.patch_size, rotate=True)
    feats = encode_visual(np.concatenate([episode.support_images, aug]), None, None, weights).data
    labels = np.concatenate([episode.support_labels, episode.support_labels[src]])
    clf = step2_train_classifier(feats, labels, episode.n_way, config, rng.substream("classifier"), with_adapter=False)
    pred = infer(episode.query_images, None, clf, weights)
    roles = np.array(["support"] * episode.k_shot * episode.n_way + ["generated"] * len(aug))
    diag = {"variant": "clip_base", "phases": 1, "iterations": [], "classifier_loss": clf.history}
    return VariantRun(pred, float(np.mean(pred == episode.query_labels)), diag, None, clf, GeneratedFeatureSet(feats, labels, roles))


def run_variant(variant, episode, corpus, weights, config, rng):
    """Train one variant on the episode's support set and predict its queries."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    config = replace(config, variant=variant)
    config.budget_for(episode.k_shot)
    if variant == "clip_base":
        return _clip_base(episode, weights, config, rng)
    res = step1_train(episode, corpus, weights, config, rng)
    feats = generate_features(episode, res.bank, res.deep, weights, aug_source=res.aug_source, aug_tokens=res.aug_tokens)
    if variant == "one_step":
        clf = res.classifier
    else:
        clf = step2_train_classifier(feats.features, feats.labels, episode.n_way, config, rng.substream("classifier"))
        res.diagnostics["classifier_loss"] = clf.history
    pred = infer(episode.query_images, res.deep, clf, weights)
    return VariantRun(pred, float(np.mean(pred == episode.query_labels)), res.diagnostics, res.deep, clf, feats)


def variant_method(variant, corpus, weights, config, keep_diagnostics=False):
    """Adapter to the ``evaluate`` callable protocol.

    With ``keep_diagnostics`` each episode also yields its step-1 loss records.
    """

    def method(episode, rng):
        run = run_variant(variant, episode, corpus, weights, config, rng)
        if keep_diagnostics:
            return run.predictions, run.diagnostics.get("iterations", [])
        return run.predictions

    return method

"""Run configuration: one JSON document with full defaulting, named presets,
dotted-path overrides, exhaustive validation, and a stable fingerprint."""

from __future__ import annotations

import copy
import hashlib
import json
import os

from .encoders import EncoderConfig
from .episodes import EpisodeConfig, SyntheticDomainSpec
from .losses import ArcFaceConfig
from .pipeline import VARIANTS, PipelineConfig
from .semantic import SelectionConfig

SCHEMA_VERSION = 1

DEFAULTS = {
    "encoder": {
        "embed_dim": 64,
        "layers": 4,
        "heads": 4,
        "patch_size": 8,
        "image_size": 32,
        "vocab_hash_buckets": 4096,
        "max_text_len": 32,
        "seed": 0,
        "weights_path": None,
    },
    "pipeline": {
        "n_v": 4,
        "iterations": 10,
        "lr_prompts": 1e-1,
        "lr_div_prompts": None,
        "lr_adapter": 1e-2,
        "cls_epochs": 100,
        "lr_cls": 1e-3,
        "t_s": 8,
        "tau": 0.07,
        "prompt_length": 1,
        "deep_tokens": 5,
        "adapter_alpha": 0.2,
        "feature_budget": None,
        "prompt_originals": False,
        "signed_sim": False,
        "selection": {"c": 24, "m": 8, "gamma_shape": 2.0, "gamma_scale": 6.0},
        "arcface": {"scale": 30.0, "margin": 0.0},
    },
    "episodes": {"n_way": 5, "k_shot": 1, "n_query": 15, "count": 100},
    "dataset": {
        "path": None,
        "seed": 1,
        "n_classes": 10,
        "image_size": 32,
        "images_per_class": 40,
        "noise": 0.08,
        "color_jitter": 0.10,
        "channel_permutation": [2, 0, 1],
        "gamma_curve": 1.6,
        "domain_noise": 0.03,
        "descriptions_per_class": 6,
        "domain_name": "Synthetic texture",
    },
    "corpus_path": None,
    "variant": "full",
    "variants": ["clip_base", "b1", "b2", "b3", "b4", "one_step", "full"],
    "seed": 7,
    "seeds": [7],
    "nv_list": [1, 2, 3, 4, 5, 6, 7],
    "workers": 1,
    "diagnostics": False,
    "out": "runs",
}

_PAPER = {
    "pipeline.t_s": 50,
    "pipeline.selection.c": 300,
    "pipeline.selection.m": 100,
    "pipeline.selection.gamma_scale": 75.0,
    "pipeline.arcface.margin": 0.5,
    "pipeline.feature_budget": 25,
}
PRESETS = {
    "desk": {},
    "paper-1shot": {**_PAPER, "pipeline.n_v": 24, "pipeline.iterations": 60, "pipeline.lr_prompts": 1e-4, "pipeline.lr_adapter": 1e-4},
    "paper-5shot": {
        **_PAPER,
        "episodes.k_shot": 5,
        "pipeline.n_v": 4,
        "pipeline.iterations": 60,
        "pipeline.lr_prompts": 1e-4,
        "pipeline.lr_adapter": 1e-4,
    },
    "paper-eurosat-1shot": {**_PAPER, "pipeline.n_v": 24, "pipeline.iterations": 40, "pipeline.lr_prompts": 1e-3, "pipeline.lr_adapter": 1e-3},
    "paper-eurosat-5shot": {
        **_PAPER,
        "episodes.k_shot": 5,
        "pipeline.n_v": 4,
        "pipeline.iterations": 55,
        "pipeline.lr_prompts": 1e-3,
        "pipeline.lr_adapter": 1e-3,
    },
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _merge(base, update, prefix, problems):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            problems.append(f"unknown key {path}")
        elif isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + ".", problems)
        elif isinstance(base[key], dict):
            problems.append(f"{path} must be an object")
        else:
            base[key] = value


def parse_value(text):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(doc, path, value, problems=None):
    problems = [] if problems is None else problems
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            problems.append(f"unknown key {path}")
            return problems
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        problems.append(f"unknown key {path}")
    else:
        node[keys[-1]] = value
    return problems


def load_config(path=None, preset=None, overrides=()):
    """Defaults <- preset <- file <- overrides; raises ConfigError listing every problem."""
    doc = copy.deepcopy(DEFAULTS)
    problems = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        preset = preset or user.pop("preset", None)
        user.pop("preset", None)
        user.pop("schema_version", None)
    else:
        user = {}
    if preset is not None:
        if preset not in PRESETS:
            problems.append(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        else:
            for key, value in PRESETS[preset].items():
                set_dotted(doc, key, value, problems)
    _merge(doc, user, "", problems)
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} must look like key.path=value")
            continue
        key, value = item.split("=", 1)
        set_dotted(doc, key.strip(), parse_value(value), problems)
    problems.extend(validate(doc))
    if problems:
        raise ConfigError(problems)
    return doc


def validate(doc):
    problems = []

    def check(cond, msg):
        if not cond:
            problems.append(msg)

    enc, pipe, eps = doc["encoder"], doc["pipeline"], doc["episodes"]
    for section, keys in (
        ("encoder", ("embed_dim", "layers", "heads", "patch_size", "image_size", "vocab_hash_buckets", "max_text_len")),
        ("pipeline", ("n_v", "iterations", "cls_epochs", "t_s", "prompt_length", "deep_tokens")),
        ("episodes", ("n_way", "k_shot", "n_query", "count")),
    ):
        for k in keys:
            v = doc[section][k]
            check(isinstance(v, int) and not isinstance(v, bool), f"{section}.{k} must be an integer")
    if not problems:
        check(enc["embed_dim"] % enc["heads"] == 0, "encoder.embed_dim must be divisible by encoder.heads")
        check(enc["image_size"] % enc["patch_size"] == 0, "encoder.image_size must be divisible by encoder.patch_size")
        check(pipe["n_v"] >= 1, "pipeline.n_v must be >= 1")
        check(pipe["iterations"] >= 0, "pipeline.iterations must be >= 0")
        check(eps["count"] >= 1, "episodes.count must be >= 1")
        check(eps["n_way"] >= 2 and eps["k_shot"] >= 1 and eps["n_query"] >= 1, "episodes need n_way >= 2, k_shot >= 1, n_query >= 1")
        budget = pipe["feature_budget"]
        if budget is not None:
            check(
                eps["k_shot"] * (1 + pipe["n_v"]) == budget,
                f"episodes.k_shot * (1 + pipeline.n_v) = {eps['k_shot'] * (1 + pipe['n_v'])} "
                f"must equal pipeline.feature_budget = {budget}",
            )
    for k in ("lr_prompts", "lr_div_prompts", "lr_adapter", "lr_cls", "tau"):
        v = pipe[k]
        if k == "lr_div_prompts" and v is None:
            continue
        check(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0, f"pipeline.{k} must be a positive number")
    check(doc["variant"] in VARIANTS, f"variant must be one of {list(VARIANTS)}")
    bad = [v for v in doc["variants"] if v not in VARIANTS]
    check(not bad and doc["variants"], f"variants contains unknown entries {bad}" if bad else "variants must be non-empty")
    check(isinstance(doc["workers"], int) and doc["workers"] >= 1, "workers must be an integer >= 1")
    check(isinstance(doc["seeds"], list) and doc["seeds"], "seeds must be a non-empty list")
    check(isinstance(doc["nv_list"], list) and doc["nv_list"], "nv_list must be non-empty")
    for key in ("corpus_path", "encoder.weights_path", "dataset.path"):
        node = doc
        for part in key.split("."):
            node = node[part]
        check(node is None or os.path.exists(node), f"{key}: path does not exist: {node}")
    try:
        build_selection(pipe)
        build_arcface(pipe)
    except (ValueError, TypeError, KeyError) as exc:
        problems.append(f"pipeline: {exc}")
    return problems


def build_selection(pipe, mode="gamma"):
    return SelectionConfig(mode=mode, **pipe["selection"])


def build_arcface(pipe):
    return ArcFaceConfig(**pipe["arcface"])


def encoder_config(doc):
    e = doc["encoder"]
    return EncoderConfig(**{k: v for k, v in e.items() if k not in ("seed", "weights_path")})


def pipeline_config(doc, variant=None):
    p = dict(doc["pipeline"])
    p["selection"] = build_selection(p)
    p["arcface"] = build_arcface(p)
    return PipelineConfig(variant=variant or doc["variant"], **p)


def episode_config(doc):
    e = doc["episodes"]
    return EpisodeConfig(e["n_way"], e["k_shot"], e["n_query"])


def dataset_spec(doc):
    d = {k: v for k, v in doc["dataset"].items() if k not in ("path", "seed")}
    d["channel_permutation"] = tuple(d["channel_permutation"])
    return SyntheticDomainSpec(**d)


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def result_config(doc):
    """The config without keys that cannot change results (output dir, worker count)."""
    return {k: v for k, v in doc.items() if k not in ("out", "workers")}


def fingerprint(doc):
    core = result_config(doc)
    return hashlib.sha256(canonical_json(core).encode()).hexdigest()[:16]

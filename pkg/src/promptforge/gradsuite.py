"""Finite-difference suites for the four training losses, surfaced to the CLI."""

import numpy as np

from .losses import ArcFaceConfig, arcface_loss, diversity_loss, semantic_contrastive_loss, tsc_loss
from .numerics import ad, finite_difference_check

LOSSES = ("L_div", "L_se", "L_TSC", "ArcFace")
TOLERANCE = 1e-4


def _flip_gradient(t):
    # test hook: same value, negated gradient
    return ad._make(t.data, (t,), lambda g: (-g,), "sign_flip")


def _case(name, rng):
    if name == "L_div":
        return diversity_loss, rng.normal(size=(4, 1, 6))
    if name == "L_se":
        cls, labels = rng.normal(size=(5, 6)), rng.integers(0, 5, 10)
        return (lambda f: semantic_contrastive_loss(f, labels, cls)), rng.normal(size=(10, 6))
    if name == "L_TSC":
        sem = rng.normal(size=(9, 6))
        targets = np.stack([rng.choice(9, 3, replace=False) for _ in range(3)])
        return (lambda v: tsc_loss(v, targets, sem, 0.07)), rng.normal(size=(3, 6))
    labels = rng.integers(0, 4, 6)
    # large scales saturate the softmax below the differencing noise floor
    config = ArcFaceConfig(scale=rng.uniform(1.0, 6.0), margin=rng.uniform(0.1, 0.6))
    return (lambda xs: arcface_loss(xs[0], labels, xs[1], config)), [rng.normal(size=(6, 5)), rng.normal(size=(4, 5))]


def run_gradient_suite(configs=20, seed=0, sign_flip=None, tolerance=TOLERANCE):
    """{loss: {"max_rel_error", "configs", "passed"}} over random configurations."""
    if sign_flip is not None and sign_flip not in LOSSES:
        raise ValueError(f"unknown loss {sign_flip!r}; choose from {LOSSES}")
    report = {}
    for k, name in enumerate(LOSSES):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(configs):
            fn, point = _case(name, rng)
            if name == sign_flip:
                fn = (lambda f: lambda x: _flip_gradient(f(x)))(fn)
            worst = max(worst, finite_difference_check(fn, point, eps=1e-6))
        report[name] = {"max_rel_error": float(worst), "configs": configs, "passed": bool(worst < tolerance)}
    return report

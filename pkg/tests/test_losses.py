import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptforge.losses import (
    ArcFaceConfig,
    arcface_loss,
    cosine_softmax_loss,
    diversity_loss,
    semantic_contrastive_loss,
    tsc_loss,
)
from promptforge.numerics import Tensor, ad, backward, finite_difference_check, parameter
from promptforge.semantic import Adapter
from promptforge.numerics import SeededRng


def test_diversity_identical_pair():
    p = np.array([[[0.3, -1.2, 2.0]], [[0.3, -1.2, 2.0]]])
    assert abs(diversity_loss(Tensor(p)).item() - 1.0) <= 1e-12


def test_diversity_orthogonal_pair():
    p = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
    assert abs(diversity_loss(Tensor(p)).item()) <= 1e-12


def test_diversity_three_prompts():
    s = 1 / math.sqrt(2)
    p = np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[s, s]]])
    # pairwise |cos|: (a,b)=0, (a,c)=(b,c)=s; per-row means s/2, s/2, s
    expected = (s / 2 + s / 2 + s) / 3
    assert abs(diversity_loss(Tensor(p)).item() - expected) < 1e-12
    assert abs(expected - 2 * math.sqrt(2) / 6) < 1e-15


def test_diversity_needs_two():
    with pytest.raises(ValueError):
        diversity_loss(Tensor(np.ones((1, 1, 4))))


def test_diversity_permutation_invariant():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(9, 2, 5))
    a = diversity_loss(Tensor(p)).item()
    b = diversity_loss(Tensor(p[rng.permutation(9)])).item()
    assert abs(a - b) < 1e-12
    assert 0.0 <= a <= 1.0


def test_semantic_uniform_is_log_n():
    rng = np.random.default_rng(0)
    cls = np.tile(rng.normal(size=(1, 6)), (5, 1))
    feats = rng.normal(size=(7, 6))
    loss = semantic_contrastive_loss(Tensor(feats), rng.integers(0, 5, 7), cls).item()
    assert abs(loss - math.log(5)) < 1e-9


def test_semantic_one_hot_similarity():
    cls = np.eye(5)
    loss = semantic_contrastive_loss(Tensor(np.eye(5)), np.arange(5), cls).item()
    # scalar oracle: -log(e / (e + 4)) = 0.904832...
    assert abs(loss - (-math.log(math.e / (math.e + 4)))) < 1e-12
    assert abs(loss - 0.904832) < 1e-6


def test_semantic_label_range():
    with pytest.raises(ValueError):
        semantic_contrastive_loss(Tensor(np.eye(3)), np.array([0, 1, 3]), np.eye(3))


def test_semantic_signed_variant_differs():
    feats = np.array([[-1.0, 0.1, 0.0]])
    cls = np.eye(3)
    unsigned = semantic_contrastive_loss(Tensor(feats), [0], cls).item()
    signed = semantic_contrastive_loss(Tensor(feats), [0], cls, signed=True).item()
    assert signed > unsigned


def test_tsc_singleton_is_zero():
    v = Tensor(np.array([[0.2, -0.4, 1.0]]))
    s = np.array([[1.0, 1.0, 0.5]])
    assert abs(tsc_loss(v, np.array([[0]]), s, 0.07).item()) <= 1e-12


def test_tsc_two_equal_similarities():
    v = Tensor(np.array([[1.0, 0.0, 0.0]]))
    s = np.array([[0.5, 0.5, 0.0], [0.5, -0.5, 0.0]])
    assert abs(tsc_loss(v, np.array([[0]]), s, 0.07).item() - math.log(2)) < 1e-12


def test_tsc_aligned_target():
    v = Tensor(np.array([[2.0, 0.0]]))
    s = np.array([[1.0, 0.0], [0.0, 3.0]])
    expected = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 1.0))
    got = tsc_loss(v, np.array([[0]]), s, 0.07).item()
    assert abs(got - expected) < 1e-15
    assert 6.1e-7 < got < 6.4e-7


def test_tsc_errors():
    v = Tensor(np.ones((1, 2)))
    with pytest.raises(ValueError):
        tsc_loss(v, np.array([[2]]), np.eye(2), 0.07)
    with pytest.raises(ValueError):
        tsc_loss(v, np.array([[0]]), np.eye(2), 0.0)


def test_tsc_gradient_only_into_visual():
    rng = np.random.default_rng(1)
    v = parameter(rng.normal(size=(3, 4)))
    s = parameter(rng.normal(size=(6, 4)))
    backward(tsc_loss(v, np.array([[0, 1], [2, 3], [4, 5]]), s, 0.07))
    assert v.grad is not None and s.grad is None


def _plain_cosine_ce(x, y, W):
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    wn = W / np.linalg.norm(W, axis=1, keepdims=True)
    logits = xn @ wn.T
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def test_arcface_zero_margin_is_cosine_ce():
    rng = np.random.default_rng(2)
    x, W, y = rng.normal(size=(8, 5)), rng.normal(size=(4, 5)), rng.integers(0, 4, 8)
    got = arcface_loss(Tensor(x), y, Tensor(W), ArcFaceConfig(scale=1.0, margin=0.0)).item()
    assert abs(got - _plain_cosine_ce(x, y, W)) <= 1e-12
    assert abs(cosine_softmax_loss(Tensor(x), y, Tensor(W)).item() - got) <= 1e-12


def test_arcface_on_target_direction():
    x = np.array([[1.0, 0.0]])
    W = np.array([[3.0, 0.0], [0.0, 1.0]])
    got = arcface_loss(Tensor(x), [0], Tensor(W), ArcFaceConfig(30.0, 0.5)).item()
    expected = math.log1p(math.exp(-30 * math.cos(0.5)))
    assert abs(got - expected) < 1e-15
    assert 3.6e-12 < got < 3.7e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.5))
def test_arcface_monotone_in_margin(seed, m):
    rng = np.random.default_rng(seed)
    x, W, y = rng.normal(size=(6, 4)), rng.normal(size=(3, 4)), rng.integers(0, 3, 6)
    lo = arcface_loss(Tensor(x), y, Tensor(W), ArcFaceConfig(30.0, m)).item()
    hi = arcface_loss(Tensor(x), y, Tensor(W), ArcFaceConfig(30.0, min(m + 0.05, 1.57))).item()
    assert hi >= lo - 1e-12


def test_arcface_config_validation():
    with pytest.raises(ValueError):
        ArcFaceConfig(scale=0.0)
    with pytest.raises(ValueError):
        ArcFaceConfig(margin=2.0)


# ---------------------------------------------------------------- gradients

SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_diversity_gradcheck(seed):
    rng = np.random.default_rng(seed)
    err = finite_difference_check(diversity_loss, rng.normal(size=(4, 1, 6)), eps=1e-6)
    assert err < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_semantic_gradcheck(seed):
    rng = np.random.default_rng(100 + seed)
    cls = rng.normal(size=(5, 6))
    labels = rng.integers(0, 5, 10)
    err = finite_difference_check(
        lambda f: semantic_contrastive_loss(f, labels, cls), rng.normal(size=(10, 6)), eps=1e-6
    )
    assert err < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_tsc_gradcheck(seed):
    rng = np.random.default_rng(200 + seed)
    sem = rng.normal(size=(9, 6))
    targets = np.stack([rng.choice(9, 3, replace=False) for _ in range(3)])
    err = finite_difference_check(lambda v: tsc_loss(v, targets, sem, 0.07), rng.normal(size=(3, 6)), eps=1e-6)
    assert err < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_arcface_gradcheck(seed):
    rng = np.random.default_rng(300 + seed)
    labels = rng.integers(0, 4, 6)
    # scales near 30 saturate the softmax so some coordinates fall to the
    # finite-difference noise floor; draw the scale per configuration instead
    config = ArcFaceConfig(scale=rng.uniform(1.0, 6.0), margin=rng.uniform(0.1, 0.6))
    err = finite_difference_check(
        lambda xs: arcface_loss(xs[0], labels, xs[1], config),
        [rng.normal(size=(6, 5)), rng.normal(size=(4, 5))],
        eps=1e-6,
    )
    assert err < 1e-4


def _central_differences(fn, x, eps=1e-6):
    out = np.zeros_like(x)
    for j in range(x.size):
        p, m = x.copy(), x.copy()
        p.reshape(-1)[j] += eps
        m.reshape(-1)[j] -= eps
        out.reshape(-1)[j] = (fn(p) - fn(m)) / (2 * eps)
    return out


@pytest.mark.parametrize("seed", range(5))
def test_arcface_default_config_gradient(seed):
    rng = np.random.default_rng(400 + seed)
    x, W, y = rng.normal(size=(6, 5)), rng.normal(size=(4, 5)), rng.integers(0, 4, 6)
    xt = parameter(x)
    backward(arcface_loss(xt, y, Tensor(W)))
    fd = _central_differences(lambda a: arcface_loss(Tensor(a), y, Tensor(W)).item(), x)
    np.testing.assert_allclose(xt.grad, fd, rtol=1e-5, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_rescaling_invariance(seed):
    rng = np.random.default_rng(seed)
    f, cls, y = rng.normal(size=(6, 4)), rng.normal(size=(3, 4)), rng.integers(0, 3, 6)
    k1, k2 = rng.uniform(0.1, 10, (6, 1)), rng.uniform(0.1, 10, (3, 1))
    a = semantic_contrastive_loss(Tensor(f), y, cls).item()
    b = semantic_contrastive_loss(Tensor(f * k1), y, cls * k2).item()
    assert abs(a - b) < 1e-9
    v, s = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    t = np.array([[0, 1], [3, 4]])
    a = tsc_loss(Tensor(v), t, s, 0.07).item()
    b = tsc_loss(Tensor(v * k1[:2]), t, s * rng.uniform(0.1, 10, (5, 1)), 0.07).item()
    assert abs(a - b) < 1e-9
    assert a >= 0


def test_gradient_isolation_between_losses():
    rng = np.random.default_rng(5)
    adapter = Adapter.init(8, SeededRng(0))
    prompts = parameter(rng.normal(size=(4, 1, 8)))
    visual = ad.reshape(prompts, (4, 8)) * 2.0
    sem = adapter(rng.normal(size=(12, 8)))
    targets = np.array([[0, 1], [2, 3], [4, 5], [6, 7]])
    backward(tsc_loss(visual, targets, sem, 0.07) + diversity_loss(prompts))
    assert all(p.grad is None for p in adapter.parameters())
    assert prompts.grad is not None
    prompts.grad = None
    backward(semantic_contrastive_loss(sem, np.repeat(np.arange(3), 4), rng.normal(size=(3, 8))))
    assert prompts.grad is None
    assert all(p.grad is not None for p in adapter.parameters())

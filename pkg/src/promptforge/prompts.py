"""Trainable prompt parameters: per-sample diversity prompts and per-layer deep prompts."""

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, Tensor, ad, parameter

INIT_STD = 0.02


@dataclass
class DiversityPromptBank:
    """N_v independent prompts, each ``length`` tokens of width d."""

    tokens: Tensor  # (N_v, l, d)

    @property
    def size(self):
        return self.tokens.shape[0]

    @property
    def length(self):
        return self.tokens.shape[1]

    @property
    def dim(self):
        return self.tokens.shape[2]

    def flat(self):
        return ad.reshape(self.tokens, (self.size, self.length * self.dim))

    def parameters(self):
        return [self.tokens]


@dataclass
class DeepPromptStack:
    """One group of p tokens per encoder layer, shared by every sample."""

    groups: list

    @property
    def tokens_per_layer(self):
        return self.groups[0].shape[0]

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, i):
        return self.groups[i]

    def parameters(self):
        return list(self.groups)


def init_diversity_bank(n_way, k_shot, n_v, length, dim, rng):
    if min(n_way, k_shot, n_v, length, dim) < 1:
        raise ValueError(f"prompt bank needs positive sizes, got N={n_way} K={k_shot} n_v={n_v} l={length} d={dim}")
    n = n_way * k_shot * n_v
    return DiversityPromptBank(parameter(rng.normal(0.0, INIT_STD, size=(n, length, dim)), name="P_div"))


def init_deep_stack(layers, tokens_per_layer, dim, rng):
    if min(layers, tokens_per_layer, dim) < 1:
        raise ValueError("deep prompt stack needs positive sizes")
    groups = [
        parameter(rng.normal(0.0, INIT_STD, size=(tokens_per_layer, dim)), name=f"P_deep.{i}")
        for i in range(layers)
    ]
    return DeepPromptStack(groups)


def init_prompt_banks(n_way, k_shot, n_v, encoder_config, seed, length=1, deep_tokens=5):
    """Fresh (DiversityPromptBank, DeepPromptStack) for one episode."""
    rng = SeededRng(seed, "prompts")
    d = encoder_config.embed_dim
    bank = init_diversity_bank(n_way, k_shot, n_v, length, d, rng.substream("div"))
    deep = init_deep_stack(encoder_config.layers, deep_tokens, d, rng.substream("deep"))
    return bank, deep


def prompt_vector(bank, i):
    """Row-major (token, dim) flattening of prompt ``i``."""
    if not 0 <= i < bank.size:
        raise IndexError(f"prompt index {i} out of range for bank of size {bank.size}")
    return bank.tokens.data[i].reshape(-1).copy()


def unflatten_prompt(vector, length, dim):
    return np.asarray(vector).reshape(length, dim)

"""Seeded, counter-based random streams with named substreams."""

import hashlib

import numpy as np

from . import _kernels as K


def _name_words(name):
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class SeededRng:
    """Philox stream keyed by (seed, substream path).

    The same seed and path always yield the same sequence, independent of
    what any other substream has consumed.
    """

    def __init__(self, seed, path=""):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed
        self.path = path
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *_name_words(path)]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def substream(self, name):
        return SeededRng(self.seed, f"{self.path}/{name}")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self.gen.choice(n, size=size, replace=replace)

    def gamma(self, shape_k, scale_theta, size=None):
        return gamma_sample(self, shape_k, scale_theta, size)


def _standard_gamma_ge1(rng, alpha, n):
    d = alpha - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        batch = max(16, int((n - filled) * 1.1) + 8)
        x = rng.gen.standard_normal(batch)
        u = rng.gen.random(batch)
        ok, val = K.gamma_accept(x, u, d, c)
        got = val[ok][: n - filled]
        out[filled : filled + got.size] = got
        filled += got.size
    return out


def gamma_sample(rng, shape_k, scale_theta, size=None):
    """Gamma(shape, scale) draws by Marsaglia-Tsang.

    Shapes below 1 sample at shape+1 and apply the U**(1/shape) boost.
    """
    if not (shape_k > 0 and scale_theta > 0):
        raise ValueError(f"gamma parameters must be positive, got shape={shape_k}, scale={scale_theta}")
    n = 1 if size is None else int(np.prod(size))
    if shape_k >= 1.0:
        g = _standard_gamma_ge1(rng, shape_k, n)
    else:
        g = _standard_gamma_ge1(rng, shape_k + 1.0, n)
        g *= rng.gen.random(n) ** (1.0 / shape_k)
    g = g * scale_theta
    if size is None:
        return float(g[0])
    return g.reshape(size)

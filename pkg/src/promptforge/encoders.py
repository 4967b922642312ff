"""Frozen surrogate dual encoder: a patch-token ViT and a hash-vocabulary text transformer.

Both towers share one config and project to a common embedding width ``d``.
Weights are random but deterministic per seed, or loaded from a ``PFW1``
weight file so real exported encoders can be dropped in.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import SeededRng, Tensor, ad, default_dtype

MAGIC = b"PFW1"
MLP_RATIO = 4


class WeightFileError(ValueError):
    pass


class ChecksumError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    def __init__(self, name):
        self.tensor_name = name
        super().__init__(f"weight file is missing tensor {name!r}")


class TensorShapeError(WeightFileError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    vocab_hash_buckets: int = 4096
    max_text_len: int = 32

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if min(self.embed_dim, self.layers, self.heads, self.patch_size, self.max_text_len) < 1:
            raise ValueError("encoder config fields must be positive")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return 3 * self.patch_size**2


def _block_shapes(prefix, d):
    h = MLP_RATIO * d
    return {
        f"{prefix}.ln1.gain": (d,),
        f"{prefix}.ln1.bias": (d,),
        f"{prefix}.attn.qkv.weight": (d, 3 * d),
        f"{prefix}.attn.qkv.bias": (3 * d,),
        f"{prefix}.attn.out.weight": (d, d),
        f"{prefix}.attn.out.bias": (d,),
        f"{prefix}.ln2.gain": (d,),
        f"{prefix}.ln2.bias": (d,),
        f"{prefix}.mlp.fc1.weight": (d, h),
        f"{prefix}.mlp.fc1.bias": (h,),
        f"{prefix}.mlp.fc2.weight": (h, d),
        f"{prefix}.mlp.fc2.bias": (d,),
    }


def tensor_shapes(config):
    """Ordered name -> shape map of every frozen tensor for ``config``."""
    d = config.embed_dim
    shapes = {
        "visual.patch_proj.weight": (config.patch_dim, d),
        "visual.patch_proj.bias": (d,),
        "visual.pos_embed": (config.num_patches, d),
        "visual.cls_token": (d,),
    }
    for i in range(config.layers):
        shapes.update(_block_shapes(f"visual.blocks.{i}", d))
    shapes.update({"visual.ln_post.gain": (d,), "visual.ln_post.bias": (d,), "visual.proj": (d, d)})
    shapes.update({"text.token_embed": (config.vocab_hash_buckets, d), "text.pos_embed": (config.max_text_len, d)})
    for i in range(config.layers):
        shapes.update(_block_shapes(f"text.blocks.{i}", d))
    shapes.update({"text.ln_final.gain": (d,), "text.ln_final.bias": (d,), "text.proj": (d, d)})
    return shapes


def parameter_count(config):
    d, L = config.embed_dim, config.layers
    block = 12 * d * d + 13 * d
    visual = config.patch_dim * d + d + config.num_patches * d + d + L * block + 2 * d + d * d
    text = config.vocab_hash_buckets * d + config.max_text_len * d + L * block + 2 * d + d * d
    return visual + text


def _checksum(tensors):
    crc = 0
    for name in sorted(tensors):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes(), crc)
    return f"{crc:08x}"


class EncoderWeights:
    """Read-only named tensor map for both towers."""

    def __init__(self, config, tensors):
        expected = tensor_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise MissingTensorError(name)
            if tuple(tensors[name].shape) != shape:
                raise TensorShapeError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
        self.config = config
        self.tensors = {}
        for name in expected:
            arr = np.array(tensors[name], dtype=default_dtype())
            arr.flags.writeable = False
            self.tensors[name] = arr
        self.checksum = _checksum(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def t(self, name):
        return Tensor(self.tensors[name])

    def current_checksum(self):
        return _checksum(self.tensors)


def init_frozen_weights(config, seed):
    """Gaussian(0, 0.02) weights, unit layernorm gains, zero biases."""
    rng = SeededRng(seed, "encoder-init")
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        # round through float32 so the weight-file round trip is exact
        tensors[name] = arr.astype(np.float32).astype(np.float64)
    return EncoderWeights(config, tensors)


# ------------------------------------------------------------------ transformer


def _affine_ln(x, w, prefix):
    return ad.layernorm(x) * w.t(f"{prefix}.gain") + w.t(f"{prefix}.bias")


def _block(x, w, prefix, heads):
    B, T, d = x.shape
    dh = d // heads
    h = _affine_ln(x, w, f"{prefix}.ln1")
    qkv = h @ w.t(f"{prefix}.attn.qkv.weight") + w.t(f"{prefix}.attn.qkv.bias")
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax(ad.scale(q @ k.T, 1.0 / math.sqrt(dh)))
    o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
    x = x + (o @ w.t(f"{prefix}.attn.out.weight") + w.t(f"{prefix}.attn.out.bias"))
    h = _affine_ln(x, w, f"{prefix}.ln2")
    h = ad.gelu(h @ w.t(f"{prefix}.mlp.fc1.weight") + w.t(f"{prefix}.mlp.fc1.bias"))
    return x + (h @ w.t(f"{prefix}.mlp.fc2.weight") + w.t(f"{prefix}.mlp.fc2.bias"))


# ----------------------------------------------------------------------- vision


def _as_batch(images, config):
    arr = np.asarray(images, dtype=default_dtype())
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    s = config.image_size
    if arr.ndim != 4 or arr.shape[1:] != (s, s, 3):
        raise ValueError(f"expected image(s) of shape ({s}, {s}, 3), got {np.asarray(images).shape}")
    return arr, single


def patchify(images, patch_size):
    """(B, H, W, 3) -> (B, n_patches, P*P*3), patches row-major over the grid."""
    B, H, W, C = images.shape
    g = H // patch_size
    p = images.reshape(B, g, patch_size, g, patch_size, C).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(B, g * g, patch_size * patch_size * C)


def tokenize_image(images, weights, config=None):
    """Patch token embeddings: linear patch projection plus position embedding."""
    config = config or weights.config
    arr, single = _as_batch(images, config)
    proj = patchify(arr, config.patch_size) @ weights["visual.patch_proj.weight"] + weights["visual.patch_proj.bias"]
    tokens = proj + weights["visual.pos_embed"]
    return tokens[0] if single else tokens


def _broadcast_tokens(tok, batch):
    tok = tok if isinstance(tok, Tensor) else Tensor(tok)
    return ad.add(Tensor(np.zeros((batch,) + tok.shape[-2:], dtype=tok.data.dtype)), tok)


def encode_visual(images, diversity_prompts, deep_prompts, weights, patch_tokens=None):
    """Visual embeddings of dim d for a batch (or a single image).

    Token order per layer is [CLS, deep slots, diversity slots, patches].
    ``diversity_prompts`` is None or a (B, l, d) tensor (one entry per
    image); ``deep_prompts`` is None or a sequence of L (p, d) tensors.
    At every layer after the first, the deep slots coming out of the
    previous layer are discarded and that layer's own tokens inserted.
    Pass ``patch_tokens`` to reuse a cached ``tokenize_image`` result.
    """
    config = weights.config
    d = config.embed_dim
    if patch_tokens is None:
        patch_tokens = tokenize_image(images, weights, config)
    patch_tokens = np.asarray(patch_tokens)
    single = patch_tokens.ndim == 2
    if single:
        patch_tokens = patch_tokens[None]
    B = patch_tokens.shape[0]

    if deep_prompts is not None:
        if len(deep_prompts) != config.layers:
            raise ValueError(f"deep prompt stack needs {config.layers} groups, got {len(deep_prompts)}")
        for g in deep_prompts:
            if g.shape[-1] != d or len(g.shape) != 2:
                raise ValueError(f"deep prompt group must be (p, {d}), got {g.shape}")
    parts = [Tensor(np.broadcast_to(weights["visual.cls_token"], (B, 1, d)))]
    p = 0
    if deep_prompts is not None:
        p = deep_prompts[0].shape[0]
        parts.append(_broadcast_tokens(deep_prompts[0], B))
    if diversity_prompts is not None:
        div = diversity_prompts if isinstance(diversity_prompts, Tensor) else Tensor(diversity_prompts)
        if single and div.ndim == 2:
            div = ad.reshape(div, (1,) + div.shape)
        if div.ndim != 3 or div.shape[0] != B or div.shape[2] != d:
            raise ValueError(f"diversity prompts must be ({B}, l, {d}), got {div.shape}")
        parts.append(div)
    parts.append(Tensor(patch_tokens))
    x = ad.concat(parts, axis=1)

    for i in range(config.layers):
        if i > 0 and deep_prompts is not None:
            x = ad.concat([x[:, :1], _broadcast_tokens(deep_prompts[i], B), x[:, 1 + p :]], axis=1)
        x = _block(x, weights, f"visual.blocks.{i}", config.heads)
    cls = _affine_ln(x[:, 0], weights, "visual.ln_post")
    out = cls @ weights.t("visual.proj")
    return out[0] if single else out


def sequence_length(config, deep_tokens, diversity_len):
    return 1 + deep_tokens + diversity_len + config.num_patches


# ------------------------------------------------------------------------- text


def tokenize_text(text, config):
    words = text.lower().split()
    if not words:
        raise ValueError("cannot encode empty text")
    if len(words) + 1 > config.max_text_len:
        raise ValueError(f"text has {len(words)} tokens; max is {config.max_text_len - 1} plus end token")
    ids = [zlib.crc32(w.encode("utf-8")) % config.vocab_hash_buckets for w in words]
    ids.append(zlib.crc32(b"<eot>") % config.vocab_hash_buckets)
    return np.array(ids, dtype=np.int64)


def encode_text(texts, weights, config=None):
    """Text embeddings: last (end-token) state through the frozen projection.

    Accepts one string or a list; returns (d,) or (n, d) numpy arrays.
    """
    config = config or weights.config
    single = isinstance(texts, str)
    texts = [texts] if single else list(texts)
    out = np.empty((len(texts), config.embed_dim), dtype=default_dtype())
    # group by token length so every batch is rectangular
    ids = [tokenize_text(t, config) for t in texts]
    by_len = {}
    for i, seq in enumerate(ids):
        by_len.setdefault(len(seq), []).append(i)
    for n, idx in sorted(by_len.items()):
        tok = np.stack([ids[i] for i in idx])
        x = Tensor(weights["text.token_embed"][tok] + weights["text.pos_embed"][:n])
        for layer in range(config.layers):
            x = _block(x, weights, f"text.blocks.{layer}", config.heads)
        h = _affine_ln(x[:, n - 1], weights, "text.ln_final")
        out[idx] = (h @ weights.t("text.proj")).data
    return out[0] if single else out


# ------------------------------------------------------------------ weight file


def write_weight_file(path, config, tensors):
    body = bytearray(MAGIC)
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(body)


def save_weights(weights, path):
    write_weight_file(path, weights.config, weights.tensors)


def load_weights(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a PFW1 weight file")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch (file truncated or corrupted)")
    pos = 4

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n,) = read("<I")
    config = EncoderConfig(**json.loads(blob[pos : pos + n]))
    pos += n
    (count,) = read("<I")
    tensors = {}
    for _ in range(count):
        (n,) = read("<I")
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = arr.astype(np.float64)
    return EncoderWeights(config, tensors)

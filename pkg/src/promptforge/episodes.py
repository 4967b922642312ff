"""Synthetic domain-shifted texture datasets, N-way K-shot episodes, and
the episodic evaluation protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import SeededRng
from .semantic import ClassDescriptions, DescriptionCorpus, load_corpus, save_corpus

PALETTE = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.18, 0.70, 0.22),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.20),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.20, 0.80, 0.85),
    "white": (0.95, 0.95, 0.95),
    "black": (0.06, 0.06, 0.08),
    "brown": (0.45, 0.28, 0.12),
}
PATTERNS = ("horizontal stripes", "vertical stripes", "diagonal stripes", "checkerboard", "spots", "rings")
FREQUENCIES = {"sparse": 2.0, "regular": 3.5, "dense": 5.5}

IMAGE_MAGIC = b"PFI1"


@dataclass(frozen=True)
class SyntheticDomainSpec:
    n_classes: int = 10
    image_size: int = 32
    images_per_class: int = 40
    noise: float = 0.08
    color_jitter: float = 0.10
    channel_permutation: tuple = (2, 0, 1)
    gamma_curve: float = 1.6
    domain_noise: float = 0.03
    descriptions_per_class: int = 6
    domain_name: str = "Synthetic texture"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if sorted(self.channel_permutation) != [0, 1, 2]:
            raise ValueError(f"bad channel permutation {self.channel_permutation}")
        if self.descriptions_per_class < 2:
            raise ValueError("need at least 2 descriptions per class")


@dataclass
class ClassAttributes:
    foreground: str
    background: str
    pattern: str
    frequency: str

    @property
    def name(self):
        return f"{self.foreground} {self.pattern}"


@dataclass
class Dataset:
    images: np.ndarray  # (n, S, S, 3) in [0, 1]
    labels: np.ndarray  # (n,) dataset class ids
    class_names: list
    corpus: DescriptionCorpus
    attributes: list = field(default_factory=list)
    name: str = "synthetic"

    @property
    def n_classes(self):
        return len(self.class_names)

    def fingerprint(self):
        h = hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def _class_attributes(spec, rng):
    colors = list(PALETTE)
    combos = set()
    attrs = []
    while len(attrs) < spec.n_classes:
        fg, bg = rng.choice(len(colors), 2, replace=False)
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        freq = list(FREQUENCIES)[int(rng.integers(len(FREQUENCIES)))]
        key = (colors[fg], pattern)
        if key in combos:
            continue
        combos.add(key)
        attrs.append(ClassAttributes(colors[fg], colors[bg], pattern, freq))
    return attrs


def _descriptions(attr, n):
    pool = [
        f"exhibit shades of {attr.foreground}",
        f"with a {attr.background} background",
        f"covered in {attr.frequency} {attr.pattern}",
        f"{attr.foreground} {attr.pattern} over {attr.background}",
        f"a {attr.frequency} {attr.foreground} texture",
        f"mostly {attr.foreground} with some {attr.background}",
        f"repeating {attr.pattern} pattern",
        f"{attr.frequency} pattern in {attr.foreground} tones",
    ]
    return [pool[i % len(pool)] for i in range(n)]


def _pattern_mask(attr, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = FREQUENCIES[attr.frequency] * rng.uniform(0.8, 1.25)
    phase = rng.uniform(0, 2 * np.pi)
    if attr.pattern == "horizontal stripes":
        wave = np.sin(2 * np.pi * freq * yy + phase)
    elif attr.pattern == "vertical stripes":
        wave = np.sin(2 * np.pi * freq * xx + phase)
    elif attr.pattern == "diagonal stripes":
        wave = np.sin(2 * np.pi * freq * (xx + yy) / math.sqrt(2) + phase)
    elif attr.pattern == "checkerboard":
        wave = np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy + rng.uniform(0, 2 * np.pi))
    elif attr.pattern == "rings":
        cy, cx = rng.uniform(0.3, 0.7, 2)
        wave = np.sin(2 * np.pi * freq * np.hypot(yy - cy, xx - cx) + phase)
    else:  # spots
        wave = np.full((size, size), -1.0)
        n_spots = int(round(freq * 2))
        radius = 0.35 / freq
        for cy, cx in rng.uniform(0, 1, (n_spots, 2)):
            wave = np.maximum(wave, 1.0 - 2.0 * np.hypot(yy - cy, xx - cx) / radius)
    return 1.0 / (1.0 + np.exp(-4.0 * wave))


def _render(attr, spec, rng):
    s = spec.image_size
    mask = _pattern_mask(attr, s, rng)[..., None]
    fg = np.array(PALETTE[attr.foreground]) + rng.normal(0, spec.color_jitter, 3)
    bg = np.array(PALETTE[attr.background]) + rng.normal(0, spec.color_jitter, 3)
    img = mask * fg + (1 - mask) * bg
    img = img * rng.uniform(0.75, 1.15) + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_domain_shift(images, spec, rng):
    """Channel permutation, gamma curve and additive noise."""
    out = images[..., list(spec.channel_permutation)] ** spec.gamma_curve
    out = out + rng.normal(0, spec.domain_noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic_domain(spec, seed, min_per_class=0):
    """Procedural texture classes with attribute-grounded description corpus."""
    if spec.images_per_class < min_per_class:
        raise ValueError(f"images_per_class={spec.images_per_class} below required {min_per_class}")
    rng = SeededRng(seed, "synthetic-domain")
    attrs = _class_attributes(spec, rng.substream("attributes"))
    draw = rng.substream("images")
    images = np.stack([_render(a, spec, draw) for a in attrs for _ in range(spec.images_per_class)])
    images = apply_domain_shift(images, spec, rng.substream("shift"))
    labels = np.repeat(np.arange(spec.n_classes), spec.images_per_class)
    corpus = DescriptionCorpus(
        spec.domain_name,
        [ClassDescriptions(a.name, _descriptions(a, spec.descriptions_per_class)) for a in attrs],
    )
    return Dataset(images, labels, [a.name for a in attrs], corpus, attrs)


# ------------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray  # episode-local labels 0..N-1
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray  # dataset class ids, index = local label
    class_names: list
    support_ids: np.ndarray  # dataset row indices
    query_ids: np.ndarray

    @property
    def n_way(self):
        return len(self.class_ids)

    @property
    def k_shot(self):
        return len(self.support_labels) // self.n_way


def sample_episode(dataset, n_way, k_shot, n_query, rng):
    if dataset.n_classes < n_way:
        raise ValueError(f"dataset has {dataset.n_classes} classes; episode needs {n_way}")
    classes = np.sort(rng.choice(dataset.n_classes, n_way, replace=False))
    s_ids, q_ids = [], []
    for c in classes:
        rows = np.flatnonzero(dataset.labels == c)
        if rows.size < k_shot + n_query:
            raise ValueError(f"class {c} has {rows.size} images; episode needs {k_shot + n_query}")
        pick = rows[rng.choice(rows.size, k_shot + n_query, replace=False)]
        s_ids.append(pick[:k_shot])
        q_ids.append(pick[k_shot:])
    s_ids, q_ids = np.concatenate(s_ids), np.concatenate(q_ids)
    return Episode(
        dataset.images[s_ids],
        np.repeat(np.arange(n_way), k_shot),
        dataset.images[q_ids],
        np.repeat(np.arange(n_way), n_query),
        classes,
        [dataset.class_names[c] for c in classes],
        s_ids,
        q_ids,
    )


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    accuracies: list
    mean: float
    ci95: float
    fingerprint: str = ""
    seed: int = 0
    episode_seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    details: list = field(default_factory=list, repr=False)  # per-episode method info, not serialized

    def to_dict(self):
        doc = asdict(self)
        doc.pop("details")
        return doc


def summarize(accuracies, fingerprint="", seed=0, episode_seeds=()):
    acc = np.asarray(accuracies, dtype=np.float64)
    mean = float(acc.mean())
    ci = float(1.96 * acc.std() / math.sqrt(acc.size))
    return EvalReport([float(a) for a in acc], mean, ci, fingerprint, seed, list(episode_seeds))


def episode_seed(seed, index):
    """Stable per-episode seed so variants can be paired on identical episodes."""
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class EpisodeError(RuntimeError):
    def __init__(self, index, cause):
        self.index = index
        super().__init__(f"episode {index} failed: {cause}")


def _run_episode(method, dataset, episode_config, seed, index):
    es = episode_seed(seed, index)
    rng = SeededRng(es)
    ep = sample_episode(dataset, episode_config.n_way, episode_config.k_shot, episode_config.n_query, rng.substream("sample"))
    try:
        out = method(ep, rng.substream("method"))
    except Exception as exc:  # noqa: BLE001 - re-raised with the episode index
        raise EpisodeError(index, exc) from exc
    pred, info = out if isinstance(out, tuple) else (out, None)
    return float(np.mean(np.asarray(pred) == ep.query_labels)), es, info


_SHARED = None  # (method, dataset, episode_config, seed) inherited by forked workers


def _pool_task(index):
    return _run_episode(*_SHARED, index)


def evaluate(method, dataset, episode_count, episode_config=EpisodeConfig(), seed=0, fingerprint="", workers=1):
    """Mean query accuracy of ``method`` over independently sampled episodes.

    ``method(episode, rng)`` returns predicted local labels for the query
    set, optionally paired with an info object kept in ``report.details``.
    Episode i always uses ``episode_seed(seed, i)``, so results do not
    depend on ``workers``.
    """
    global _SHARED
    if episode_count < 1:
        raise ValueError("episode_count must be >= 1")
    if workers > 1 and episode_count > 1:
        import multiprocessing as mp

        _SHARED = (method, dataset, episode_config, seed)
        try:
            with mp.get_context("fork").Pool(min(workers, episode_count)) as pool:
                results = pool.map(_pool_task, range(episode_count), chunksize=1)
        finally:
            _SHARED = None
    else:
        results = [_run_episode(method, dataset, episode_config, seed, i) for i in range(episode_count)]
    report = summarize([r[0] for r in results], fingerprint, seed, [r[1] for r in results])
    report.details = [r[2] for r in results]
    return report


def random_predictor(episode, rng):
    return rng.integers(0, episode.n_way, size=len(episode.query_labels))


def oracle_predictor(episode, rng):
    return episode.query_labels.copy()


# --------------------------------------------------------------------- export


def write_image(path, image):
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not a PFI1 image")
    h, w, c = struct.unpack_from("<III", blob, 4)
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w, c).astype(np.float64)


def export_dataset(dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["index", "label", "class_name", "file"])
        for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
            rel = f"images/{i:05d}.pfi"
            write_image(os.path.join(directory, rel), img)
            out.writerow([i, int(y), dataset.class_names[y], rel])
    save_corpus(dataset.corpus, os.path.join(directory, "corpus.json"))
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump({"name": dataset.name, "class_names": dataset.class_names}, fh, indent=2)


def import_dataset(directory):
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([read_image(os.path.join(directory, r["file"])) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    corpus = load_corpus(os.path.join(directory, "corpus.json"))
    return Dataset(images, labels, meta["class_names"], corpus, name=meta.get("name", "imported"))

"""Procedural image/name datasets for desk-scale experiments.

Every class is a combination of three visual attributes (colour, grating
frequency, grating orientation) and its name is the matching three words,
e.g. ``"red fine upright"``. Because names and pixels share this
compositional structure, a toy dual encoder aligned on some combinations can
recognise held-out ones zero-shot.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .exceptions import ConfigurationError

COLORS = {
    "red": (1.0, 0.15, 0.15),
    "green": (0.15, 1.0, 0.15),
    "blue": (0.15, 0.15, 1.0),
    "yellow": (1.0, 1.0, 0.15),
}
FREQUENCIES = {"coarse": 1.0, "medium": 2.0, "fine": 4.0}  # cycles per image
ORIENTATIONS = {"level": 0.0, "rising": 45.0, "upright": 90.0, "falling": 135.0}  # degrees

DEFAULT_VOCAB = {"color": COLORS, "frequency": FREQUENCIES, "orientation": ORIENTATIONS}


def vocabulary_words(vocab: Mapping = DEFAULT_VOCAB) -> list[str]:
    return sorted(w for table in vocab.values() for w in table)


@dataclass
class SyntheticDataset:
    images: np.ndarray | None  # (N, 3, H, W) float32, or None for label-only layouts
    labels: np.ndarray  # (N,) int class index
    class_names: list[str]
    is_train: np.ndarray | None = None  # fixed train/test split, when the layout has one
    attributes: list[tuple] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)


def _render(color, freq, angle, size, rng, noise, jitter):
    theta = np.deg2rad(angle + rng.normal(0.0, jitter * 10.0))
    f = freq * (1.0 + rng.normal(0.0, jitter * 0.1))
    phase = rng.uniform(0, 2 * np.pi)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = np.asarray(color)[:, None, None] * wave[None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return img.astype(np.float32)


def synthesize_dataset(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    vocab: Mapping = DEFAULT_VOCAB,
    seed: int = 0,
    *,
    exclude: Iterable[str] = (),
    noise: float = 0.3,
    jitter: float = 1.0,
    contrast: float = 1.0,
) -> SyntheticDataset:
    """Balanced dataset of ``num_classes`` attribute combinations.

    Classes are a seeded draw from the attribute grid minus ``exclude``
    (names). ``vocab`` maps attribute -> {word: value} for the three
    attributes ``color`` (RGB triple), ``frequency`` (cycles per image) and
    ``orientation`` (degrees). ``contrast`` < 1 pulls pixels towards
    mid-grey; together with a higher ``noise`` it renders a benchmark in a
    different domain than the corpus a toy backbone was aligned on.
    """
    if set(vocab) != {"color", "frequency", "orientation"}:
        raise ConfigurationError("vocab needs exactly color, frequency and orientation tables")
    if num_classes < 1 or per_class < 1:
        raise ConfigurationError("num_classes and per_class must be positive")
    excluded = set(exclude)
    combos = [
        c
        for c in itertools.product(vocab["color"], vocab["frequency"], vocab["orientation"])
        if " ".join(c) not in excluded
    ]
    if len(combos) < num_classes:
        raise ConfigurationError(
            f"vocabulary yields {len(combos)} available class names, {num_classes} requested"
        )
    rng = np.random.default_rng(seed)
    chosen = [combos[i] for i in sorted(rng.choice(len(combos), num_classes, replace=False))]
    images = np.empty((num_classes * per_class, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for k, (c, f, o) in enumerate(chosen):
        for j in range(per_class):
            images[k * per_class + j] = _render(
                vocab["color"][c], vocab["frequency"][f], vocab["orientation"][o],
                image_size, rng, noise, jitter,
            )
    if contrast != 1.0:
        images = (images * contrast + 0.5 * (1.0 - contrast)).astype(np.float32)
    names = [" ".join(c) for c in chosen]
    return SyntheticDataset(images, labels, names, attributes=chosen)


# (classes, base classes, way, shot, sessions, train per class, test per class)
BENCHMARK_LAYOUTS = {
    "cifar100": (100, 60, 5, 5, 8, 500, 100),
    "mini_imagenet": (100, 60, 5, 5, 8, 500, 100),
    "cub200": (200, 100, 10, 5, 10, 30, 29),
}


def benchmark_layout(name: str, class_names: list[str] | None = None) -> tuple[SyntheticDataset, dict]:
    """Label-only stand-in for a named benchmark plus its split parameters.

    No images are involved; the layout is enough to build and validate
    session streams with the published class and shot counts.
    """
    try:
        n, base, way, shot, sessions, n_train, n_test = BENCHMARK_LAYOUTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown benchmark {name!r}") from None
    names = class_names or [f"{name}_class_{i:03d}" for i in range(n)]
    per = n_train + n_test
    labels = np.repeat(np.arange(n), per)
    is_train = np.tile(np.r_[np.ones(n_train, bool), np.zeros(n_test, bool)], n)
    ds = SyntheticDataset(None, labels, list(names), is_train=is_train)
    return ds, dict(base_classes=base, way=way, shot=shot, sessions=sessions)

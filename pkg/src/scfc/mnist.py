"""Pairwise-digit and k-way fixtures built from an MNIST-style image list."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import FewShotSets
from .images import load_idx

STANDARD_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
DEFAULT_DATA_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist5k"
IMAGES_FILE = "images-idx3-ubyte"
LABELS_FILE = "labels-idx1-ubyte"


@dataclass
class LabeledDataset:
    """Few-shot sets plus the hidden ground truth of the support images."""

    name: str
    sets: FewShotSets
    truth: dict

    def support_truth(self):
        return {img.id: self.truth[img.id] for img in self.sets.support}


def default_idx_paths(data_dir=None):
    data_dir = Path(data_dir or os.environ.get("SCFC_MNIST_DIR", DEFAULT_DATA_DIR))
    return data_dir / IMAGES_FILE, data_dir / LABELS_FILE


def load_default(data_dir=None):
    images, labels = default_idx_paths(data_dir)
    return load_idx(images, labels, id_prefix="mnist")


def _by_digit(images):
    groups = {}
    for img in images:
        groups.setdefault(img.label, []).append(img)
    return groups


def pair_dataset(images, digits=(0, 1), shots=5, per_class=500, seed=0, name=None):
    """Binary fixture: ``digits[1]`` plays "occupied" (1), ``digits[0]`` "unoccupied" (0).

    Exemplars and support images are disjoint; each class contributes
    ``min(per_class, available - shots)`` support images.
    """
    neg, pos = digits
    groups = _by_digit(images)
    rng = np.random.default_rng([seed, neg, pos])
    chosen = {}
    for digit in (neg, pos):
        pool = groups.get(digit, [])
        if len(pool) < shots + 1:
            raise ValueError(f"digit {digit}: need more than {shots} images, have {len(pool)}")
        order = rng.permutation(len(pool))
        chosen[digit] = [pool[i] for i in order[: shots + per_class]]
    binary = {neg: 0, pos: 1}
    exemplars = {d: [replace(im, label=binary[d]) for im in chosen[d][:shots]] for d in (neg, pos)}
    support = [replace(im, label=None) for d in (neg, pos) for im in chosen[d][shots:]]
    truth = {im.id: binary[d] for d in (neg, pos) for im in chosen[d][shots:]}
    # interleave classes by a seeded shuffle so stream order carries no label signal
    support = [support[i] for i in rng.permutation(len(support))]
    sets = FewShotSets(exemplars[pos], exemplars[neg], support)
    return LabeledDataset(name or f"MNIST {neg} and {pos}", sets, truth)


def kway_fixture(images, digits=(0, 1, 2, 3, 4), shots=5, per_class=100, seed=0):
    """Exemplars per class and a shuffled query list with its truth (class index)."""
    groups = _by_digit(images)
    rng = np.random.default_rng([seed, len(digits)])
    exemplars, queries, truth = [], [], {}
    for ci, d in enumerate(digits):
        pool = groups[d]
        order = rng.permutation(len(pool))[: shots + per_class]
        exemplars.append([replace(pool[i], label=ci) for i in order[:shots]])
        for i in order[shots:]:
            queries.append(replace(pool[i], label=None))
            truth[pool[i].id] = ci
    queries = [queries[i] for i in rng.permutation(len(queries))]
    return exemplars, queries, truth

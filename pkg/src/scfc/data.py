"""Test / support / clustering sets, pseudo-label bookkeeping and pair sampling."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptySetError, UnknownImageError, UnlabeledImageError
from .images import MAX_SHOTS_PER_CLASS, Image

log = logging.getLogger(__name__)

OCCUPIED = 1
UNOCCUPIED = 0


@dataclass(frozen=True, eq=False)
class LabeledPair:
    first: Image
    second: Image
    y: int


@dataclass(eq=False)
class FewShotSets:
    """The three sets driving one clustering run.

    ``clustering`` maps a support image id to its current imaginary label;
    re-labeling an image overwrites its previous entry.
    """

    test_occupied: list[Image]
    test_unoccupied: list[Image]
    support: list[Image] = field(default_factory=list)
    clustering: dict[str, int] = field(default_factory=dict)
    # one-vs-all runs pool several classes into the negative side on purpose
    check_shot_budget: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        self.test_occupied = list(self.test_occupied)
        self.test_unoccupied = list(self.test_unoccupied)
        self.support = list(self.support)
        if not self.test_occupied or not self.test_unoccupied:
            raise EmptySetError("need at least one occupied and one unoccupied test exemplar")
        for name, group in (("occupied", self.test_occupied), ("unoccupied", self.test_unoccupied)):
            if self.check_shot_budget and len(group) > MAX_SHOTS_PER_CLASS:
                log.warning("%d %s exemplars exceed the %d-shot budget", len(group), name, MAX_SHOTS_PER_CLASS)
        self._test_labels = {img.id: OCCUPIED for img in self.test_occupied}
        self._test_labels.update({img.id: UNOCCUPIED for img in self.test_unoccupied})
        if len(self._test_labels) != len(self.test_occupied) + len(self.test_unoccupied):
            raise ValueError("duplicate image id in the test set")
        self._support_ids = set()
        for img in self.support:
            self._register_support(img)
        unknown = set(self.clustering) - self._support_ids
        if unknown:
            raise UnknownImageError(f"clustering entries for non-support ids: {sorted(unknown)[:5]}")

    def _register_support(self, img):
        if img.id in self._test_labels or img.id in self._support_ids:
            raise ValueError(f"duplicate image id {img.id!r}")
        self._support_ids.add(img.id)

    @property
    def test(self):
        return self.test_occupied + self.test_unoccupied

    def add_support(self, img):
        self._register_support(img)
        self.support.append(img)

    def is_test(self, img_id):
        return img_id in self._test_labels

    def label_of(self, img_id):
        """True label for test images, the latest imaginary label for support images."""
        if img_id in self._test_labels:
            return self._test_labels[img_id]
        if img_id in self.clustering:
            return self.clustering[img_id]
        if img_id in self._support_ids:
            raise UnlabeledImageError(f"support image {img_id!r} has no imaginary label yet")
        raise UnknownImageError(f"unknown image id {img_id!r}")

    def assign_imaginary(self, img_id, label):
        if img_id not in self._support_ids:
            if img_id in self._test_labels:
                raise UnknownImageError(f"{img_id!r} is a test image; its label is fixed")
            raise UnknownImageError(f"{img_id!r} is not in the support set")
        if label not in (0, 1):
            raise ValueError(f"imaginary label must be 0 or 1, got {label!r}")
        self.clustering[img_id] = int(label)
        return self

    def pseudo_labels(self):
        """Imaginary labels in support-stream order (unlabeled images skipped)."""
        return {img.id: self.clustering[img.id] for img in self.support if img.id in self.clustering}

    def records(self):
        for img in self.test_occupied:
            yield {"id": img.id, "set": "test_occupied", "label": OCCUPIED, "source_path": img.source}
        for img in self.test_unoccupied:
            yield {"id": img.id, "set": "test_unoccupied", "label": UNOCCUPIED, "source_path": img.source}
        for img in self.support:
            yield {"id": img.id, "set": "support", "label": self.clustering.get(img.id), "source_path": img.source}

    def export_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def map_images(self, fn):
        """New sets with ``fn`` applied to every image; clustering entries kept."""
        return FewShotSets(
            [fn(i) for i in self.test_occupied],
            [fn(i) for i in self.test_unoccupied],
            [fn(i) for i in self.support],
            dict(self.clustering),
            self.check_shot_budget,
        )

    def copy(self):
        return FewShotSets(
            self.test_occupied, self.test_unoccupied, self.support, dict(self.clustering), self.check_shot_budget
        )


def label_of(sets, img_id):
    return sets.label_of(img_id)


def assign_imaginary(sets, img_id, label):
    return sets.assign_imaginary(img_id, label)


def random_pair(images, rng):
    """Two independent uniform draws with replacement."""
    if len(images) == 0:
        raise EmptySetError("cannot draw a pair from an empty set")
    i, j = rng.integers(len(images), size=2)
    return images[i], images[j]


def labeled_pair(sets, first, second):
    y = int(sets.label_of(first.id) == sets.label_of(second.id))
    return LabeledPair(first, second, y)


def read_truth_csv(path):
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return {row["id"]: int(row["label"]) for row in rows}


def write_labels_csv(path, labels, header_comment=None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for img_id, lab in labels.items():
            w.writerow([img_id, lab])
    return path

"""kNN baseline, accuracy, and the degradation-sweep / table harnesses."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine
from .errors import SCFCError
from .images import DegradeSpec, maxpool_degrade, median_filter

log = logging.getLogger(__name__)

DISTANCES = ("euclidean", "manhattan")
TABLE_HEADER = ["dataset", "scfc_acc", "knn_acc", "seed", "n", "N", "lr", "lambda"]


@dataclass(frozen=True)
class KnnConfig:
    k: int = 3
    distance: str = "euclidean"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be a positive odd integer, got {self.k}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")


def _distances(cfg, refs, q):
    diff = refs - q
    if cfg.distance == "euclidean":
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return np.abs(diff).sum(axis=1)


def knn_predict(cfg, references, query):
    """Majority label of the ``k`` nearest references on raw pixels.

    Equal distances are ordered by image id; a tied vote goes to the label
    of the nearest reference among the tied labels.
    """
    if len(references) < cfg.k:
        raise SCFCError(f"kNN needs at least k={cfg.k} references, got {len(references)}")
    refs = np.stack([r.pixels.ravel() for r in references])
    d = _distances(cfg, refs, query.pixels.ravel())
    order = sorted(range(len(references)), key=lambda i: (d[i], references[i].id))[: cfg.k]
    labels = [references[i].label for i in order]
    counts = {lab: labels.count(lab) for lab in labels}
    best = max(counts.values())
    return next(lab for lab in labels if counts[lab] == best)


def knn_labels(cfg, references, queries):
    return {q.id: knn_predict(cfg, references, q) for q in queries}


def accuracy(predicted, truth):
    if set(predicted) != set(truth):
        missing = set(truth) ^ set(predicted)
        raise SCFCError(f"prediction and truth id sets differ ({len(missing)} ids, e.g. {sorted(missing)[:3]})")
    if not truth:
        raise SCFCError("accuracy over an empty id set")
    return sum(predicted[i] == truth[i] for i in truth) / len(truth)


# ----------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    windows: list
    accuracies: list
    samples: dict = field(default_factory=dict)  # window -> degraded sample Image
    errors: dict = field(default_factory=dict)  # window -> message

    def rows(self):
        for w, a in zip(self.windows, self.accuracies):
            yield {"window": w, "accuracy": a, "error": self.errors.get(w, "")}

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.DictWriter(fh, ["window", "accuracy", "error"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({**row, "accuracy": "" if row["accuracy"] is None else f"{row['accuracy']:.6f}"})


MEDIAN_ORDERS = ("before", "after")


def degrade_image(img, spec, median=0, median_order="before"):
    """Max-pool degrade, optionally with a ``median``-sized median filter before or after."""
    if median_order not in MEDIAN_ORDERS:
        raise ValueError(f"median_order must be one of {MEDIAN_ORDERS}")
    if median and median_order == "before":
        img = median_filter(img, median)
    img = maxpool_degrade(img, spec)
    if median and median_order == "after":
        img = median_filter(img, median)
    return img


def degrade_sets(sets, window, median=0, median_order="before"):
    spec = DegradeSpec(window)
    return sets.map_images(lambda img: degrade_image(img, spec, median, median_order))


def run_scfc(dataset, cfg):
    """Cluster a fresh copy of ``dataset.sets``; returns support accuracy and labels."""
    sets = dataset.sets.copy()
    sets.clustering.clear()
    truth = dataset.support_truth()
    _, _, labels = engine.cluster(sets, cfg, ground_truth=truth)
    return accuracy(labels, truth), labels


def _sweep_window(dataset, window, cfg, median=0, median_order="before"):
    try:
        degraded = replace(dataset, sets=degrade_sets(dataset.sets, window, median, median_order))
        if len(degraded.sets.support) < 2:
            raise SCFCError(f"support set has {len(degraded.sets.support)} image(s); need at least 2")
        acc, _ = run_scfc(degraded, cfg)
        return acc, degraded.sets.test_occupied[0], None
    except (SCFCError, ValueError) as err:
        log.warning("window %d failed: %s", window, err)
        return None, None, str(err)


def _map(fn, args, workers):
    if workers <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args)))


def privacy_sweep(dataset, windows, cfg, workers=1, median=0, median_order="before"):
    """Degrade every image at each window size and rerun the full pipeline.

    Windows are independent; ``workers > 1`` runs them in separate processes.
    A nonzero ``median`` adds a median filter before or after the degradation.
    """
    windows = [int(w) for w in windows]
    if any(b <= a for a, b in zip(windows, windows[1:])):
        raise ValueError("windows must be strictly increasing")
    result = SweepResult(windows=list(windows), accuracies=[])
    outcomes = _map(_sweep_window, [(dataset, w, cfg, median, median_order) for w in windows], workers)
    for w, (acc, sample, err) in zip(windows, outcomes):
        result.accuracies.append(acc)
        if sample is not None:
            result.samples[w] = sample
        if err is not None:
            result.errors[w] = err
    return result


# ---------------------------------------------------------------- tables


@dataclass
class TableRow:
    dataset: str
    scfc_acc: float | None
    knn_acc: float | None
    seed: int
    n: int
    N: int
    lr: float
    lam: float
    error: str = ""

    def as_csv(self):
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        return [self.dataset, fmt(self.scfc_acc), fmt(self.knn_acc), self.seed, self.n, self.N, self.lr, self.lam]


def knn_accuracy(dataset, knn_cfg):
    refs = dataset.sets.test
    truth = dataset.support_truth()
    return accuracy(knn_labels(knn_cfg, refs, dataset.sets.support), truth)


def _benchmark_row(item, cfg, knn_cfg, keep_going):
    name = getattr(item, "name", getattr(item, "__name__", str(item)))
    row = TableRow(name, None, None, cfg.seed, cfg.pretrain_steps, cfg.episodes, cfg.learning_rate, cfg.l2_lambda)
    try:
        ds = item() if callable(item) else item
        row.dataset = ds.name
        row.knn_acc = knn_accuracy(ds, knn_cfg)
        row.scfc_acc, _ = run_scfc(ds, cfg)
    except Exception as err:  # noqa: BLE001 - recorded per row
        if not keep_going:
            raise
        log.warning("dataset %s failed: %s", name, err)
        row.error = f"{type(err).__name__}: {err}"
    return row


def benchmark_table(datasets, cfg, knn_cfg, keep_going=True, workers=1):
    """One row per dataset with SCFC and kNN support-set accuracy under a shared seed.

    ``datasets`` items are :class:`~scfc.mnist.LabeledDataset` or callables
    returning one (so loading failures are captured per row).  With
    ``workers > 1`` rows run in separate processes, so items must pickle.
    """
    return _map(_benchmark_row, [(item, cfg, knn_cfg, keep_going) for item in datasets], workers)


def write_table_csv(path, rows, header_comment=None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for row in rows:
            w.writerow(row.as_csv())
    return path


def format_table(rows):
    lines = [f"{'dataset':<20} {'SCFC':>8} {'kNN':>8}"]
    for r in rows:
        s = "failed" if r.scfc_acc is None else f"{100 * r.scfc_acc:7.2f}%"
        k = "failed" if r.knn_acc is None else f"{100 * r.knn_acc:7.2f}%"
        lines.append(f"{r.dataset:<20} {s:>8} {k:>8}" + (f"  ({r.error})" if r.error else ""))
    return "\n".join(lines)

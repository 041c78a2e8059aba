"""Few-shot clustering loop: warm start, alternating E/M episodes, stream ingestion, k-way voting."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FewShotSets, labeled_pair, random_pair
from .errors import EmptySetError, SCFCError
from .images import ssim_change
from .nn import SgdConfig
from .siamese import SiameseModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineConfig:
    pretrain_steps: int = 500  # n
    episodes: int = 1000  # N
    learning_rate: float = 0.01
    batch_size: int = 32  # M
    l2_lambda: float = 1e-4
    seed: int = 0
    pair_budget: int = 256  # pairs drawn per M-step
    ssim_threshold: float = 0.9
    patience: int = 0  # stop after this many zero-flip episodes; 0 disables
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("pretrain_steps", "episodes", "pair_budget", "patience", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.ssim_threshold < 1.0:
            raise ValueError("ssim_threshold must be in (0, 1)")
        self.sgd  # validates lr / batch / lambda
        if self.pretrain_steps and self.episodes and self.pretrain_steps >= self.episodes:
            warnings.warn(
                f"pretrain steps ({self.pretrain_steps}) should be much smaller than episodes ({self.episodes})",
                stacklevel=2,
            )

    @property
    def sgd(self):
        return SgdConfig(self.learning_rate, self.batch_size, self.l2_lambda, self.seed)

    def to_dict(self):
        return asdict(self)


@dataclass
class ProbabilityTables:
    occupied: np.ndarray  # |T_O| x |S|
    unoccupied: np.ndarray  # |T_U| x |S|
    occupied_binary: np.ndarray = None
    unoccupied_binary: np.ndarray = None

    def __post_init__(self):
        if self.occupied.shape[1] != self.unoccupied.shape[1]:
            raise ValueError("tables must share the support-set columns")
        if self.occupied_binary is None:
            self.occupied_binary = binarize_rows(self.occupied)
        if self.unoccupied_binary is None:
            self.unoccupied_binary = binarize_rows(self.unoccupied)

    def labels(self):
        """1 where the occupied column mean beats the unoccupied one; ties go to 0."""
        return (self.occupied_binary.mean(axis=0) > self.unoccupied_binary.mean(axis=0)).astype(int)


def binarize_rows(table):
    table = np.asarray(table, dtype=np.float64)
    return (table > table.mean(axis=1, keepdims=True)).astype(np.int8)


def labels_from_tables(p_occ, p_unocc):
    return ProbabilityTables(np.asarray(p_occ, float), np.asarray(p_unocc, float)).labels()


@dataclass
class EpisodeReport:
    episode: int
    pseudo_labels: dict
    mean_loss: float
    accuracy: float | None = None
    flips: int = 0
    support_size: int = 0
    ingested: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _rng(cfg, stream):
    return np.random.default_rng([cfg.seed, stream])


def _train_pairs(model, pairs, cfg):
    losses = []
    sgd = cfg.sgd
    for i in range(0, len(pairs), cfg.batch_size):
        _, loss = model.train_minibatch(pairs[i : i + cfg.batch_size], sgd)
        losses.append(loss)
    return losses


def pretrain(model, sets, cfg, rng=None, trace=None):
    """Warm start: ``n`` single-pair SGD steps on random pairs of exemplars."""
    if not sets.test_occupied or not sets.test_unoccupied:
        raise EmptySetError("pretraining needs both occupied and unoccupied exemplars")
    rng = rng if rng is not None else _rng(cfg, 1)
    test = sets.test
    sgd = cfg.sgd
    for _ in range(cfg.pretrain_steps):
        a, b = random_pair(test, rng)
        _, loss = model.train_minibatch([labeled_pair(sets, a, b)], sgd)
        if trace is not None:
            trace.append(loss)
    return model


def compute_tables(model, sets):
    if len(sets.support) == 0:
        raise EmptySetError("E-step needs a non-empty support set")
    emb_s = model.embed(sets.support)
    emb_o = model.embed(sets.test_occupied)
    emb_u = model.embed(sets.test_unoccupied)
    return ProbabilityTables(model.similarity_table(emb_o, emb_s), model.similarity_table(emb_u, emb_s))


def e_step(model, sets):
    """Fill both tables, threshold each row at its mean, and label every support column."""
    if len(sets.support) < 2:
        log.warning("E-step with %d support image(s): every label degenerates to 0", len(sets.support))
    tables = compute_tables(model, sets)
    labels = tables.labels()
    for img, lab in zip(sets.support, labels):
        sets.assign_imaginary(img.id, int(lab))
    return tables, {img.id: int(lab) for img, lab in zip(sets.support, labels)}


def m_step(model, sets, cfg, rng=None):
    """Train on ``pair_budget`` random pairs from the test and support images."""
    rng = rng if rng is not None else _rng(cfg, 2)
    pool = sets.test + sets.support
    pairs = [labeled_pair(sets, *random_pair(pool, rng)) for _ in range(cfg.pair_budget)]
    losses = _train_pairs(model, pairs, cfg)
    return model, float(np.mean(losses)) if losses else float("nan")


def accuracy_against(labels, truth):
    ids = [i for i in labels if i in truth]
    if not ids:
        return None
    return float(np.mean([labels[i] == truth[i] for i in ids]))


class StreamIngestor:
    """Admits frames whose SSIM to the last admitted frame drops below the threshold."""

    def __init__(self, frames, threshold, reference=None):
        self._frames = iter(frames)
        self.threshold = threshold
        self.reference = reference
        self.exhausted = False

    def next_frame(self):
        """Return the next admitted frame, or ``None`` when nothing changed or the stream ended."""
        if self.exhausted:
            return None
        try:
            frame = next(self._frames)
        except StopIteration:
            self.exhausted = True
            return None
        if self.reference is None or ssim_change(self.reference, frame, self.threshold):
            self.reference = frame
            return frame
        return None


def run_episodes(model, sets, cfg, ground_truth=None, stream=None, on_episode=None):
    """Alternate E- and M-steps for ``cfg.episodes`` episodes.

    ``stream`` is an optional iterable of images; one frame is offered per
    episode and admitted into the support set when SSIM reports a change
    against the most recently admitted frame.  ``on_episode`` is called with
    ``(episode_index, model, report)`` after each episode.
    """
    rng = _rng(cfg, 2)
    ingestor = None
    if stream is not None:
        ingestor = StreamIngestor(stream, cfg.ssim_threshold, sets.support[-1] if sets.support else None)
    reports = []
    previous = {}
    quiet = 0
    for c in range(cfg.episodes):
        _, labels = e_step(model, sets)
        model, loss = m_step(model, sets, cfg, rng)
        flips = sum(1 for k, v in labels.items() if k in previous and previous[k] != v)
        ingested = []
        if ingestor is not None:
            frame = ingestor.next_frame()
            if frame is not None:
                sets.add_support(frame)
                ingested.append(frame.id)
        report = EpisodeReport(
            episode=c,
            pseudo_labels=labels,
            mean_loss=loss,
            accuracy=accuracy_against(labels, ground_truth) if ground_truth else None,
            flips=flips,
            support_size=len(sets.support),
            ingested=ingested,
        )
        reports.append(report)
        if on_episode is not None:
            on_episode(c, model, report)
        log.debug("episode %d loss %.4f acc %s flips %d", c, loss, report.accuracy, flips)
        previous = labels
        quiet = quiet + 1 if (c > 0 and flips == 0) else 0
        if cfg.patience and quiet >= cfg.patience:
            log.info("no label flips for %d episodes; stopping at episode %d", quiet, c)
            break
    return model, reports


def final_labels(reports):
    """Clustering output: the pseudo-labels of the last episode."""
    return dict(reports[-1].pseudo_labels) if reports else {}


def cluster(sets, cfg, ground_truth=None, stream=None, input_hw=None, on_episode=None):
    """Full pipeline on a fresh model: create, warm start, episodes.

    Returns ``(model, reports, labels)``.
    """
    hw = input_hw or sets.test_occupied[0].pixels.shape
    model = SiameseModel.create(hw, seed=cfg.seed, l2_lambda=cfg.l2_lambda)
    pretrain(model, sets, cfg)
    model, reports = run_episodes(model, sets, cfg, ground_truth, stream, on_episode)
    labels = final_labels(reports)
    return model, reports, labels


# ------------------------------------------------------------------ k-way


@dataclass
class OneVsAllRun:
    class_index: int
    model: SiameseModel
    sets: FewShotSets
    labels: dict  # query id -> 1 if claimed by this class
    positive_is_occupied: bool = True  # False for a complement run sharing its partner's sets

    def exemplars(self):
        return self.sets.test_occupied if self.positive_is_occupied else self.sets.test_unoccupied


def complement_run(run, class_index):
    flipped = {k: 1 - v for k, v in run.labels.items()}
    return OneVsAllRun(class_index, run.model, run.sets, flipped, not run.positive_is_occupied)


def one_vs_all_sets(exemplars_by_class, queries, positive):
    occ = list(exemplars_by_class[positive])
    unocc = [img for c, imgs in enumerate(exemplars_by_class) if c != positive for img in imgs]
    return FewShotSets(occ, unocc, list(queries), check_shot_budget=False)


def train_one_vs_all(exemplars_by_class, queries, cfg):
    """Train one binary clustering run per class (one run when ``k == 2``).

    With two classes the class-0 run is the complement of the class-1 run:
    both partition the queries identically.
    """
    k = len(exemplars_by_class)
    if k < 2:
        raise SCFCError("k-way clustering needs at least two classes")
    positives = [1] if k == 2 else list(range(k))
    runs = {}
    for c in positives:
        sets = one_vs_all_sets(exemplars_by_class, queries, c)
        model, _, labels = cluster(sets, cfg)
        runs[c] = OneVsAllRun(c, model, sets, labels)
    if k == 2:
        runs[0] = complement_run(runs[1], 0)
    return [runs[c] for c in range(k)]


def _mean_similarity(run, query):
    """Mean similarity of ``query`` to the exemplars of the run's own class."""
    model = run.model
    return float(model.similarity_table(model.embed([query]), model.embed(run.exemplars())).mean())


def kway_cluster(runs, queries):
    """Majority vote over one-vs-all runs; ties go to the highest exemplar similarity."""
    if not runs:
        raise SCFCError("k-way clustering needs at least one model")
    out = {}
    for q in queries:
        votes = np.array([run.labels.get(q.id, 0) for run in runs])
        top = np.flatnonzero(votes == votes.max())
        if len(top) == 1:
            out[q.id] = int(runs[top[0]].class_index)
            continue
        scores = [_mean_similarity(runs[idx], q) for idx in top]
        out[q.id] = int(runs[top[int(np.argmax(scores))]].class_index)
    return out

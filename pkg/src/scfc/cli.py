"""Command-line entry point: ``scfc {cluster,pretrain-only,knn,degrade,benchmark}``.

Settings resolve as command-line flag > ``SCFC_*`` environment variable >
``--config`` JSON file > built-in default.  Every run writes
``run_config.json`` next to its outputs, and CSV/JSONL outputs carry the same
resolved configuration in a header line, so a run can be replayed from its
outputs alone.  Failures print one JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import shutil
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import baselines, engine, mnist
from .baselines import KnnConfig
from .data import FewShotSets, write_labels_csv
from .engine import EngineConfig
from .errors import SCFCError
from .images import (
    IMAGE_SUFFIXES,
    DegradeSpec,
    load_idx,
    load_image_dir,
    median_filter,
    read_image,
    resize_nearest,
    write_image,
)
from .siamese import SiameseModel

log = logging.getLogger("scfc")

ENV_PREFIX = "SCFC_"
STANDARD_PAIRS = mnist.STANDARD_PAIRS

# flag dest -> (type, EngineConfig / KnnConfig / RunConfig field)
SETTINGS = {
    "seed": (int, "seed"),
    "n": (int, "pretrain_steps"),
    "episodes": (int, "episodes"),
    "lr": (float, "learning_rate"),
    "lambda_": (float, "l2_lambda"),
    "batch": (int, "batch_size"),
    "pair_budget": (int, "pair_budget"),
    "ssim_threshold": (float, "ssim_threshold"),
    "patience": (int, "patience"),
    "checkpoint_every": (int, "checkpoint_every"),
    "k": (int, "k"),
    "distance": (str, "distance"),
    "window": (str, "window"),
    "out": (str, "out"),
    "keep_going": (bool, "keep_going"),
    "workers": (int, "workers"),
    "data": (str, "data"),
    "digits": (str, "digits"),
    "idx_images": (str, "idx_images"),
    "idx_labels": (str, "idx_labels"),
    "shots": (int, "shots"),
    "per_class": (int, "per_class"),
    "stream": (str, "stream"),
    "input": (str, "input"),
    "manifest": (str, "manifest"),
    "input_size": (str, "input_size"),
    "median": (int, "median"),
    "median_order": (str, "median_order"),
}
ROOM_INPUT_SIZE = "64x48"
ENGINE_FIELDS = {f.name for f in fields(EngineConfig)}
KNN_FIELDS = {f.name for f in fields(KnnConfig)}


@dataclass
class RunConfig:
    command: str
    engine: EngineConfig = field(default_factory=EngineConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    data: str | None = None
    digits: str | None = None
    idx_images: str | None = None
    idx_labels: str | None = None
    shots: int = 5
    per_class: int = 500
    stream: str | None = None
    input: str | None = None
    manifest: str | None = None
    input_size: str | None = None  # WxH; folder datasets default to ROOM_INPUT_SIZE
    median: int = 0  # median filter size, 0 = off
    median_order: str = "before"  # median filter relative to max-pool degradation
    window: str = "1"
    out: str = "scfc-out"
    keep_going: bool = False
    workers: int = 1
    seed_source: str = "fixed"

    def to_dict(self):
        """Resolved settings without the output location, so reruns into
        different directories stay byte-identical."""
        d = asdict(self)
        d.pop("out")
        d.pop("workers")
        return d

    def header(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def windows(self):
        return parse_windows(self.window)


class CliError(Exception):
    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


def parse_windows(text):
    """``"5"``, ``"1,10,20"`` or ``"1-20"`` (inclusive) -> sorted list of ints."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"no window sizes in {text!r}")
    return sorted(set(out))


def parse_size(text):
    """``"64x48"`` (width x height) -> ``(height, width)``."""
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError as err:
        raise ValueError(f"size must look like 64x48 (width x height), got {text!r}") from err
    if w < 1 or h < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return h, w


def parse_digits(text):
    vals = [int(x) for x in str(text).replace("/", ",").split(",") if x.strip()]
    if len(vals) != 2 or vals[0] == vals[1]:
        raise ValueError(f"--digits expects two distinct digits like 0,1; got {text!r}")
    return tuple(vals)


def _coerce(kind, value):
    if kind is bool:
        if isinstance(value, bool):
            return value
        return str(value).strip().lower() in {"1", "true", "yes", "on"}
    return kind(value)


def resolve(args, environ=None):
    """Merge flags, environment and config file into a :class:`RunConfig`."""
    environ = os.environ if environ is None else environ
    file_cfg = {}
    config_path = getattr(args, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"cannot read config file {config_path}: {err}", path=str(config_path)) from err
        if not isinstance(file_cfg, dict):
            raise CliError(f"config file {config_path} must hold a JSON object", path=str(config_path))
    values = {}
    for dest, (kind, target) in SETTINGS.items():
        flag_value = getattr(args, dest, None)
        env_key = ENV_PREFIX + dest.rstrip("_").upper()
        if flag_value is not None:
            values[target] = _coerce(kind, flag_value)
        elif env_key in environ:
            values[target] = _coerce(kind, environ[env_key])
        else:
            for key in (dest, dest.rstrip("_"), target):
                if key in file_cfg:
                    values[target] = _coerce(kind, file_cfg[key])
                    break
    seed_source = "fixed"
    if "seed" not in values:
        values["seed"] = secrets.randbits(31)
        seed_source = "entropy"
        print(f"seed: {values['seed']}", file=sys.stderr)
        warnings.warn(
            f"no --seed given; drew seed {values['seed']} from system entropy, pass --seed to reproduce this run",
            stacklevel=2,
        )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        eng = EngineConfig(**{k: v for k, v in values.items() if k in ENGINE_FIELDS})
    for w in caught:
        log.warning("%s", w.message)
    knn = KnnConfig(**{k: v for k, v in values.items() if k in KNN_FIELDS})
    rest = {k: v for k, v in values.items() if k not in ENGINE_FIELDS | KNN_FIELDS}
    cfg = RunConfig(command=args.command, engine=eng, knn=knn, seed_source=seed_source, **rest)
    if cfg.median < 0 or (cfg.median and cfg.median % 2 == 0):
        raise ValueError(f"--median must be 0 or a positive odd size, got {cfg.median}")
    if cfg.median_order not in baselines.MEDIAN_ORDERS:
        raise ValueError(f"--median-order must be one of {baselines.MEDIAN_ORDERS}")
    if cfg.input_size:
        parse_size(cfg.input_size)
    return cfg


# ------------------------------------------------------------------- data


@dataclass
class LoadedData:
    name: str
    sets: FewShotSets
    truth: dict


def _idx_images(cfg):
    default_images, default_labels = mnist.default_idx_paths()
    images = Path(cfg.idx_images or default_images)
    labels = Path(cfg.idx_labels or default_labels)
    for p in (images, labels):
        if not p.exists():
            raise CliError(f"IDX file not found: {p}", path=str(p))
    return load_idx(images, labels, id_prefix="mnist")


def preprocess(cfg, default_size=None, median=True):
    """Per-image pipeline: optional median filter, then nearest-neighbour resize."""
    size = cfg.input_size or default_size
    hw = parse_size(size) if size else None

    def apply(img):
        if median and cfg.median:
            img = median_filter(img, cfg.median)
        if hw is not None:
            img = resize_nearest(img, *hw)
        return img

    return apply


def load_data(cfg, median=True):
    """Dataset chosen by ``--data`` (folder layout) or ``--digits`` (IDX pair).

    With ``median=False`` the median filter is left to the caller (the
    degradation sweep places it before or after the max-pool step).
    """
    if cfg.data and cfg.digits:
        raise CliError("pass either --data or --digits, not both")
    if cfg.data:
        root = Path(cfg.data)
        if not root.is_dir():
            raise CliError(f"dataset root not found: {root}", path=str(root))
        try:
            sets = load_image_dir(root)
        except FileNotFoundError as err:
            raise CliError(str(err), path=str(err).split(": ", 1)[-1]) from err
        truth = {img.id: img.label for img in sets.support if img.label is not None}
        sets = sets.map_images(preprocess(cfg, ROOM_INPUT_SIZE, median))
        return LoadedData(root.name, sets, truth)
    if cfg.digits:
        ds = mnist.pair_dataset(
            _idx_images(cfg), parse_digits(cfg.digits), cfg.shots, cfg.per_class, cfg.engine.seed
        )
        return LoadedData(ds.name, ds.sets.map_images(preprocess(cfg, None, median)), ds.support_truth())
    raise CliError("no dataset: pass --data ROOT or --digits A,B")


def load_stream(cfg, shape):
    """Frames from ``--stream``, preprocessed like the dataset and resized to ``shape``."""
    if not cfg.stream:
        return None
    folder = Path(cfg.stream)
    if not folder.is_dir():
        raise CliError(f"stream folder not found: {folder}", path=str(folder))
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    prep = preprocess(cfg, "x".join(map(str, shape[::-1])))
    return (prep(read_image(p, f"stream/{p.stem}")) for p in paths)


def _truth_or_none(truth, sets):
    ids = {img.id for img in sets.support}
    return truth if truth and ids <= set(truth) else None


# --------------------------------------------------------------- commands


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _save_model(model, path, cfg, extra=None):
    meta = {"run_config": cfg.to_dict(), **(extra or {})}
    model.save(path, cfg.engine.sgd, meta)


def cmd_cluster(cfg):
    data = load_data(cfg)
    stream = load_stream(cfg, data.sets.test_occupied[0].pixels.shape)
    out = _out_dir(cfg)
    truth = _truth_or_none(data.truth, data.sets)
    episodes_path = out / "episodes.jsonl"
    every = cfg.engine.checkpoint_every

    with open(episodes_path, "w") as fh:
        fh.write(json.dumps({"run_config": cfg.to_dict()}, sort_keys=True) + "\n")

        def on_episode(c, model, report):
            fh.write(report.to_json() + "\n")
            if every and (c + 1) % every == 0:
                _save_model(model, out / f"checkpoint-{c + 1:05d}.npz", cfg, {"episode": c + 1})

        model, reports, labels = engine.cluster(data.sets, cfg.engine, truth, stream, on_episode=on_episode)

    write_labels_csv(out / "assignments.csv", dict(sorted(labels.items())), cfg.header())
    data.sets.export_jsonl(out / "sets.jsonl")
    _save_model(model, out / "checkpoint.npz", cfg, {"episodes_run": len(reports)})
    summary = {"dataset": data.name, "support": len(data.sets.support), "episodes_run": len(reports)}
    if truth:
        summary["accuracy"] = engine.accuracy_against(labels, truth)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_pretrain_only(cfg):
    data = load_data(cfg)
    out = _out_dir(cfg)
    hw = data.sets.test_occupied[0].pixels.shape
    model = SiameseModel.create(hw, seed=cfg.engine.seed, l2_lambda=cfg.engine.l2_lambda)
    trace = []
    engine.pretrain(model, data.sets, cfg.engine, trace=trace)
    with open(out / "pretrain_trace.csv", "w") as fh:
        fh.write(f"# {cfg.header()}\nstep,loss\n")
        for i, loss in enumerate(trace):
            fh.write(f"{i},{loss:.10g}\n")
    _save_model(model, out / "checkpoint.npz", cfg, {"pretrain_steps": len(trace)})
    print(json.dumps({"steps": len(trace), "final_loss": trace[-1] if trace else None}))
    return 0


def cmd_knn(cfg):
    data = load_data(cfg)
    out = _out_dir(cfg)
    labels = baselines.knn_labels(cfg.knn, data.sets.test, data.sets.support)
    write_labels_csv(out / "assignments.csv", dict(sorted(labels.items())), cfg.header())
    summary = {"dataset": data.name, "k": cfg.knn.k, "distance": cfg.knn.distance}
    truth = _truth_or_none(data.truth, data.sets)
    if truth:
        summary["accuracy"] = baselines.accuracy(labels, truth)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _image_files(root):
    root = Path(root)
    if root.is_file():
        return root.parent, [root]
    if not root.is_dir():
        raise CliError(f"input not found: {root}", path=str(root))
    return root, sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _degrade_files(cfg, out):
    """Degrade every image under ``--input`` at every window; per-image failures are logged, not fatal."""
    base, paths = _image_files(cfg.input)
    errors = []
    written = 0
    prep = preprocess(cfg, None, median=False)
    for w in cfg.windows:
        spec = DegradeSpec(w)
        for p in paths:
            rel = p.relative_to(base)
            dest = out / f"window-{w:02d}" / rel
            try:
                img = prep(read_image(p))
                degraded = baselines.degrade_image(img, spec, cfg.median, cfg.median_order)
                dest.parent.mkdir(parents=True, exist_ok=True)
                if degraded is img and dest.suffix.lower() == p.suffix.lower():
                    shutil.copyfile(p, dest)  # identity window: keep the original bytes
                else:
                    write_image(dest, degraded)
                written += 1
            except (SCFCError, ValueError) as err:
                errors.append({"path": str(rel), "window": w, "error": f"{type(err).__name__}: {err}"})
    return written, errors


def cmd_degrade(cfg):
    out = _out_dir(cfg)
    summary = {"windows": cfg.windows}
    if cfg.input:
        written, errors = _degrade_files(cfg, out)
        with open(out / "degrade_errors.jsonl", "w") as fh:
            for e in errors:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        summary.update(images_written=written, image_errors=len(errors))
    if cfg.data or cfg.digits:
        data = load_data(cfg, median=False)
        truth = _truth_or_none(data.truth, data.sets)
        if truth is None:
            log.warning("dataset has no complete ground truth; skipping the accuracy sweep")
        else:
            ds = mnist.LabeledDataset(data.name, data.sets, truth)
            result = baselines.privacy_sweep(
                ds, cfg.windows, cfg.engine, workers=cfg.workers, median=cfg.median, median_order=cfg.median_order
            )
            result.write_csv(out / "sweep.csv", cfg.header())
            samples = out / "samples"
            samples.mkdir(exist_ok=True)
            for w, img in result.samples.items():
                write_image(samples / f"window-{w:02d}.png", img)
            summary["sweep"] = [{"window": r["window"], "accuracy": r["accuracy"]} for r in result.rows()]
    if not cfg.input and not (cfg.data or cfg.digits):
        raise CliError("degrade needs --input and/or a dataset (--data or --digits)")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _manifest_items(cfg):
    """Dataset loaders for the benchmark; loading is deferred so a bad entry fails only its row."""
    if cfg.manifest:
        path = Path(cfg.manifest)
        try:
            entries = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"cannot read manifest {path}: {err}", path=str(path)) from err
        if isinstance(entries, dict):
            entries = entries.get("datasets", [])
        base = path.parent
    else:
        entries = [{"digits": f"{a},{b}"} for a, b in STANDARD_PAIRS]
        base = Path.cwd()
    return [_ManifestLoader(entry, cfg, base) for entry in entries]


class _ManifestLoader:
    def __init__(self, entry, cfg, base):
        self.entry = entry
        self.cfg = cfg
        self.base = base
        self.name = entry.get("name") or (f"MNIST {entry['digits']}" if "digits" in entry else entry.get("root", "?"))

    def __call__(self):
        e = self.entry
        if "root" in e:
            root = Path(e["root"])
            root = root if root.is_absolute() else self.base / root
            sub = RunConfig(
                self.cfg.command,
                self.cfg.engine,
                self.cfg.knn,
                data=str(root),
                input_size=e.get("input_size", self.cfg.input_size),
                median=e.get("median", self.cfg.median),
            )
        elif "digits" in e:
            sub = RunConfig(
                self.cfg.command,
                self.cfg.engine,
                self.cfg.knn,
                digits=str(e["digits"]).replace("/", ","),
                idx_images=e.get("idx_images", self.cfg.idx_images),
                idx_labels=e.get("idx_labels", self.cfg.idx_labels),
                shots=e.get("shots", self.cfg.shots),
                per_class=e.get("per_class", self.cfg.per_class),
                input_size=e.get("input_size", self.cfg.input_size),
                median=e.get("median", self.cfg.median),
            )
        else:
            raise CliError(f"manifest entry needs 'root' or 'digits': {e}")
        data = load_data(sub)
        truth = _truth_or_none(data.truth, data.sets)
        if truth is None:
            raise CliError(f"dataset {data.name} lacks ground truth for its support images")
        return mnist.LabeledDataset(e.get("name", data.name), data.sets, truth)


def cmd_benchmark(cfg):
    out = _out_dir(cfg)
    rows = baselines.benchmark_table(
        _manifest_items(cfg), cfg.engine, cfg.knn, keep_going=cfg.keep_going, workers=cfg.workers
    )
    baselines.write_table_csv(out / "benchmark.csv", rows, cfg.header())
    text = baselines.format_table(rows)
    (out / "benchmark.txt").write_text(text + "\n")
    print(text)
    return 0


COMMANDS = {
    "cluster": cmd_cluster,
    "pretrain-only": cmd_pretrain_only,
    "knn": cmd_knn,
    "degrade": cmd_degrade,
    "benchmark": cmd_benchmark,
}


# ---------------------------------------------------------------- parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="JSON file of settings (lowest precedence above defaults)")
    g.add_argument("--seed", type=int, help="master seed; drawn from entropy and printed when omitted")
    g.add_argument("--out", help="output directory (default scfc-out)")
    g.add_argument("--workers", type=int, help="processes for independent rows / windows")
    g.add_argument("-v", "--verbose", action="store_true")

    d = common.add_argument_group("data")
    d.add_argument("--data", help="dataset root with test/occupied, test/unoccupied, support (+ optional truth.csv)")
    d.add_argument("--digits", help="two IDX digits, e.g. 0,1 (second digit is the positive class)")
    d.add_argument("--idx-images", help="IDX image file (default: bundled digit subset)")
    d.add_argument("--idx-labels", help="IDX label file")
    d.add_argument("--shots", type=int, help="labeled exemplars per class for --digits (default 5)")
    d.add_argument("--per-class", type=int, help="support images per class for --digits (default 500)")
    d.add_argument("--input-size", help="resize every image to WxH (folder datasets default to 64x48)")
    d.add_argument("--median", type=int, help="median filter size applied to every image (0 = off, default)")
    d.add_argument("--median-order", choices=["before", "after"], help="median filter before or after degradation")

    e = common.add_argument_group("engine")
    e.add_argument("--n", type=int, help="warm-start steps (default 500)")
    e.add_argument("--episodes", type=int, help="E/M episodes N (default 1000)")
    e.add_argument("--lr", type=float, help="SGD learning rate (default 0.01)")
    e.add_argument("--lambda", dest="lambda_", type=float, help="L2 weight (default 1e-4)")
    e.add_argument("--batch", type=int, help="minibatch size M (default 32)")
    e.add_argument("--pair-budget", type=int, help="pairs drawn per M-step (default 256)")
    e.add_argument("--ssim-threshold", type=float, help="stream admission threshold (default 0.9)")
    e.add_argument("--patience", type=int, help="stop after this many episodes without label flips")
    e.add_argument("--checkpoint-every", type=int, help="also save a checkpoint every K episodes")
    e.add_argument("--stream", help="folder of frames offered one per episode")

    k = common.add_argument_group("knn")
    k.add_argument("--k", type=int, help="neighbours (odd, default 3)")
    k.add_argument("--distance", choices=["euclidean", "manhattan"])

    x = common.add_argument_group("degrade / benchmark")
    x.add_argument("--window", help="window size(s): 5, 1,10,20 or 1-20")
    x.add_argument("--input", help="image file or folder to degrade")
    x.add_argument("--manifest", help="benchmark manifest JSON (default: the five standard digit pairs)")
    x.add_argument("--keep-going", action="store_true", default=None, help="record failed rows instead of aborting")

    parser = argparse.ArgumentParser(prog="scfc", description="Few-shot siamese clustering of image streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "cluster": "cluster the support set and write assignments",
        "pretrain-only": "run only the warm start and save the model",
        "knn": "label the support set with the kNN baseline",
        "degrade": "max-pool degrade images and/or sweep clustering accuracy over windows",
        "benchmark": "SCFC vs kNN accuracy table",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _fail(err, code=1):
    payload = {"error": type(err).__name__, "message": str(err)}
    payload.update(getattr(err, "details", {}))
    if isinstance(err, OSError) and err.filename:
        payload.setdefault("path", str(err.filename))
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None, environ=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args, environ)
        return COMMANDS[cfg.command](cfg)
    except (CliError, SCFCError, OSError, ValueError, KeyError) as err:
        return _fail(err)


if __name__ == "__main__":
    sys.exit(main())

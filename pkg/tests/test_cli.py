import csv
import json

import numpy as np
import pytest

from scfc import cli, mnist
from scfc.images import Image, read_image, read_pgm, write_image
from scfc.siamese import SiameseModel

FAST = ["--n", "20", "--episodes", "3", "--lr", "0.05", "--batch", "8", "--pair-budget", "16"]


def blob(rng, cls):
    px = rng.uniform(0, 0.2, size=(12, 12))
    if cls:
        px[1:6, 1:6] += 0.7
    else:
        px[8:11, 2:11] += 0.7
    return np.clip(px, 0, 1)


@pytest.fixture
def layout(tmp_path):
    """Folder dataset with 2+2 exemplars, 8 support images and truth.csv."""
    rng = np.random.default_rng(0)
    root = tmp_path / "room"
    for sub in ("test/occupied", "test/unoccupied", "support"):
        (root / sub).mkdir(parents=True)
    for i in range(2):
        write_image(root / "test/occupied" / f"o{i}.pgm", Image(blob(rng, 1), "x"))
        write_image(root / "test/unoccupied" / f"u{i}.png", Image(blob(rng, 0), "x"))
    lines = ["id,label"]
    for i in range(8):
        cls = i % 2
        write_image(root / "support" / f"s{i}.pgm", Image(blob(rng, cls), "x"))
        lines.append(f"support/s{i},{cls}")
    (root / "truth.csv").write_text("\n".join(lines) + "\n")
    return root


def data_args(layout):
    return ["--data", str(layout), "--input-size", "12x12"]


def run(capsys, *argv, environ=None):
    code = cli.main(list(argv), environ=environ or {})
    out, err = capsys.readouterr()
    return code, out, err


def error_json(err):
    return json.loads([line for line in err.splitlines() if line.startswith("{")][-1])


def read_assignments(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return json.loads(lines[0][2:]), {r["id"]: int(r["label"]) for r in csv.DictReader(lines[1:])}


def test_cluster_writes_all_outputs(tmp_path, layout, capsys):
    out = tmp_path / "out"
    code, stdout, _ = run(capsys, "cluster", *data_args(layout), "--seed", "1", "--out", str(out), *FAST)
    assert code == 0
    for name in ("assignments.csv", "episodes.jsonl", "checkpoint.npz", "sets.jsonl", "run_config.json"):
        assert (out / name).exists(), name
    header, labels = read_assignments(out / "assignments.csv")
    assert set(labels) == {f"support/s{i}" for i in range(8)}
    assert header["engine"]["seed"] == 1 and header["engine"]["episodes"] == 3
    episodes = (out / "episodes.jsonl").read_text().splitlines()
    assert json.loads(episodes[0])["run_config"] == header
    assert len(episodes) == 1 + 3
    assert "accuracy" in json.loads(stdout)


def test_cluster_is_byte_identical_across_reruns(tmp_path, layout, capsys):
    for name in ("a", "b"):
        run(capsys, "cluster", *data_args(layout), "--seed", "9", "--out", str(tmp_path / name), *FAST)
    assert (tmp_path / "a/assignments.csv").read_bytes() == (tmp_path / "b/assignments.csv").read_bytes()
    assert (tmp_path / "a/episodes.jsonl").read_bytes() == (tmp_path / "b/episodes.jsonl").read_bytes()


def test_missing_support_folder(tmp_path, layout, capsys):
    (layout / "support").rename(layout / "elsewhere")
    code, _, err = run(capsys, "cluster", *data_args(layout), "--seed", "0", "--out", str(tmp_path / "o"))
    assert code != 0
    payload = error_json(err)
    assert payload["path"].endswith("support")


def test_periodic_checkpoints(tmp_path, layout, capsys):
    out = tmp_path / "o"
    run(capsys, "cluster", *data_args(layout), "--seed", "0", "--out", str(out), *FAST, "--checkpoint-every", "2")
    assert sorted(p.name for p in out.glob("checkpoint-*.npz")) == ["checkpoint-00002.npz"]


def test_stream_frames_are_ingested(tmp_path, layout, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    rng = np.random.default_rng(4)
    for i in range(2):
        write_image(frames / f"f{i}.pgm", Image(blob(rng, i), "x"))
    out = tmp_path / "o"
    code, _, _ = run(capsys, "cluster", *data_args(layout), "--seed", "0", "--out", str(out), *FAST, "--stream", str(frames))
    assert code == 0
    _, labels = read_assignments(out / "assignments.csv")
    assert {"stream/f0", "stream/f1"} <= set(labels)


def test_precedence_flag_env_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 1, "episodes": 7, "lr": 0.2, "k": 5}))
    args = cli.build_parser().parse_args(["knn", "--config", str(cfg_file), "--seed", "3"])
    cfg = cli.resolve(args, {"SCFC_SEED": "2", "SCFC_EPISODES": "8"})
    assert cfg.engine.seed == 3  # flag beats env and file
    assert cfg.engine.episodes == 8  # env beats file
    assert cfg.engine.learning_rate == 0.2  # file beats default
    assert cfg.knn.k == 5
    assert cfg.engine.batch_size == 32  # default


def test_lambda_env_override():
    args = cli.build_parser().parse_args(["knn", "--seed", "0"])
    assert cli.resolve(args, {"SCFC_LAMBDA": "0.5"}).engine.l2_lambda == 0.5


def test_omitted_seed_is_drawn_and_reported(capsys):
    args = cli.build_parser().parse_args(["knn"])
    with pytest.warns(UserWarning, match="entropy"):
        cfg = cli.resolve(args, {})
    assert cfg.seed_source == "entropy"
    assert f"seed: {cfg.engine.seed}" in capsys.readouterr().err


def test_bad_config_value_is_reported_as_json(tmp_path, capsys):
    code, _, err = run(capsys, "knn", "--seed", "0", "--k", "2", "--out", str(tmp_path / "o"))
    assert code == 1 and error_json(err)["error"] == "ValueError"


def test_folder_data_resized_to_default_input(tmp_path, layout, capsys):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "pretrain-only", "--data", str(layout), "--seed", "0", "--out", str(out), "--n", "2")
    assert code == 0
    model, _, meta = SiameseModel.load(out / "checkpoint.npz")
    assert model.input_hw == (48, 64)
    assert meta["run_config"]["input_size"] is None


def test_median_option_validation(tmp_path, capsys):
    code, _, err = run(capsys, "knn", "--seed", "0", "--median", "4", "--out", str(tmp_path / "o"))
    assert code == 1 and "median" in error_json(err)["message"]
    with pytest.raises(ValueError):
        cli.parse_size("64-48")
    assert cli.parse_size("64x48") == (48, 64)


def test_median_order_changes_degraded_output(tmp_path, layout, capsys):
    outs = {}
    for order in ("before", "after"):
        out = tmp_path / order
        argv = ["degrade", "--input", str(layout / "support"), "--window", "3", "--median", "3"]
        run(capsys, *argv, "--median-order", order, "--seed", "0", "--out", str(out))
        outs[order] = read_pgm(out / "window-03" / "s0.pgm")
    assert not np.array_equal(outs["before"], outs["after"])


def test_knn_command(tmp_path, layout, capsys):
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "knn", *data_args(layout), "--seed", "0", "--out", str(out), "--k", "3")
    assert code == 0
    _, labels = read_assignments(out / "assignments.csv")
    assert len(labels) == 8
    assert json.loads(stdout)["accuracy"] == 1.0


def test_pretrain_only(tmp_path, layout, capsys):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "pretrain-only", *data_args(layout), "--seed", "0", "--out", str(out), "--n", "30")
    assert code == 0
    rows = (out / "pretrain_trace.csv").read_text().splitlines()
    assert rows[1] == "step,loss" and len(rows) == 2 + 30
    assert (out / "checkpoint.npz").exists()


def test_degrade_identity_window_is_bitwise(tmp_path, layout, capsys):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "degrade", "--input", str(layout), "--window", "1", "--seed", "0", "--out", str(out))
    assert code == 0
    for src in layout.rglob("*.p[gn][mg]"):
        assert (out / "window-01" / src.relative_to(layout)).read_bytes() == src.read_bytes()


def test_degrade_reports_oversized_images_and_continues(tmp_path, layout, capsys):
    write_image(layout / "support" / "tiny.pgm", Image(np.zeros((3, 3)), "x"))
    out = tmp_path / "o"
    code, _, _ = run(capsys, "degrade", "--input", str(layout / "support"), "--window", "4", "--seed", "0", "--out", str(out))
    assert code == 0
    errors = [json.loads(x) for x in (out / "degrade_errors.jsonl").read_text().splitlines()]
    assert [e["path"] for e in errors] == ["tiny.pgm"]
    written = sorted(p.name for p in (out / "window-04").iterdir())
    assert written == [f"s{i}.pgm" for i in range(8)]
    px = read_pgm(out / "window-04" / "s0.pgm")
    assert px.shape == (12, 12)


def test_degrade_sweep_csv(tmp_path, layout, capsys):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "degrade", *data_args(layout), "--window", "1-12", "--seed", "0", "--out", str(out), *FAST)
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert [int(r["window"]) for r in rows] == list(range(1, 13))
    assert all(r["accuracy"] for r in rows)
    assert (out / "samples" / "window-01.png").exists()
    assert read_image(out / "samples" / "window-12.png").pixels.shape == (12, 12)


def test_benchmark_manifest_with_missing_dataset(tmp_path, layout, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"datasets": [{"name": "room", "root": str(layout), "input_size": "12x12"}, {"name": "gone", "root": "nowhere"}]}))
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "benchmark", "--manifest", str(manifest), "--keep-going", "--seed", "0", "--out", str(out), *FAST)
    assert code == 0
    rows = list(csv.reader((out / "benchmark.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["dataset", "scfc_acc", "knn_acc", "seed", "n", "N", "lr", "lambda"]
    assert rows[1][0] == "room" and rows[1][1] and rows[1][2]
    assert rows[2][0] == "gone" and rows[2][1] == "" and rows[2][2] == ""
    assert "failed" in stdout


def test_benchmark_without_keep_going_fails(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps([{"name": "gone", "root": "nowhere"}]))
    code, _, err = run(capsys, "benchmark", "--manifest", str(manifest), "--seed", "0", "--out", str(tmp_path / "o"))
    assert code == 1
    assert "nowhere" in error_json(err)["path"]


def test_benchmark_digit_pairs(tmp_path, capsys):
    images_path, _ = mnist.default_idx_paths()
    if not images_path.exists():
        pytest.skip("digit subset not prepared")
    out = tmp_path / "o"
    code, _, _ = run(capsys, "benchmark", "--seed", "0", "--per-class", "10", "--out", str(out), *FAST)
    assert code == 0
    rows = list(csv.DictReader((out / "benchmark.csv").read_text().splitlines()[1:]))
    assert [r["dataset"] for r in rows] == [f"MNIST {a} and {b}" for a, b in mnist.STANDARD_PAIRS]
    assert all(r["scfc_acc"] and r["knn_acc"] for r in rows)


def test_entry_point_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "benchmark" in capsys.readouterr().out

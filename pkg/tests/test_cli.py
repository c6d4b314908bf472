import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from pillarcoral.cli import main
from pillarcoral.config import load_config
from pillarcoral.core import Box3D, ClassId, Dataset, Domain, Frame, write_dataset
from pillarcoral.detector import AnchorGrid, PillarNet, save_model
from pillarcoral.detector.training import LOG_HEADER
from pillarcoral.scenegen import derive_seed

from conftest import random_cloud

SMALL = ["gen.n_frames=4", "gen.n_eval_frames=3", "train.batch_size=2", "train.epochs=1"]


def run(*args, sets=SMALL):
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return main(argv)


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", str(out), "--seed", "3") == 0
    return out


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", str(data), "--out", str(out), "--seed", "1") == 0
    return out


def test_gen_writes_all_splits(data):
    manifests = {p.parent.name: json.loads(p.read_text()) for p in data.glob("*/manifest.json")}
    assert set(manifests) == {"sim", "real", "eval_sim", "eval_real"}
    assert len(list((data / "sim" / "clouds").iterdir())) == 4
    assert len(list((data / "real" / "clouds").iterdir())) == 4
    assert (data / "config.json").is_file()


def test_commands_are_byte_deterministic(tmp_path, data, trained):
    assert run("gen", "--out", str(tmp_path / "g"), "--seed", "3") == 0
    assert tree(tmp_path / "g") == tree(data)

    assert run("train", "--data", str(data), "--out", str(tmp_path / "t"), "--seed", "1") == 0
    assert tree(tmp_path / "t") == tree(trained)

    for k in ("e1", "e2"):
        assert run("eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data),
                   "--out", str(tmp_path / k), sets=SMALL + ["eval.score_threshold=0.05"]) == 0
    assert tree(tmp_path / "e1") == tree(tmp_path / "e2")

    for k in ("s1", "s2"):
        assert main(["stats", "--data", str(data), "--out", str(tmp_path / k), "--svg"]) == 0
    assert tree(tmp_path / "s1") == tree(tmp_path / "s2")
    assert len(tree(tmp_path / "s1")) == 7


def test_loss_log_columns(trained):
    rows = list(csv.reader((trained / "loss_log.csv").open()))
    assert tuple(rows[0]) == LOG_HEADER
    assert len(rows) == 3
    assert all(float(r[4]) == 0.0 for r in rows[1:])


def test_coral_column_nonzero_when_enabled(tmp_path, data):
    assert run("train", "--data", str(data), "--out", str(tmp_path), sets=SMALL + ["coral.beta_da=1.0"]) == 0
    rows = list(csv.DictReader((tmp_path / "loss_log.csv").open()))
    assert all(float(r["l_da"]) > 0 for r in rows)


def test_zero_epochs_keeps_initialization(tmp_path, data):
    from pillarcoral.detector import load_model
    assert run("train", "--data", str(data), "--out", str(tmp_path), "--seed", "4", "--epochs", "0") == 0
    assert (tmp_path / "loss_log.csv").read_text().strip() == ",".join(LOG_HEADER)
    cfg = load_config(None)
    init = PillarNet(cfg.network, cfg.grid, seed=derive_seed(4, 99)).state_dict()
    loaded = load_model(tmp_path / "model.ckpt", cfg.network, cfg.grid).state_dict()
    assert list(init) == list(loaded)
    assert all(init[k].tobytes() == loaded[k].tobytes() for k in init)


def test_exit_codes(tmp_path, data, trained, capsys):
    assert run("gen", "--out", str(tmp_path / "x"), sets=["gen.bogus=1"]) == 2
    assert "gen.bogus" in capsys.readouterr().err
    assert run("gen", "--out", str(tmp_path / "x"), sets=["train.lr=-1"]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "bad.json")]) == 2

    assert run("train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "t")) == 3
    assert run("train", "--data", str(data), "--out", str(tmp_path / "t"), sets=SMALL + ["train.lr=1e6"]) == 4
    assert "divergence" in capsys.readouterr().err

    ckpt = str(trained / "model.ckpt")
    assert run("eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data), "--out", str(tmp_path)) == 3
    assert run("eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path),
               sets=["network.channels=8"]) == 5
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(data), "--out", str(tmp_path)) == 3

    (tmp_path / "empty").mkdir()
    assert main(["stats", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "s")]) == 3


def oracle_setup(root: Path):
    """A dataset whose boxes sit exactly on yaw-0 anchors and a checkpoint that fires on exactly those."""
    cfg = load_config(None)
    anchors = AnchorGrid.build(cfg.grid, cfg.network)
    net = PillarNet(cfg.network, cfg.grid)
    a, k = cfg.network.anchors_per_cell, cfg.network.num_classes
    p = net.params
    for name in ("cls", "reg", "dir"):
        p[f"head.{name}.weight"].data[:] = 0.0
        p[f"head.{name}.bias"].data[:] = 0.0
    p["head.cls.bias"].data[:] = -20.0
    for j in range(a):
        if anchors.boxes[j, 6] == 0.0:
            p["head.cls.bias"].data[j * k + anchors.class_index[j]] = 20.0
            p["head.dir.bias"].data[j * 2] = 10.0
    classes = [ClassId.Car, ClassId.Pedestrian]
    gts = tuple(Box3D(tuple(b[:3]), tuple(b[3:6]), 0.0, classes[c])
                for b, c in zip(anchors.boxes, anchors.class_index) if b[6] == 0.0)
    cloud = random_cloud(np.random.default_rng(0), 100, extent=7.0, z=(-2.5, 0.5))
    ds = Dataset((Frame(cloud, gts, "000000", Domain.Real),), "eval_real", 0, {})
    write_dataset(ds, root / "eval_real")
    save_model(net, root / "oracle.ckpt")
    return len(gts)


def test_perfect_oracle_scores_100(tmp_path, capsys):
    assert oracle_setup(tmp_path) == 32
    assert main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "eval_report.csv").open()))
    assert len(rows) == 10
    assert all(float(r["value"]) == 100.0 for r in rows)
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "r2"), "--baseline", str(tmp_path / "r" / "eval_report.csv")]) == 0
    printed = capsys.readouterr().out
    assert printed.count("delta   +0.00") == 10


def test_baseline_deltas_are_differences(tmp_path, data, trained, capsys):
    ckpt = str(trained / "model.ckpt")
    oracle_setup(tmp_path)
    main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"), "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    capsys.readouterr()
    assert run("eval", "--checkpoint", ckpt, "--data", str(tmp_path), "--out", str(tmp_path / "m"),
               "--baseline", str(tmp_path / "o" / "eval_report.csv"), sets=["eval.score_threshold=0.05"]) == 0
    out = capsys.readouterr().out
    mine = {r["metric"]: float(r["value"]) for r in csv.DictReader((tmp_path / "m" / "eval_report.csv").open())}
    for line in out.splitlines():
        label = line.split()[0]
        delta = float(line.rsplit("delta", 1)[1].strip(" )"))
        assert delta == pytest.approx(mine[label] - 100.0, abs=0.006)


def test_stats_outputs(tmp_path, data):
    assert main(["stats", "--data", str(data), "--out", str(tmp_path / "a")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["class_histogram.csv", "gap_report.csv", "points_per_box.csv", "polar_density.csv"]
    for n in names:
        assert not (tmp_path / "a" / n).read_text().splitlines()[0][0].isdigit()

    assert main(["stats", "--data", str(data), "--out", str(tmp_path / "b"), "--log-scale"]) == 0
    lin = list(csv.DictReader((tmp_path / "a" / "polar_density.csv").open()))
    log = list(csv.DictReader((tmp_path / "b" / "polar_density.csv").open()))
    for x, y in zip(lin, log):
        assert float(y["value"]) == pytest.approx(math.log1p(float(x["count"])), abs=1e-5)
    assert main(["stats", "--data", str(data / "sim"), "--out", str(tmp_path / "c")]) == 0

import csv

import numpy as np
import pytest

from fanlab import ops
from fanlab.cli import main
from fanlab.data.dataset import read_manifest
from fanlab.data.pts import read_pts
from fanlab.gradcheck import CASES
from fanlab.tensor import record

MICRO_INI = """[train]
kind = {kind}
batch_size = 4
epochs = 1
learning_rate = 0.001
[model]
num_stacks = 1
hg_depth = 1
width = 8
num_landmarks = 5
input_resolution = 16
"""

DEPTH_INI = """[train]
kind = depth
batch_size = 4
epochs = 1
[model]
num_landmarks = 5
width = 8
input_resolution = 16
"""


@pytest.fixture(autouse=True)
def reference_mode(monkeypatch):
    monkeypatch.setenv("FAN_REFERENCE_MODE", "1")


@pytest.fixture(scope="module")
def cli_models(tmp_path_factory, small_dataset_dir):
    root = tmp_path_factory.mktemp("cli_models")
    paths = {}
    for kind in ("fan2d", "guided"):
        (root / f"{kind}.ini").write_text(MICRO_INI.format(kind=kind))
        paths[kind] = root / f"{kind}.ckpt"
        assert main(["--seed", "3", "--config", str(root / f"{kind}.ini"), "train", "--data",
                     str(small_dataset_dir), "--out", str(paths[kind])]) == 0
    (root / "depth.ini").write_text(DEPTH_INI)
    paths["depth"] = root / "depth.ckpt"
    assert main(["--config", str(root / "depth.ini"), "train", "--data", str(small_dataset_dir),
                 "--out", str(paths["depth"])]) == 0
    paths["root"] = root
    return paths


def test_synth_writes_manifest_and_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "11", "synth", "--count", "4", "--landmarks", "5", "--out",
                     str(tmp_path / name)]) == 0
    recs = read_manifest(tmp_path / "a")
    assert len(recs) == 4
    for r in recs:
        for rel in (r.image, r.landmarks, r.depth):
            assert (tmp_path / "a" / rel).is_file()
        assert len(read_pts(tmp_path / "a" / r.landmarks)) == 5
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_rejects_zero_count(tmp_path):
    assert main(["synth", "--count", "0", "--out", str(tmp_path / "x")]) == 1


def test_train_is_byte_reproducible(cli_models, small_dataset_dir, tmp_path):
    out = tmp_path / "again.ckpt"
    assert main(["--seed", "3", "--config", str(cli_models["root"] / "fan2d.ini"), "train", "--data",
                 str(small_dataset_dir), "--out", str(out)]) == 0
    assert out.read_bytes() == cli_models["fan2d"].read_bytes()


def test_train_log_and_resume(cli_models, small_dataset_dir, tmp_path, capsys):
    log = tmp_path / "log.csv"
    assert main(["--seed", "3", "train", "--resume", str(cli_models["fan2d"]), "--epochs", "2",
                 "--data", str(small_dataset_dir), "--out", str(tmp_path / "r.ckpt"), "--log", str(log)]) == 0
    rows = list(csv.reader(log.open()))
    assert rows[0][0] == "epoch" and [r[0] for r in rows[1:]] == ["2"]
    assert main(["train", "--finetune", str(cli_models["fan2d"]), "--finetune-epochs", "1",
                 "--data", str(small_dataset_dir), "--out", str(tmp_path / "f.ckpt")]) == 0
    # lowest rate of the 1e-3 schedule dropped twice
    assert "lr 1e-05" in capsys.readouterr().out
    assert main(["train", "--finetune", str(cli_models["fan2d"]), "--data", str(small_dataset_dir),
                 "--out", str(tmp_path / "g.ckpt")]) == 1


def test_eval_passthrough_and_ced(small_dataset_dir, tmp_path, capsys):
    ced = tmp_path / "ced.csv"
    assert main(["eval", "--passthrough", "--data", str(small_dataset_dir), "--ced", str(ced)]) == 0
    out = capsys.readouterr().out
    assert "NME mean 0.000000" in out and "AUC@0.07 1.000000" in out and "failure rate 0.000000" in out
    rows = list(csv.reader(ced.open()))
    assert rows[0] == ["threshold", "fraction"] and len(rows) == 1 + 1001
    assert main(["report", str(ced)]) == 0


def test_eval_noise_zero_matches_plain(cli_models, small_dataset_dir, capsys):
    assert main(["eval", "--ckpt", str(cli_models["fan2d"]), "--data", str(small_dataset_dir)]) == 0
    plain = capsys.readouterr().out
    assert main(["eval", "--ckpt", str(cli_models["fan2d"]), "--data", str(small_dataset_dir),
                 "--noise", "0"]) == 0
    assert capsys.readouterr().out == plain
    assert main(["eval", "--ckpt", str(cli_models["fan2d"]), "--data", str(small_dataset_dir),
                 "--noise", "0.2", "--face-px", "30"]) == 0


def test_eval_depth_checkpoint(cli_models, small_dataset_dir, capsys):
    assert main(["eval", "--ckpt", str(cli_models["depth"]), "--data", str(small_dataset_dir)]) == 0
    assert "depth error" in capsys.readouterr().out


def test_eval_landmark_mismatch_is_an_error(cli_models, tmp_path, capsys):
    main(["synth", "--count", "2", "--landmarks", "68", "--out", str(tmp_path / "d68")])
    assert main(["eval", "--ckpt", str(cli_models["fan2d"]), "--data", str(tmp_path / "d68")]) == 1
    assert "landmarks" in capsys.readouterr().err


def test_annotate(cli_models, small_dataset_dir, tmp_path, capsys):
    out = tmp_path / "ann"
    assert main(["annotate", "--ckpt2d", str(cli_models["fan2d"]), "--ckpt-guided", str(cli_models["guided"]),
                 "--ckpt-depth", str(cli_models["depth"]), "--data", str(small_dataset_dir),
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if l.startswith("guide channels"))
    _, _, fed, _, _, expected = line.split()
    assert fed == expected
    files = sorted((out / "landmarks").glob("*.pts"))
    assert len(files) == 20
    assert all(read_pts(f).points.shape == (5, 3) for f in files)
    # guided network in the wrong slot
    assert main(["annotate", "--ckpt2d", str(cli_models["guided"]), "--ckpt-guided", str(cli_models["guided"]),
                 "--data", str(small_dataset_dir), "--out", str(out)]) == 1


@pytest.mark.parametrize("protocol, rows", [("yaw", 1), ("noise", 4), ("resolution", 5)])
def test_ablate_shapes(cli_models, small_dataset_dir, tmp_path, protocol, rows):
    out = tmp_path / f"{protocol}.csv"
    assert main(["ablate", "--protocol", protocol, "--ckpt", str(cli_models["fan2d"]), "--data",
                 str(small_dataset_dir), "--out", str(out)]) == 0
    table = list(csv.reader(out.open()))
    assert len(table) == 1 + rows and all(len(r) == 4 for r in table)
    assert main(["report", str(out)]) == 0


def test_ablate_size_from_checkpoints(cli_models, small_dataset_dir, tmp_path):
    out = tmp_path / "size.csv"
    assert main(["ablate", "--protocol", "size", "--ckpt", str(cli_models["fan2d"]), str(cli_models["fan2d"]),
                 "--data", str(small_dataset_dir), "--out", str(out)]) == 0
    assert len(list(csv.reader(out.open()))) == 3


def test_ablate_noise_zero_matches_eval_auc(cli_models, small_dataset_dir, tmp_path, capsys):
    out = tmp_path / "n.csv"
    main(["ablate", "--protocol", "noise", "--levels", "0", "--ckpt", str(cli_models["fan2d"]),
          "--data", str(small_dataset_dir), "--out", str(out)])
    main(["ablate", "--protocol", "yaw", "--ckpt", str(cli_models["fan2d"]),
          "--data", str(small_dataset_dir), "--out", str(tmp_path / "y.csv")])
    assert list(csv.reader(out.open()))[1][1:] == list(csv.reader((tmp_path / "y.csv").open()))[1][1:]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "2"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    names = [l.split()[1] for l in lines]
    assert sorted(names) == sorted(CASES) and len(set(names)) == len(names)


def test_gradcheck_command_fails_on_broken_op(monkeypatch, capsys):
    def broken_relu(x):
        x = ops.as_tensor(x)
        mask = x.data > 0
        return record("relu", (x,), x.data * mask, lambda g: (1.1 * g * mask,))

    monkeypatch.setitem(ops.REGISTRY, "relu", broken_relu)
    assert main(["gradcheck", "--cases", "2"]) == 2
    failed = [l.split()[1] for l in capsys.readouterr().out.splitlines() if l.startswith("FAIL")]
    assert failed == ["relu"]


def test_usage_errors_exit_1(tmp_path):
    assert main(["eval", "--data", str(tmp_path)]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1

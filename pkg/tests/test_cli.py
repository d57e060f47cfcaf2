import numpy as np
import pytest

from spen import serialization
from spen.cli import main
from spen.config import load_config
from spen import runner

TINY = """
[experiment]
task = {task}
energy = {energy}
seed = 3
out_dir = {out}
[model]
filters = 2
kernel = 3
channels = 2
hidden = 5
local_hidden = 4
[unroll]
rule = {rule}
T = 3
train_eta = true
[trainer]
pretrain_epochs = 0
clamp_epochs = 1
epochs = 1
lr = 0.01
[data]
n_train = 3
n_dev = 2
n_test = 2
height = 6
width = 6
heads = 2
items = 3
labels = 3
feature_dim = 4
"""


def write_cfg(tmp_path, task="denoise", energy="foe", rule="momentum", extra=""):
    path = tmp_path / f"{task}-{energy}-{rule}.ini"
    path.write_text(TINY.format(task=task, energy=energy, rule=rule, out=tmp_path / "run") + extra)
    return path


@pytest.mark.parametrize(
    "task, energy, rule",
    [("denoise", "foe", "momentum"), ("denoise", "deep-prior", "clip"), ("tagging", "toy-global", "logit"),
     ("tagging", "toy-global", "emd")],
)
def test_gradcheck_passes(tmp_path, capsys, task, energy, rule):
    assert main(["gradcheck", str(write_cfg(tmp_path, task, energy, rule))]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 3 and "FAIL" not in out


def test_train_predict_eval(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    assert main(["train", str(cfg_path)]) == 0
    run = tmp_path / "run"
    for name in runner.TRAIN_OUTPUTS:
        assert (run / name).exists()
    assert (run / "metrics.csv").read_text().count("\n") >= 3
    preds = tmp_path / "p.spnt"
    dump = tmp_path / "traj"
    assert main(["predict", str(cfg_path), "--out", str(preds), "--dump-trajectory", str(dump)]) == 0
    stack = serialization.load(preds)["predictions"]
    assert stack.shape == (2, 1, 6, 6)
    first = serialization.load(dump / "example_0000" / "iter_000.spnt")
    assert set(first) == {"y", "h", "energy", "T0"}
    capsys.readouterr()
    assert main(["eval", str(cfg_path)]) == 0
    assert capsys.readouterr().out.startswith("psnr ")


def test_eval_gold_predictions(tmp_path, capsys):
    for task, energy, rule, expect in [("denoise", "foe", "gd", "psnr 99.0000"),
                                       ("tagging", "toy-global", "logit", "accuracy 1.0000")]:
        cfg_path = write_cfg(tmp_path, task, energy, rule)
        cfg = load_config(cfg_path)
        gold = np.stack([e.pair()[1] for e in runner.generate_data(cfg).test])
        serialization.save(tmp_path / "gold.spnt", {"predictions": gold})
        capsys.readouterr()
        assert main(["eval", str(cfg_path), "--predictions", str(tmp_path / "gold.spnt")]) == 0
        out = capsys.readouterr().out
        assert expect in out
        if task == "tagging":
            assert "count_violation 0.0000" in out


def test_training_is_reproducible(tmp_path):
    cfg_path = write_cfg(tmp_path)
    blobs = []
    for name in ("a", "b"):
        assert main(["train", str(cfg_path), "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "model.spnt").read_bytes())
    assert blobs[0] == blobs[1]


def test_checkpoint_round_trip_bytes(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert main(["train", str(cfg_path)]) == 0
    cfg = load_config(cfg_path)
    model = runner.load_checkpoint(cfg, tmp_path / "run" / "model.spnt")
    runner.save_checkpoint(model, tmp_path / "again.spnt", cfg, 0, 0.0)
    assert (tmp_path / "again.spnt").read_bytes() == (tmp_path / "run" / "model.spnt").read_bytes()


def test_gen_data_then_train_from_dir(tmp_path):
    cfg_path = write_cfg(tmp_path, "tagging", "toy-global", "emd")
    assert main(["gen-data", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    extra = f"\n[experiment]\ndata_dir = {tmp_path / 'data'}\n"
    from_dir = write_cfg(tmp_path, "tagging", "toy-global", "emd", extra)
    a = runner.get_data(load_config(cfg_path)).test
    b = runner.get_data(load_config(from_dir)).test
    assert [e.labels.tobytes() for e in a] == [e.labels.tobytes() for e in b]


def test_wrong_task_dataset_is_rejected_and_cleaned(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    assert main(["gen-data", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    bad = write_cfg(tmp_path, "tagging", "toy-global", "emd", f"\n[experiment]\ndata_dir = {tmp_path / 'data'}\n")
    assert main(["train", str(bad)]) == 1
    assert "task" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


@pytest.mark.filterwarnings("ignore:overflow")
def test_runtime_failure_removes_partial_outputs(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, rule="gd", extra="\n[unroll]\neta_init = 1e200\n")
    assert main(["train", str(cfg_path)]) == 2
    assert "TrainingError" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


@pytest.mark.filterwarnings("ignore:overflow")
def test_existing_files_survive_failure(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / "notes.txt").write_text("keep")
    cfg_path = write_cfg(tmp_path, rule="gd", extra="\n[unroll]\neta_init = 1e200\n")
    assert main(["train", str(cfg_path)]) == 2
    assert sorted(p.name for p in run.iterdir()) == ["notes.txt"]


def test_invalid_inputs_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[unroll]\nrule = emd\n")
    assert main(["train", str(bad)]) == 1
    assert "bad.ini:2" in capsys.readouterr().err
    assert main(["eval", str(write_cfg(tmp_path)), "--checkpoint", str(tmp_path / "missing.spnt")]) == 1
    junk = tmp_path / "junk.spnt"
    junk.write_bytes(b"not a tensor file")
    assert main(["eval", str(write_cfg(tmp_path)), "--predictions", str(junk)]) == 1

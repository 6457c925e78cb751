"""End-to-end command-line runs: verbs, artifacts, exit codes, reruns."""

import filecmp
import os
import subprocess
import sys

import pytest

from dynagate.cli import main
from dynagate.config import load_config

CFG_TEXT = """\
[model]
preset = tiny
[data]
train_size = 16
val_size = 8
[train]
steps = 60
"""


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """One shared teacher + dynamic student, reused by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(CFG_TEXT)
    teacher_dir = root / "teacher"
    rc = main(["train-teacher", "--config", str(cfg), "--seed", "0",
               "--out", str(teacher_dir)])
    assert rc == 0
    student_dir = root / "student"
    rc = main(["prune-train", "--config", str(cfg), "--seed", "0",
               "--teacher", str(teacher_dir / "teacher.ckpt"),
               "--out", str(student_dir), "--steps", "20"])
    assert rc == 0
    return {"root": root, "cfg": cfg, "teacher": teacher_dir,
            "student": student_dir}


def _metrics(path):
    out = {}
    with open(path) as fh:
        assert fh.readline() == "metric,value\n"
        for line in fh:
            key, value = line.rstrip("\n").split(",", 1)
            out[key] = value
    return out


def test_train_teacher_artifacts(world):
    d = world["teacher"]
    for name in ("teacher.ckpt", "resolved.cfg", "metrics.csv",
                 "teacher_log.csv"):
        assert (d / name).is_file(), name
    m = _metrics(d / "metrics.csv")
    assert m["steps"] == "60"
    assert 0.0 <= float(m["val_miou"]) <= 1.0
    # resolved.cfg reloads to the exact configuration that ran
    cfg = load_config(str(d / "resolved.cfg"))
    assert cfg.train.steps == 60
    assert cfg.data.train_size == 16


def test_zero_steps_gives_chance_level(world, tmp_path):
    out = tmp_path / "t0"
    rc = main(["train-teacher", "--config", str(world["cfg"]), "--seed", "0",
               "--out", str(out), "--steps", "0"])
    assert rc == 0
    untrained = float(_metrics(out / "metrics.csv")["val_miou"])
    trained = float(_metrics(world["teacher"] / "metrics.csv")["val_miou"])
    assert untrained < 0.4
    assert trained > untrained


def test_prune_train_artifacts(world):
    d = world["student"]
    for name in ("student.ckpt", "stage1.ckpt", "resolved.cfg", "loss.csv",
                 "metrics.csv", "gate_counts.csv"):
        assert (d / name).is_file(), name
    m = _metrics(d / "metrics.csv")
    assert m["mode"] == "dynamic" and m["kd"] == "both" and m["anneal"] == "on"
    assert float(m["keep_fraction"]) == 0.5
    assert int(m["always_active_neurons"]) >= 0
    assert int(m["never_active_neurons"]) >= 0
    # --steps 20 splits 120/180 proportionally into 8 + 12
    cfg = load_config(str(d / "resolved.cfg"))
    assert (cfg.prune.stage1_steps, cfg.prune.stage2_steps) == (8, 12)
    with open(d / "loss.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "step,stage,ce,sce,mse,l_m,total,keep_fraction"
    assert len(lines) == 1 + 20
    assert lines[1].split(",")[1] == "stage1"
    assert lines[-1].split(",")[1] == "stage2"


def test_prune_train_overrides_recorded(world, tmp_path):
    out = tmp_path / "static"
    rc = main(["prune-train", "--config", str(world["cfg"]), "--seed", "1",
               "--teacher", str(world["teacher"] / "teacher.ckpt"),
               "--out", str(out), "--steps", "10", "--mode", "static",
               "--kd", "none", "--anneal", "off", "--sparsity", "0.25"])
    assert rc == 0
    cfg = load_config(str(out / "resolved.cfg"))
    assert cfg.prune.mode == "static"
    assert cfg.prune.kd == "none"
    assert cfg.prune.anneal is False
    assert cfg.prune.target_sparsity == 0.25
    m = _metrics(out / "metrics.csv")
    assert m["mode"] == "static" and m["anneal"] == "off"
    assert float(m["keep_fraction"]) == 0.75
    assert not (out / "gate_counts.csv").exists()  # no gates to count


def test_rerun_is_byte_identical(world, tmp_path):
    again = tmp_path / "again"
    rc = main(["prune-train", "--config", str(world["cfg"]), "--seed", "0",
               "--teacher", str(world["teacher"] / "teacher.ckpt"),
               "--out", str(again), "--steps", "20"])
    assert rc == 0
    for name in ("loss.csv", "metrics.csv", "gate_counts.csv",
                 "student.ckpt"):
        assert filecmp.cmp(world["student"] / name, again / name,
                           shallow=False), name


def test_eval_reproduces_training_metric(world, capsys):
    rc = main(["eval", "--config", str(world["cfg"]), "--seed", "0",
               "--checkpoint", str(world["student"] / "student.ckpt")])
    assert rc == 0
    reported = float(_metrics(world["student"] / "metrics.csv")["val_miou"])
    out = capsys.readouterr().out
    assert f"val mIoU {reported:.4f}" in out
    assert "mode dynamic, keep 0.5" in out


def test_eval_mode_and_sample_overrides(world, capsys):
    rc = main(["eval", "--config", str(world["cfg"]), "--seed", "0",
               "--checkpoint", str(world["student"] / "student.ckpt"),
               "--mode", "dense", "--samples", "4"])
    assert rc == 0
    assert "(mode dense, keep 1, 4 samples)" in capsys.readouterr().out
    rc = main(["eval", "--config", str(world["cfg"]), "--seed", "0",
               "--checkpoint", str(world["student"] / "student.ckpt"),
               "--mode", "static", "--sparsity", "0.5"])
    assert rc == 0
    assert "mode static, keep 0.5" in capsys.readouterr().out


def test_analyze_artifacts(world, tmp_path, capsys):
    out = tmp_path / "an"
    rc = main(["analyze", "--config", str(world["cfg"]), "--seed", "0",
               "--checkpoint", str(world["student"] / "student.ckpt"),
               "--out", str(out), "--layer", "s0.l0", "--samples", "6"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "layer s0.l0 signal ffn_hidden over 6 instances" in text
    assert (out / "neuron_stats.csv").is_file()
    assert (out / "gate_counts.csv").is_file()
    with open(out / "neuron_stats.csv") as fh:
        header = fh.readline()
    assert header.startswith("layer_id,signal,neuron,")


def test_flops_verb(world, tmp_path, capsys):
    rc = main(["flops", "--config", str(world["cfg"]), "--keep", "0.5"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "total" in text
    out = tmp_path / "fl"
    rc = main(["flops", "--config", str(world["cfg"]), "--out", str(out)])
    assert rc == 0
    capsys.readouterr()
    assert (out / "flops.csv").is_file()


def test_flops_keep_profile(world, tmp_path, capsys):
    profile = tmp_path / "profile.csv"
    profile.write_text("pair,keep\ns0.l0.ffn,0.25\n")
    rc = main(["flops", "--config", str(world["cfg"]),
               "--keep-profile", str(profile)])
    assert rc == 0
    capsys.readouterr()
    bad = tmp_path / "bad.csv"
    bad.write_text("s0.l0.ffn,not-a-number\n")
    rc = main(["flops", "--config", str(world["cfg"]),
               "--keep-profile", str(bad)])
    assert rc == 1
    assert "bad keep fraction" in capsys.readouterr().err


def test_usage_errors_exit_1(world, tmp_path, capsys):
    rc = main(["train-teacher", "--config", str(tmp_path / "missing.cfg"),
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "usage error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlr = -1\n")
    rc = main(["train-teacher", "--config", str(bad),
               "--out", str(tmp_path / "y")])
    assert rc == 1
    assert "lr" in capsys.readouterr().err
    rc = main(["frobnicate"])  # unknown verb
    assert rc == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_2(world, tmp_path, capsys):
    rc = main(["prune-train", "--config", str(world["cfg"]), "--seed", "0",
               "--teacher", str(tmp_path / "nope.ckpt"),
               "--out", str(tmp_path / "s"), "--steps", "2"])
    assert rc == 2
    assert "data error" in capsys.readouterr().err
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    rc = main(["eval", "--config", str(world["cfg"]), "--seed", "0",
               "--checkpoint", str(garbage)])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(world, tmp_path, capsys):
    # A teacher with non-finite weights poisons the stage-1 targets, so
    # the first distillation step trips the finite-loss guard.
    from dynagate.checkpoint import load_checkpoint, save_checkpoint
    state = load_checkpoint(world["teacher"] / "teacher.ckpt")
    name = next(k for k, v in state.items() if v.ndim == 2)
    state[name] = state[name] * float("inf")
    bad = tmp_path / "inf.ckpt"
    save_checkpoint(bad, state)
    rc = main(["prune-train", "--config", str(world["cfg"]), "--seed", "0",
               "--teacher", str(bad), "--out", str(tmp_path / "d"),
               "--steps", "4"])
    assert rc == 3
    assert "divergence" in capsys.readouterr().err


def test_module_and_script_entry_points(world):
    env = dict(os.environ, DYNAGATE_NUMBA="0")
    proc = subprocess.run([sys.executable, "-m", "dynagate.cli", "--help"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "train-teacher" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dynagate.cli", "flops",
                           "--config", str(world["cfg"])],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "total" in proc.stdout

import json

import pytest

from protostream.cli import main


def run_cli(*argv):
    return main(list(argv))


def synth_args(out, tasks=2, classes=3, dim=16, train=30, test=15, spread=0.03, seed=5):
    return [
        "synth", "--tasks", str(tasks), "--classes", str(classes), "--dim", str(dim),
        "--train", str(train), "--test", str(test), "--spread", str(spread),
        "--seed", str(seed), "--out", str(out),
    ]


def train_args(manifest, out, *extra):
    return ["train", "--manifest", str(manifest), "--out", str(out),
            "--pnum", "12", "--epochs", "5", "--batch-size", "32",
            "--proj-hidden", "32", "--proj-out", "8", "--seed", "1", *extra]


def test_synth_writes_stream(tmp_path, capsys):
    out = tmp_path / "s1"
    assert run_cli(*synth_args(out, tasks=5, classes=5, dim=32, train=4, test=2)) == 0
    printed = capsys.readouterr().out.strip()
    assert printed.endswith("manifest.json")
    files = sorted(p.name for p in out.glob("*.ucfv"))
    assert len(files) == 10
    assert (out / "synth_config.json").exists()


def test_synth_requires_out(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PROTOSTREAM_OUT", raising=False)
    code = run_cli("synth", "--tasks", "1", "--classes", "2", "--dim", "8",
                   "--train", "3", "--test", "2", "--spread", "0.1", "--seed", "0")
    assert code == 2
    assert "--out" in capsys.readouterr().err


def test_synth_deterministic_across_invocations(tmp_path):
    run_cli(*synth_args(tmp_path / "a"))
    run_cli(*synth_args(tmp_path / "b"))
    a = (tmp_path / "a" / "task0_train.ucfv").read_bytes()
    b = (tmp_path / "b" / "task0_train.ucfv").read_bytes()
    assert a == b


def test_synth_env_out(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PROTOSTREAM_OUT", str(tmp_path / "env_out"))
    args = synth_args(tmp_path)[:-2]  # drop --out pair
    assert run_cli(*args) == 0
    assert (tmp_path / "env_out" / "manifest.json").exists()


def test_synth_validation_exit_code(tmp_path, capsys):
    code = run_cli(*synth_args(tmp_path / "x", spread=-1.0))
    assert code == 2
    assert "spread" in capsys.readouterr().err


def test_train_and_eval_consistent(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    run_dir = tmp_path / "run"
    assert run_cli(*train_args(out / "manifest.json", run_dir)) == 0
    train_line = capsys.readouterr().out.strip().splitlines()[-1]
    assert train_line.startswith("acc_overall=")

    assert run_cli("eval", "--checkpoint", str(run_dir / "checkpoint.psck"),
                   "--manifest", str(out / "manifest.json")) == 0
    eval_out = capsys.readouterr().out
    eval_acc = [l for l in eval_out.splitlines() if l.startswith("acc_overall=")][0]
    assert eval_acc.split("=")[1][:6] == train_line.split("=")[1][:6]
    assert (run_dir / "config.json").exists()


def test_eval_restricted_mapping_flag(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    run_dir = tmp_path / "run"
    run_cli(*train_args(out / "manifest.json", run_dir))
    capsys.readouterr()
    assert run_cli("eval", "--checkpoint", str(run_dir / "checkpoint.psck"),
                   "--manifest", str(out / "manifest.json"), "--mapping", "restricted") == 0
    assert "restricted mapping" in capsys.readouterr().out


def test_eval_missing_test_file(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    run_dir = tmp_path / "run"
    run_cli(*train_args(out / "manifest.json", run_dir))
    victim = out / "task1_test.ucfv"
    victim.unlink()
    capsys.readouterr()
    code = run_cli("eval", "--checkpoint", str(run_dir / "checkpoint.psck"),
                   "--manifest", str(out / "manifest.json"))
    assert code == 2
    assert "task1_test.ucfv" in capsys.readouterr().err


def test_eval_dimension_mismatch(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    other = tmp_path / "other"
    run_cli(*synth_args(other, dim=8))
    run_dir = tmp_path / "run"
    run_cli(*train_args(out / "manifest.json", run_dir))
    capsys.readouterr()
    code = run_cli("eval", "--checkpoint", str(run_dir / "checkpoint.psck"),
                   "--manifest", str(other / "manifest.json"))
    assert code == 2
    assert "dim" in capsys.readouterr().err


def test_no_sep_loss_flag(tmp_path):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    run_dir = tmp_path / "run"
    assert run_cli(*train_args(out / "manifest.json", run_dir, "--no-sep-loss")) == 0
    metrics = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert all(m["l_sep"] == 0.0 for m in metrics)
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["sep_enabled"] is False


def test_train_config_file_strict_keys(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text('{"pnum": 10, "typo_field": 1}')
    code = run_cli("train", "--manifest", str(out / "manifest.json"),
                   "--out", str(tmp_path / "run"), "--config", str(cfg_path))
    assert code == 2
    assert "typo_field" in capsys.readouterr().err


def test_train_numerical_abort_exit_3(tmp_path, capsys, monkeypatch):
    out = tmp_path / "s"
    run_cli(*synth_args(out, tasks=1))
    monkeypatch.setattr("protostream.trainer.proto_loss", lambda *a, **k: float("nan"))
    run_dir = tmp_path / "run"
    code = run_cli(*train_args(out / "manifest.json", run_dir))
    assert code == 3
    assert (run_dir / "abort_diagnostics.txt").exists()
    assert "diagnostics" in capsys.readouterr().err


def test_train_resume_from_checkpoint(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    full_dir = tmp_path / "full"
    assert run_cli(*train_args(out / "manifest.json", full_dir)) == 0
    full_line = capsys.readouterr().out.strip().splitlines()[-1]

    part_dir = tmp_path / "part"
    assert run_cli(*train_args(out / "manifest.json", part_dir, "--stop-after", "1")) == 0
    capsys.readouterr()
    assert run_cli("train", "--manifest", str(out / "manifest.json"), "--out", str(part_dir),
                   "--resume", str(part_dir / "checkpoint.psck")) == 0
    resumed_line = capsys.readouterr().out.strip().splitlines()[-1]
    assert resumed_line == full_line


def test_inspect_memory(tmp_path, capsys):
    out = tmp_path / "s"
    run_cli(*synth_args(out))
    run_dir = tmp_path / "run"
    run_cli(*train_args(out / "manifest.json", run_dir))
    capsys.readouterr()
    assert run_cli("inspect-memory", "--checkpoint", str(run_dir / "checkpoint.psck")) == 0
    text = capsys.readouterr().out
    stored = int(text.split("classes stored: ")[1].splitlines()[0])
    listed = [int(l.split(":")[0].split()[-1]) for l in text.splitlines() if l.startswith("  class")]
    assert any(c < 3 for c in listed) and any(c >= 3 for c in listed)  # both tasks present
    assert "purity histogram" in text
    # accounting convention: total floats / dim / classes
    floats = int(text.split("total floats stored: ")[1].splitlines()[0])
    equiv = float(text.split("exemplar-equivalents per class: ")[1].splitlines()[0])
    assert equiv == pytest.approx(floats / 16 / stored, abs=0.01)


def test_inspect_memory_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.psck"
    bad.write_bytes(b"junk")
    assert run_cli("inspect-memory", "--checkpoint", str(bad)) == 2

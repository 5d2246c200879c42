import json
import subprocess
import sys

import pytest

from bpt.cli import main
from bpt.data import marker_task_lines, repetitive_text
from bpt.graph import build_graph, export_graph, import_graph


@pytest.fixture()
def lm_file(tmp_path):
    path = tmp_path / "lm.txt"
    path.write_text(repetitive_text(400, period=20, seed=3))
    return path


@pytest.fixture()
def cls_file(tmp_path):
    path = tmp_path / "cls.tsv"
    path.write_text("\n".join(marker_task_lines(80, seed=4)) + "\n")
    return path


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("layers = 1\nd = 16\nheads = 2\nd_ff = 32\nbatch = 16\nlog_every = 2\neval_every = 2\nwarmup = 2\nlr = 0.01\n")
    return path


def test_graph_json_to_stdout(capsysbinary):
    assert main(["graph", "--n", "8", "--k", "2", "--mode", "bi", "--format", "json"]) == 0
    out = capsysbinary.readouterr().out
    assert out == export_graph(build_graph(8, 2), "json")
    assert import_graph(out).same_as(build_graph(8, 2))


def test_graph_dot_to_file(tmp_path):
    assert main(["graph", "--n", "4", "--k", "1", "--mode", "causal", "--format", "dot", "--out", str(tmp_path / "g.dot")]) == 0
    assert (tmp_path / "g.dot").read_text().startswith("digraph bpt")


@pytest.mark.parametrize(
    "argv",
    [["graph", "--n", "8", "--mode", "bi"], ["frobnicate"], ["graph", "--n", "8", "--k", "2", "--bogus"], []],
)
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_runtime_error_exits_1(capsys, tmp_path):
    assert main(["graph", "--n", "0", "--k", "1"]) == 1
    assert "bpt: error" in capsys.readouterr().err
    assert main(["train-lm", "--data", str(tmp_path / "missing.txt")]) == 1


def test_bad_config_names_line(capsys, tmp_path, lm_file):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("d = 16\nk = 0\n")
    assert main(["train-lm", "--config", str(cfg), "--data", str(lm_file)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--seed", "1", "--mode", "bi"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("max_relative_error")
    assert out.rstrip().endswith("PASS")


def test_train_lm_then_eval(capsys, tmp_path, lm_file, tiny_cfg):
    out = tmp_path / "run"
    argv = ["train-lm", "--config", str(tiny_cfg), "--data", str(lm_file), "--n", "16", "--k", "2",
            "--steps", "4", "--precision", "verify", "--seed", "3", "--out", str(out), "--plot"]
    assert main(argv) == 0
    stream = capsys.readouterr().out
    assert (out / "metrics.tsv").read_text() == stream
    assert stream.splitlines()[0].split("\t")[:3] == ["step", "train_loss", "train_bpc"]
    assert (out / "metrics.png").stat().st_size > 0
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(lm_file)]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header == "split\tbpc" and row.startswith("test\t")


def test_eval_rejects_foreign_corpus(capsys, tmp_path, lm_file, tiny_cfg):
    out = tmp_path / "run"
    main(["train-lm", "--config", str(tiny_cfg), "--data", str(lm_file), "--n", "16", "--steps", "1", "--out", str(out)])
    other = tmp_path / "other.txt"
    other.write_text("xyz" * 100)
    assert main(["eval", "--checkpoint", str(out / "last.ckpt"), "--data", str(other)]) == 1


def test_train_cls_shift_eval(capsys, tmp_path, cls_file, tiny_cfg):
    out = tmp_path / "cls"
    argv = ["train-cls", "--config", str(tiny_cfg), "--data", str(cls_file), "--n", "32", "--k", "2",
            "--steps", "4", "--precision", "verify", "--out", str(out)]
    assert main(argv) == 0
    capsys.readouterr()
    assert main(["shift-eval", "--checkpoint", str(out / "last.ckpt"), "--data", str(cls_file), "--shift", "3", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "shift\taccuracy\tdelta"
    assert [line.split("\t")[0] for line in lines[1:]] == ["0", "1", "2", "3"]
    assert (out / "shift.png").exists()
    assert (out / "shift.tsv").read_text().splitlines() == lines


def test_shift_too_large_fails(capsys, tmp_path, cls_file, tiny_cfg):
    out = tmp_path / "cls"
    main(["train-cls", "--config", str(tiny_cfg), "--data", str(cls_file), "--n", "32", "--steps", "1", "--out", str(out)])
    assert main(["shift-eval", "--checkpoint", str(out / "last.ckpt"), "--data", str(cls_file), "--shift", "30"]) == 1


def test_bench_verify_is_reproducible(capsys, tmp_path):
    argv = ["bench", "--precision", "verify", "--lengths", "4,8,16", "--k", "2", "--out", str(tmp_path), "--plot"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "bench.png").exists()
    rows = [line.split("\t") for line in first.splitlines()[1:]]
    assert [r[0] for r in rows] == ["4", "8", "16"]
    assert all(r[3] == "NA" for r in rows)


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bpt.cli", "graph", "--n", "2", "--k", "1"], capture_output=True, check=True
    )
    assert json.loads(proc.stdout)["n_padded"] == 2

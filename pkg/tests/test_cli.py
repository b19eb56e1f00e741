import configparser
import json

import pytest

from esib.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "120", "--seed", "7", "--out", str(root / "corpus.jsonl")]) == 0
    (root / "run.ini").write_text(f"[train]\npreset = tiny\nepochs = 1\n\n[data]\ncorpus = {root / 'corpus.jsonl'}\n")
    assert main(["train", "--config", str(root / "run.ini"), "--out", str(root / "run"), "--seed", "2"]) == 0
    return root


def test_gen_zero_is_usage_error(tmp_path, capsys):
    assert main(["gen", "--n", "0", "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "usage error" in capsys.readouterr().err


def test_gen_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen", "--n", "5000", "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen", "--n", "5000", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 5000


def test_gen_template_families(tmp_path):
    out = tmp_path / "g.jsonl"
    assert main(["gen", "--n", "30", "--templates", "geometry", "--out", str(out)]) == 0
    assert {json.loads(l)["family"] for l in out.read_text().splitlines()} == {"geometry"}
    assert main(["gen", "--n", "3", "--templates", "nope", "--out", str(out)]) == 2


def test_missing_argument_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["gen", "--out", "x"])
    assert info.value.code == 2


def test_train_outputs_and_effective_config(workspace):
    run = workspace / "run"
    for name in ("metrics.jsonl", "timing.jsonl", "cn_best.npz", "sn_best.npz", "effective_config.ini"):
        assert (run / name).exists(), name
    cfg = configparser.ConfigParser()
    cfg.read(run / "effective_config.ini")
    assert cfg["train"]["seed"] == "2" and cfg["train"]["epochs"] == "1"
    assert cfg["data"]["corpus"] == str(workspace / "corpus.jsonl")


def test_train_reproducible_from_echoed_config(workspace, tmp_path):
    echoed = (workspace / "run" / "effective_config.ini").read_text()
    rerun = tmp_path / "rerun.ini"
    rerun.write_text(echoed.replace(str(workspace / "run"), str(tmp_path / "again")))
    assert main(["train", "--config", str(rerun)]) == 0
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (workspace / "run" / "metrics.jsonl").read_bytes()


def test_train_usage_errors(workspace, tmp_path):
    assert main(["train", "--out", str(tmp_path / "o"), "--preset", "tiny"]) == 2
    assert main(["train", "--corpus", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 1\nlearning_rate = 3\n")
    assert main(["train", "--config", str(bad), "--corpus", str(workspace / "corpus.jsonl"), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("[extras]\nx = 1\n")
    assert main(["train", "--config", str(bad), "--corpus", str(workspace / "corpus.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--corpus", str(workspace / "corpus.jsonl"), "--out", str(tmp_path / "o"), "--ablate", "mt,foo"]) == 2


def test_ablate_mt_vib(workspace, tmp_path):
    out = tmp_path / "abl"
    args = ["train", "--config", str(workspace / "run.ini"), "--out", str(out), "--ablate", "vib,mt"]
    assert main(args) == 0
    cfg = configparser.ConfigParser()
    cfg.read(out / "effective_config.ini")
    assert cfg["train"]["ablate"] == "mt,vib"
    rec = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["kl"] == 0.0 and rec["skl"] == 0.0 and rec["sdl"] > 0.0


def test_corrupt_corpus_is_data_error(workspace, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 1}\nnot json\n')
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path / "o"), "--preset", "tiny"]) == 3


def test_numeric_failure_exit_code(workspace, tmp_path):
    args = ["train", "--corpus", str(workspace / "corpus.jsonl"), "--out", str(tmp_path / "o"), "--preset", "tiny", "--lr", "1e30"]
    assert main(args) == 4


def test_eval_defaults_and_report(workspace, tmp_path, capsys):
    ns = build_parser().parse_args(["eval", "--checkpoint", "c", "--corpus", "d"])
    assert ns.beam == 5
    ckpt = str(workspace / "run" / "cn_best.npz")
    assert main(["eval", "--checkpoint", ckpt, "--corpus", str(workspace / "corpus.jsonl"), "--beam", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "Diversity" in out and "Answer-Acc" in out
    summary = json.loads((tmp_path / "cn_best_summary.json").read_text())
    assert summary["diversity"] == summary["answer_acc"] - summary["expression_acc"]


def test_eval_alignment_error(workspace, tmp_path):
    preds = tmp_path / "p.jsonl"
    preds.write_text('{"id": "ghost", "expression": "1+1"}\n')
    ckpt = str(workspace / "run" / "cn_best.npz")
    assert main(["eval", "--checkpoint", ckpt, "--corpus", str(workspace / "corpus.jsonl"), "--predictions", str(preds)]) == 3
    first = json.loads((workspace / "corpus.jsonl").read_text().splitlines()[0])
    preds.write_text(json.dumps({"id": first["id"], "expression": first["expression"]}) + "\n")
    assert main(["eval", "--checkpoint", ckpt, "--corpus", str(workspace / "corpus.jsonl"), "--predictions", str(preds)]) == 0


def test_solve(workspace, capsys):
    ckpt = str(workspace / "run" / "cn_best.npz")
    assert main(["solve", "--checkpoint", ckpt, "--beam", "1", "--json", "A car goes 120 km in 3 hours. How fast is it?"]) == 0
    sols = json.loads(capsys.readouterr().out)
    assert len(sols) <= 1
    assert main(["solve", "--checkpoint", "/nonexistent.npz", "text"]) == 2


def test_threads_env(workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("ESIB_THREADS", "zero")
    assert main(["gen", "--n", "1", "--out", str(tmp_path / "t.jsonl")]) == 2
    monkeypatch.setenv("ESIB_THREADS", "1")
    assert main(["gen", "--n", "1", "--out", str(tmp_path / "t.jsonl")]) == 0


def test_verify_trees_and_injected_bug(capsys):
    assert main(["verify", "--suite", "trees"]) == 0
    assert "[PASS] trees" in capsys.readouterr().out
    assert main(["verify", "--quick", "--suite", "gradients", "--inject-gradient-bug"]) == 4
    out = capsys.readouterr().out
    assert "[FAIL] gradients" in out and "max_rel_err=" in out

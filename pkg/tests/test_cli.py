import json
import subprocess
import sys

import pytest
import yaml

from jedssl.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from jedssl.config import load_preset

from test_frontend import _digest


@pytest.fixture
def small_config(tmp_path):
    raw = load_preset("desk-tiny")
    raw["corpus"].update(n_utterances=2, n_test=1, min_duration=0.4, max_duration=0.5)
    raw["encoder"].update(n_layers=1, d_model=16, d_ff=16)
    raw["decoder"].update(n_layers=1, d_model=16, d_ff=16)
    raw["frontend"]["channels"] = 8
    raw["kmeans"]["k"] = 4
    raw["pretrain"].update(max_steps=4, checkpoint_every=2, warmup_steps=2)
    raw["continue_pretrain"]["max_steps"] = 2
    raw["finetune"].update(max_steps=3, warmup_steps=2)
    raw["eval"].update(beam_size=2, split="test")
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_gen_corpus_is_byte_identical(small_config, tmp_path):
    assert run("gen-corpus", "--config", small_config, "--dir", tmp_path / "a") == EXIT_OK
    assert run("gen-corpus", "--config", small_config, "--dir", tmp_path / "b") == EXIT_OK
    assert _digest(tmp_path / "a" / "corpus") == _digest(tmp_path / "b" / "corpus")
    manifest = json.loads((tmp_path / "a" / "corpus" / "train" / "manifest.json").read_text())
    assert len(manifest["utterances"]) == 2


def test_missing_parent_fails_cleanly(small_config, tmp_path):
    assert run("gen-corpus", "--config", small_config, "--dir", tmp_path / "x" / "y") == EXIT_MISSING
    assert not (tmp_path / "x").exists()


def test_stage_dependency_named(small_config, tmp_path, capsys):
    assert run("pretrain", "--config", small_config, "--dir", tmp_path / "e") == EXIT_MISSING
    assert "corpus/train" in capsys.readouterr().err


def test_config_errors(small_config, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("encoder: {depth: 3}\n")
    assert run("gen-corpus", "--config", bad, "--dir", tmp_path / "e") == EXIT_CONFIG
    assert run("gen-corpus", "--dir", tmp_path / "e2") == EXIT_CONFIG
    assert run("gen-corpus", "--config", small_config, "--dir", tmp_path / "e3") == EXIT_OK
    assert run("gen-corpus", "--config", small_config, "--dir", tmp_path / "e3", "--seed", "4") == EXIT_CONFIG


def test_full_pipeline(small_config, tmp_path):
    d = tmp_path / "exp"
    assert run("gen-corpus", "--config", small_config, "--dir", d) == EXIT_OK
    for cmd in ("discover-units", "pretrain", "continue-pretrain"):
        assert run(cmd, "--dir", d) == EXIT_OK, cmd
    tags = {}
    for mode in ("ctc_only_encoder", "joint_enc_dec"):
        assert run("finetune", "--dir", d, "--mode", mode) == EXIT_OK
        assert run("evaluate", "--dir", d, "--mode", mode) == EXIT_OK
        report = json.loads((d / "eval" / "report.json").read_text())
        assert 0.0 <= report["cer"] and len(report["utterances"]) == 1
        tags[mode] = report["model_tag"]
    assert tags["ctc_only_encoder"] != tags["joint_enc_dec"]
    assert (d / "config.yaml").exists() and (d / "checkpoints" / "pretrain" / "final").exists()
    records = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in records} >= {"pretrain", "continue", "finetune:joint_enc_dec"}

    # idempotent: a rerun skips, --force redoes
    before = (d / "metrics.jsonl").read_text()
    assert run("pretrain", "--dir", d) == EXIT_OK
    assert (d / "metrics.jsonl").read_text() == before
    assert run("pretrain", "--dir", d, "--force") == EXIT_OK
    assert len((d / "metrics.jsonl").read_text()) > len(before)


def test_finetune_requires_pretraining(small_config, tmp_path, capsys):
    d = tmp_path / "exp"
    run("gen-corpus", "--config", small_config, "--dir", d)
    assert run("finetune", "--dir", d, "--mode", "joint_enc_dec") == EXIT_MISSING
    assert "checkpoints/pretrain/final" in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "jedssl.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "discover-units" in out.stdout

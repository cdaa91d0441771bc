import csv
import json
import subprocess
import sys

import pytest

from idclab.cli import main

TINY = json.dumps(dict(image_side=16, patch_side=8, d_model=16, n_heads=2, vit_layers=1, qformer_layers=1, decoder_layers=1, n_queries=2, init_std=0.1))


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["gen-data", "--out", str(out), "--originals", "3", "--test-fraction", "0.25", "--seed", "4"]) == 0
    return out


def test_gen_data_summary_and_manifest(ds, capsys, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "d"), "--originals", "2", "--seed", "4"])
    out = capsys.readouterr().out
    assert out.startswith("16 train pairs, 0 val triplets, 2 test triplets (seed 4)")
    rm = json.loads((ds / "run-manifest.json").read_text())
    assert rm["command"] == "gen-data" and rm["seed"] == 4 and rm["version"].startswith("0.1.0")


def test_train_then_eval(ds, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(ds), "--out", str(run), "--steps", "4", "--batch-size", "4", "--model-json", TINY]) == 0
    assert "final loss" in capsys.readouterr().out
    assert (run / "checkpoint.idck").is_file() and (run / "loss.csv").is_file()
    cfg = json.loads((run / "run-manifest.json").read_text())["config"]
    assert cfg["steps"] == 4 and cfg["model"]["d_model"] == 16
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.idck"), "--data", str(ds), "--out", str(ev)]) == 0
    assert "| Overall | 6 |" in capsys.readouterr().out
    rows = list(csv.reader((ev / "report.csv").open()))
    assert rows[0][2:] == ["BLEU-4", "ROUGE-L", "METEOR*", "CIDEr-D"]
    assert len((ev / "predictions.jsonl").read_text().splitlines()) == 6


def test_lora_train_and_lora_eval_needs_base(ds, tmp_path, capsys):
    base = tmp_path / "base"
    main(["train", "--data", str(ds), "--out", str(base), "--steps", "2", "--batch-size", "4", "--model-json", TINY])
    lora = tmp_path / "lora"
    rc = main(["train", "--data", str(ds), "--out", str(lora), "--steps", "2", "--batch-size", "4", "--model-json", TINY, "--lora", "--lora-rank", "2", "--init-checkpoint", str(base / "checkpoint.idck")])
    assert rc == 0
    assert main(["eval", "--checkpoint", str(lora / "checkpoint.idck"), "--data", str(ds), "--out", str(tmp_path / "e")]) == 0


def test_metrics_command(tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text('{"id": "a", "caption": "the red cube moved left"}\n{"id": "b", "caption": "nothing changed"}\n')
    (tmp_path / "r.jsonl").write_text(
        '{"id": "a", "captions": ["the red cube moved left"], "category": "Move"}\n{"id": "b", "captions": ["no change was made"], "category": "Same"}\n'
    )
    assert main(["metrics", "--pred", str(tmp_path / "p.jsonl"), "--refs", str(tmp_path / "r.jsonl"), "--out", str(tmp_path / "m")]) == 0
    out = capsys.readouterr().out
    assert "| Move | 1 |" in out and "| Same | 1 |" in out


def test_metrics_missing_prediction_is_an_error(tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text('{"id": "a", "caption": "x"}\n')
    (tmp_path / "r.jsonl").write_text('{"id": "a", "captions": ["x"]}\n{"id": "b", "captions": ["y"]}\n')
    assert main(["metrics", "--pred", str(tmp_path / "p.jsonl"), "--refs", str(tmp_path / "r.jsonl"), "--out", str(tmp_path / "m")]) == 1
    assert "missing prediction for id b" in capsys.readouterr().err


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "not found" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.idck"), "--data", ".", "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit):
        main(["train", "--data", ".", "--out", "o", "--tune", "decoder"])
    with pytest.raises(SystemExit):
        main(["train", "--data", ".", "--out", "o", "--bogus"])


def test_nothing_to_train_rejected(ds, tmp_path, capsys):
    assert main(["train", "--data", str(ds), "--out", str(tmp_path / "o"), "--tune", ""]) == 1
    assert "nothing to train" in capsys.readouterr().err


def test_study_encoder_command(ds, tmp_path, capsys):
    out = tmp_path / "enc"
    rc = main(["study-encoder", "--data", str(ds), "--out", str(out), "--seeds", "0", "--steps", "2", "--batch-size", "4", "--model-json", TINY])
    assert rc == 0
    lines = list(csv.reader((out / "encoder.csv").open()))
    assert [r[0] for r in lines[1:]] == ["joint", "two_stream"]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "idclab", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("gen-data", "train", "eval", "metrics", "ablate", "study-aug", "study-encoder"):
        assert cmd in out.stdout

import json

import pytest

from vglab.cli import main

TINY = [
    "--set", "n_samples=30", "--set", "d_model=8", "--set", "n_heads=2", "--set", "d_ff=16",
    "--set", "d_v=8", "--set", "vocab_size=30", "--set", "max_epochs=1", "--set", "batch_size=8",
    "--set", "vtf_heads=2", "--set", "vtf_ff=16", "--set", "split=0.6,0.2,0.2", "--set", "beam=2",
]


def test_score_prints_json(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a b\nthe red pan\n")
    (tmp_path / "r.txt").write_text("a b c\nthe red pot\n")
    assert main(["score", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"rouge1", "rouge2", "rougeL", "bleu1", "bleu2", "bleu3", "bleu4", "cider", "content_f1"}
    assert out["rouge1"] == pytest.approx((0.8 + 2 / 3) / 2)


def test_score_single_group(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("the the the\n")
    (tmp_path / "r.txt").write_text("the cat\n")
    assert main(["score", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"), "--metric", "bleu"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert list(out) == ["bleu1", "bleu2", "bleu3", "bleu4"] and out["bleu1"] == pytest.approx(1 / 3)


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["score", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")]) == 2
    assert "error" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--out", str(data), *TINY]) == 0
    assert (data / "corpus.jsonl").exists() and (data / "config.txt").exists()
    assert main(["inspect", str(data)]) == 0
    assert '"samples": 30' in capsys.readouterr().out

    assert main(["train", "--data", str(data), "--out", str(run), *TINY, "--set", "forget_gate=1"]) == 0
    assert (run / "model.ckpt").exists() and (run / "history.csv").exists()

    hyp = tmp_path / "dec" / "test.hyp"
    assert main(["decode", "--model", str(run / "model.ckpt"), "--data", str(data), "--out", str(hyp),
                 "--beam", "2", "--max-len", "8", "--split-ratios", "0.6", "0.2", "0.2"]) == 0
    assert len(hyp.read_text().splitlines()) == 6 == len(hyp.with_suffix(".ref").read_text().splitlines())
    capsys.readouterr()
    assert main(["score", "--hyp", str(hyp), "--ref", str(hyp.with_suffix(".ref"))]) == 0
    json.loads(capsys.readouterr().out)

    assert main(["fg-hist", "--model", str(run / "model.ckpt"), "--data", str(data),
                 "--out", str(tmp_path / "fg"), "--bins", "4"]) == 0
    assert (tmp_path / "fg" / "gate_scores.csv").exists()


def test_ablate_and_locations(tmp_path, capsys):
    assert main(["ablate", "--preset", "fg_vtf", "--out", str(tmp_path / "abl"), *TINY]) == 0
    assert "w/ FG+VTF" in (tmp_path / "abl" / "summary.md").read_text()
    assert main(["locations", "--stack", "encoder", "--suffix", "--out", str(tmp_path / "loc"), *TINY]) == 0
    assert (tmp_path / "loc" / "summary.csv").read_text().count("\n") == 5
    assert (tmp_path / "loc" / "config.json").exists()


def test_bad_override_exit_code(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "unknown=1"]) == 2

import subprocess
import sys

import pytest

from stast.cli import apply_settings, dump_config, main, read_config
from stast.recipe import Recipe

SMALL = """\
synth.n_utterances = 40
synth.vocab_size = 9
synth.d_feat = 6
synth.max_len = 4
n_dev = 8
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.n_layers_acoustic = 1
model.n_layers_semantic = 1
model.n_layers_decoder = 1
plan.pretrain_epochs = 1
plan.joint_epochs = 2
plan.warmup_steps = 10
plan.checkpoint_interval_steps = 2
plan.frame_budget = 120
"""


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "stast.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout.lower()
    for cmd in ("gen-data", "pretrain", "train", "eval", "decode", "ablate", "analyze-shrink"):
        assert cmd in proc.stdout


def test_unknown_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_manifest_exits_two(tmp_path, capsys):
    code = main(["eval", "--manifest", str(tmp_path / "nope.tsv"), "--checkpoint", "x.stck"])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2
    assert len(err) == 1 and err[0].startswith("error\tusage\t--manifest")


def test_bad_config_key_exits_two(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("no_such_key = 3\n")
    assert main(["gen-data", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path)]) == 2


def test_config_dump_roundtrip(tmp_path):
    recipe = apply_settings(Recipe(), read_config_text(tmp_path, SMALL + "plan.weights = 1,0.5,0,2\n"))
    dump_config(recipe, tmp_path / "dump.txt")
    again = apply_settings(Recipe(), read_config(tmp_path / "dump.txt"))
    assert again == recipe


def read_config_text(tmp_path, text):
    (tmp_path / "cfg.txt").write_text(text)
    return read_config(tmp_path / "cfg.txt")


def test_gen_train_eval_roundtrip(tmp_path, capsys):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert (data / "train.tsv").exists() and (data / "vocab.txt").exists()
    assert main(["train", "--config", str(cfg), "--manifest", str(data / "train.tsv"), "--out", str(run),
                 "--precision", "float64"]) == 0
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,l_ctc,l_st,l_mt,l_ad,l_total,lr,wordlevel_fallbacks" and len(metrics) > 1
    assert (run / "config.txt").exists()
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--manifest", str(data / "dev.tsv"),
                 "--checkpoint", str(run / "model.stck"), "--out", str(run), "--beam", "2"]) == 0
    report = dict(line.split("\t") for line in (run / "bleu.txt").read_text().splitlines())
    assert 0.0 <= float(report["bleu"]) <= 100.0
    assert main(["decode", "--config", str(cfg), "--manifest", str(data / "dev.tsv"),
                 "--checkpoint", str(run / "model.stck"), "--out", str(run)]) == 0
    assert len((run / "hypotheses.tsv").read_text().splitlines()) == 8
    assert main(["analyze-shrink", "--config", str(cfg), "--manifest", str(data / "dev.tsv"),
                 "--checkpoint", str(run / "model.stck"), "--out", str(run)]) == 0
    assert (run / "shrink_hist.csv").read_text().startswith("diff,count,fraction")


def test_identical_seeds_identical_metrics(tmp_path):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    texts = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--manifest", str(data / "train.tsv"),
                     "--out", str(tmp_path / name), "--seed", "5"]) == 0
        texts.append((tmp_path / name / "metrics.csv").read_text())
    assert texts[0] == texts[1]


def test_resume_through_cli(tmp_path):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    train = ["train", "--config", str(cfg), "--manifest", str(data / "train.tsv"), "--precision", "float64"]
    assert main(train + ["--out", str(tmp_path / "full")]) == 0
    assert main(train + ["--out", str(tmp_path / "part"), "--max-steps", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--manifest", str(data / "train.tsv"), "--precision", "float64",
                 "--checkpoint", str(tmp_path / "part" / "last.stck"), "--resume", str(tmp_path / "part" / "last.stck"),
                 "--out", str(tmp_path / "rest")]) == 0
    full = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    part = (tmp_path / "part" / "metrics.csv").read_text().splitlines()
    rest = (tmp_path / "rest" / "metrics.csv").read_text().splitlines()
    assert part + rest[1:] == full
    assert (tmp_path / "full" / "model.stck").read_bytes() == (tmp_path / "rest" / "model.stck").read_bytes()

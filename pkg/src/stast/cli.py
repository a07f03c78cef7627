"""Command-line entry point: ``stast <subcommand> [flags]``.

Failures print a single ``error<TAB>kind<TAB>message`` line on stderr; usage
errors exit with status 2, everything else with 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint, Checkpoint
from .data import SynthConfig, Vocabulary, downsample_corpus, generate_corpus, load_manifest, split_corpus, write_corpus
from .evaluation import (AblationSpec, corpus_bleu, run_ablation, shrink_histogram, translate_corpus,
                         write_ablation_csv)
from .objectives import AdaptationMode, LossWeights
from .recipe import Recipe, build_model, run_recipe
from .trainer import Trainer, TrainPlan, load_parameters, model_from_checkpoint, write_metrics

log = logging.getLogger("stast")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- config

def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, LossWeights):
        return LossWeights.parse(text)
    return text


def apply_settings(recipe: Recipe, settings: dict[str, str]) -> Recipe:
    """Apply ``section.key = value`` (or unambiguous bare ``key``) settings to a recipe."""
    sections = {"synth": recipe.synth, "model": recipe.model, "plan": recipe.plan}
    for key, value in settings.items():
        if "." in key:
            sec, name = key.split(".", 1)
            targets = [sections[sec]] if sec in sections else []
        else:
            name = key
            targets = [obj for obj in [recipe, *sections.values()] if hasattr(obj, name)]
        if len(targets) != 1 or not hasattr(targets[0], name):
            raise UsageError(f"unknown or ambiguous config key {key!r}")
        obj = targets[0]
        setattr(obj, name, _coerce(getattr(obj, name), value))
    recipe.plan.__post_init__()
    return recipe


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_config(recipe: Recipe, path, extra: dict | None = None) -> None:
    lines = [f"precision = {recipe.precision}", f"n_dev = {recipe.n_dev}",
             f"downsample_stride = {recipe.downsample_stride}"]
    for sec in ("synth", "model", "plan"):
        for f in dataclasses.fields(getattr(recipe, sec)):
            v = getattr(getattr(recipe, sec), f.name)
            if isinstance(v, LossWeights):
                v = ",".join(repr(x) for x in v.as_tuple())
            lines.append(f"{sec}.{f.name} = {v}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def recipe_from_args(args) -> Recipe:
    recipe = Recipe()
    if getattr(args, "config", None):
        apply_settings(recipe, read_config(args.config))
    if getattr(args, "seed", None) is not None:
        recipe.synth.seed = args.seed
        recipe.plan.seed = args.seed
    if getattr(args, "adaptation", None):
        recipe.plan.adaptation = AdaptationMode.parse(args.adaptation).value
    if getattr(args, "weights", None):
        recipe.plan.weights = LossWeights.parse(args.weights)
    if getattr(args, "precision", None):
        recipe.precision = args.precision
    return recipe


# -------------------------------------------------------------------- data

def _existing(path, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _load(path, flag: str, stride: int):
    corpus = load_manifest(_existing(path, flag))
    vocab = Vocabulary.load(Path(path).parent / "vocab.txt")
    return (downsample_corpus(corpus, stride) if stride > 1 else corpus), vocab


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_model(path, model, trainer: Trainer | None = None) -> None:
    width = 8 if ad.get_dtype() is np.float64 else 4
    if trainer is not None:
        save_checkpoint(path, trainer.snapshot(), width)
    else:
        params = {k: p.data for k, p in model.parameters().items()}
        save_checkpoint(path, Checkpoint(model.cfg.to_dict(), params), width)


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    corpus, vocab = generate_corpus(recipe.synth)
    train, dev = split_corpus(corpus, recipe.n_dev)
    write_corpus(train, out, vocab, "train.tsv")
    write_corpus(dev, out, vocab, "dev.tsv")
    dump_config(recipe, out / "config.txt", {"command": "gen-data"})
    print(f"wrote {len(train)} train / {len(dev)} dev utterances to {out}")


def cmd_pretrain(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    with ad.precision(recipe.precision):
        train, vocab = _load(args.manifest, "--manifest", recipe.downsample_stride)
        data = train
        if args.asr_manifest:
            data, _ = _load(args.asr_manifest, "--asr-manifest", recipe.downsample_stride)
        model = build_model(recipe, train[0].speech.shape[1], len(vocab))
        trainer = Trainer(model, data, recipe.plan, stage="pretrain")
        trainer.run()
        write_metrics(out / "metrics_pretrain.csv", trainer.metrics)
        _save_model(out / "pretrain.stck", model)
    dump_config(recipe, out / "config.txt", {"command": "pretrain"})
    print(f"pretrained {trainer.step} steps -> {out / 'pretrain.stck'}")


def cmd_train(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    with ad.precision(recipe.precision):
        train, vocab = _load(args.manifest, "--manifest", recipe.downsample_stride)
        if args.checkpoint:
            ckpt = load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
            model = build_model(recipe, train[0].speech.shape[1], len(vocab))
            load_parameters(model, ckpt.params)
        else:
            model = build_model(recipe, train[0].speech.shape[1], len(vocab))
            pre_data = train
            if args.asr_manifest:
                pre_data, _ = _load(args.asr_manifest, "--asr-manifest", recipe.downsample_stride)
            pre = Trainer(model, pre_data, recipe.plan, stage="pretrain")
            pre.run()
            write_metrics(out / "metrics_pretrain.csv", pre.metrics)
        trainer = Trainer(model, train, recipe.plan, stage="joint", out_dir=out if args.keep_checkpoints else None)
        if args.resume:
            trainer.load(_existing(args.resume, "--resume"))
        trainer.run(max_steps=args.max_steps)
        write_metrics(out / "metrics.csv", trainer.metrics)
        trainer.save(out / "last.stck")
        avg = trainer.averaged_parameters() if trainer.epoch >= trainer.epochs else None
        if avg is not None:
            load_parameters(model, avg)
        _save_model(out / "model.stck", model)
    dump_config(recipe, out / "config.txt", {"command": "train"})
    print(f"trained {trainer.step} joint steps -> {out / 'model.stck'}")


def _load_model(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
    return model_from_checkpoint(ckpt)


def cmd_eval(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    with ad.precision(recipe.precision):
        corpus, vocab = _load(args.manifest, "--manifest", recipe.downsample_stride)
        model = _load_model(args)
        hyps = translate_corpus(model, corpus, args.beam, text=args.text)
        report = corpus_bleu([vocab.decode(h) for h in hyps], [vocab.decode(u.translation) for u in corpus])
    text = "".join(f"{k}\t{v}\n" for k, v in report.as_rows())
    (out / "bleu.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_decode(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    with ad.precision(recipe.precision):
        corpus, vocab = _load(args.manifest, "--manifest", recipe.downsample_stride)
        model = _load_model(args)
        hyps = translate_corpus(model, corpus, args.beam, text=args.text)
    lines = "".join(f"{u.id}\t{vocab.decode(h)}\n" for u, h in zip(corpus, hyps))
    (out / "hypotheses.tsv").write_text(lines, encoding="utf-8")
    sys.stdout.write(lines)


def cmd_analyze_shrink(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    with ad.precision(recipe.precision):
        corpus, _ = _load(args.manifest, "--manifest", recipe.downsample_stride)
        hist = shrink_histogram(_load_model(args), corpus)
    hist.write_csv(out / "shrink_hist.csv")
    print(f"fraction_exact\t{hist.fraction_exact:.4f}")
    print(f"fraction_abs_diff_lt_2\t{hist.fraction_within_one:.4f}")


def cmd_ablate(args) -> None:
    recipe = recipe_from_args(args)
    out = _out(args)
    data = None
    if args.manifest:
        with ad.precision(recipe.precision):
            train, vocab = _load(args.manifest, "--manifest", recipe.downsample_stride)
            dev, _ = _load(args.dev_manifest or args.manifest, "--dev-manifest", recipe.downsample_stride)
        data = (train, dev, vocab)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(AblationSpec(), recipe, seeds, beam_size=args.beam, data=data,
                        progress=lambda r: print(f"{r['variant']}\t{r['seed']}\t{r['bleu']:.2f}", flush=True))
    write_ablation_csv(out / "ablation.csv", rows)
    dump_config(recipe, out / "config.txt", {"command": "ablate", "seeds": args.seeds})


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="UTF-8 file of 'key = value' lines")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--precision", choices=["float32", "float64"])
    shared.add_argument("-v", "--verbose", action="store_true")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--asr-manifest")
    train_flags.add_argument("--adaptation", choices=["sequence", "word", "off"])
    train_flags.add_argument("--weights", help="alpha,beta,gamma,eta")

    decode_flags = argparse.ArgumentParser(add_help=False)
    decode_flags.add_argument("--manifest", required=True)
    decode_flags.add_argument("--checkpoint", required=True)
    decode_flags.add_argument("--beam", type=int, default=4)
    decode_flags.add_argument("--text", action="store_true", help="translate transcriptions (MT path)")

    parser = argparse.ArgumentParser(prog="stast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[shared], help="write a synthetic corpus")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("pretrain", parents=[shared, train_flags], help="CTC-only acoustic pretraining")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_pretrain)
    p = sub.add_parser("train", parents=[shared, train_flags], help="joint multi-task training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint (skips pretraining)")
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--keep-checkpoints", action="store_true")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[shared, decode_flags], help="corpus BLEU")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("decode", parents=[shared, decode_flags], help="write hypotheses")
    p.set_defaults(func=cmd_decode)
    p = sub.add_parser("ablate", parents=[shared, train_flags], help="cumulative ablation table")
    p.add_argument("--manifest")
    p.add_argument("--dev-manifest")
    p.add_argument("--seeds", default="17,18,19")
    p.add_argument("--beam", type=int, default=4)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("analyze-shrink", parents=[shared], help="shrunk-length histogram")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_analyze_shrink)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error\tusage\t{exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as one machine-parsable line
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

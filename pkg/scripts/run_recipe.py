"""Train the pinned desk-scale recipe once and report dev BLEU and shrink statistics.

    python scripts/run_recipe.py --seed 17 --out runs/pinned
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from stast import autodiff as ad
from stast.evaluation import evaluate_bleu, representation_gap, shrink_histogram
from stast.recipe import Recipe, run_recipe
from stast.trainer import write_metrics


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--adaptation", choices=["sequence", "word", "off"], default="sequence")
    parser.add_argument("--beam", type=int, default=4)
    parser.add_argument("--out", type=Path)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = Recipe()
    recipe = replace(base, plan=replace(base.plan, seed=args.seed, adaptation=args.adaptation))
    start = time.process_time()
    run = run_recipe(recipe)
    with ad.precision(recipe.precision):
        bleu = evaluate_bleu(run.model, run.dev, args.beam)
        hist = shrink_histogram(run.model, run.dev)
        gap = representation_gap(run.model, run.dev)
    print(f"dev BLEU {bleu.bleu:.2f}  (precisions {[round(p, 3) for p in bleu.precisions]}, "
          f"BP {bleu.brevity_penalty:.3f})")
    print(f"shrunk length exact {hist.fraction_exact:.3f}, within one {hist.fraction_within_one:.3f}")
    print(f"speech/text representation gap {gap:.5f}")
    print(f"{run.pretrain.step + run.joint.step} steps, {time.process_time() - start:.0f}s CPU")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_metrics(args.out / "metrics.csv", run.pretrain.metrics + run.joint.metrics)
        hist.write_csv(args.out / "shrink_hist.csv")


if __name__ == "__main__":
    main()

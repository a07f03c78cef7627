"""Cumulative ablation over several seeds, plus the word-level adaptation comparison.

    python scripts/run_ablation.py --seeds 17,18,19 --out runs/ablation [--word-level]
"""
import argparse
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from stast import autodiff as ad
from stast.evaluation import ABLATION_VARIANTS, AblationSpec, evaluate_bleu, run_ablation
from stast.recipe import Recipe, prepare_data, run_recipe


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="17,18,19")
    parser.add_argument("--beam", type=int, default=4)
    parser.add_argument("--word-level", action="store_true", help="also train word-level adaptation")
    parser.add_argument("--out", type=Path)
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    recipe = Recipe()
    with ad.precision(recipe.precision):
        data = prepare_data(recipe)
    rows = run_ablation(AblationSpec(), recipe, seeds, out_dir=args.out, beam_size=args.beam, data=data,
                        progress=lambda r: print(f"{r['variant']:<18} seed {r['seed']}  BLEU {r['bleu']:6.2f}",
                                                 flush=True))
    print(f"\n{'variant':<18} {'mean BLEU':>9} {'mean gap':>9}")
    for v in ABLATION_VARIANTS:
        mine = [r for r in rows if r["variant"] == v]
        gaps = [r["gap"] for r in mine if not math.isnan(r["gap"])]
        gap = f"{np.mean(gaps):9.5f}" if gaps else f"{'-':>9}"
        print(f"{v:<18} {np.mean([r['bleu'] for r in mine]):9.2f} {gap}")

    if args.word_level:
        word = []
        for seed in seeds:
            run = run_recipe(replace(recipe, plan=replace(recipe.plan, seed=seed, adaptation="word")), data=data)
            with ad.precision(recipe.precision):
                word.append(evaluate_bleu(run.model, run.dev, args.beam).bleu)
        print(f"{'word-level':<18} {np.mean(word):9.2f}")


if __name__ == "__main__":
    main()

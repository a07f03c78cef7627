"""Decoding, corpus BLEU, shrunk-length statistics and the cumulative ablation runner."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import BOS, EOS, PAD, collate
from .model import STASTModel, argmax_labels, spike_indices
from .objectives import ctc_collapse


# ------------------------------------------------------------------ decoding

def greedy_ctc_decode(ctc_logits, frame_mask=None, blank: int | None = None) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    logits = ctc_logits.data if isinstance(ctc_logits, ad.Tensor) else np.asarray(ctc_logits)
    if blank is None:
        blank = logits.shape[-1] - 1
    valid = logits.shape[0] if frame_mask is None else int(np.asarray(frame_mask, dtype=bool).sum())
    return ctc_collapse(argmax_labels(logits[:valid]).tolist(), blank)


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    truncated: bool = False

    @property
    def normalized(self) -> float:
        return self.score / max(len(self.tokens), 1)


def beam_search(step_fn: Callable[[list[list[int]]], np.ndarray], beam_size: int, max_len: int,
                bos: int = BOS, eos: int = EOS, banned: Sequence[int] = ()) -> Hypothesis:
    """Length-normalised beam search.

    ``step_fn`` maps a list of prefixes (each starting with ``bos``) to an
    ``n x C`` array of next-token log-probabilities.  The beam shrinks as
    hypotheses emit ``eos``; the finished hypothesis with the best
    ``score / length`` wins.  Ties go to the lower beam slot, then lower token id.
    Returned tokens exclude ``bos`` and ``eos``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = np.array(step_fn([p for p, _ in alive]), dtype=np.float64)
        if banned:
            lp[:, list(banned)] = -np.inf
        cand = np.array([s for _, s in alive])[:, None] + lp
        order = np.argsort(-cand.reshape(-1), kind="stable")
        width = beam_size - len(finished)
        n_tok = lp.shape[1]
        next_alive = []
        for flat in order[:width]:
            row, tok = divmod(int(flat), n_tok)
            score = float(cand[row, tok])
            if not math.isfinite(score):
                break
            if tok == eos:
                finished.append(Hypothesis(alive[row][0][1:] + [eos], score))
            else:
                next_alive.append((alive[row][0] + [tok], score))
        alive = next_alive
        if len(finished) >= beam_size or not alive:
            break
    if finished:
        best = max(finished, key=lambda h: h.normalized)  # max keeps the first of equal scores
        return Hypothesis(best.tokens[:-1], best.score)
    if not alive:
        return Hypothesis([], float("-inf"), truncated=True)
    toks, score = max(alive, key=lambda a: a[1] / (len(a[0]) - 1))
    return Hypothesis(toks[1:], score, truncated=True)


def greedy_search(step_fn, max_len: int, bos: int = BOS, eos: int = EOS,
                  banned: Sequence[int] = ()) -> Hypothesis:
    """Step-wise argmax decoding (reference for beam size 1)."""
    prefix, score = [bos], 0.0
    for _ in range(max_len):
        lp = np.array(step_fn([prefix])[0], dtype=np.float64)
        lp[list(banned)] = -np.inf
        tok = int(np.argmax(lp))
        score += float(lp[tok])
        if tok == eos:
            return Hypothesis(prefix[1:], score)
        prefix = prefix + [tok]
    return Hypothesis(prefix[1:], score, truncated=True)


def model_step_fn(model: STASTModel, enc: ad.Tensor, enc_mask: np.ndarray):
    """Next-token log-probabilities from the decoder for one encoded source (``L x d``)."""
    def step(prefixes):
        ids = np.array(prefixes, dtype=np.int64)
        n = ids.shape[0]
        mem = ad.tensor(np.broadcast_to(enc.data, (n,) + enc.shape))
        mask = np.broadcast_to(enc_mask, (n,) + enc_mask.shape)
        logits = model.decode(mem, mask, ids).data[:, -1, :]
        m = logits.max(axis=-1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return step


def banned_tokens(model: STASTModel) -> list[int]:
    return [model.blank, PAD, BOS]


def _encode(model: STASTModel, utt=None, source=None):
    if source is not None:
        src = np.asarray([source], dtype=np.int64)
        mask = np.ones_like(src, dtype=bool)
        h = model.encode_semantic(model.embed_source(src), mask, add_positions=False)
        return h.data[0], mask[0]
    batch = collate([utt])
    enc, mask, degenerate = model.encode_speech(batch.speech, batch.speech_mask)
    if degenerate[0]:
        return None, None
    return enc.data[0], mask[0]


def beam_decode(model: STASTModel, utterance=None, source: Sequence[int] | None = None,
                beam_size: int = 4, max_len: int | None = None) -> Hypothesis:
    """Translate one utterance (speech path) or one source token sequence (text path)."""
    if (utterance is None) == (source is None):
        raise ValueError("pass exactly one of utterance / source")
    if max_len is None:
        n_src = len(source) if source is not None else len(utterance.transcription)
        max_len = 2 * n_src + 10
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            enc, mask = _encode(model, utterance, source)
            if enc is None:
                return Hypothesis([], float("-inf"))
            step = model_step_fn(model, ad.tensor(enc), mask)
            return beam_search(step, beam_size, max_len, banned=banned_tokens(model))
    finally:
        model.train(was_training)


def greedy_decode(model: STASTModel, utterance=None, source=None, max_len: int | None = None) -> Hypothesis:
    if max_len is None:
        n_src = len(source) if source is not None else len(utterance.transcription)
        max_len = 2 * n_src + 10
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            enc, mask = _encode(model, utterance, source)
            if enc is None:
                return Hypothesis([], float("-inf"))
            return greedy_search(model_step_fn(model, ad.tensor(enc), mask), max_len,
                                 banned=banned_tokens(model))
    finally:
        model.train(was_training)


def translate_corpus(model: STASTModel, corpus: Sequence, beam_size: int = 4, text: bool = False) -> list[list[int]]:
    out = []
    for u in corpus:
        if text:
            out.append(beam_decode(model, source=u.transcription, beam_size=beam_size).tokens)
        else:
            out.append(beam_decode(model, utterance=u, beam_size=beam_size).tokens)
    return out


# --------------------------------------------------------------------- BLEU

@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)

    def as_rows(self) -> list[tuple[str, str]]:
        rows = [("bleu", f"{self.bleu:.4f}")]
        rows += [(f"p{i + 1}", f"{p:.6f}") for i, p in enumerate(self.precisions)]
        rows += [("brevity_penalty", f"{self.brevity_penalty:.6f}"),
                 ("hyp_length", str(self.hyp_length)), ("ref_length", str(self.ref_length))]
        return rows


def _tokens(x) -> list[str]:
    if isinstance(x, str):
        return x.lower().split()
    return [str(t).lower() for t in x]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses: Sequence, references: Sequence, max_order: int = 4):
    """Clipped n-gram matches, n-gram totals and length sums; mergeable across shards."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu_from_statistics(matches, totals, hyp_len, ref_len) -> BleuReport:
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) > 0:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len, list(matches), list(totals))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_order: int = 4) -> BleuReport:
    """Case-insensitive corpus BLEU with no smoothing (a zero precision gives 0)."""
    if not any(_tokens(r) for r in references):
        raise ValueError("need at least one nonempty reference")
    return bleu_from_statistics(*bleu_statistics(hypotheses, references, max_order))


def evaluate_bleu(model: STASTModel, corpus: Sequence, beam_size: int = 4, text: bool = False) -> BleuReport:
    hyps = translate_corpus(model, corpus, beam_size, text=text)
    return corpus_bleu(hyps, [u.translation for u in corpus])


# ----------------------------------------------------------- shrink analysis

@dataclass
class ShrinkHistogram:
    counts: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def fraction(self, pred) -> float:
        return sum(c for d, c in self.counts.items() if pred(d)) / max(self.total, 1)

    @property
    def fraction_exact(self) -> float:
        return self.fraction(lambda d: d == 0)

    @property
    def fraction_within_one(self) -> float:
        return self.fraction(lambda d: abs(d) < 2)

    def rows(self) -> list[tuple[int, int, float]]:
        n = max(self.total, 1)
        return [(d, c, c / n) for d, c in sorted(self.counts.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["diff", "count", "fraction"])
            for d, c, f in self.rows():
                w.writerow([d, c, f"{f:.6f}"])


def collapsed_lengths(model: STASTModel, corpus: Sequence, batch_size: int = 64) -> list[int]:
    was_training = model.training
    model.eval()
    out = []
    try:
        with ad.no_grad():
            for i in range(0, len(corpus), batch_size):
                batch = collate(corpus[i:i + batch_size])
                _, logits = model.acoustic_forward(batch.speech, batch.speech_mask)
                labels = argmax_labels(logits.data)
                for j in range(len(batch)):
                    valid = int(batch.speech_lengths[j])
                    out.append(int(spike_indices(labels[j, :valid], model.blank).size))
    finally:
        model.train(was_training)
    return out


def shrink_histogram(model: STASTModel, corpus: Sequence) -> ShrinkHistogram:
    """Histogram of ``T_x - |collapsed labels|`` over the corpus."""
    lengths = collapsed_lengths(model, corpus)
    return ShrinkHistogram(dict(Counter(len(u.transcription) - n for u, n in zip(corpus, lengths))))


def representation_gap(model: STASTModel, corpus: Sequence, batch_size: int = 64) -> float:
    """Mean over utterances of MSE(mean speech representation, mean text representation)."""
    from .objectives import masked_mean
    was_training = model.training
    model.eval()
    gaps = []
    try:
        with ad.no_grad():
            for i in range(0, len(corpus), batch_size):
                batch = collate(corpus[i:i + batch_size])
                st = model.forward_st(batch, with_decoder=False)
                if st.active.size == 0:
                    continue
                mt = model.forward_mt(batch.src, batch.src_mask, None)
                hs = masked_mean(st.h_s, st.h_s_mask).data
                hx = masked_mean(ad.tensor(mt.h_x.data[st.active]), batch.src_mask[st.active]).data
                gaps.extend(np.mean((hs - hx) ** 2, axis=-1).tolist())
    finally:
        model.train(was_training)
    return float(np.mean(gaps)) if gaps else float("nan")


# ----------------------------------------------------------------- ablation

ABLATION_VARIANTS = ("full", "-adaptation", "-multitask", "-semantic_encoder", "-shrink", "-ctc")


@dataclass
class AblationSpec:
    variants: tuple[str, ...] = ABLATION_VARIANTS

    def __post_init__(self):
        for v in self.variants:
            if v not in ABLATION_VARIANTS:
                raise ValueError(f"unknown ablation variant {v!r}")


def ablation_settings(variant: str, model_cfg, plan):
    """Model config and plan for a cumulative variant (each removal includes the ones before it)."""
    level = ABLATION_VARIANTS.index(variant)
    w = plan.weights
    alpha, beta, gamma, eta = w.alpha, w.beta, w.gamma, w.eta
    adaptation = plan.adaptation
    use_sem, use_shrink = model_cfg.use_semantic_encoder, model_cfg.use_shrink
    if level >= 1:
        eta = 0.0
    if level >= 2:
        gamma = 0.0
    if level >= 3:
        use_sem = False
    if level >= 4:
        use_shrink = False
    if level >= 5:
        alpha = 0.0
    from .objectives import LossWeights
    new_plan = replace(plan, weights=LossWeights(alpha, beta, gamma, eta), adaptation=adaptation)
    new_cfg = replace(model_cfg, use_semantic_encoder=use_sem, use_shrink=use_shrink)
    return new_cfg, new_plan


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "bleu"])
        for r in rows:
            w.writerow([r["variant"], r["seed"], f"{r['bleu']:.4f}"])


def run_ablation(spec: AblationSpec, recipe, seeds: Sequence[int], out_dir=None,
                 beam_size: int = 4, progress: Callable[[dict], None] | None = None,
                 data: tuple | None = None,
                 on_run: Callable[[dict, object], None] | None = None) -> list[dict]:
    """Train every cumulative variant for every seed and score dev BLEU.

    Rows also carry the dev speech/text representation gap for variants that
    still have a shared semantic encoder over shrunk states (``nan`` otherwise).
    ``data`` is an optional ``(train, dev, vocab)`` triple shared by all runs.
    ``on_run(row, run)`` sees each trained ``RecipeRun`` before it is dropped.
    """
    from .recipe import prepare_data, run_recipe
    if not seeds:
        raise ValueError("need at least one seed")
    if data is None:
        with ad.precision(recipe.precision):
            data = prepare_data(recipe)
    rows = []
    for seed in seeds:
        for variant in spec.variants:
            cfg, plan = ablation_settings(variant, recipe.model, recipe.plan)
            run = run_recipe(replace(recipe, model=cfg, plan=replace(plan, seed=seed)), data=data)
            with ad.precision(recipe.precision):
                report = evaluate_bleu(run.model, run.dev, beam_size)
                gap = (representation_gap(run.model, run.dev)
                       if cfg.use_shrink and cfg.use_semantic_encoder else float("nan"))
            row = {"variant": variant, "seed": seed, "bleu": report.bleu, "gap": gap,
                   "config": {"weights": plan.weights.as_tuple(), "adaptation": plan.adaptation,
                              "use_semantic_encoder": cfg.use_semantic_encoder, "use_shrink": cfg.use_shrink}}
            rows.append(row)
            if on_run:
                on_run(row, run)
            if progress:
                progress(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_ablation_csv(Path(out_dir) / "ablation.csv", rows)
    return rows

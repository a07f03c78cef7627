"""Loss terms: CTC, translation cross-entropy, cross-modal adaptation and their weighted sum."""
from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e30


class InfeasibleTargetError(ValueError):
    pass


class OracleScopeError(ValueError):
    pass


class AdaptationMode(str, enum.Enum):
    SEQUENCE = "sequence"
    WORD = "word"
    OFF = "off"

    @classmethod
    def parse(cls, value) -> "AdaptationMode":
        if isinstance(value, cls):
            return value
        aliases = {"sequence_level": "sequence", "word_level": "word", "none": "off"}
        return cls(aliases.get(str(value), str(value)))


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(*parts)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.eta)


@dataclass
class LossBreakdown:
    l_ctc: float = 0.0
    l_st: float = 0.0
    l_mt: float = 0.0
    l_ad: float = 0.0
    l_total: float = 0.0
    counts: dict = field(default_factory=dict)
    total: Tensor | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"l_ctc": self.l_ctc, "l_st": self.l_st, "l_mt": self.l_mt,
                "l_ad": self.l_ad, "l_total": self.l_total}


# ------------------------------------------------------------------------ CTC

def min_ctc_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_collapse(path: Sequence[int], blank: int) -> list[int]:
    """The many-to-one map B: merge consecutive repeats, then delete blanks."""
    out, prev = [], None
    for label in path:
        if label != prev and label != blank:
            out.append(int(label))
        prev = label
    return out


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]],
                   input_lengths: Sequence[int], blank: int) -> Tensor:
    """Per-utterance ``-log p_ctc(x|s)`` for a ``B x T x C`` block of log-probabilities.

    Forward recursion over the blank-augmented label sequence in log space; each
    time step is a handful of tape operations vectorised over the batch, so the
    gradient comes from the tape.
    """
    b, t_max, _ = log_probs.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    for i, tgt in enumerate(targets):
        need = min_ctc_frames(tgt)
        if input_lengths[i] < need:
            raise InfeasibleTargetError(
                f"target of length {len(tgt)} needs {need} frames, utterance {i} has {input_lengths[i]}")
    s_max = 2 * max((len(x) for x in targets), default=0) + 1
    ext = np.full((b, s_max), blank, dtype=np.int64)
    s_len = np.zeros(b, dtype=np.int64)
    for i, tgt in enumerate(targets):
        ext[i, 1:2 * len(tgt):2] = tgt
        s_len[i] = 2 * len(tgt) + 1
    valid_s = np.arange(s_max)[None, :] < s_len[:, None]
    # the skip transition s-2 -> s is legal onto a label that differs from the label two back
    skip_ok = np.zeros((b, s_max), dtype=bool)
    skip_ok[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    dtype = log_probs.data.dtype
    skip_bias = np.where(skip_ok, 0.0, NEG_INF).astype(dtype)
    invalid_bias = np.where(valid_s, 0.0, NEG_INF).astype(dtype)

    batch_idx = np.repeat(np.arange(b)[:, None], s_max, axis=1)
    # emit[b, t, s] = log_probs[b, t, ext[b, s]]
    emit = ad.index(log_probs, (batch_idx[:, None, :], np.arange(t_max)[None, :, None], ext[:, None, :]))

    init = np.full((b, s_max), NEG_INF, dtype=dtype)
    init[:, 0] = 0.0
    if s_max > 1:
        init[:, 1] = np.where(s_len > 1, 0.0, NEG_INF)
    alpha = ad.tensor(init) + emit[:, 0, :]
    pad1 = ad.tensor(np.full((b, 1), NEG_INF, dtype=dtype))
    pad2 = ad.tensor(np.full((b, 2), NEG_INF, dtype=dtype))
    for t in range(1, t_max):
        stay = alpha
        moves = [stay, ad.concat([pad1, alpha[:, :-1]], axis=1)]
        if s_max > 2:
            moves.append(ad.concat([pad2, alpha[:, :-2]], axis=1) + skip_bias)
        new = ad.logsumexp(ad.stack(moves, axis=-1), axis=-1) + emit[:, t, :] + invalid_bias
        live = (t < input_lengths)[:, None]
        alpha = ad.where(live, new, 0.0) + ad.where(~live, alpha, 0.0)
    last = s_len - 1
    prev = np.maximum(s_len - 2, 0)
    end_last = alpha[np.arange(b), last]
    end_prev = ad.where(s_len > 1, alpha[np.arange(b), prev], NEG_INF)
    return -ad.logsumexp(ad.stack([end_last, end_prev], axis=-1), axis=-1)


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """``-log p_ctc(target | s)`` for one utterance given ``T x C`` log-probabilities."""
    lp = log_probs.reshape(1, *log_probs.shape)
    return ctc_loss_batch(lp, [list(target)], [log_probs.shape[0]], blank).reshape(())


@functools.lru_cache(maxsize=64)
def _enumerate_paths(t: int, c: int, blank: int) -> tuple[np.ndarray, dict]:
    """All ``c**t`` paths and, for each collapsed label sequence, the rows that produce it."""
    paths = np.array(list(itertools.product(range(c), repeat=t)), dtype=np.int64).reshape(-1, t)
    groups: dict[tuple, list[int]] = {}
    for i, path in enumerate(paths.tolist()):
        groups.setdefault(tuple(ctc_collapse(path, blank)), []).append(i)
    return paths, {k: np.array(v) for k, v in groups.items()}


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int], blank: int) -> float:
    """Enumerate every path, sum the probability of those that collapse to ``target``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    if c ** t > 10 ** 6:
        raise OracleScopeError(f"{c}^{t} paths exceed the enumeration guard of 1e6")
    paths, groups = _enumerate_paths(t, c, blank)
    rows = groups.get(tuple(int(x) for x in target))
    if rows is None:
        return float("inf")
    path_lp = lp[np.arange(t), paths[rows]].sum(axis=1)
    m = path_lp.max()
    return float(-(m + np.log(np.exp(path_lp - m).sum())))


# ---------------------------------------------------------------- translation

def translation_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Token-level cross-entropy of decoder logits against EOS-terminated targets."""
    return ad.masked_cross_entropy(logits, targets, mask)


# ----------------------------------------------------------------- adaptation

def masked_mean(h: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid positions of a ``B x L x d`` block -> ``B x d``."""
    w = np.asarray(mask, dtype=h.data.dtype)
    counts = w.sum(axis=1, keepdims=True)
    return ad.sum_(h * w[..., None], axis=1) / counts


def adaptation_loss(h_s: Tensor, h_x: Tensor, mode, speech_mask: np.ndarray,
                    text_mask: np.ndarray, counts: dict | None = None) -> Tensor:
    """Mean over utterances of the MSE between speech and (detached) text representations.

    ``sequence``: MSE of the two mean-pooled vectors.  ``word``: position-wise
    MSE when the shrunk length equals the transcription length, otherwise the
    sequence-level value for that utterance (counted in ``counts["fallbacks"]``).
    """
    mode = AdaptationMode.parse(mode)
    if mode is AdaptationMode.OFF:
        return ad.tensor(0.0)
    if h_s.ndim == 2:
        h_s, speech_mask = h_s.reshape(1, *h_s.shape), np.asarray(speech_mask)[None]
        h_x, text_mask = h_x.reshape(1, *h_x.shape), np.asarray(text_mask)[None]
    speech_mask = np.asarray(speech_mask, dtype=bool)
    text_mask = np.asarray(text_mask, dtype=bool)
    teacher = h_x.detach()
    b, _, d = h_s.shape
    diff_seq = masked_mean(h_s, speech_mask) - masked_mean(teacher, text_mask)
    per_seq = ad.sum_(ad.square(diff_seq), axis=-1) * (1.0 / d)
    if mode is AdaptationMode.SEQUENCE:
        return ad.mean(per_seq)
    ls, lx = speech_mask.sum(axis=1), text_mask.sum(axis=1)
    exact = ls == lx
    if counts is not None:
        counts["fallbacks"] = counts.get("fallbacks", 0) + int((~exact).sum())
    if not exact.any():
        return ad.mean(per_seq)
    width = max(h_s.shape[1], teacher.shape[1])
    hs = ad.pad_axis(h_s, width, axis=1)
    hx = ad.pad_axis(teacher, width, axis=1)
    pos_mask = np.zeros((b, width), dtype=h_s.data.dtype)
    pos_mask[:, :speech_mask.shape[1]] = speech_mask
    sq = ad.sum_(ad.square(hs - hx), axis=-1) * pos_mask
    denom = np.maximum(ls, 1).astype(h_s.data.dtype) * d
    per_word = ad.sum_(sq, axis=1) / denom
    pick = exact.astype(h_s.data.dtype)
    return ad.mean(per_word * pick + per_seq * (1.0 - pick))


# ---------------------------------------------------------------------- total

def total_loss(terms: dict, weights: LossWeights, counts: dict | None = None) -> LossBreakdown:
    """Weighted sum ``alpha*ctc + beta*st + gamma*mt + eta*ad`` over the supplied terms.

    ``terms`` maps ``ctc``/``st``/``mt``/``ad`` to scalar tensors; absent terms
    count as zero and contribute no gradient.
    """
    scale = {"ctc": weights.alpha, "st": weights.beta, "mt": weights.gamma, "ad": weights.eta}
    total = None
    for key, value in terms.items():
        if value is None or scale[key] == 0.0:
            continue
        part = value * scale[key]
        total = part if total is None else total + part
    values = {k: (float(v.data) if v is not None else 0.0) for k, v in terms.items()}
    out = LossBreakdown(values.get("ctc", 0.0), values.get("st", 0.0), values.get("mt", 0.0),
                        values.get("ad", 0.0), counts=dict(counts or {}))
    out.l_total = (weights.alpha * out.l_ctc + weights.beta * out.l_st
                   + weights.gamma * out.l_mt + weights.eta * out.l_ad)
    out.total = total
    return out

"""The STAST network: pre-net, acoustic encoder, CTC head, shrink, semantic encoder, decoder.

One matrix ``W`` of shape ``d_model x (|V|+1)`` is the CTC classifier, the
source (and target) embedding table read transposed, and the decoder output
projection.  All tensors are batched ``B x T x d`` with boolean validity masks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import BOS, PAD, Batch

MASK_NEG = -1e9


@dataclass
class ModelConfig:
    d_feat: int = 16
    vocab_size: int = 30
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers_acoustic: int = 2
    n_layers_semantic: int = 2
    n_layers_decoder: int = 2
    dropout: float = 0.1
    # ablation switches
    use_semantic_encoder: bool = True
    use_shrink: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("n_layers_acoustic", "n_layers_semantic", "n_layers_decoder"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.d_model, self.n_heads, self.d_ff, self.d_feat, self.vocab_size) < 1:
            raise ValueError("dimensions must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")


def _uniform(rng: Rng, d_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(d_in)
    return ad.tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return ad.tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return ad.tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng):
        self.weight = _uniform(rng, d_in, (d_in, d_out))
        self.bias = _zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = _ones(d)
        self.bias = _zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: Rng):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ad.transpose(x.reshape(b, t, self.n_heads, d // self.n_heads), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, bias: np.ndarray,
                 rate: float, rng: Rng, training: bool) -> Tensor:
        """``bias`` is additive, broadcastable to ``B x 1 x Tq x Tk`` (0 or MASK_NEG)."""
        b, tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.n_heads))
        weights = ad.softmax(scores + bias.astype(scores.data.dtype), axis=-1)
        self.last_weights = weights.data
        weights = ad.dropout(weights, rate, rng, training)
        ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(b, tq, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: Rng):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor, rate: float, rng: Rng, training: bool) -> Tensor:
        return self.w2(ad.dropout(ad.relu(self.w1(x)), rate, rng, training))


class EncoderLayer(Module):
    """Post-layer-norm transformer encoder layer."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x, bias, rate, rng, training):
        x = self.norm1(x + ad.dropout(self.attn(x, x, bias, rate, rng, training), rate, rng, training))
        return self.norm2(x + ad.dropout(self.ffn(x, rate, rng, training), rate, rng, training))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, y, memory, self_bias, cross_bias, rate, rng, training):
        y = self.norm1(y + ad.dropout(self.self_attn(y, y, self_bias, rate, rng, training), rate, rng, training))
        y = self.norm2(y + ad.dropout(self.cross_attn(y, memory, cross_bias, rate, rng, training),
                                      rate, rng, training))
        return self.norm3(y + ad.dropout(self.ffn(y, rate, rng, training), rate, rng, training))


class EncoderStack(Module):
    def __init__(self, n_layers: int, cfg: ModelConfig, rng: Rng):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(n_layers)]

    def __call__(self, x, mask, rate, rng, training):
        bias = key_bias(mask)
        for layer in self.layers:
            x = layer(x, bias, rate, rng, training)
        return x


class DecoderStack(Module):
    def __init__(self, n_layers: int, cfg: ModelConfig, rng: Rng):
        self.layers = [DecoderLayer(cfg, rng) for _ in range(n_layers)]

    def __call__(self, y, memory, memory_mask, rate, rng, training):
        t = y.shape[1]
        self_bias = np.triu(np.full((t, t), MASK_NEG), k=1)[None, None]
        cross_bias = key_bias(memory_mask)
        for layer in self.layers:
            y = layer(y, memory, self_bias, cross_bias, rate, rng, training)
        return y


def key_bias(mask: np.ndarray) -> np.ndarray:
    """``B x T`` validity mask -> additive ``B x 1 x 1 x T`` attention bias."""
    return np.where(mask, 0.0, MASK_NEG)[:, None, None, :]


class TiedProjection(Module):
    """Single storage behind the CTC classifier, the embeddings and the output softmax."""

    def __init__(self, d_model: int, n_labels: int, rng: Rng):
        self.weight = ad.tensor(rng.normal(0.0, d_model ** -0.5, (d_model, n_labels)), requires_grad=True)

    @property
    def w_ctc(self) -> Tensor:
        return self.weight

    @property
    def w_t(self) -> Tensor:
        return self.weight

    @property
    def w_s(self) -> np.ndarray:
        """Embedding-table view (``(|V|+1) x d_model``), sharing memory with ``weight``."""
        return self.weight.data.T

    def embed(self, ids: np.ndarray) -> Tensor:
        return ad.embedding_lookup(ad.transpose(self.weight), ids)

    def project(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.weight)


@dataclass
class ShrinkResult:
    kept_indices: np.ndarray
    shrunk_states: Tensor
    collapsed_labels: list[int]
    degenerate: bool = False


@dataclass
class BatchShrink:
    """Shrink outputs for a whole batch, padded to the longest kept sequence."""
    kept: list[np.ndarray]
    labels: list[list[int]]
    states: Tensor | None     # B' x L x d over non-degenerate rows only
    mask: np.ndarray | None   # B' x L
    active: np.ndarray        # indices of non-degenerate rows in the batch
    degenerate: np.ndarray    # B bool


@dataclass
class STOutput:
    ctc_logits: Tensor
    frame_mask: np.ndarray
    shrink: BatchShrink | None
    h_s: Tensor | None
    h_s_mask: np.ndarray | None
    st_logits: Tensor | None
    active: np.ndarray


@dataclass
class MTOutput:
    h_x: Tensor
    src_mask: np.ndarray
    mt_logits: Tensor | None
    src_embedding: Tensor = field(repr=False, default=None)


class DegenerateInputError(ValueError):
    pass


def spike_indices(labels: np.ndarray, blank: int) -> np.ndarray:
    """Frames whose argmax label is non-blank and differs from the previous frame's."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    prev = np.concatenate([[-1], labels[:-1]])
    return np.flatnonzero((labels != blank) & (labels != prev))


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: lowest id wins ties
    return np.argmax(logits, axis=-1)


class STASTModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.blank = cfg.vocab_size
        init = Rng(seed)
        self.prenet = Linear(cfg.d_feat, cfg.d_model, init)
        self.acoustic = EncoderStack(cfg.n_layers_acoustic, cfg, init)
        self.semantic = EncoderStack(cfg.n_layers_semantic, cfg, init)
        self.decoder = DecoderStack(cfg.n_layers_decoder, cfg, init)
        self.proj = TiedProjection(cfg.d_model, cfg.vocab_size + 1, init)
        self.rng = Rng(seed + 1)
        self.training = True
        self._pe_cache = np.zeros((0, cfg.d_model))

    # ----------------------------------------------------------------- admin
    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> "STASTModel":
        self.training = mode
        return self

    def eval(self) -> "STASTModel":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def positions(self, length: int) -> np.ndarray:
        if self._pe_cache.shape[0] < length:
            self._pe_cache = ad.sinusoidal_positions(max(length, 2 * self._pe_cache.shape[0]), self.cfg.d_model)
        return self._pe_cache[:length].astype(ad.get_dtype())

    @property
    def _rate(self) -> float:
        return self.cfg.dropout

    # ------------------------------------------------------------ components
    def pre_net(self, speech) -> Tensor:
        x = speech if isinstance(speech, Tensor) else ad.tensor(speech)
        if x.shape[-1] != self.cfg.d_feat:
            raise ad.DimensionError(f"speech features have width {x.shape[-1]}, model expects d_feat={self.cfg.d_feat}")
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        out = self.prenet(x) + self.positions(x.shape[1])
        out = ad.dropout(out, self._rate, self.rng, self.training)
        return out.reshape(out.shape[1:]) if squeeze else out

    def encode_acoustic(self, x: Tensor, frame_mask: np.ndarray) -> Tensor:
        return self._encode(self.acoustic, x, frame_mask)

    def encode_semantic(self, states: Tensor, mask: np.ndarray, add_positions: bool = True) -> Tensor:
        """Shared semantic encoder.  Text inputs from :meth:`embed_source` already carry positions."""
        if states.shape[-2] == 0:
            raise DegenerateInputError("semantic encoder received an empty sequence")
        squeeze = states.ndim == 2
        if squeeze:
            states = states.reshape(1, *states.shape)
            mask = np.asarray(mask)[None]
        if add_positions:
            states = states + self.positions(states.shape[1])
        x = ad.dropout(states, self._rate, self.rng, self.training)
        out = self.semantic(x, np.asarray(mask, dtype=bool), self._rate, self.rng, self.training)
        return out.reshape(out.shape[1:]) if squeeze else out

    def _encode(self, stack: EncoderStack, x: Tensor, mask) -> Tensor:
        squeeze = x.ndim == 2
        mask = np.asarray(mask, dtype=bool)
        if squeeze:
            x = x.reshape(1, *x.shape)
            mask = mask[None]
        out = stack(x, mask, self._rate, self.rng, self.training)
        return out.reshape(out.shape[1:]) if squeeze else out

    def ctc_logits(self, h: Tensor) -> Tensor:
        return self.proj.project(h)

    def embed_source(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        emb = self.proj.embed(ids)
        if ids.size == 0:
            return emb
        return emb * math.sqrt(self.cfg.d_model) + self.positions(ids.shape[-1])

    def embed_target(self, ids: np.ndarray) -> Tensor:
        return self.embed_source(ids)

    def shrink(self, h: Tensor, ctc_logits: Tensor, frame_mask=None) -> ShrinkResult:
        """Keep the acoustic states at CTC spikes of one utterance (``T x d``)."""
        t = h.shape[0]
        valid = t if frame_mask is None else int(np.asarray(frame_mask, dtype=bool).sum())
        labels = argmax_labels(ctc_logits.data[:valid])
        kept = spike_indices(labels, self.blank)
        return ShrinkResult(kept, ad.index(h, kept), [int(labels[i]) for i in kept], degenerate=kept.size == 0)

    def shrink_batch(self, h: Tensor, ctc_logits: Tensor, frame_mask: np.ndarray) -> BatchShrink:
        b = h.shape[0]
        labels = argmax_labels(ctc_logits.data)
        kept, collapsed = [], []
        for i in range(b):
            valid = int(frame_mask[i].sum())
            k = spike_indices(labels[i, :valid], self.blank)
            kept.append(k)
            collapsed.append([int(labels[i, j]) for j in k])
        lengths = np.array([len(k) for k in kept])
        degenerate = lengths == 0
        active = np.flatnonzero(~degenerate)
        if active.size == 0:
            return BatchShrink(kept, collapsed, None, None, active, degenerate)
        width = int(lengths[active].max())
        rows = np.zeros((active.size, width), dtype=np.int64)
        mask = np.zeros((active.size, width), dtype=bool)
        for j, i in enumerate(active):
            rows[j, :lengths[i]] = kept[i]
            mask[j, :lengths[i]] = True
        states = ad.gather_rows(h, np.repeat(active[:, None], width, axis=1), rows)
        states = states * mask[..., None].astype(ad.get_dtype())
        return BatchShrink(kept, collapsed, states, mask, active, degenerate)

    def decode(self, encoder_out: Tensor, encoder_mask: np.ndarray, y_shifted: np.ndarray) -> Tensor:
        """Logits ``B x T_y x (|V|+1)``; the blank column is -inf."""
        y_shifted = np.asarray(y_shifted, dtype=np.int64)
        squeeze = y_shifted.ndim == 1
        if squeeze:
            y_shifted = y_shifted[None]
            encoder_out = encoder_out.reshape(1, *encoder_out.shape)
            encoder_mask = np.asarray(encoder_mask)[None]
        y = ad.dropout(self.embed_target(y_shifted), self._rate, self.rng, self.training)
        h_d = self.decoder(y, encoder_out, np.asarray(encoder_mask, dtype=bool), self._rate, self.rng, self.training)
        logits = self.proj.project(h_d)
        blank_mask = np.zeros(self.cfg.vocab_size + 1, dtype=ad.get_dtype())
        blank_mask[self.blank] = -np.inf
        logits = logits + blank_mask
        return logits.reshape(logits.shape[1:]) if squeeze else logits

    # --------------------------------------------------------------- paths
    def acoustic_forward(self, speech: np.ndarray, frame_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        h = self.encode_acoustic(self.pre_net(speech), frame_mask)
        return h, self.ctc_logits(h)

    def forward_st(self, batch: Batch, with_decoder: bool = True) -> STOutput:
        """Speech path; ``st_logits`` cover the non-degenerate rows ``active`` only."""
        h, logits = self.acoustic_forward(batch.speech, batch.speech_mask)
        if not self.cfg.use_shrink:
            active = np.arange(len(batch))
            enc, enc_mask, sh = h, batch.speech_mask, None
        else:
            sh = self.shrink_batch(h, logits, batch.speech_mask)
            active = sh.active
            if active.size == 0:
                return STOutput(logits, batch.speech_mask, sh, None, None, None, active)
            enc_mask = sh.mask
            if self.cfg.use_semantic_encoder:
                enc = self.encode_semantic(sh.states, sh.mask)
            else:
                enc = sh.states
        st_logits = None
        if with_decoder and batch.tgt is not None:
            st_logits = self.decode(enc, enc_mask, shift_right(batch.tgt[active]))
        return STOutput(logits, batch.speech_mask, sh, enc, enc_mask, st_logits, active)

    def forward_mt(self, src: np.ndarray, src_mask: np.ndarray, tgt: np.ndarray | None) -> MTOutput:
        emb = self.embed_source(src)
        h_x = self.encode_semantic(emb, src_mask, add_positions=False)
        logits = None if tgt is None else self.decode(h_x, src_mask, shift_right(tgt))
        return MTOutput(h_x, src_mask, logits, emb)

    def encode_speech(self, speech: np.ndarray, frame_mask: np.ndarray):
        """Encoder output the decoder attends to, for inference. Returns ``(enc, mask, degenerate)``."""
        h, logits = self.acoustic_forward(speech, frame_mask)
        if not self.cfg.use_shrink:
            return h, frame_mask, np.zeros(h.shape[0], dtype=bool)
        sh = self.shrink_batch(h, logits, frame_mask)
        if sh.active.size == 0:
            return None, None, sh.degenerate
        enc = self.encode_semantic(sh.states, sh.mask) if self.cfg.use_semantic_encoder else sh.states
        return enc, sh.mask, sh.degenerate


def shift_right(tgt: np.ndarray) -> np.ndarray:
    """Prefix BOS to every row; aligned position-by-position with :func:`decoder_targets`."""
    tgt = np.asarray(tgt, dtype=np.int64)
    return np.concatenate([np.full((tgt.shape[0], 1), BOS, dtype=np.int64), tgt], axis=1)


def decoder_targets(tgt: np.ndarray, tgt_mask: np.ndarray, eos: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets aligned with :func:`shift_right` inputs: ``y`` followed by EOS, padded."""
    tgt = np.asarray(tgt, dtype=np.int64)
    b, t = tgt.shape
    lengths = np.asarray(tgt_mask, dtype=bool).sum(axis=1)
    out = np.full((b, t + 1), PAD, dtype=np.int64)
    out[:, :t] = np.where(tgt_mask, tgt, PAD)
    out[np.arange(b), lengths] = eos
    mask = np.arange(t + 1)[None, :] <= lengths[:, None]
    return out, mask

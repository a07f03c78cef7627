"""Corpus model, synthetic speech-translation data, on-disk formats and batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Rng

PAD, BOS, EOS = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>")
FEATURE_MAGIC = b"STFE"
_FEATURE_HEADER = struct.Struct("<4sII")


class ConfigError(ValueError):
    pass


class ManifestParseError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


class Vocabulary:
    """Token strings indexed ``0..|V|-1``; the CTC blank is the implicit id ``|V|``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def blank(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self._ids["<pad>"]

    @property
    def bos(self) -> int:
        return self._ids["<s>"]

    @property
    def eos(self) -> int:
        return self._ids["</s>"]

    def id(self, token: str) -> int:
        return self._ids[token]

    def encode(self, text: str) -> list[int]:
        return [self._ids[t] for t in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        if size < 4:
            raise ConfigError(f"vocab_size={size} cannot hold the 3 special tokens plus content")
        return cls(list(SPECIAL_TOKENS) + [f"w{i:02d}" for i in range(size - 3)])


@dataclass
class AsrUtterance:
    id: str
    speech: np.ndarray
    transcription: list[int]

    @property
    def n_frames(self) -> int:
        return int(self.speech.shape[0])


@dataclass
class Utterance(AsrUtterance):
    translation: list[int] = field(default_factory=list)


@dataclass
class SynthConfig:
    seed: int = 17
    vocab_size: int = 30
    d_feat: int = 16
    min_len: int = 3
    max_len: int = 8
    min_frames_per_token: int = 3
    max_frames_per_token: int = 9
    noise: float = 0.3
    p_silence: float = 0.3
    min_silence: int = 3
    max_silence: int = 6
    n_utterances: int = 2200

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size={self.vocab_size} cannot hold the 3 special tokens plus content")
        if self.min_frames_per_token < 1 or self.max_frames_per_token < self.min_frames_per_token:
            raise ConfigError("frames-per-token range must satisfy 1 <= r_min <= r_max")
        if not 0.0 <= self.p_silence <= 1.0:
            raise ConfigError(f"p_silence={self.p_silence} outside [0, 1]")
        if self.noise < 0:
            raise ConfigError(f"noise={self.noise} must be >= 0")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("sentence length range must satisfy 1 <= L_min <= L_max")
        if self.min_silence < 1 or self.max_silence < self.min_silence:
            raise ConfigError("silence length range must satisfy 1 <= min <= max")
        if self.vocab_size < 5 and self.max_len > 1:
            raise ConfigError("sentences longer than one token need at least two content tokens")
        if self.n_utterances < 0:
            raise ConfigError("n_utterances must be >= 0")


def expected_frames_per_token(cfg: SynthConfig) -> float:
    """Closed-form E[T_s / T_x] for the generator (raw frames, before downsampling)."""
    mean_r = (cfg.min_frames_per_token + cfg.max_frames_per_token) / 2
    mean_sil = (cfg.min_silence + cfg.max_silence) / 2
    lengths = np.arange(cfg.min_len, cfg.max_len + 1)
    gaps_per_token = np.mean((lengths - 1) / lengths)
    return mean_r + cfg.p_silence * mean_sil * gaps_per_token


def generate_corpus(cfg: SynthConfig) -> tuple[list[Utterance], Vocabulary]:
    """Draw a deterministic synthetic corpus.

    Each content token owns a fixed feature prototype; its speech is a run of
    ``r`` noisy copies, optionally separated by silence (zero prototype).
    Neighbouring source tokens always differ, since a repeated token would be
    one acoustically unbroken run.  The translation applies a fixed token
    permutation and then reverses the sentence.
    """
    cfg.validate()
    vocab = Vocabulary.synthetic(cfg.vocab_size)
    rng = Rng(cfg.seed)
    n_content = cfg.vocab_size - 3
    prototypes = rng.normal(0.0, 1.0, (n_content, cfg.d_feat))
    mapping = 3 + rng.permutation(n_content)
    corpus = []
    for k in range(cfg.n_utterances):
        length = int(rng.integers(cfg.min_len, cfg.max_len))
        src = []
        for _ in range(length):
            if src:
                # uniform over the other content tokens
                t = int(rng.integers(0, n_content - 2))
                src.append(3 + (t + (t >= src[-1] - 3)))
            else:
                src.append(3 + int(rng.integers(0, n_content - 1)))
        blocks = []
        for j, tok in enumerate(src):
            if j > 0:
                if rng.random(None) < cfg.p_silence:
                    n_sil = int(rng.integers(cfg.min_silence, cfg.max_silence))
                    blocks.append(np.zeros((n_sil, cfg.d_feat)))
            r = int(rng.integers(cfg.min_frames_per_token, cfg.max_frames_per_token))
            blocks.append(np.repeat(prototypes[tok - 3][None, :], r, axis=0))
        frames = np.concatenate(blocks, axis=0)
        if cfg.noise > 0:
            frames = frames + rng.normal(0.0, cfg.noise, frames.shape)
        tgt = [int(mapping[t - 3]) for t in src][::-1]
        corpus.append(Utterance(f"utt{k:05d}", frames.astype(np.float32), src, tgt))
    return corpus, vocab


def translation_map(cfg: SynthConfig) -> dict[int, int]:
    """Source-to-target token bijection used by :func:`generate_corpus`."""
    rng = Rng(cfg.seed)
    n_content = cfg.vocab_size - 3
    rng.normal(0.0, 1.0, (n_content, cfg.d_feat))
    mapping = 3 + rng.permutation(n_content)
    return {3 + i: int(m) for i, m in enumerate(mapping)}


def split_corpus(corpus: list, n_dev: int) -> tuple[list, list]:
    if n_dev <= 0:
        return list(corpus), []
    return list(corpus[:-n_dev]), list(corpus[-n_dev:])


def downsample(frames: np.ndarray, stride: int = 3) -> np.ndarray:
    """Keep rows 0, 3, 6, ... of a ``T x d`` frame matrix."""
    if frames.shape[0] < 1:
        raise ValueError("cannot downsample an empty frame matrix")
    return frames[::stride]


def downsample_corpus(corpus: list, stride: int = 3) -> list:
    out = []
    for u in corpus:
        fields = dict(vars(u))
        fields["speech"] = downsample(u.speech, stride)
        out.append(type(u)(**fields))
    return out


# ------------------------------------------------------------------- file I/O

def write_features(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, t, d))
        fh.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, t, d = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if t == 0:
        raise FeatureFormatError(f"{path}: header declares T_s=0")
    expected = _FEATURE_HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FeatureFormatError(f"{path}: header declares {t}x{d} floats "
                                 f"({expected} bytes) but file has {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(t, d).astype(np.float32)


def write_corpus(corpus: Sequence[AsrUtterance], directory, vocab: Vocabulary,
                 manifest_name: str = "manifest.tsv") -> Path:
    """Write one feature file per utterance, ``vocab.txt`` and a manifest."""
    directory = Path(directory)
    feat_dir = directory / "feats"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
        vocab.save(directory / "vocab.txt")
        lines = ["# id\tfeature_path\ttranscription\ttranslation\n"]
        for u in corpus:
            rel = f"feats/{u.id}.stfe"
            write_features(directory / rel, u.speech)
            row = [u.id, rel, vocab.decode(u.transcription)]
            if isinstance(u, Utterance):
                row.append(vocab.decode(u.translation))
            lines.append("\t".join(row) + "\n")
        manifest = directory / manifest_name
        manifest.write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing corpus to {directory}: {exc}") from exc
    return manifest


def load_manifest(path, vocab: Vocabulary | None = None) -> list[AsrUtterance]:
    """Parse a manifest; rows without a translation column load as :class:`AsrUtterance`."""
    path = Path(path)
    if vocab is None:
        vocab = Vocabulary.load(path.parent / "vocab.txt")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise ManifestParseError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}")
        try:
            src = vocab.encode(cols[2])
            tgt = vocab.encode(cols[3]) if len(cols) == 4 else None
        except KeyError as exc:
            raise ManifestParseError(f"{path}:{lineno}: unknown token {exc.args[0]!r}") from None
        feat_path = Path(cols[1])
        if not feat_path.is_absolute():
            feat_path = path.parent / feat_path
        speech = read_features(feat_path)
        if tgt is None:
            out.append(AsrUtterance(cols[0], speech, src))
        else:
            out.append(Utterance(cols[0], speech, src, tgt))
    return out


# ------------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list[str]
    speech: np.ndarray          # B x T x d_feat
    speech_mask: np.ndarray     # B x T bool
    src: np.ndarray             # B x Lx (PAD-filled)
    src_mask: np.ndarray
    tgt: np.ndarray | None      # B x Ly (PAD-filled), None for ASR-only batches
    tgt_mask: np.ndarray | None
    speech_lengths: np.ndarray
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray | None

    def __len__(self):
        return len(self.ids)

    @property
    def n_frames(self) -> int:
        return int(self.speech_lengths.sum())


def _pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = max(int(lengths.max()), 1) if len(seqs) else 1
    block = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        block[i, :len(s)] = s
    mask = np.arange(width)[None, :] < lengths[:, None]
    return block, mask, lengths


def collate(utts: Sequence[AsrUtterance]) -> Batch:
    lengths = np.array([u.n_frames for u in utts], dtype=np.int64)
    d = utts[0].speech.shape[1]
    speech = np.zeros((len(utts), int(lengths.max()), d), dtype=np.float32)
    for i, u in enumerate(utts):
        speech[i, :u.n_frames] = u.speech
    speech_mask = np.arange(speech.shape[1])[None, :] < lengths[:, None]
    src, src_mask, src_len = _pad_ids([u.transcription for u in utts])
    if all(isinstance(u, Utterance) for u in utts):
        tgt, tgt_mask, tgt_len = _pad_ids([u.translation for u in utts])
    else:
        tgt = tgt_mask = tgt_len = None
    return Batch([u.id for u in utts], speech, speech_mask, src, src_mask,
                 tgt, tgt_mask, lengths, src_len, tgt_len)


def make_batches(corpus: Sequence[AsrUtterance], frame_budget: int, seed: int) -> list[Batch]:
    """Group utterances of similar length so each batch holds at most ``frame_budget`` frames.

    Sorting by length (ties broken by a seeded shuffle) forms the buckets; the
    batch order is then shuffled with the same seed.
    """
    for u in corpus:
        if u.n_frames > frame_budget:
            raise ConfigError(f"utterance {u.id} has {u.n_frames} frames, above the frame budget {frame_budget}")
    if not corpus:
        return []
    rng = Rng(seed)
    jitter = rng.permutation(len(corpus))
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].n_frames, jitter[i]))
    groups, cur, total = [], [], 0
    for i in order:
        n = corpus[i].n_frames
        if cur and total + n > frame_budget:
            groups.append(cur)
            cur, total = [], 0
        cur.append(i)
        total += n
    groups.append(cur)
    return [collate([corpus[i] for i in groups[g]]) for g in rng.permutation(len(groups))]

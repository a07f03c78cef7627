import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stast.data import (BOS, EOS, PAD, AsrUtterance, ConfigError, FeatureFormatError, ManifestParseError,
                        SynthConfig, Utterance, Vocabulary, collate, downsample, expected_frames_per_token,
                        generate_corpus, load_manifest, make_batches, read_features, translation_map,
                        write_corpus, write_features)


def test_vocabulary_layout():
    v = Vocabulary.synthetic(10)
    assert len(v) == 10 and v.blank == 10
    assert (v.pad, v.bos, v.eos) == (PAD, BOS, EOS)
    assert v.encode(v.decode([3, 4, 9])) == [3, 4, 9]
    assert len({v.id(t) for t in v.tokens}) == 10


def test_vocabulary_file_roundtrip(tmp_path):
    v = Vocabulary.synthetic(8)
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    assert len((tmp_path / "v.txt").read_text().splitlines()) == 8


def test_vocab_too_small():
    with pytest.raises(ConfigError):
        generate_corpus(SynthConfig(vocab_size=3))


@pytest.mark.parametrize("field, value", [("min_frames_per_token", 0), ("p_silence", 1.5), ("noise", -0.1)])
def test_invalid_config(field, value):
    with pytest.raises(ConfigError):
        generate_corpus(SynthConfig(**{field: value}))


def test_degenerate_expansion_gives_exact_prototypes():
    cfg = SynthConfig(noise=0.0, p_silence=0.0, min_frames_per_token=1, max_frames_per_token=1, n_utterances=50)
    corpus, _ = generate_corpus(cfg)
    proto = {}
    for u in corpus:
        assert u.n_frames == len(u.transcription)
        for tok, row in zip(u.transcription, u.speech):
            proto.setdefault(tok, row)
            np.testing.assert_array_equal(proto[tok], row)
    rows = np.stack(list(proto.values()))
    assert len(np.unique(rows, axis=0)) == len(proto)


def test_generation_is_deterministic():
    cfg = SynthConfig(n_utterances=30)
    a, _ = generate_corpus(cfg)
    b, _ = generate_corpus(cfg)
    for x, y in zip(a, b):
        assert x.id == y.id and x.transcription == y.transcription and x.translation == y.translation
        assert x.speech.tobytes() == y.speech.tobytes()
    c, _ = generate_corpus(SynthConfig(n_utterances=30, seed=18))
    assert any(x.transcription != z.transcription for x, z in zip(a, c))


def test_frame_ratio_matches_closed_form():
    cfg = SynthConfig(min_frames_per_token=2, max_frames_per_token=6, n_utterances=1500)
    corpus, _ = generate_corpus(cfg)
    ratio = np.mean([u.n_frames / len(u.transcription) for u in corpus])
    assert abs(ratio - expected_frames_per_token(cfg)) <= 0.3


def test_translation_is_permute_then_reverse():
    cfg = SynthConfig(n_utterances=40)
    corpus, vocab = generate_corpus(cfg)
    m = translation_map(cfg)
    assert sorted(m.values()) == sorted(m.keys())
    for u in corpus:
        assert u.translation == [m[t] for t in u.transcription][::-1]
        assert all(3 <= t < len(vocab) for t in u.transcription + u.translation)
        assert all(a != b for a, b in zip(u.transcription, u.transcription[1:]))
        assert cfg.min_len <= len(u.transcription) <= cfg.max_len


def test_synthetic_speech_is_longer_after_downsampling():
    corpus, _ = generate_corpus(SynthConfig(n_utterances=200))
    for u in corpus:
        assert len(downsample(u.speech)) >= len(u.transcription)


@pytest.mark.parametrize("t, rows", [(1, [0]), (3, [0]), (7, [0, 3, 6]), (9, [0, 3, 6])])
def test_downsample_rows(t, rows):
    x = np.arange(t * 2, dtype=np.float32).reshape(t, 2)
    np.testing.assert_array_equal(downsample(x), x[rows])


@given(st.integers(1, 60))
def test_downsample_composition(t):
    x = np.random.default_rng(t).normal(size=(t, 3))
    np.testing.assert_array_equal(downsample(downsample(x)), x[::9])
    assert len(downsample(x)) == -(-t // 3)


# ------------------------------------------------------------------- disk I/O

def test_feature_file_length(tmp_path):
    x = np.ones((7, 5), dtype=np.float32)
    write_features(tmp_path / "a.stfe", x)
    assert (tmp_path / "a.stfe").stat().st_size == 12 + 4 * 7 * 5
    np.testing.assert_array_equal(read_features(tmp_path / "a.stfe"), x)


def test_zero_length_feature_file_rejected(tmp_path):
    import struct
    (tmp_path / "z.stfe").write_bytes(struct.pack("<4sII", b"STFE", 0, 4))
    with pytest.raises(FeatureFormatError):
        read_features(tmp_path / "z.stfe")


def test_truncated_feature_file_rejected(tmp_path):
    write_features(tmp_path / "a.stfe", np.ones((3, 2), dtype=np.float32))
    raw = (tmp_path / "a.stfe").read_bytes()
    (tmp_path / "a.stfe").write_bytes(raw[:-4])
    with pytest.raises(FeatureFormatError):
        read_features(tmp_path / "a.stfe")


def test_manifest_with_zero_frame_row(tmp_path):
    import struct
    v = Vocabulary.synthetic(6)
    v.save(tmp_path / "vocab.txt")
    (tmp_path / "z.stfe").write_bytes(struct.pack("<4sII", b"STFE", 0, 4))
    (tmp_path / "m.tsv").write_text("u1\tz.stfe\tw00\tw01\n")
    with pytest.raises(FeatureFormatError):
        load_manifest(tmp_path / "m.tsv")


def test_corpus_roundtrip(tmp_path):
    corpus, vocab = generate_corpus(SynthConfig(n_utterances=25))
    manifest = write_corpus(corpus, tmp_path, vocab)
    back = load_manifest(manifest)
    assert len(back) == len(corpus)
    for a, b in zip(corpus, back):
        assert isinstance(b, Utterance)
        assert (a.id, a.transcription, a.translation) == (b.id, b.transcription, b.translation)
        assert a.speech.tobytes() == b.speech.tobytes()


def test_asr_manifest_roundtrip(tmp_path):
    corpus, vocab = generate_corpus(SynthConfig(n_utterances=5))
    asr = [AsrUtterance(u.id, u.speech, u.transcription) for u in corpus]
    back = load_manifest(write_corpus(asr, tmp_path, vocab))
    assert all(type(b) is AsrUtterance for b in back)
    assert [b.transcription for b in back] == [u.transcription for u in corpus]


def test_empty_corpus(tmp_path):
    manifest = write_corpus([], tmp_path, Vocabulary.synthetic(6))
    assert all(line.startswith("#") for line in manifest.read_text().splitlines())
    assert load_manifest(manifest) == []


def test_malformed_manifest_row_reports_line(tmp_path):
    Vocabulary.synthetic(6).save(tmp_path / "vocab.txt")
    (tmp_path / "m.tsv").write_text("# header\n\nonly-one-column\n")
    with pytest.raises(ManifestParseError, match=":3:"):
        load_manifest(tmp_path / "m.tsv")


# ------------------------------------------------------------------- batching

def _random_corpus(rng, n):
    return [AsrUtterance(f"u{i}", np.zeros((int(rng.integers(1, 40)), 2), np.float32), [3])
            for i in range(n)]


def test_batches_partition_and_budget_over_random_corpora():
    rng = np.random.default_rng(0)
    for trial in range(100):
        corpus = _random_corpus(rng, int(rng.integers(1, 60)))
        budget = int(rng.integers(40, 200))
        batches = make_batches(corpus, budget, seed=trial)
        ids = [i for b in batches for i in b.ids]
        assert sorted(ids) == sorted(u.id for u in corpus)
        assert all(b.n_frames <= budget for b in batches)


def test_budget_of_one_utterance_gives_singletons():
    corpus = [AsrUtterance(f"u{i}", np.zeros((10, 2), np.float32), [3]) for i in range(5)]
    assert [len(b) for b in make_batches(corpus, 10, seed=0)] == [1] * 5


def test_over_budget_utterance_named():
    corpus = [AsrUtterance("long-one", np.zeros((50, 2), np.float32), [3])]
    with pytest.raises(ConfigError, match="long-one"):
        make_batches(corpus, 10, seed=0)


def test_batch_order_depends_only_on_seed():
    corpus = _random_corpus(np.random.default_rng(1), 40)
    first = [b.ids for b in make_batches(corpus, 60, seed=4)]
    assert first == [b.ids for b in make_batches(corpus, 60, seed=4)]
    assert first != [b.ids for b in make_batches(corpus, 60, seed=5)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=6))
def test_masks_delimit_content(shapes):
    utts = [Utterance(f"u{i}", np.ones((t, 3), np.float32), [4] * x, [5] * y) for i, (t, x, y) in enumerate(shapes)]
    b = collate(utts)
    for i, (t, x, y) in enumerate(shapes):
        assert b.speech_mask[i].sum() == t and b.speech_mask[i, :t].all()
        assert np.all(b.speech[i, t:] == 0)
        assert (b.src[i] != PAD).sum() == x and np.array_equal(b.src_mask[i], b.src[i] != PAD)
        assert np.array_equal(b.tgt_mask[i], b.tgt[i] != PAD)

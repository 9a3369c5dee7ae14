import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2m.dataset import (
    FeatureRecord,
    RecordSchemaError,
    SplitSpec,
    clip_or_pad,
    load_dataset,
    load_record,
    record_from_dict,
    record_to_dict,
    save_dataset,
    save_record,
    split_dataset,
    synthesize_dataset,
    video_feature_dim,
)
from v2m.features import NEUTRAL_INDEX
from v2m.theory import (
    A_MINOR,
    C_MAJOR,
    PAD_TOKEN,
    SILENCE,
    ChordQuality,
    ChordSymbol,
    Key,
    Mode,
    encode_sequence,
    token_quality,
)
from v2m.training import EMOTION_QUALITY_GROUPS


def tiny_record(t=4, d_sem=3, id="rec0"):
    rng = np.random.default_rng(t * 100 + d_sem)
    return FeatureRecord(
        id=id,
        semantic=rng.normal(size=(t, d_sem)),
        emotion=rng.uniform(size=(t, 6)),
        scene_offset=np.arange(t),
        motion=rng.uniform(size=t),
        chords=[ChordSymbol(i % 12, ChordQuality(i % 13)) for i in range(t)],
        key=C_MAJOR,
        note_density=rng.integers(0, 20, size=t),
        loudness=rng.uniform(size=t),
    )


def test_video_feature_dim():
    assert video_feature_dim(16) == 24
    assert video_feature_dim(512) == 520


def test_video_features_layout():
    record = tiny_record(t=3, d_sem=2)
    video = record.video_features()
    assert video.shape == (3, 10)
    assert np.array_equal(video[:, 0], record.scene_offset.astype(float))
    assert np.array_equal(video[:, 1], record.motion)
    assert np.array_equal(video[:, 2:8], record.emotion)
    assert np.array_equal(video[:, 8:], record.semantic)


def test_record_length_mismatch_names_field():
    with pytest.raises(RecordSchemaError, match="motion"):
        FeatureRecord(
            id="bad",
            semantic=np.zeros((3, 2)),
            emotion=np.zeros((3, 6)),
            scene_offset=np.zeros(3, dtype=int),
            motion=np.zeros(2),
            chords=[SILENCE] * 3,
            key=C_MAJOR,
            note_density=np.zeros(3, dtype=int),
            loudness=np.zeros(3),
        )


def test_record_rejects_unnormalized_key():
    with pytest.raises(RecordSchemaError, match="reference key"):
        FeatureRecord(
            id="bad",
            semantic=np.zeros((1, 2)),
            emotion=np.zeros((1, 6)),
            scene_offset=np.zeros(1, dtype=int),
            motion=np.zeros(1),
            chords=[SILENCE],
            key=Key(7, Mode.major),
            note_density=np.zeros(1, dtype=int),
            loudness=np.zeros(1),
        )


def test_record_round_trip_exact(tmp_path):
    record = tiny_record(t=5, d_sem=4)
    path = tmp_path / "rec.json"
    save_record(record, path)
    loaded = load_record(path)
    assert loaded.id == record.id
    assert loaded.key == record.key
    assert loaded.chords == record.chords
    for name in ("semantic", "emotion", "scene_offset", "motion",
                 "note_density", "loudness"):
        assert np.array_equal(getattr(loaded, name), getattr(record, name)), name


def test_record_from_dict_field_errors():
    doc = record_to_dict(tiny_record())
    short = {k: v for k, v in doc.items() if k != "loudness"}
    with pytest.raises(RecordSchemaError, match="missing fields.*loudness"):
        record_from_dict(short)
    extra = dict(doc, tempo=120)
    with pytest.raises(RecordSchemaError, match="unknown fields.*tempo"):
        record_from_dict(extra)


def test_record_from_dict_bad_chord_names_index():
    doc = record_to_dict(tiny_record(t=3))
    doc["chords"][1] = "H:maj"
    with pytest.raises(RecordSchemaError, match=r"chords\[1\]"):
        record_from_dict(doc)


def test_record_from_dict_checks_d_sem_and_loudness():
    doc = record_to_dict(tiny_record(t=2, d_sem=3))
    with pytest.raises(RecordSchemaError, match="d_sem 3 != dataset d_sem 5"):
        record_from_dict(doc, expected_d_sem=5)
    doc["loudness"][0] = 1.5
    with pytest.raises(RecordSchemaError, match=r"loudness outside \[0, 1\]"):
        record_from_dict(doc)


def test_clip_or_pad_pads_short_record():
    record = tiny_record(t=3, d_sem=2)
    ex = clip_or_pad(record, t_max=6)
    assert ex.tokens.shape == (6,)
    assert np.array_equal(ex.tokens[:3], encode_sequence(record.chords))
    assert (ex.tokens[3:] == PAD_TOKEN).all()
    assert ex.video.shape == (6, 10)
    assert (ex.video[3:] == 0).all()
    assert ex.mask.tolist() == [True] * 3 + [False] * 3
    assert ex.key == record.key


def test_clip_or_pad_clips_long_record():
    record = tiny_record(t=8, d_sem=2)
    ex = clip_or_pad(record, t_max=5)
    assert ex.tokens.shape == (5,)
    assert np.array_equal(ex.tokens, encode_sequence(record.chords[:5]))
    assert ex.mask.all()
    assert np.array_equal(ex.video, record.video_features()[:5])


def test_clip_or_pad_exact_length():
    record = tiny_record(t=4, d_sem=2)
    ex = clip_or_pad(record, t_max=4)
    assert ex.mask.all()
    assert np.array_equal(ex.tokens, encode_sequence(record.chords))
    assert np.array_equal(ex.loudness, record.loudness)
    assert np.array_equal(ex.note_density, record.note_density.astype(float))


def test_dataset_round_trip(tmp_path):
    records = [tiny_record(t=3, d_sem=4, id=f"r{i}") for i in range(3)]
    save_dataset(records, tmp_path / "data")
    loaded = load_dataset(tmp_path / "data")
    assert [r.id for r in loaded] == ["r0", "r1", "r2"]
    assert all(np.array_equal(a.semantic, b.semantic)
               for a, b in zip(records, loaded))


def test_save_dataset_rejects_mixed_d_sem(tmp_path):
    records = [tiny_record(t=3, d_sem=4, id="a"), tiny_record(t=3, d_sem=5, id="b")]
    with pytest.raises(RecordSchemaError, match="disagree on d_sem"):
        save_dataset(records, tmp_path / "data")


def test_split_sizes():
    train, val, test = split_dataset([f"v{i}" for i in range(10)], SplitSpec())
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    train, val, test = split_dataset([f"v{i}" for i in range(748)], SplitSpec())
    assert (len(train), len(val), len(test)) == (598, 74, 76)


def test_split_deterministic_and_seed_sensitive():
    ids = [f"v{i}" for i in range(30)]
    first = split_dataset(ids, SplitSpec(shuffle_seed=3))
    second = split_dataset(ids, SplitSpec(shuffle_seed=3))
    other = split_dataset(ids, SplitSpec(shuffle_seed=4))
    assert first == second
    assert first != other


@given(st.integers(1, 200), st.integers(0, 50))
def test_split_partition_property(n, seed):
    ids = [f"v{i}" for i in range(n)]
    train, val, test = split_dataset(ids, SplitSpec(shuffle_seed=seed))
    assert len(train) == n * 8 // 10
    assert len(val) == n * 1 // 10
    assert sorted(train + val + test) == sorted(ids)


def test_split_validation():
    with pytest.raises(ValueError):
        split_dataset([], SplitSpec())
    with pytest.raises(ValueError):
        SplitSpec(ratios=(7, 2, 2))


def test_synthesize_deterministic():
    a = synthesize_dataset(3, seed=5, length_s=10, d_sem=4)
    b = synthesize_dataset(3, seed=5, length_s=10, d_sem=4)
    assert [r.id for r in a] == ["synth0000", "synth0001", "synth0002"]
    for ra, rb in zip(a, b):
        assert ra.chords == rb.chords
        assert np.array_equal(ra.semantic, rb.semantic)
        assert np.array_equal(ra.emotion, rb.emotion)
    c = synthesize_dataset(3, seed=6, length_s=10, d_sem=4)
    assert any(ra.chords != rc.chords for ra, rc in zip(a, c))


def test_synthesize_record_shapes_and_ranges():
    records = synthesize_dataset(4, seed=2, length_s=12, d_sem=5)
    for record in records:
        assert record.length_s == 12
        assert record.d_sem == 5
        assert record.key in (C_MAJOR, A_MINOR)
        assert record.loudness.min() >= 0 and record.loudness.max() <= 1
        assert (record.note_density >= 0).all()
        assert record.emotion.min() >= 0 and record.emotion.max() <= 1


def test_synthesize_emotion_matches_quality_group():
    records = synthesize_dataset(6, seed=0, length_s=30, d_sem=4)
    matched = total = 0
    for record in records:
        labels = record.emotion.argmax(axis=1)
        for chord, label in zip(record.chords, labels):
            if chord is SILENCE:
                assert label == NEUTRAL_INDEX
                continue
            total += 1
            matched += chord.quality in EMOTION_QUALITY_GROUPS[label]
    assert total > 0
    assert matched / total >= 0.9


def test_synthesize_roots_are_diatonic():
    for record in synthesize_dataset(4, seed=9, length_s=20, d_sem=3):
        allowed = {0, 2, 4, 5, 7, 9, 11}
        for chord in record.chords:
            if chord is not SILENCE:
                assert chord.root in allowed


def test_synthesize_validates_n():
    with pytest.raises(ValueError):
        synthesize_dataset(0)


def test_padded_tokens_match_quality_lookup(small_examples):
    for ex in small_examples:
        for token, real in zip(ex.tokens, ex.mask):
            if real and token >= 3:
                token_quality(int(token))

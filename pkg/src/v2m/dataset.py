"""Feature records: schema, file I/O, alignment, splits, synthetic corpus.

A dataset is a directory of JSON record documents plus a manifest listing
record ids and the shared semantic-vector width. Records are immutable
after load; loading may fan out across files.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import theory
from .features import EMOTION_NAMES, NEUTRAL_INDEX
from .theory import (
    A_MINOR,
    C_MAJOR,
    SILENCE,
    ChordQuality,
    ChordSymbol,
    Key,
    Mode,
    format_chord,
    parse_chord,
    parse_key,
)

T_MAX_DEFAULT = 300
MANIFEST_NAME = "manifest.json"

# Video feature vector layout: scene offset, motion, 6 emotions, semantic.
N_SCALAR_FEATURES = 2
N_EMOTIONS = len(EMOTION_NAMES)


def video_feature_dim(d_sem: int) -> int:
    return N_SCALAR_FEATURES + N_EMOTIONS + d_sem


class RecordSchemaError(ValueError):
    """A record document violates the schema (message names field and index)."""


@dataclass
class FeatureRecord:
    """One video's aligned per-second feature sequences.

    The key is the normalized reference (C major or A minor); chords are
    already transposed to it.
    """

    id: str
    semantic: np.ndarray        # (T, d_sem) float
    emotion: np.ndarray         # (T, 6) float in [0, 1]
    scene_offset: np.ndarray    # (T,) int
    motion: np.ndarray          # (T,) float
    chords: list                # length T of ChordSymbol | SILENCE
    key: Key
    note_density: np.ndarray    # (T,) int
    loudness: np.ndarray        # (T,) float in [0, 1]

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.float64)
        self.emotion = np.asarray(self.emotion, dtype=np.float64)
        self.scene_offset = np.asarray(self.scene_offset, dtype=np.int64)
        self.motion = np.asarray(self.motion, dtype=np.float64)
        self.note_density = np.asarray(self.note_density, dtype=np.int64)
        self.loudness = np.asarray(self.loudness, dtype=np.float64)
        t = len(self.chords)
        for name in ("semantic", "emotion", "scene_offset", "motion", "note_density", "loudness"):
            seq = getattr(self, name)
            if seq.shape[0] != t:
                raise RecordSchemaError(
                    f"record {self.id!r}: {name} has length {seq.shape[0]}, chords has {t}"
                )
        if self.semantic.ndim != 2:
            raise RecordSchemaError(f"record {self.id!r}: semantic must be 2-d")
        if self.emotion.ndim != 2 or self.emotion.shape[1] != N_EMOTIONS:
            raise RecordSchemaError(f"record {self.id!r}: emotion must be (T, {N_EMOTIONS})")
        if self.key not in (C_MAJOR, A_MINOR):
            raise RecordSchemaError(
                f"record {self.id!r}: key {self.key} is not a normalized reference key"
            )

    @property
    def length_s(self) -> int:
        return len(self.chords)

    @property
    def d_sem(self) -> int:
        return self.semantic.shape[1]

    def video_features(self) -> np.ndarray:
        """Concatenated per-second video vector (T, 2 + 6 + d_sem)."""
        return np.concatenate(
            [
                self.scene_offset[:, None].astype(np.float64),
                self.motion[:, None],
                self.emotion,
                self.semantic,
            ],
            axis=1,
        )


@dataclass
class PaddedExample:
    """A record clipped/padded to a fixed length, model-ready.

    Chord steps beyond the real length hold the PAD token; numeric
    channels hold zeros; mask marks real steps.
    """

    id: str
    tokens: np.ndarray          # (T_max,) int token ids
    video: np.ndarray           # (T_max, 2 + 6 + d_sem) float
    emotion: np.ndarray         # (T_max, 6) float
    note_density: np.ndarray    # (T_max,) float
    loudness: np.ndarray        # (T_max,) float
    mask: np.ndarray            # (T_max,) bool, True = real step
    key: Key


def clip_or_pad(record: FeatureRecord, t_max: int = T_MAX_DEFAULT) -> PaddedExample:
    """Clip sequences longer than t_max; pad shorter ones."""
    t = min(record.length_s, t_max)
    tokens = np.full(t_max, theory.PAD_TOKEN, dtype=np.int64)
    tokens[:t] = theory.encode_sequence(record.chords[:t])
    video = np.zeros((t_max, video_feature_dim(record.d_sem)))
    video[:t] = record.video_features()[:t]
    emotion = np.zeros((t_max, N_EMOTIONS))
    emotion[:t] = record.emotion[:t]
    density = np.zeros(t_max)
    density[:t] = record.note_density[:t].astype(np.float64)
    loudness = np.zeros(t_max)
    loudness[:t] = record.loudness[:t]
    mask = np.zeros(t_max, dtype=bool)
    mask[:t] = True
    return PaddedExample(record.id, tokens, video, emotion, density, loudness, mask, record.key)


def record_to_dict(record: FeatureRecord) -> dict:
    return {
        "id": record.id,
        "key": str(record.key),
        "chords": [format_chord(c) for c in record.chords],
        "semantic": record.semantic.tolist(),
        "emotion": record.emotion.tolist(),
        "scene_offset": record.scene_offset.tolist(),
        "motion": record.motion.tolist(),
        "note_density": record.note_density.tolist(),
        "loudness": record.loudness.tolist(),
    }


RECORD_FIELDS = (
    "id", "key", "chords", "semantic", "emotion",
    "scene_offset", "motion", "note_density", "loudness",
)


def record_from_dict(doc: dict, expected_d_sem: int | None = None) -> FeatureRecord:
    missing = [f for f in RECORD_FIELDS if f not in doc]
    if missing:
        raise RecordSchemaError(f"record document missing fields: {missing}")
    unknown = [f for f in doc if f not in RECORD_FIELDS]
    if unknown:
        raise RecordSchemaError(f"record document has unknown fields: {unknown}")
    chords = []
    for i, text in enumerate(doc["chords"]):
        try:
            chords.append(parse_chord(text))
        except theory.ChordParseError as exc:
            raise RecordSchemaError(f"record {doc['id']!r}: chords[{i}]: {exc}") from exc
    record = FeatureRecord(
        id=doc["id"],
        semantic=doc["semantic"],
        emotion=doc["emotion"],
        scene_offset=doc["scene_offset"],
        motion=doc["motion"],
        chords=chords,
        key=parse_key(doc["key"]),
        note_density=doc["note_density"],
        loudness=doc["loudness"],
    )
    if expected_d_sem is not None and record.d_sem != expected_d_sem:
        raise RecordSchemaError(
            f"record {record.id!r}: d_sem {record.d_sem} != dataset d_sem {expected_d_sem}"
        )
    if record.loudness.size and (record.loudness.min() < 0 or record.loudness.max() > 1):
        raise RecordSchemaError(f"record {record.id!r}: loudness outside [0, 1]")
    return record


def save_record(record: FeatureRecord, path) -> None:
    Path(path).write_text(json.dumps(record_to_dict(record)), encoding="utf-8")


def load_record(path, expected_d_sem: int | None = None) -> FeatureRecord:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return record_from_dict(doc, expected_d_sem)


def save_dataset(records, out_dir) -> None:
    """Write one JSON document per record plus the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    d_sems = {r.d_sem for r in records}
    if len(d_sems) > 1:
        raise RecordSchemaError(f"records disagree on d_sem: {sorted(d_sems)}")
    for record in records:
        save_record(record, out_dir / f"{record.id}.json")
    manifest = {"ids": [r.id for r in records], "d_sem": d_sems.pop() if d_sems else 0}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest), encoding="utf-8")


def load_dataset(data_dir) -> list[FeatureRecord]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    return [
        load_record(data_dir / f"{rid}.json", expected_d_sem=manifest["d_sem"])
        for rid in manifest["ids"]
    ]


@dataclass(frozen=True)
class SplitSpec:
    """8:1:1 train/val/test split, shuffled by seed."""

    shuffle_seed: int = 0
    ratios: tuple[int, int, int] = (8, 1, 1)

    def __post_init__(self):
        if sum(self.ratios) != 10:
            raise ValueError(f"split ratios {self.ratios} must sum to 10")


def split_dataset(ids, spec: SplitSpec):
    """Deterministic partition into train/val/test id lists.

    Sizes are floor(0.8 n) / floor(0.1 n) / remainder.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    shuffled = ids[:]
    random.Random(spec.shuffle_seed).shuffle(shuffled)
    n = len(shuffled)
    n_train = n * spec.ratios[0] // 10
    n_val = n * spec.ratios[1] // 10
    return (
        shuffled[:n_train],
        shuffled[n_train: n_train + n_val],
        shuffled[n_train + n_val:],
    )


# Chord pools for the synthetic corpus: diatonic roots per reference key,
# qualities drawn from the emotion group active in the current segment.
_DIATONIC_ROOTS = {
    Mode.major: (0, 2, 4, 5, 7, 9, 11),
    Mode.minor: (9, 11, 0, 2, 4, 5, 7),
}

_EMOTION_QUALITY_POOLS = {
    0: (ChordQuality.maj, ChordQuality.sus4, ChordQuality.dom7),       # exciting
    1: (ChordQuality.dim, ChordQuality.min7, ChordQuality.dim7,
        ChordQuality.hdim7),                                           # fearful
    2: (ChordQuality.dim, ChordQuality.sus4, ChordQuality.min7,
        ChordQuality.dom7),                                            # tense
    3: (ChordQuality.min7, ChordQuality.min, ChordQuality.sus2),       # sad
    4: (ChordQuality.maj, ChordQuality.maj6, ChordQuality.maj7),       # relaxing
}


def synthesize_dataset(
    n: int,
    seed: int = 0,
    length_s: int = 30,
    d_sem: int = 16,
    silence_prob: float = 0.04,
) -> list[FeatureRecord]:
    """Generate a desk-scale corpus with learnable structure.

    Chords follow diatonic progressions whose qualities come from the
    quality group of the segment's emotion, so emotion argmax matches the
    chord's emotion group on every sounding step (silent steps are
    labeled neutral). Density and loudness track motion, giving the
    expressive regressors real signal. Semantic vectors carry a per-root
    prototype plus noise.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    # One prototype per root pitch class plus one for silence.
    prototypes = rng.normal(0.0, 1.0, size=(13, d_sem))
    records = []
    for index in range(n):
        key = C_MAJOR if rng.random() < 0.5 else A_MINOR
        roots = _DIATONIC_ROOTS[key.mode]

        # Emotion segments of 4-8 seconds, one of the five mapped emotions.
        emotion_ids = np.empty(length_s, dtype=np.int64)
        t = 0
        while t < length_s:
            seg = int(rng.integers(4, 9))
            emotion_ids[t: t + seg] = int(rng.integers(0, 5))
            t += seg

        chords = []
        t = 0
        while t < length_s:
            if rng.random() < silence_prob:
                chords.append(SILENCE)
                t += 1
                continue
            pool = _EMOTION_QUALITY_POOLS[int(emotion_ids[t])]
            chord = ChordSymbol(
                int(rng.choice(roots)), pool[int(rng.integers(0, len(pool)))]
            )
            run = int(rng.integers(1, 3))  # hold each chord 1-2 seconds
            for _ in range(min(run, length_s - t)):
                chords.append(chord)
                t += 1

        emotion = rng.uniform(0.0, 0.5, size=(length_s, N_EMOTIONS))
        for t, chord in enumerate(chords):
            target = NEUTRAL_INDEX if chord is SILENCE else int(emotion_ids[t])
            emotion[t, target] = 0.6 + 0.4 * rng.random()

        # Scene runs of 5-10 seconds; offsets restart at each change.
        scene_offset = np.zeros(length_s, dtype=np.int64)
        t = 0
        while t < length_s:
            seg = int(rng.integers(5, 11))
            for j in range(min(seg, length_s - t)):
                scene_offset[t + j] = j
            t += seg

        # Smooth motion in [0, 1]; density and loudness follow it.
        phase = rng.uniform(0, 2 * np.pi)
        steps = np.arange(length_s)
        motion = 0.5 + 0.4 * np.sin(2 * np.pi * steps / 17.0 + phase)
        motion = np.clip(motion + rng.normal(0, 0.05, length_s), 0.0, 1.0)
        note_density = np.clip(
            np.floor(3.0 + 20.0 * motion + rng.normal(0, 1.0, length_s) + 0.5),
            0, None,
        ).astype(np.int64)
        loudness = np.clip(0.15 + 0.7 * motion + rng.normal(0, 0.05, length_s), 0.0, 1.0)

        root_ids = [12 if c is SILENCE else c.root for c in chords]
        semantic = prototypes[root_ids] + rng.normal(0.0, 0.3, size=(length_s, d_sem))

        records.append(
            FeatureRecord(
                id=f"synth{index:04d}",
                semantic=semantic,
                emotion=emotion,
                scene_offset=scene_offset,
                motion=motion,
                chords=chords,
                key=key,
                note_density=note_density,
                loudness=loudness,
            )
        )
    return records

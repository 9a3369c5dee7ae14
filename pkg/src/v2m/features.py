"""Per-second music and video feature computation.

Everything here works on ingested primitives: transcribed note events,
RMS frame values, RGB frame arrays, scene ids, and raw emotion
probability series. All functions are pure; callers may parallelize
across videos freely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .theory import Key, Mode

log = logging.getLogger(__name__)

RMS_FULL_SCALE = 32767.0
RMS_SILENCE_EPS = 1e-9

EMOTION_NAMES = ("exciting", "fearful", "tense", "sad", "relaxing", "neutral")
NEUTRAL_INDEX = EMOTION_NAMES.index("neutral")

PROFILE_NAMES = ("krumhansl_schmuckler", "temperley_kostka_payne", "bellman_budge")


@dataclass(frozen=True)
class NoteEvent:
    """One transcribed MIDI note: onset/duration in seconds."""

    onset: float
    duration: float
    pitch: int
    velocity: int = 64

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"note onset {self.onset} is negative")
        if self.duration <= 0:
            raise ValueError(f"note duration {self.duration} must be > 0")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"note pitch {self.pitch} outside MIDI range")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"note velocity {self.velocity} outside [1, 127]")


@dataclass(frozen=True)
class RgbFrame:
    """One video frame as a (height, width, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"frame must be (h, w, 3), got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"frame must be uint8, got {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class KeyProfileSet:
    """A named pair of 12-entry major/minor pitch-class templates."""

    name: str
    major_profile: tuple[float, ...]
    minor_profile: tuple[float, ...]

    def __post_init__(self):
        for label, profile in (("major", self.major_profile), ("minor", self.minor_profile)):
            if len(profile) != 12:
                raise ValueError(
                    f"profile {self.name}/{label} has {len(profile)} entries, want 12"
                )
            if not all(math.isfinite(v) for v in profile):
                raise ValueError(f"profile {self.name}/{label} has non-finite entries")


def parse_key_profiles(text: str) -> dict[str, KeyProfileSet]:
    """Parse the key-profile data format: named blocks of major/minor 12-tuples."""
    blocks: dict[str, dict[str, tuple[float, ...]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            blocks[current] = {}
            continue
        name, sep, values = line.partition("=")
        if not sep or current is None:
            raise ValueError(f"key profile file line {lineno}: unparseable {raw!r}")
        name = name.strip()
        if name not in ("major", "minor"):
            raise ValueError(f"key profile file line {lineno}: unknown row {name!r}")
        blocks[current][name] = tuple(float(v) for v in values.split(","))
    profiles = {}
    for block_name, rows in blocks.items():
        if set(rows) != {"major", "minor"}:
            raise ValueError(f"profile block {block_name!r} missing major or minor row")
        profiles[block_name] = KeyProfileSet(block_name, rows["major"], rows["minor"])
    return profiles


def load_key_profiles(path=None) -> dict[str, KeyProfileSet]:
    """Load key profiles from `path`, or the packaged defaults."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = resources.files("v2m.data").joinpath("key_profiles.txt").read_text("utf-8")
    profiles = parse_key_profiles(text)
    missing = [n for n in PROFILE_NAMES if n not in profiles]
    if missing:
        raise ValueError(f"key profile file missing blocks: {missing}")
    return profiles


def note_density(notes, total_seconds: int) -> list[int]:
    """Count of note onsets per one-second window, over [0, total_seconds).

    A note is counted once, in the second containing its onset; notes at or
    beyond total_seconds are outside the window and ignored.
    """
    counts = [0] * total_seconds
    for note in notes:
        if note.onset < 0:
            raise ValueError(f"note onset {note.onset} is negative")
        second = int(note.onset)
        if second < total_seconds:
            counts[second] += 1
    return counts


def loudness_from_rms(rms: float) -> float:
    """Map an RMS amplitude (full scale 32767) to [0, 1] through decibels.

    The dB conversion and the inverse transform collapse algebraically to
    rms / 32767, but the two-step route is kept so intermediate dB values
    mirror how loudness is defined. RMS below 1e-9 maps to exactly 0;
    above full scale it is clamped with a warning.
    """
    if rms < 0:
        raise ValueError(f"rms {rms} is negative")
    if rms < RMS_SILENCE_EPS:
        return 0.0
    if rms > RMS_FULL_SCALE:
        log.warning("rms %.6g above full scale %.0f; clamping", rms, RMS_FULL_SCALE)
        rms = RMS_FULL_SCALE
    db = 20.0 * math.log10(rms / RMS_FULL_SCALE)
    return 10.0 ** (db / 20.0)


def pitch_class_histogram(notes) -> np.ndarray:
    """Duration-weighted pitch-class histogram, index 0 = C."""
    hist = np.zeros(12)
    for note in notes:
        hist[note.pitch % 12] += note.duration
    return hist


def detect_key_single(notes, profiles: KeyProfileSet) -> Key:
    """Best key under Pearson correlation against 24 rotated profiles.

    The profile for tonic `t` is the C-rooted template rolled so that its
    tonic entry lands on pitch class `t`. Ties resolve to the earliest
    candidate in scan order (majors C..B, then minors C..B).
    """
    if not notes:
        raise ValueError("key detection needs at least one note")
    hist = pitch_class_histogram(notes)
    best_key = None
    best_corr = -np.inf
    for mode, profile in ((Mode.major, profiles.major_profile), (Mode.minor, profiles.minor_profile)):
        template = np.asarray(profile)
        for tonic in range(12):
            corr = np.corrcoef(hist, np.roll(template, tonic))[0, 1]
            if np.isnan(corr):
                corr = -np.inf
            if corr > best_corr:
                best_corr = corr
                best_key = Key(tonic, mode)
    return best_key


def vote_key(candidates) -> Key:
    """Majority vote over three key candidates.

    Candidate order is (krumhansl_schmuckler, temperley_kostka_payne,
    bellman_budge); a three-way tie falls back to the first slot.
    """
    candidates = list(candidates)
    if len(candidates) != 3:
        raise ValueError(f"expected exactly 3 candidates, got {len(candidates)}")
    for key in candidates:
        if candidates.count(key) >= 2:
            return key
    return candidates[0]


def detect_key(notes, profiles: dict[str, KeyProfileSet] | None = None) -> Key:
    """Run all three profile sets and vote."""
    if profiles is None:
        profiles = load_key_profiles()
    return vote_key([detect_key_single(notes, profiles[name]) for name in PROFILE_NAMES])


def scene_offsets(scene_ids) -> list[int]:
    """Per-frame index within its run of constant scene id.

    Restarts at 0 on every scene change and increments within a scene.
    """
    scene_ids = list(scene_ids)
    if not scene_ids:
        raise ValueError("scene_ids must be non-empty")
    offsets = []
    run = 0
    for t, scene in enumerate(scene_ids):
        if t > 0 and scene == scene_ids[t - 1]:
            run += 1
        else:
            run = 0
        offsets.append(run)
    return offsets


def motion_values(frames) -> list[float]:
    """Mean absolute RGB difference between consecutive frames.

    Element 0 is 0 (no predecessor); element t averages |frame_t -
    frame_{t-1}| over all pixels and all three channels.
    """
    frames = list(frames)
    values = [0.0]
    for t in range(1, len(frames)):
        a, b = frames[t - 1].pixels, frames[t].pixels
        if a.shape != b.shape:
            raise ValueError(f"frame {t} shape {b.shape} != frame {t-1} shape {a.shape}")
        diff = np.abs(b.astype(np.int16) - a.astype(np.int16))
        values.append(float(diff.mean()))
    return values


def clamp_emotion_probs(probs) -> np.ndarray:
    """Validate/clamp an emotion series to shape (T, 6) in [0, 1]."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(EMOTION_NAMES):
        raise ValueError(f"emotion series must be (T, 6), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        log.warning(
            "emotion probabilities outside [0, 1] (min %.4f, max %.4f); clamping",
            arr.min(), arr.max(),
        )
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def smooth_emotions(series, window: int = 5) -> np.ndarray:
    """Trailing per-class mean over the last `window` seconds.

    The first seconds average over the shorter available prefix, so output
    t is the mean of inputs max(0, t-window+1)..t.
    """
    if window < 1:
        raise ValueError(f"window {window} must be >= 1")
    arr = clamp_emotion_probs(series)
    out = np.empty_like(arr)
    for t in range(arr.shape[0]):
        out[t] = arr[max(0, t - window + 1): t + 1].mean(axis=0)
    return out

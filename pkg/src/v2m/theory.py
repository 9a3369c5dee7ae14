"""Chord and key domain model.

Pitch classes are integers 0-11 with C = 0. A chord is a root pitch class
plus one of 13 qualities; the token vocabulary covers every root/quality
combination plus three specials (PAD, SOS, SILENCE), 159 tokens total.
All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

NOTE_NAME_TO_PC = {
    "C": 0, "C#": 1, "Db": 1, "D": 2, "D#": 3, "Eb": 3,
    "E": 4, "F": 5, "F#": 6, "Gb": 6, "G": 7, "G#": 8,
    "Ab": 8, "A": 9, "A#": 10, "Bb": 10, "B": 11,
    # Enharmonic spellings the letter+accidental grammar also admits.
    "B#": 0, "Fb": 4, "E#": 5, "Cb": 11,
}

PC_TO_NOTE_NAME = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]


class ChordQuality(enum.IntEnum):
    """The 13 chord qualities, in the order the vocabulary enumerates them."""

    maj = 0
    dim = 1
    sus4 = 2
    min7 = 3
    min = 4
    sus2 = 5
    aug = 6
    dim7 = 7
    maj6 = 8
    hdim7 = 9
    dom7 = 10
    min6 = 11
    maj7 = 12


# Semitone templates above the root. Triads get the root doubled an octave
# up at expansion time so every quality exposes at least four tones.
QUALITY_INTERVALS: dict[ChordQuality, tuple[int, ...]] = {
    ChordQuality.maj: (0, 4, 7),
    ChordQuality.min: (0, 3, 7),
    ChordQuality.dim: (0, 3, 6),
    ChordQuality.aug: (0, 4, 8),
    ChordQuality.sus2: (0, 2, 7),
    ChordQuality.sus4: (0, 5, 7),
    ChordQuality.dom7: (0, 4, 7, 10),
    ChordQuality.maj7: (0, 4, 7, 11),
    ChordQuality.min7: (0, 3, 7, 10),
    ChordQuality.dim7: (0, 3, 6, 9),
    ChordQuality.hdim7: (0, 3, 6, 10),
    ChordQuality.maj6: (0, 4, 7, 9),
    ChordQuality.min6: (0, 3, 7, 9),
}

N_ROOTS = 12
N_QUALITIES = len(ChordQuality)

# Special token ids are fixed constants; chord tokens fill [3, 159).
PAD_TOKEN = 0
SOS_TOKEN = 1
SILENCE_TOKEN = 2
N_SPECIALS = 3
VOCAB_SIZE = N_ROOTS * N_QUALITIES + N_SPECIALS


class Mode(enum.Enum):
    major = "major"
    minor = "minor"


class _Silence:
    """Singleton marker for the absence of a chord (the "N" label)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "SILENCE"


SILENCE = _Silence()


@dataclass(frozen=True)
class ChordSymbol:
    """A root pitch class (0-11, C = 0) and a quality."""

    root: int
    quality: ChordQuality

    def __post_init__(self):
        if not 0 <= self.root <= 11:
            raise ValueError(f"chord root {self.root} outside [0, 11]")

    def __str__(self):
        return f"{PC_TO_NOTE_NAME[self.root]}:{self.quality.name}"


@dataclass(frozen=True)
class Key:
    """Tonic pitch class plus major/minor mode."""

    tonic: int
    mode: Mode

    def __post_init__(self):
        if not 0 <= self.tonic <= 11:
            raise ValueError(f"key tonic {self.tonic} outside [0, 11]")

    def __str__(self):
        return f"{PC_TO_NOTE_NAME[self.tonic]}:{self.mode.value}"


C_MAJOR = Key(0, Mode.major)
A_MINOR = Key(9, Mode.minor)


class ChordParseError(ValueError):
    """Raised for chord or key text that does not match the grammar."""


def parse_chord(text: str):
    """Parse ``<root>[#|b]?:<quality>`` or the silence literal ``"N"``.

    Returns a ChordSymbol, or the SILENCE marker for "N". Case-sensitive.
    """
    if text == "N":
        return SILENCE
    root_part, sep, quality_part = text.partition(":")
    if not sep:
        raise ChordParseError(f"malformed chord {text!r}: missing ':'")
    if root_part not in NOTE_NAME_TO_PC:
        raise ChordParseError(f"malformed chord {text!r}: unknown root {root_part!r}")
    try:
        quality = ChordQuality[quality_part]
    except KeyError:
        raise ChordParseError(
            f"malformed chord {text!r}: unknown quality {quality_part!r}"
        ) from None
    return ChordSymbol(NOTE_NAME_TO_PC[root_part], quality)


def format_chord(chord) -> str:
    """Inverse of parse_chord (canonical sharp spelling)."""
    if chord is SILENCE:
        return "N"
    return str(chord)


def parse_key(text: str) -> Key:
    """Parse ``<root>[#|b]?:<major|minor>``, e.g. "C:major"."""
    root_part, sep, mode_part = text.partition(":")
    if not sep or root_part not in NOTE_NAME_TO_PC:
        raise ChordParseError(f"malformed key {text!r}")
    try:
        mode = Mode(mode_part)
    except ValueError:
        raise ChordParseError(f"malformed key {text!r}: unknown mode {mode_part!r}") from None
    return Key(NOTE_NAME_TO_PC[root_part], mode)


def transpose_chord(chord, shift: int):
    """Shift a chord's root by `shift` semitones (mod 12). SILENCE is fixed."""
    if chord is SILENCE:
        return SILENCE
    return ChordSymbol((chord.root + shift) % 12, chord.quality)


def normalize_sequence(chords, key: Key):
    """Transpose a chord sequence so its key becomes C major or A minor.

    Major keys shift to C major, minor keys to A minor; silences pass
    through. Returns (shifted chords, reference key).
    """
    if key.mode is Mode.major:
        shift = (0 - key.tonic) % 12
        target = C_MAJOR
    else:
        shift = (9 - key.tonic) % 12
        target = A_MINOR
    return [transpose_chord(c, shift) for c in chords], target


def chord_tones(chord: ChordSymbol, base_octave: int = 4) -> list[int]:
    """Expand a chord to MIDI pitches rooted in the given octave.

    Triads are extended with the root an octave up, so every chord yields
    at least four tones (C:maj at octave 4 -> [60, 64, 67, 72]). MIDI
    octave numbering puts C4 at 60.
    """
    if chord is SILENCE:
        raise ValueError("SILENCE has no tones")
    base = 12 * (base_octave + 1) + chord.root
    intervals = list(QUALITY_INTERVALS[chord.quality])
    if len(intervals) == 3:
        intervals.append(12)
    pitches = [base + iv for iv in intervals]
    if pitches[0] < 0 or pitches[-1] > 127:
        raise ValueError(f"chord {chord} at octave {base_octave} leaves MIDI range")
    return pitches


def tokenize(symbol) -> int:
    """Map a ChordSymbol / SILENCE / PAD / SOS token id to its integer id."""
    if symbol is SILENCE:
        return SILENCE_TOKEN
    if symbol == PAD_TOKEN or symbol == SOS_TOKEN:
        # Specials are already ids; accepting them keeps sequence encoding uniform.
        return symbol
    return N_SPECIALS + symbol.root * N_QUALITIES + int(symbol.quality)


def detokenize(token_id: int):
    """Inverse of tokenize. Raises for ids outside [0, VOCAB_SIZE)."""
    if not 0 <= token_id < VOCAB_SIZE:
        raise ValueError(f"token id {token_id} outside [0, {VOCAB_SIZE})")
    if token_id == SILENCE_TOKEN:
        return SILENCE
    if token_id in (PAD_TOKEN, SOS_TOKEN):
        return token_id
    index = token_id - N_SPECIALS
    return ChordSymbol(index // N_QUALITIES, ChordQuality(index % N_QUALITIES))


def token_quality(token_id: int) -> ChordQuality | None:
    """Quality of a chord token, or None for specials."""
    if token_id < N_SPECIALS:
        return None
    return ChordQuality((token_id - N_SPECIALS) % N_QUALITIES)


def token_root(token_id: int) -> int | None:
    """Root pitch class of a chord token, or None for specials."""
    if token_id < N_SPECIALS:
        return None
    return (token_id - N_SPECIALS) // N_QUALITIES


def encode_sequence(chords) -> list[int]:
    """Tokenize a sequence of ChordSymbol-or-SILENCE."""
    return [tokenize(c) for c in chords]


def decode_sequence(token_ids) -> list:
    """Detokenize ids back to ChordSymbol-or-SILENCE (specials pass through)."""
    return [detokenize(t) for t in token_ids]

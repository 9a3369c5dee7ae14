"""Standard MIDI file writing and a matching reader.

Output is always format 0, one track, 480 ticks per quarter at 120 bpm,
so one second is exactly 960 ticks. Event bytes are fully determined by
the note list: same notes in, same bytes out.
"""

from __future__ import annotations

import struct

from .features import NoteEvent

TICKS_PER_QUARTER = 480
TEMPO_BPM = 120
TEMPO_US_PER_QUARTER = 500_000
TICKS_PER_SECOND = TICKS_PER_QUARTER * TEMPO_BPM // 60

_HEADER = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, TICKS_PER_QUARTER)
_TEMPO_META = bytes([0xFF, 0x51, 0x03]) + TEMPO_US_PER_QUARTER.to_bytes(3, "big")
_END_OF_TRACK = bytes([0xFF, 0x2F, 0x00])


class MidiParseError(ValueError):
    pass


def encode_var_length(value: int) -> bytes:
    """Variable-length quantity: 7 bits per byte, high bit = continuation."""
    if value < 0:
        raise ValueError(f"delta time must be >= 0, got {value}")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def decode_var_length(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    while True:
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def seconds_to_ticks(seconds: float) -> int:
    return int(seconds * TICKS_PER_SECOND + 0.5)


def _tick_spans(events) -> list[tuple[int, int, int, int]]:
    """(on_tick, off_tick, pitch, velocity) per note, overlaps resolved.

    A note lasts at least one tick. When two notes share a pitch and the
    earlier one is still sounding at the later one's onset, the earlier
    is truncated at that onset so on/off pairs never interleave.
    """
    spans = []
    for ev in events:
        on = seconds_to_ticks(ev.onset)
        off = max(seconds_to_ticks(ev.onset + ev.duration), on + 1)
        spans.append([on, off, ev.pitch, ev.velocity])
    spans.sort(key=lambda s: (s[0], s[2], s[3]))
    last_at_pitch: dict[int, list] = {}
    for span in spans:
        prev = last_at_pitch.get(span[2])
        if prev is not None and prev[1] > span[0]:
            prev[1] = span[0]
        last_at_pitch[span[2]] = span
    return [tuple(s) for s in spans if s[1] > s[0]]


def render_midi(events) -> bytes:
    """Serialize note events to complete SMF bytes."""
    spans = _tick_spans(events)
    # kind 0 = note-off, 1 = note-on; offs sort first at equal ticks.
    messages = []
    for on, off, pitch, velocity in spans:
        messages.append((on, 1, pitch, velocity))
        messages.append((off, 0, pitch, 0))
    messages.sort(key=lambda m: (m[0], m[1], m[2]))

    track = bytearray()
    track += encode_var_length(0)
    track += _TEMPO_META
    tick = 0
    for when, kind, pitch, velocity in messages:
        track += encode_var_length(when - tick)
        tick = when
        status = 0x90 if kind else 0x80
        track += bytes([status, pitch, velocity])
    track += encode_var_length(0)
    track += _END_OF_TRACK
    return _HEADER + struct.pack(">4sI", b"MTrk", len(track)) + bytes(track)


def write_midi(events, path) -> None:
    with open(path, "wb") as handle:
        handle.write(render_midi(events))


def parse_midi(data: bytes) -> tuple[list[NoteEvent], int]:
    """Read SMF bytes back to note events; returns (events, tempo in us).

    Handles running status and treats note-on with velocity 0 as note-off.
    Tick times convert to seconds using the file's tempo and division.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header")
    _, header_len, fmt, ntrks, division = struct.unpack(">4sIHHH", data[:14])
    if header_len != 6 or fmt != 0 or ntrks != 1:
        raise MidiParseError(f"expected single-track format 0, got format {fmt} with {ntrks} tracks")
    if division & 0x8000:
        raise MidiParseError("SMPTE division is not supported")
    pos = 14
    if data[pos: pos + 4] != b"MTrk":
        raise MidiParseError("missing MTrk chunk")
    if len(data) < pos + 8:
        raise MidiParseError("truncated MTrk chunk header")
    track_len = struct.unpack(">I", data[pos + 4: pos + 8])[0]
    pos += 8
    end = pos + track_len
    if len(data) < end:
        raise MidiParseError("truncated MTrk chunk body")

    tempo = TEMPO_US_PER_QUARTER
    tick = 0
    status = None
    open_notes: dict[int, tuple[int, int]] = {}  # pitch -> (on_tick, velocity)
    finished: list[tuple[int, int, int, int]] = []

    def close(pitch: int, off_tick: int) -> None:
        start = open_notes.pop(pitch, None)
        if start is not None:
            finished.append((start[0], off_tick, pitch, start[1]))

    while pos < end:
        delta, pos = decode_var_length(data, pos)
        tick += delta
        byte = data[pos]
        if byte == 0xFF:
            meta_type = data[pos + 1]
            length, pos = decode_var_length(data, pos + 2)
            payload = data[pos: pos + length]
            pos += length
            if meta_type == 0x51:
                tempo = int.from_bytes(payload, "big")
            if meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = decode_var_length(data, pos + 1)
            pos += length
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise MidiParseError(f"running status data byte at offset {pos} with no prior status")
        kind = status & 0xF0
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            first, second = data[pos], data[pos + 1]
            pos += 2
        elif kind in (0xC0, 0xD0):
            first, second = data[pos], 0
            pos += 1
        else:
            raise MidiParseError(f"unsupported status byte 0x{status:02X}")
        if kind == 0x90 and second > 0:
            close(first, tick)  # restruck pitch ends the sounding note
            open_notes[first] = (tick, second)
        elif kind == 0x80 or (kind == 0x90 and second == 0):
            close(first, tick)

    for pitch in sorted(open_notes):
        close(pitch, tick)

    ticks_per_second = division * 1_000_000 / tempo
    events = [
        NoteEvent(
            onset=on / ticks_per_second,
            duration=(off - on) / ticks_per_second,
            pitch=pitch,
            velocity=velocity,
        )
        for on, off, pitch, velocity in sorted(finished)
    ]
    return events, tempo

"""Expressive rendering: arpeggiation patterns, velocity, and the
density/loudness regressors that drive them.

Each generated chord occupies one second. Arpeggiation subdivides the
second into eight 1/8 s slots and plays chord tones according to a
density level; loudness sets key velocity. Regressors predict both
quantities from the per-second video features.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import NoteEvent
from .theory import SILENCE, chord_tones

SLOTS_PER_SECOND = 8
DEFAULT_VELOCITY = 64
VELOCITY_FLOOR = 49
VELOCITY_SPAN = 63

# Five densities of a two-second cycle: sixteen 1/8 s slots, each either a
# rest (0) or the 1-based index of a chord tone (root, third, fifth,
# root-above / seventh). Level 1 is a slow broken chord; level 5 fills
# every slot.
ARPEGGIO_PATTERNS = {
    1: (1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0),
    2: (1, 0, 2, 0, 3, 0, 0, 0, 4, 0, 2, 0, 3, 0, 0, 0),
    3: (1, 0, 2, 0, 3, 0, 4, 0, 3, 0, 2, 0, 3, 0, 4, 0),
    4: (1, 2, 3, 2, 4, 0, 3, 0, 2, 1, 2, 3, 4, 0, 3, 0),
    5: (1, 2, 3, 2, 4, 3, 2, 3, 2, 1, 2, 3, 4, 3, 2, 3),
}

_LEVEL_EDGES = (5, 10, 15, 20)


def density_to_level(density: float) -> int:
    """Map a notes-per-second value to an arpeggiation level 1-5.

    Rounds half up, then bins: <=5 -> 1, 6-10 -> 2, 11-15 -> 3,
    16-20 -> 4, >=21 -> 5.
    """
    if not np.isfinite(density):
        raise ValueError(f"density must be finite, got {density}")
    notes = int(np.floor(max(density, 0.0) + 0.5))
    for level, edge in enumerate(_LEVEL_EDGES, start=1):
        if notes <= edge:
            return level
    return 5


def loudness_to_velocity(loudness: float) -> int:
    """Map loudness in [0, 1] to a MIDI velocity in [49, 112], half up."""
    loudness = min(max(float(loudness), 0.0), 1.0)
    return int(np.floor(VELOCITY_FLOOR + VELOCITY_SPAN * loudness + 0.5))


def arpeggiate(chords, levels) -> list[NoteEvent]:
    """Expand one chord per second into arpeggio notes.

    Runs of the same chord share the two-second pattern cycle: seconds at
    even positions within the run play the first eight slots, odd
    positions the last eight. A note sustains until the next sounded slot
    in the run, or to the run's end. Silence emits nothing and breaks
    runs. Velocities are a placeholder until loudness is applied.
    """
    chords = list(chords)
    levels = list(levels)
    if len(levels) != len(chords):
        raise ValueError(f"got {len(chords)} chords but {len(levels)} levels")
    for i, level in enumerate(levels):
        if level not in ARPEGGIO_PATTERNS:
            raise ValueError(f"levels[{i}] = {level!r} is not a level 1-5")

    events: list[NoteEvent] = []
    t = 0
    n = len(chords)
    while t < n:
        chord = chords[t]
        if chord is SILENCE:
            t += 1
            continue
        run_end = t
        while run_end < n and chords[run_end] == chord:
            run_end += 1
        tones = chord_tones(chord)
        onsets: list[tuple[float, int]] = []
        for second in range(t, run_end):
            pattern = ARPEGGIO_PATTERNS[levels[second]]
            half = ((second - t) % 2) * SLOTS_PER_SECOND
            for slot in range(SLOTS_PER_SECOND):
                tone = pattern[half + slot]
                if tone:
                    onsets.append((second + slot / SLOTS_PER_SECOND, tones[tone - 1]))
        for i, (onset, pitch) in enumerate(onsets):
            until = onsets[i + 1][0] if i + 1 < len(onsets) else float(run_end)
            events.append(NoteEvent(onset, until - onset, pitch, DEFAULT_VELOCITY))
        t = run_end
    return events


def apply_velocities(events, loudness) -> list[NoteEvent]:
    """Set each note's velocity from the loudness of its onset second."""
    loudness = list(loudness)
    out = []
    for ev in events:
        second = int(ev.onset)
        if second >= len(loudness):
            raise ValueError(
                f"note onset {ev.onset} falls outside the {len(loudness)}-second loudness series"
            )
        out.append(NoteEvent(ev.onset, ev.duration, ev.pitch, loudness_to_velocity(loudness[second])))
    return out


def render_chords(chords, densities, loudnesses) -> list[NoteEvent]:
    """Full expressive pass: densities pick levels, loudness sets velocity."""
    densities = list(densities)
    loudnesses = list(loudnesses)
    levels = [density_to_level(d) for d in densities]
    return apply_velocities(arpeggiate(chords, levels), loudnesses)


REGRESSOR_KINDS = ("fc", "lstm", "bilstm", "gru", "bigru")


@dataclass(frozen=True)
class RegressorConfig:
    """Shape of an expressive regressor.

    Recurrent kinds stack `layers` RNN layers of `hidden` units per
    direction; fc applies one hidden layer per timestep.
    """

    kind: str = "bigru"
    input_dim: int = 24
    hidden: int = 64
    layers: int = 2
    fc_hidden: int = 512

    def __post_init__(self):
        if self.kind not in REGRESSOR_KINDS:
            raise ValueError(f"kind must be one of {REGRESSOR_KINDS}, got {self.kind!r}")
        if self.input_dim < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("regressor dimensions must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "layers": self.layers,
            "fc_hidden": self.fc_hidden,
        }


class ExpressiveRegressor(nn.Module):
    """Predicts per-second (note density, loudness) from video features."""

    def __init__(self, config: RegressorConfig):
        super().__init__()
        self.config = config
        if config.kind == "fc":
            self.trunk = None
            self.head = nn.Sequential(
                nn.Linear(config.input_dim, config.fc_hidden),
                nn.ReLU(),
                nn.Linear(config.fc_hidden, 2),
            )
        else:
            rnn_cls = nn.LSTM if config.kind in ("lstm", "bilstm") else nn.GRU
            bidirectional = config.kind in ("bilstm", "bigru")
            self.trunk = rnn_cls(
                config.input_dim,
                config.hidden,
                num_layers=config.layers,
                batch_first=True,
                bidirectional=bidirectional,
            )
            out_dim = config.hidden * (2 if bidirectional else 1)
            self.head = nn.Linear(out_dim, 2)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, input_dim) -> (B, T, 2) raw density/loudness outputs."""
        if self.trunk is not None:
            features, _ = self.trunk(features)
        return self.head(features)


def regressor_loss(outputs: torch.Tensor, density: torch.Tensor,
                   loudness: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum of the two per-head MSEs over real (unmasked) steps."""
    mask = mask.to(outputs.dtype)
    steps = mask.sum()
    if steps.item() == 0:
        raise ValueError("all steps are masked")
    err_d = ((outputs[..., 0] - density) ** 2 * mask).sum() / steps
    err_l = ((outputs[..., 1] - loudness) ** 2 * mask).sum() / steps
    return err_d + err_l


def train_regressor(
    model: ExpressiveRegressor,
    examples,
    epochs: int,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    val_examples=None,
    log=None,
) -> list[dict]:
    """Fit on PaddedExamples; returns per-epoch history.

    History rows carry train loss and, when a validation set is given,
    val RMSE per head. Non-finite loss aborts.
    """
    torch.manual_seed(seed)
    video = torch.tensor(np.stack([ex.video for ex in examples]), dtype=torch.float32)
    density = torch.tensor(np.stack([ex.note_density for ex in examples]), dtype=torch.float32)
    loudness = torch.tensor(np.stack([ex.loudness for ex in examples]), dtype=torch.float32)
    mask = torch.tensor(np.stack([ex.mask for ex in examples]))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    order = np.arange(len(examples))
    shuffler = np.random.default_rng(seed)
    for epoch in range(epochs):
        start = time.monotonic()
        model.train()
        shuffler.shuffle(order)
        total = 0.0
        batches = 0
        for lo in range(0, len(order), batch_size):
            idx = torch.tensor(order[lo: lo + batch_size])
            optimizer.zero_grad()
            out = model(video[idx])
            loss = regressor_loss(out, density[idx], loudness[idx], mask[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss {loss.item()}")
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        row = {"epoch": epoch, "loss": total / batches,
               "wall_seconds": time.monotonic() - start}
        if val_examples:
            density_rmse, loudness_rmse = evaluate_regressor(model, val_examples)
            row["val_density_rmse"] = density_rmse
            row["val_loudness_rmse"] = loudness_rmse
        history.append(row)
        if log is not None:
            log(row)
    return history


def evaluate_regressor(model: ExpressiveRegressor, examples) -> tuple[float, float]:
    """(density RMSE, loudness RMSE) over all real steps, after clamping."""
    pred_d: list[np.ndarray] = []
    pred_l: list[np.ndarray] = []
    true_d: list[np.ndarray] = []
    true_l: list[np.ndarray] = []
    for ex in examples:
        density, loudness = predict_expressive(model, ex.video)
        keep = ex.mask
        pred_d.append(density[keep])
        pred_l.append(loudness[keep])
        true_d.append(ex.note_density[keep])
        true_l.append(ex.loudness[keep])
    d_err = np.concatenate(pred_d) - np.concatenate(true_d)
    l_err = np.concatenate(pred_l) - np.concatenate(true_l)
    return float(np.sqrt(np.mean(d_err**2))), float(np.sqrt(np.mean(l_err**2)))


def predict_expressive(model: ExpressiveRegressor, video_features) -> tuple[np.ndarray, np.ndarray]:
    """Per-second (density, loudness) predictions for one video.

    Density is clamped to >= 0 and loudness to [0, 1] so downstream
    rendering always sees valid values.
    """
    features = torch.tensor(np.asarray(video_features), dtype=torch.float32)
    if features.ndim != 2 or features.shape[1] != model.config.input_dim:
        raise ValueError(
            f"expected (T, {model.config.input_dim}) features, got {tuple(features.shape)}"
        )
    model.eval()
    with torch.no_grad():
        out = model(features[None])[0].numpy()
    density = np.clip(out[:, 0], 0.0, None).astype(np.float64)
    loudness = np.clip(out[:, 1], 0.0, 1.0).astype(np.float64)
    return density, loudness

"""Training and evaluation for the chord model.

The loss mixes a chord cross-entropy with an affective term: every
emotion maps to a set of chord qualities, each step's dominant video
emotion yields a multi-hot target over the whole vocabulary, and a
binary cross-entropy pushes chord logits toward qualities that fit the
emotion. Steps whose dominant emotion is neutral carry no affective
signal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import NEUTRAL_INDEX
from .model import AMT
from .theory import (
    N_QUALITIES,
    N_SPECIALS,
    PAD_TOKEN,
    SILENCE_TOKEN,
    SOS_TOKEN,
    VOCAB_SIZE,
    ChordQuality,
    Mode,
    SILENCE,
)

# Chord qualities that fit each mapped emotion, by emotion index:
# exciting, fearful, tense, sad, relaxing. Augmented and min6 fit none.
EMOTION_QUALITY_GROUPS: dict[int, frozenset] = {
    0: frozenset({ChordQuality.maj, ChordQuality.sus4, ChordQuality.dom7}),
    1: frozenset({ChordQuality.dim, ChordQuality.min7, ChordQuality.dim7,
                  ChordQuality.hdim7}),
    2: frozenset({ChordQuality.dim, ChordQuality.sus4, ChordQuality.min7,
                  ChordQuality.dom7}),
    3: frozenset({ChordQuality.min7, ChordQuality.min, ChordQuality.sus2}),
    4: frozenset({ChordQuality.maj, ChordQuality.maj6, ChordQuality.maj7}),
}

N_MAPPED_EMOTIONS = len(EMOTION_QUALITY_GROUPS)


def _emotion_token_table() -> np.ndarray:
    """(5, vocab) multi-hot: token is 1 when its quality fits the emotion."""
    table = np.zeros((N_MAPPED_EMOTIONS, VOCAB_SIZE), dtype=np.float64)
    for emotion, qualities in EMOTION_QUALITY_GROUPS.items():
        for token in range(N_SPECIALS, VOCAB_SIZE):
            if ChordQuality((token - N_SPECIALS) % N_QUALITIES) in qualities:
                table[emotion, token] = 1.0
    return table


EMOTION_TOKEN_TARGETS = _emotion_token_table()


def emotion_step_targets(emotion: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step multi-hot targets and the active-step mask.

    emotion: (..., T, 6) probabilities; mask: (..., T) real-step flags.
    A step is active when it is real and its dominant emotion is not
    neutral. Inactive steps get all-zero targets and are excluded from
    the affective loss.
    """
    emotion = np.asarray(emotion)
    dominant = emotion.argmax(axis=-1)
    active = (dominant != NEUTRAL_INDEX) & np.asarray(mask, dtype=bool)
    targets = np.zeros(emotion.shape[:-1] + (VOCAB_SIZE,), dtype=np.float64)
    targets[active] = EMOTION_TOKEN_TARGETS[dominant[active]]
    return targets, active


@dataclass(frozen=True)
class LossWeights:
    """total = lambda_weight * chord + (1 - lambda_weight) * emotion."""

    lambda_weight: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError(f"lambda_weight must be in [0, 1], got {self.lambda_weight}")


def chord_loss(logits: torch.Tensor, targets: torch.Tensor,
               mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over real steps; errors if every step is masked."""
    flat = nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    )
    keep = mask.reshape(-1)
    if not bool(keep.any()):
        raise ValueError("chord loss over a fully masked batch")
    return flat[keep].mean()


def emotion_loss(logits: torch.Tensor, targets: torch.Tensor,
                 active: torch.Tensor) -> torch.Tensor:
    """Mean over active steps of the per-step mean BCE across all logits.

    Returns exactly 0 when no step is active.
    """
    if not bool(active.any()):
        return torch.zeros((), dtype=logits.dtype, device=logits.device)
    per_logit = nn.functional.binary_cross_entropy_with_logits(
        logits, targets.to(logits.dtype), reduction="none"
    )
    return per_logit.mean(dim=-1)[active].mean()


def total_loss(chord: torch.Tensor, emotion: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    lam = weights.lambda_weight
    return lam * chord + (1.0 - lam) * emotion


@dataclass(frozen=True)
class OptimizerSpec:
    """Adam with an inverse-square-root warmup schedule.

    The LambdaLR factor d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
    multiplies base_lr, so base_lr 1.0 reproduces the classic recipe.
    """

    base_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_steps: int = 4000

    def __post_init__(self):
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < beta < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {beta}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def lr_factor(step: int, d_model: int, warmup_steps: int) -> float:
    """Schedule multiplier at 1-based optimizer step."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def make_optimizer(model: AMT, spec: OptimizerSpec):
    optimizer = torch.optim.Adam(
        model.parameters(), lr=spec.base_lr, betas=(spec.beta1, spec.beta2)
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: lr_factor(step + 1, model.config.d_model, spec.warmup_steps),
    )
    return optimizer, scheduler


def teacher_forcing_batch(examples) -> dict[str, torch.Tensor]:
    """Stack PaddedExamples into model-ready tensors.

    Decoder input is the target sequence shifted right behind a start
    token; padded steps stay PAD in both views and are masked out.
    """
    tokens = torch.tensor(np.stack([ex.tokens for ex in examples]), dtype=torch.long)
    decoder_input = torch.full_like(tokens, PAD_TOKEN)
    decoder_input[:, 0] = SOS_TOKEN
    decoder_input[:, 1:] = tokens[:, :-1]
    emotion = np.stack([ex.emotion for ex in examples])
    mask = np.stack([ex.mask for ex in examples])
    targets, active = emotion_step_targets(emotion, mask)
    return {
        "video": torch.tensor(np.stack([ex.video for ex in examples]), dtype=torch.float32),
        "decoder_input": decoder_input,
        "targets": tokens,
        "mask": torch.tensor(mask),
        "key_flags": torch.tensor(
            [1.0 if ex.key.mode is Mode.major else 0.0 for ex in examples]
        ),
        "emotion_targets": torch.tensor(targets, dtype=torch.float32),
        "emotion_active": torch.tensor(active),
    }


def batch_losses(model: AMT, batch: dict, weights: LossWeights):
    logits = model(batch["video"], batch["decoder_input"], batch["key_flags"],
                   mask=batch["mask"])
    loss_c = chord_loss(logits, batch["targets"], batch["mask"])
    loss_e = emotion_loss(logits, batch["emotion_targets"], batch["emotion_active"])
    return loss_c, loss_e, logits


def _format_log_row(row: dict) -> str:
    def num(value):
        return "nan" if value is None else f"{value:.6f}"

    return (
        f"epoch={row['epoch']} "
        f"chord_loss={num(row['chord_loss'])} "
        f"emotion_loss={num(row['emotion_loss'])} "
        f"total_loss={num(row['total_loss'])} "
        f"val_hits@1={num(row['val_hits@1'])} "
        f"val_hits@3={num(row['val_hits@3'])} "
        f"val_hits@5={num(row['val_hits@5'])} "
        f"wall_seconds={row['wall_seconds']:.3f}"
    )


def train(
    model: AMT,
    train_examples,
    epochs: int,
    seed: int = 0,
    batch_size: int = 16,
    spec: OptimizerSpec = OptimizerSpec(),
    weights: LossWeights = LossWeights(),
    val_examples=(),
    log_stream=None,
    test_mode: bool = False,
    start_epoch: int = 0,
) -> list[dict]:
    """Fit the model; returns one history row per epoch.

    Writes one log line per epoch to log_stream when given. test_mode
    pins the run to one thread and logs wall time as 0.000 so repeated
    runs with one seed produce identical bytes. start_epoch only offsets
    the reported epoch numbers (resumed runs keep counting); fresh
    optimizer state is used either way.
    """
    if not train_examples:
        raise ValueError("no training examples")
    if test_mode:
        torch.set_num_threads(1)
    torch.manual_seed(seed)
    optimizer, scheduler = make_optimizer(model, spec)
    order = np.arange(len(train_examples))
    shuffler = np.random.default_rng(seed)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        start = time.monotonic()
        model.train()
        shuffler.shuffle(order)
        chord_sum = 0.0
        chord_steps = 0
        emotion_sum = 0.0
        emotion_steps = 0
        for lo in range(0, len(order), batch_size):
            batch = teacher_forcing_batch(
                [train_examples[i] for i in order[lo: lo + batch_size]]
            )
            optimizer.zero_grad()
            loss_c, loss_e, _ = batch_losses(model, batch, weights)
            loss = total_loss(loss_c, loss_e, weights)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: chord {loss_c.item()}, "
                    f"emotion {loss_e.item()}"
                )
            loss.backward()
            optimizer.step()
            scheduler.step()
            n_mask = int(batch["mask"].sum())
            n_active = int(batch["emotion_active"].sum())
            chord_sum += loss_c.item() * n_mask
            chord_steps += n_mask
            emotion_sum += loss_e.item() * n_active
            emotion_steps += n_active
        chord_mean = chord_sum / chord_steps
        emotion_mean = emotion_sum / emotion_steps if emotion_steps else 0.0
        row = {
            "epoch": epoch,
            "chord_loss": chord_mean,
            "emotion_loss": emotion_mean,
            "total_loss": (weights.lambda_weight * chord_mean
                           + (1.0 - weights.lambda_weight) * emotion_mean),
            "val_hits@1": None,
            "val_hits@3": None,
            "val_hits@5": None,
            "wall_seconds": time.monotonic() - start,
        }
        if val_examples:
            logits, targets = teacher_forced_predictions(model, val_examples, batch_size)
            for k in (1, 3, 5):
                row[f"val_hits@{k}"] = hits_at_k(logits, targets, k)
        history.append(row)
        if log_stream is not None:
            shown = dict(row, wall_seconds=0.0 if test_mode else row["wall_seconds"])
            log_stream.write(_format_log_row(shown) + "\n")
            log_stream.flush()
    return history


@torch.no_grad()
def teacher_forced_predictions(model: AMT, examples, batch_size: int = 16):
    """Logit rows and target ids for every real step, across examples."""
    was_training = model.training
    model.eval()
    rows = []
    targets = []
    try:
        examples = list(examples)
        for lo in range(0, len(examples), batch_size):
            batch = teacher_forcing_batch(examples[lo: lo + batch_size])
            logits = model(batch["video"], batch["decoder_input"],
                           batch["key_flags"], mask=batch["mask"])
            keep = batch["mask"]
            rows.append(logits[keep].numpy())
            targets.append(batch["targets"][keep].numpy())
    finally:
        model.train(was_training)
    return np.concatenate(rows), np.concatenate(targets)


def hits_at_k(logits: np.ndarray, targets: np.ndarray, k: int) -> float:
    """Fraction of rows whose target ranks in the top k.

    Rank is 1 plus the number of strictly larger scores plus the number
    of equal scores at lower token ids, so ties break deterministically.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"got {logits.shape} logits for {targets.shape} targets")
    n, width = logits.shape
    own = logits[np.arange(n), targets]
    greater = (logits > own[:, None]).sum(axis=1)
    equal_before = ((logits == own[:, None])
                    & (np.arange(width)[None, :] < targets[:, None])).sum(axis=1)
    ranks = 1 + greater + equal_before
    return float((ranks <= k).mean())


def rmse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape or predicted.size == 0:
        raise ValueError(
            f"rmse needs two equal nonempty shapes, got {predicted.shape} and {actual.shape}"
        )
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def chord_confusion(target_tokens, predicted_tokens) -> np.ndarray:
    """(vocab, vocab) counts, row = target token, column = prediction."""
    matrix = np.zeros((VOCAB_SIZE, VOCAB_SIZE), dtype=np.int64)
    for target, predicted in zip(target_tokens, predicted_tokens, strict=True):
        matrix[target, predicted] += 1
    return matrix


def token_root_class(token: int) -> int | None:
    """Root pitch class for chord tokens, 12 for silence, None otherwise."""
    if token == SILENCE_TOKEN:
        return 12
    if token < N_SPECIALS:
        return None
    return (token - N_SPECIALS) // N_QUALITIES


def root_confusion(target_tokens, predicted_tokens) -> np.ndarray:
    """(13, 13) counts over root classes; silence is class 12.

    Steps where either side is PAD or SOS are skipped.
    """
    matrix = np.zeros((13, 13), dtype=np.int64)
    for target, predicted in zip(target_tokens, predicted_tokens, strict=True):
        row = token_root_class(int(target))
        col = token_root_class(int(predicted))
        if row is not None and col is not None:
            matrix[row, col] += 1
    return matrix


def quality_confusion(generated_chords, emotion: np.ndarray) -> np.ndarray:
    """(13, 13) counts of generated quality against the emotion's group.

    Only sounding chords on steps with a non-neutral dominant emotion
    count. A generated quality inside the group lands on the diagonal;
    otherwise every quality of the group charges one count in its row at
    the generated quality's column.
    """
    emotion = np.asarray(emotion)
    matrix = np.zeros((N_QUALITIES, N_QUALITIES), dtype=np.int64)
    for chord, probs in zip(generated_chords, emotion, strict=True):
        dominant = int(np.argmax(probs))
        if chord is SILENCE or dominant == NEUTRAL_INDEX or dominant >= N_MAPPED_EMOTIONS:
            continue
        group = EMOTION_QUALITY_GROUPS[dominant]
        if chord.quality in group:
            matrix[chord.quality, chord.quality] += 1
        else:
            for expected in group:
                matrix[expected, chord.quality] += 1
    return matrix


def quality_match_rate(generated_chords, emotion: np.ndarray) -> float:
    """Fraction of scored steps whose generated quality fits the emotion.

    Scored steps are those with a sounding chord and a non-neutral
    dominant emotion; returns nan when nothing is scored.
    """
    emotion = np.asarray(emotion)
    scored = 0
    matched = 0
    for chord, probs in zip(generated_chords, emotion, strict=True):
        dominant = int(np.argmax(probs))
        if chord is SILENCE or dominant == NEUTRAL_INDEX or dominant >= N_MAPPED_EMOTIONS:
            continue
        scored += 1
        if chord.quality in EMOTION_QUALITY_GROUPS[dominant]:
            matched += 1
    return matched / scored if scored else float("nan")


def evaluate_model(model: AMT, examples, weights: LossWeights = LossWeights(),
                   batch_size: int = 16) -> dict:
    """Teacher-forced metrics over a record set."""
    logits, targets = teacher_forced_predictions(model, examples, batch_size)
    out = {f"hits@{k}": hits_at_k(logits, targets, k) for k in (1, 3, 5)}
    batch = teacher_forcing_batch(list(examples))
    with torch.no_grad():
        was_training = model.training
        model.eval()
        try:
            loss_c, loss_e, _ = batch_losses(model, batch, weights)
        finally:
            model.train(was_training)
    out["chord_loss"] = float(loss_c)
    out["emotion_loss"] = float(loss_e)
    out["total_loss"] = float(total_loss(loss_c, loss_e, weights))
    return out

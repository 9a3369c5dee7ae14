"""Chord generation transformer.

An encoder ingests per-second video feature vectors; a decoder with
relative-position self-attention emits one chord token per second.
Music tokens embed as root + quality table rows concatenated with a
major/minor key flag; video vectors project through a single linear
layer. Both sides add sinusoidal position encodings and share a
pre-norm residual layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import theory
from .theory import (
    N_QUALITIES,
    N_ROOTS,
    N_SPECIALS,
    PAD_TOKEN,
    SILENCE_TOKEN,
    SOS_TOKEN,
    VOCAB_SIZE,
    Key,
    Mode,
    decode_sequence,
    encode_sequence,
)

# Row indices appended to the root/quality tables for silence.
SILENCE_QUALITY_ROW = N_QUALITIES
SILENCE_ROOT_ROW = N_ROOTS

# Finite mask fill: exp underflows to exactly 0, so masked keys get zero
# weight and rows stay NaN-free even when every key is masked.
MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    n_layers_enc: int = 6
    n_layers_dec: int = 6
    d_ff: int = 2048
    d_sem: int = 512
    vocab_size: int = VOCAB_SIZE
    max_len: int = 300
    max_rel_dist: int = 300
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if min(self.d_model, self.n_heads, self.n_layers_enc, self.n_layers_dec,
               self.d_ff, self.d_sem, self.max_len, self.max_rel_dist) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def video_dim(self) -> int:
        return 2 + 6 + self.d_sem

    def parameter_count(self) -> int:
        """Exact number of learnable scalars in an AMT with this config."""
        d, f, L = self.d_model, self.d_ff, self.vocab_size
        music_emb = (N_QUALITIES + 1) * d + (N_ROOTS + 1) * d + 2 * d + ((d + 1) * d + d)
        video_emb = self.video_dim * d + d
        attn = 4 * (d * d + d)
        norm = 2 * d
        ff = d * f + f + f * d + d
        enc_layer = attn + ff + 2 * norm
        rel_table = (2 * self.max_rel_dist - 1) * d
        dec_layer = 2 * attn + ff + 3 * norm + rel_table
        head = d * L + L
        return (music_emb + video_emb
                + self.n_layers_enc * enc_layer + norm
                + self.n_layers_dec * dec_layer + norm
                + head)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers_enc": self.n_layers_enc,
            "n_layers_dec": self.n_layers_dec,
            "d_ff": self.d_ff,
            "d_sem": self.d_sem,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "max_rel_dist": self.max_rel_dist,
            "dropout": self.dropout,
        }


def sinusoidal_encoding(max_len: int, d_model: int) -> torch.Tensor:
    """(max_len, d_model) table of interleaved sin/cos position codes."""
    position = torch.arange(max_len, dtype=torch.float64)[:, None]
    index = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = position / torch.pow(10000.0, index / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return table.to(torch.get_default_dtype())


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention, optionally with learned relative
    position embeddings added to the logits.

    With relative embeddings R (one row per clipped signed distance),
    logits become (Q Kᵀ + S_rel) / sqrt(d_head) where
    S_rel[i, j] = Q_i · R[clip(j - i)].
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float,
                 max_rel_dist: int | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.max_rel_dist = max_rel_dist
        if max_rel_dist is not None:
            table = torch.empty(n_heads, 2 * max_rel_dist - 1, self.d_head)
            nn.init.normal_(table, std=self.d_head ** -0.5)
            self.rel_embeddings = nn.Parameter(table)
        else:
            self.rel_embeddings = None
        self.keep_weights = False
        self.last_weights = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def _relative_logits(self, q: torch.Tensor) -> torch.Tensor:
        """S_rel for square self-attention: (B, H, T, T)."""
        t = q.shape[2]
        m = self.max_rel_dist
        # (B, H, T, 2m-1): query dotted with every distance row.
        per_distance = torch.einsum("bhtd,hrd->bhtr", q, self.rel_embeddings)
        pos = torch.arange(t, device=q.device)
        distance = pos[None, :] - pos[:, None]
        index = distance.clamp(-(m - 1), m - 1) + (m - 1)
        index = index.expand(q.shape[0], self.n_heads, t, t)
        return per_distance.gather(3, index)

    def forward(self, query, key, value, key_mask=None, causal=False):
        """key_mask: (B, T_k) bool, True = attendable."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1)
        if self.rel_embeddings is not None:
            scores = scores + self._relative_logits(q)
        scores = scores / math.sqrt(self.d_head)
        if causal:
            t_q, t_k = scores.shape[-2:]
            future = torch.triu(
                torch.ones(t_q, t_k, dtype=torch.bool, device=scores.device), diagonal=1
            )
            scores = scores.masked_fill(future, MASK_FILL)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_FILL)
        weights = torch.softmax(scores, dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        weights = self.dropout(weights)
        context = weights @ v
        b, _, t, _ = context.shape
        return self.out_proj(context.transpose(1, 2).reshape(b, t, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, d_ff),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(d_ff, d_model),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.d_ff, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, key_mask=None):
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, h, key_mask=key_mask))
        return x + self.dropout(self.ff(self.norm_ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(
            config.d_model, config.n_heads, config.dropout,
            max_rel_dist=config.max_rel_dist,
        )
        self.norm_cross = nn.LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.d_ff, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        h = self.norm_self(x)
        x = x + self.dropout(self.self_attn(h, h, h, key_mask=self_mask, causal=True))
        h = self.norm_cross(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory, key_mask=memory_mask))
        return x + self.dropout(self.ff(self.norm_ff(x)))


@dataclass(frozen=True)
class GenerationConstraints:
    """Caps on immediate repetition during decoding."""

    max_repeat_chord: int = 2
    max_repeat_silence: int = 2

    def __post_init__(self):
        if self.max_repeat_chord < 1 or self.max_repeat_silence < 1:
            raise ValueError("repeat limits must be >= 1")


def trailing_run_length(history, token: int) -> int:
    run = 0
    for value in reversed(history):
        if value != token:
            break
        run += 1
    return run


def constrain_step(logits: torch.Tensor, history,
                   constraints: GenerationConstraints) -> int:
    """Pick the next token: argmax unless it would extend a run past its
    limit, in which case the second-highest scorer is taken. PAD and SOS
    are never candidates.
    """
    masked = logits.clone()
    masked[PAD_TOKEN] = float("-inf")
    masked[SOS_TOKEN] = float("-inf")
    top2 = torch.topk(masked, 2).indices.tolist()
    choice = top2[0]
    limit = (constraints.max_repeat_silence if choice == SILENCE_TOKEN
             else constraints.max_repeat_chord)
    if trailing_run_length(history, choice) >= limit:
        choice = top2[1]
    return choice


class AMT(nn.Module):
    """Video-conditioned chord sequence model."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.quality_emb = nn.Embedding(N_QUALITIES + 1, config.d_model)
        self.root_emb = nn.Embedding(N_ROOTS + 1, config.d_model)
        self.special_emb = nn.Embedding(2, config.d_model)
        self.chord_proj = nn.Linear(config.d_model + 1, config.d_model)
        self.video_proj = nn.Linear(config.video_dim, config.d_model)
        self.dropout = nn.Dropout(config.dropout)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.n_layers_enc)
        )
        self.encoder_norm = nn.LayerNorm(config.d_model)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.n_layers_dec)
        )
        self.decoder_norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size)

        self.register_buffer(
            "position_table", sinusoidal_encoding(config.max_len, config.d_model)
        )
        quality_rows = torch.full((config.vocab_size,), SILENCE_QUALITY_ROW,
                                  dtype=torch.long)
        root_rows = torch.full((config.vocab_size,), SILENCE_ROOT_ROW, dtype=torch.long)
        for token in range(N_SPECIALS, config.vocab_size):
            quality_rows[token] = (token - N_SPECIALS) % N_QUALITIES
            root_rows[token] = (token - N_SPECIALS) // N_QUALITIES
        self.register_buffer("quality_rows", quality_rows)
        self.register_buffer("root_rows", root_rows)

    def _positions(self, t: int) -> torch.Tensor:
        if t > self.config.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        return self.position_table[:t]

    def embed_music(self, tokens: torch.Tensor, key_flags: torch.Tensor) -> torch.Tensor:
        """(B, T) token ids + (B,) major flags -> (B, T, d_model).

        Chords and silence sum their root and quality rows; PAD and SOS
        use dedicated rows instead. The key flag (1 major, 0 minor) is
        concatenated before the chord projection.
        """
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(
                f"token ids must be in [0, {self.config.vocab_size}), "
                f"got range [{int(tokens.min())}, {int(tokens.max())}]"
            )
        base = self.quality_emb(self.quality_rows[tokens]) + self.root_emb(self.root_rows[tokens])
        special = tokens < 2
        if special.any():
            base = torch.where(special[..., None], self.special_emb(tokens.clamp(max=1)), base)
        flags = key_flags.to(base.dtype)[:, None, None].expand(-1, tokens.shape[1], 1)
        x = self.chord_proj(torch.cat([flags, base], dim=-1))
        return self.dropout(x + self._positions(tokens.shape[1]))

    def embed_video(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, 2 + 6 + d_sem) -> (B, T, d_model)."""
        if features.shape[-1] != self.config.video_dim:
            raise ValueError(
                f"expected video feature width {self.config.video_dim}, "
                f"got {features.shape[-1]}"
            )
        x = self.video_proj(features)
        return self.dropout(x + self._positions(features.shape[1]))

    def encode(self, features: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed_video(features)
        for layer in self.encoder_layers:
            x = layer(x, key_mask=mask)
        return self.encoder_norm(x)

    def decode(self, tokens: torch.Tensor, key_flags: torch.Tensor,
               memory: torch.Tensor, token_mask: torch.Tensor | None = None,
               memory_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed_music(tokens, key_flags)
        for layer in self.decoder_layers:
            x = layer(x, memory, self_mask=token_mask, memory_mask=memory_mask)
        return self.head(self.decoder_norm(x))

    def forward(self, video: torch.Tensor, tokens: torch.Tensor,
                key_flags: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Teacher-forced logits (B, T, vocab). `mask` marks real steps
        of both the video and the decoder input.
        """
        memory = self.encode(video, mask=mask)
        return self.decode(tokens, key_flags, memory,
                           token_mask=mask, memory_mask=mask)

    def set_keep_weights(self, keep: bool) -> None:
        """Toggle retention of attention maps on every attention block."""
        for module in self.modules():
            if isinstance(module, MultiHeadAttention):
                module.keep_weights = keep
                if not keep:
                    module.last_weights = None

    @torch.no_grad()
    def generate(self, video_features, key: Key, primer=(),
                 constraints: GenerationConstraints = GenerationConstraints(),
                 temperature: float = 0.0,
                 generator: torch.Generator | None = None,
                 return_logits: bool = False):
        """Decode one chord per video second.

        Greedy with the repeat constraint by default; a positive
        temperature instead samples from the softmax with over-limit
        tokens removed. The primer occupies the first output steps
        verbatim and its runs count toward the constraint. With
        return_logits, also returns the stacked pre-constraint logits of
        every generated (non-primer) step.
        """
        was_training = self.training
        self.eval()
        try:
            features = torch.as_tensor(
                np.asarray(video_features), dtype=self.head.weight.dtype
            )
            if features.ndim != 2:
                raise ValueError(f"expected (T, features) video input, got {tuple(features.shape)}")
            total = features.shape[0]
            primer = list(primer)
            if len(primer) > total:
                raise ValueError(
                    f"primer has {len(primer)} chords but the video has {total} seconds"
                )
            key_flags = torch.tensor([1.0 if key.mode is Mode.major else 0.0])
            memory = self.encode(features[None])
            outputs = list(encode_sequence(primer))
            step_logits = []
            while len(outputs) < total:
                tokens = torch.tensor([[SOS_TOKEN] + outputs], dtype=torch.long)
                logits = self.decode(tokens, key_flags, memory)[0, -1]
                step_logits.append(logits)
                if temperature > 0.0:
                    outputs.append(self._sample_step(logits, outputs, constraints,
                                                     temperature, generator))
                else:
                    outputs.append(constrain_step(logits, outputs, constraints))
            chords = decode_sequence(outputs)
            if return_logits:
                stacked = (torch.stack(step_logits) if step_logits
                           else torch.zeros(0, self.config.vocab_size))
                return chords, stacked
            return chords
        finally:
            self.train(was_training)

    @staticmethod
    def _sample_step(logits, history, constraints, temperature, generator) -> int:
        masked = logits.clone()
        masked[PAD_TOKEN] = float("-inf")
        masked[SOS_TOKEN] = float("-inf")
        for token in range(masked.shape[0]):
            limit = (constraints.max_repeat_silence if token == SILENCE_TOKEN
                     else constraints.max_repeat_chord)
            if trailing_run_length(history, token) >= limit:
                masked[token] = float("-inf")
        probs = torch.softmax(masked / temperature, dim=-1)
        return int(torch.multinomial(probs, 1, generator=generator).item())


def new_model(config: ModelConfig, seed: int | None = None) -> AMT:
    """Build an AMT, optionally with seeded initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return AMT(config)

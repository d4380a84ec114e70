"""Encoder-decoder model p(y|x) with a pluggable attention mechanism."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .attention import (
    AttentionOutput,
    MonotonicState,
    PositionPredictor,
    ScorerParams,
    attend_local_monotonic,
    global_attend,
    local_m_attend,
    window_halfwidth,
)
from .autodiff import Tensor
from .data import SOS
from .errors import ConfigError, DimensionError, DivergedTrainingError, EmptySequenceError, IndexRangeError

ATTENTION_KINDS = ("global", "local-m", "local-mono-const", "local-mono-unconst")


@dataclass
class ModelConfig:
    input_mode: str = "tokens"
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    feature_dim: int = 0
    src_embed_dim: int = 32
    tgt_embed_dim: int = 32
    feature_proj_dim: int = 64
    enc_layers: int = 1
    enc_hidden: int = 64
    subsample_layers: tuple = ()
    dec_layers: int = 1
    dec_hidden: int = 64
    attention: str = "local-mono-unconst"
    scorer: str = "mlp"
    scorer_hidden: int = 32
    two_sigma: float = 3.0
    c_max: float = 5.0
    position_hidden: int = 32
    local_m_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.subsample_layers = tuple(sorted(int(i) for i in self.subsample_layers))
        self.validate()

    def validate(self) -> None:
        if self.input_mode not in ("tokens", "features"):
            raise ConfigError(f"input_mode must be 'tokens' or 'features', got {self.input_mode!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.scorer not in ("dot", "bilinear", "mlp", "none"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.scorer == "none" and self.attention in ("global", "local-m"):
            raise ConfigError(f"{self.attention} attention requires a scorer")
        if self.scorer == "dot" and 2 * self.enc_hidden != self.dec_hidden:
            raise ConfigError("dot scorer needs dec_hidden == 2 * enc_hidden")
        if self.two_sigma <= 0:
            raise ConfigError(f"two_sigma must be > 0, got {self.two_sigma}")
        if self.c_max <= 0:
            raise ConfigError(f"c_max must be > 0, got {self.c_max}")
        if any(not 0 <= i < self.enc_layers for i in self.subsample_layers):
            raise ConfigError(f"subsample_layers {self.subsample_layers} outside 0..{self.enc_layers - 1}")

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subsample_layers"] = list(self.subsample_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderOutput:
    states: Tensor
    source_length: int

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class DecoderState:
    layers: tuple  # packed [h; c] per decoder layer
    mono: MonotonicState
    step: int = 0
    y_prev: int = SOS


class Seq2SeqModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        if c.input_mode == "tokens":
            self.src_embed = L.EmbeddingParams.init(rng, c.src_vocab_size, c.src_embed_dim, "src_embed")
            self.feature_proj = None
            enc_in = c.src_embed_dim
        else:
            if c.feature_dim < 1:
                raise ConfigError("feature input needs feature_dim >= 1")
            self.src_embed = None
            self.feature_proj = L.LinearParams.init(rng, c.feature_dim, c.feature_proj_dim, "feature_proj")
            enc_in = c.feature_proj_dim
        self.encoder = []
        for k in range(c.enc_layers):
            d = enc_in if k == 0 else c.enc_dim
            self.encoder.append((
                L.LSTMCellParams.init(rng, d, c.enc_hidden, f"enc{k}.fw"),
                L.LSTMCellParams.init(rng, d, c.enc_hidden, f"enc{k}.bw"),
            ))
        self.tgt_embed = L.EmbeddingParams.init(rng, c.tgt_vocab_size, c.tgt_embed_dim, "tgt_embed")
        self.decoder = [
            L.LSTMCellParams.init(rng, c.tgt_embed_dim if k == 0 else c.dec_hidden, c.dec_hidden, f"dec{k}")
            for k in range(c.dec_layers)
        ]
        self.scorer = ScorerParams.init(rng, c.scorer, c.enc_dim, c.dec_hidden, c.scorer_hidden)
        if c.attention.startswith("local-mono"):
            mode = "constrained" if c.attention == "local-mono-const" else "unconstrained"
            self.position = PositionPredictor.init(rng, mode, c.dec_hidden, c.position_hidden, c.two_sigma, c.c_max)
        else:
            self.position = None
        self.output = L.LinearParams.init(rng, c.dec_hidden + c.enc_dim, c.tgt_vocab_size, "output")

    @property
    def halfwidth(self) -> int:
        return window_halfwidth(self.config.two_sigma)

    def named_parameters(self) -> list:
        """(name, tensor) pairs in a fixed order."""
        groups = []
        if self.src_embed is not None:
            groups += self.src_embed.parameters()
        if self.feature_proj is not None:
            groups += self.feature_proj.parameters()
        for fw, bw in self.encoder:
            groups += fw.parameters() + bw.parameters()
        groups += self.tgt_embed.parameters()
        for cell in self.decoder:
            groups += cell.parameters()
        groups += self.scorer.parameters()
        if self.position is not None:
            groups += self.position.parameters()
        groups += self.output.parameters()
        return [(p.name, p) for p in groups]

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def initial_state(self) -> DecoderState:
        h = self.config.dec_hidden
        layers = tuple(Tensor(np.zeros(2 * h)) for _ in self.decoder)
        return DecoderState(layers, MonotonicState.initial(), 0, SOS)


def encode(model: Seq2SeqModel, source) -> EncoderOutput:
    """Token ids (1-d) or a feature matrix [S x D] to encoder states [S' x 2h]."""
    c = model.config
    if c.input_mode == "tokens":
        ids = np.asarray(source, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise EmptySequenceError("source token sequence is empty")
        x = L.embed(model.src_embed, ids)
    else:
        feats = source.data if isinstance(source, Tensor) else np.asarray(source, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise EmptySequenceError("source feature matrix is empty")
        if feats.shape[1] != c.feature_dim:
            raise DimensionError(f"feature width {feats.shape[1]} does not match configured {c.feature_dim}")
        x = ad.tanh(L.linear(model.feature_proj, Tensor(feats)))
    states = L.bilstm_encode(model.encoder, x, c.subsample_layers)
    return EncoderOutput(states, int(x.shape[0]))


def attend(model: Seq2SeqModel, state: DecoderState, enc: EncoderOutput, h_d: Tensor):
    """Apply the configured attention; returns ``(AttentionOutput, MonotonicState)``."""
    c = model.config
    H = enc.states
    if c.attention == "global":
        context, w = global_attend(model.scorer, H, h_d)
        out = AttentionOutput(context, w.data, 0, H.shape[0], likelihood=w.data, weights=w)
        return out, state.mono
    if c.attention == "local-m":
        context, w, lo, hi = local_m_attend(model.scorer, H, h_d, state.step, model.halfwidth, c.local_m_ratio)
        center = min(math.floor(state.step * c.local_m_ratio), H.shape[0] - 1)
        out = AttentionOutput(context, w.data, lo, hi, likelihood=w.data, p=float(center), weights=w)
        return out, state.mono
    return attend_local_monotonic(state.mono, model.position, model.scorer, H, h_d)


def decode_step(model: Seq2SeqModel, state: DecoderState, enc: EncoderOutput, y_prev: Optional[int] = None):
    """Advance the decoder one step; returns ``(logits, AttentionOutput, new_state)``."""
    if y_prev is None:
        y_prev = state.y_prev
    x = L.embed(model.tgt_embed, int(y_prev))
    new_layers = []
    for cell, hc in zip(model.decoder, state.layers):
        hc = L.lstm_step_packed(cell, x, hc)
        new_layers.append(hc)
        x = ad.slice_rows(hc, 0, cell.hidden)
    att, mono = attend(model, state, enc, x)
    logits = L.linear(model.output, ad.concat([x, att.context]))
    return logits, att, DecoderState(tuple(new_layers), mono, state.step + 1, int(y_prev))


def step_losses(model: Seq2SeqModel, source, target: Sequence[int]) -> list:
    """Teacher-forced per-step cross-entropy tensors."""
    if len(target) == 0:
        raise EmptySequenceError("target sequence is empty")
    enc = encode(model, source)
    state = model.initial_state()
    y_prev = SOS
    losses = []
    for y in target:
        logits, _, state = decode_step(model, state, enc, y_prev)
        losses.append(L.cross_entropy(logits, int(y)))
        y_prev = int(y)
    return losses


def forward_loss(model: Seq2SeqModel, source, target: Sequence[int]) -> Tensor:
    """Mean teacher-forced cross-entropy over target positions (target includes eos)."""
    return ad.mean(ad.stack(step_losses(model, source, target)))


@dataclass
class EpochStats:
    mean_loss: float
    seconds: float
    batches: int
    batch_losses: list = field(default_factory=list)


def train_epoch(model: Seq2SeqModel, batches, optimizer: L.AdamState, clip_norm: Optional[float] = 5.0) -> EpochStats:
    """One pass over ``batches``; each batch is an iterable of (source, target ids) pairs."""
    params = model.parameters()
    start = time.perf_counter()
    losses = []
    for bi, batch in enumerate(batches):
        pairs = list(batch)
        if not pairs:
            continue
        model.zero_grad()
        per_item = [forward_loss(model, src, tgt) for src, tgt in pairs]
        loss = ad.scale(ad.sum(ad.stack(per_item)), 1.0 / len(per_item))
        value = loss.item()
        if not math.isfinite(value):
            raise DivergedTrainingError(f"non-finite loss {value} at batch {bi}")
        ad.backward(loss)
        L.clip_grad_norm(params, clip_norm)
        L.adam_step(optimizer, params)
        losses.append(value)
    if not losses:
        raise EmptySequenceError("train_epoch received no batches")
    return EpochStats(float(np.mean(losses)), time.perf_counter() - start, len(losses), losses)


def check_token(model: Seq2SeqModel, y: int) -> None:
    if not 0 <= y < model.config.tgt_vocab_size:
        raise IndexRangeError(f"token id {y} outside target vocabulary of {model.config.tgt_vocab_size}")

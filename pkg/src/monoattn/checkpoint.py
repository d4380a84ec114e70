"""Plain-text, versioned checkpoints.

Layout::

    MONOATTN-CKPT v1
    config {json}
    src_vocab <n> tok ...        (``src_vocab -`` in feature mode)
    tgt_vocab <n> tok ...
    epoch <n>
    rng {json}                   (``rng -`` when absent)
    params <count>
    <name> <ndim> <d1> ... <dk>
    <values>
    ...
    optimizer adam <lr> <beta1> <beta2> <eps> <step>     (``optimizer -`` when absent)
    <name> <ndim> <d1> ... <dk>  (first moments, then second moments, same order as params)
    <values>
    ...
    end

Values are written with 17 significant digits, which round-trips float64
exactly, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import Vocab
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .layers import AdamState
from .model import ModelConfig, Seq2SeqModel

MAGIC = "MONOATTN-CKPT"
VERSION = "v1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: List[tuple]  # (name, ndarray)
    src_vocab: Optional[Vocab] = None
    tgt_vocab: Optional[Vocab] = None
    epoch: int = 0
    rng_state: Optional[dict] = None
    optimizer: Optional[AdamState] = None
    version: str = VERSION

    def build_model(self) -> Seq2SeqModel:
        """Fresh model carrying the stored parameter values."""
        model = Seq2SeqModel(self.config)
        named = model.named_parameters()
        if [n for n, _ in named] != [n for n, _ in self.params]:
            raise CheckpointShapeError("parameter names in checkpoint do not match the configured model")
        for (name, p), (_, values) in zip(named, self.params):
            if p.shape != values.shape:
                raise CheckpointShapeError(f"parameter {name}: checkpoint shape {values.shape}, model expects {p.shape}")
            p.data = values.copy()
        return model


def from_model(model: Seq2SeqModel, src_vocab=None, tgt_vocab=None, epoch: int = 0,
               rng: Optional[np.random.Generator] = None, optimizer: Optional[AdamState] = None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params=[(n, p.data.copy()) for n, p in model.named_parameters()],
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        epoch=epoch,
        rng_state=None if rng is None else rng.bit_generator.state,
        optimizer=optimizer,
    )


def _fmt(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values.reshape(-1))


def _vocab_line(key: str, vocab: Optional[Vocab]) -> str:
    if vocab is None:
        return f"{key} -"
    return " ".join([key, str(len(vocab.tokens))] + vocab.tokens)


def dumps(ckpt: Checkpoint) -> str:
    lines = [f"{MAGIC} {ckpt.version}"]
    lines.append("config " + json.dumps(ckpt.config.to_dict(), sort_keys=True))
    lines.append(_vocab_line("src_vocab", ckpt.src_vocab))
    lines.append(_vocab_line("tgt_vocab", ckpt.tgt_vocab))
    lines.append(f"epoch {ckpt.epoch}")
    lines.append("rng " + ("-" if ckpt.rng_state is None else json.dumps(ckpt.rng_state, sort_keys=True)))
    lines.append(f"params {len(ckpt.params)}")
    for name, values in ckpt.params:
        lines.append(" ".join([name, str(values.ndim)] + [str(d) for d in values.shape]))
        lines.append(_fmt(values))
    opt = ckpt.optimizer
    if opt is None or not opt.m:
        lines.append("optimizer -")
    else:
        lines.append(f"optimizer adam {opt.lr!r} {opt.beta1!r} {opt.beta2!r} {opt.eps!r} {opt.step}")
        for prefix, moments in (("m", opt.m), ("v", opt.v)):
            for (name, _), values in zip(ckpt.params, moments):
                lines.append(" ".join([f"{prefix}.{name}", str(values.ndim)] + [str(d) for d in values.shape]))
                lines.append(_fmt(values))
    lines.append("end")
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointTruncatedError(f"checkpoint ends before {what}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def keyed(self, key: str) -> str:
        line = self.next(key)
        head, _, rest = line.partition(" ")
        if head != key:
            raise CheckpointError(f"line {self.pos}: expected {key!r}, found {head!r}")
        return rest

    def tensor(self, what: str):
        header = self.next(what).split()
        if len(header) < 2:
            raise CheckpointError(f"line {self.pos}: malformed tensor header")
        name, ndim = header[0], int(header[1])
        dims = tuple(int(d) for d in header[2:])
        if len(dims) != ndim:
            raise CheckpointShapeError(f"parameter {name}: header declares {ndim} dims but lists {len(dims)}")
        raw = self.next(f"values of {name}").split()
        expected = int(np.prod(dims)) if dims else 1
        if len(raw) != expected:
            raise CheckpointTruncatedError(
                f"parameter {name}: expected {expected} values for shape {dims}, found {len(raw)}"
            )
        return name, np.array([float(v) for v in raw], dtype=np.float64).reshape(dims)


def _read_vocab(rest: str) -> Optional[Vocab]:
    if rest == "-":
        return None
    parts = rest.split(" ")
    n = int(parts[0])
    tokens = parts[1:] if n else []
    if len(tokens) != n:
        raise CheckpointTruncatedError(f"vocabulary announces {n} tokens, found {len(tokens)}")
    return Vocab(tokens)


def loads(text: str) -> Checkpoint:
    r = _Reader(text)
    head = r.next("header").split(" ")
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if head[1] != VERSION:
        raise CheckpointVersionError(f"checkpoint format {head[1]} is not supported (expected {VERSION})")
    config = ModelConfig.from_dict(json.loads(r.keyed("config")))
    src_vocab = _read_vocab(r.keyed("src_vocab"))
    tgt_vocab = _read_vocab(r.keyed("tgt_vocab"))
    epoch = int(r.keyed("epoch"))
    rng_raw = r.keyed("rng")
    rng_state = None if rng_raw == "-" else json.loads(rng_raw)
    count = int(r.keyed("params"))
    params = [r.tensor("parameter") for _ in range(count)]
    opt_raw = r.keyed("optimizer").split(" ")
    optimizer = None
    if opt_raw != ["-"]:
        _, lr, b1, b2, eps, step = opt_raw
        optimizer = AdamState(float(lr), float(b1), float(b2), float(eps), int(step))
        optimizer.m = [r.tensor("first moment")[1] for _ in range(count)]
        optimizer.v = [r.tensor("second moment")[1] for _ in range(count)]
    if r.next("end marker") != "end":
        raise CheckpointError(f"line {r.pos}: expected 'end'")
    return Checkpoint(config, params, src_vocab, tgt_vocab, epoch, rng_state, optimizer, VERSION)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def load(path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"))

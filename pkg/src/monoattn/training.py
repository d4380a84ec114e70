"""Training loop with per-epoch dev evaluation, shared by the CLI and the estimator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .data import ParallelCorpus, Vocab, batch_iter
from .decoding import evaluate, greedy_decode
from .layers import AdamState
from .model import Seq2SeqModel, train_epoch

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_acc: float
    dev_per: float
    seconds: float

    def log_line(self) -> str:
        return f"epoch {self.epoch} loss {self.loss:.6f} dev_acc {self.dev_acc:.4f} seconds {self.seconds:.2f}"


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def best_dev_acc(self) -> float:
        return max((r.dev_acc for r in self.records), default=0.0)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


def max_decode_len(corpus: ParallelCorpus, factor: float = 2.0, floor: int = 10) -> int:
    longest = max(len(r) for p in corpus for r in p.references)
    return max(floor, int(np.ceil(factor * longest)) + 1)


def dev_report(model: Seq2SeqModel, corpus: ParallelCorpus, vocab_src: Optional[Vocab], vocab_tgt: Vocab,
               max_len: Optional[int] = None):
    """Greedy-decode every entry and score it against its references."""
    max_len = max_len or max_decode_len(corpus)
    hyps = []
    for p in corpus:
        src = p.source if vocab_src is None else vocab_src.encode(p.source)
        hyps.append(vocab_tgt.decode(greedy_decode(model, src, max_len).tokens))
    return evaluate(hyps, [p.references for p in corpus])


def fit(model: Seq2SeqModel, train: ParallelCorpus, vocab_src: Optional[Vocab], vocab_tgt: Vocab, *,
        dev: Optional[ParallelCorpus] = None, epochs: int = 10, lr: float = 5e-4, batch_size: int = 16,
        clip_norm: Optional[float] = 5.0, seed: int = 0, optimizer: Optional[AdamState] = None,
        stop_at_dev_acc: Optional[float] = None, lr_decay: float = 1.0, start_epoch: int = 0,
        on_epoch: Optional[Callable[[EpochRecord, AdamState], None]] = None) -> History:
    """Train for up to ``epochs`` epochs.

    ``stop_at_dev_acc`` ends training early once dev sequence accuracy reaches it.
    ``lr_decay`` multiplies the learning rate after every epoch whose dev
    accuracy does not beat the best so far (1.0 keeps it fixed).
    """
    if not 0.0 < lr_decay <= 1.0:
        raise ValueError(f"lr_decay must lie in (0, 1], got {lr_decay}")
    optimizer = optimizer or AdamState(lr=lr)
    history = History()
    best = -1.0
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        batches = batch_iter(train, vocab_src, vocab_tgt, batch_size, seed=seed, epoch=epoch)
        stats = train_epoch(model, batches, optimizer, clip_norm)
        acc = per = float("nan")
        if dev is not None and len(dev):
            report = dev_report(model, dev, vocab_src, vocab_tgt)
            acc, per = report.seq_accuracy, report.per
        rec = EpochRecord(epoch, stats.mean_loss, acc, per, stats.seconds)
        history.records.append(rec)
        if acc > best:
            best = acc
        elif lr_decay < 1.0 and not np.isnan(acc):
            optimizer.lr *= lr_decay
        logger.info(rec.log_line())
        if on_epoch is not None:
            on_epoch(rec, optimizer)
        if stop_at_dev_acc is not None and acc >= stop_at_dev_acc:
            break
    return history

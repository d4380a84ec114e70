"""Greedy and beam-search decoding, edit distance and multi-reference scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .data import EOS, SOS
from .layers import log_softmax
from .model import DecoderState, Seq2SeqModel, decode_step, encode


@dataclass
class DecodeResult:
    tokens: List[int]  # eos stripped
    log_prob: float
    finished: bool  # False when max_len cut the hypothesis short
    score: float = float("nan")  # length-normalized log probability

    @property
    def truncated(self) -> bool:
        return not self.finished


@dataclass
class Hypothesis:
    tokens: tuple
    log_prob: float
    state: DecoderState
    finished: bool = False


def normalized_score(log_prob: float, length: int, alpha: float) -> float:
    return log_prob / (max(length, 1) ** alpha)


def greedy_decode(model: Seq2SeqModel, source, max_len: int) -> DecodeResult:
    """Argmax decoding; ties go to the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        enc = encode(model, source)
        state = model.initial_state()
        y, tokens, total = SOS, [], 0.0
        for _ in range(max_len):
            logits, _, state = decode_step(model, state, enc, y)
            lp = log_softmax(logits.data)
            y = int(np.argmax(lp))
            total += float(lp[y])
            if y == EOS:
                return DecodeResult(tokens, total, True, normalized_score(total, len(tokens) + 1, 1.0))
            tokens.append(y)
    return DecodeResult(tokens, total, False, normalized_score(total, len(tokens), 1.0))


def beam_decode(model: Seq2SeqModel, source, beam: int = 3, alpha: float = 1.0,
                max_len: int = 100) -> List[DecodeResult]:
    """Beam search ranked by ``log p / |Y| ** alpha``, with |Y| counting eos.

    All live hypotheses are expanded by every token, then the ``beam`` best
    expansions by raw log-probability survive (ties: earlier hypothesis, then
    lower token id, so a beam of 1 reproduces greedy decoding).  Expansions
    ending in eos are frozen as finished.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    finished: List[Hypothesis] = []
    with no_grad():
        enc = encode(model, source)
        live = [Hypothesis((), 0.0, model.initial_state())]
        for _ in range(max_len):
            step_lps, cand_states = [], []
            for h in live:
                y_prev = h.tokens[-1] if h.tokens else SOS
                logits, _, st = decode_step(model, h.state, enc, y_prev)
                step_lps.append(log_softmax(logits.data))
                cand_states.append(st)
            flat = np.concatenate([h.log_prob + lp for h, lp in zip(live, step_lps)])
            local = np.concatenate(step_lps)
            V = step_lps[0].shape[0]
            # rank by total score, then by the step's own log-prob, then by position
            top = np.lexsort((np.arange(flat.size), -local, -flat))[:beam]
            new_live = []
            for k in top:
                hi, tok = divmod(int(k), V)
                hyp = Hypothesis(live[hi].tokens + (tok,), float(flat[k]), cand_states[hi], tok == EOS)
                (finished if hyp.finished else new_live).append(hyp)
            live = new_live
            if not live:
                break
    results = []
    for h in finished + live:
        toks = [t for t in h.tokens if t != EOS]
        results.append(DecodeResult(toks, h.log_prob, h.finished, normalized_score(h.log_prob, len(h.tokens), alpha)))
    results.sort(key=lambda r: -r.score)
    return results[:beam]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class EditOps:
    distance: int
    subs: int
    ins: int
    dels: int

    def __iter__(self):
        return iter((self.distance, self.subs, self.ins, self.dels))


def edit_distance(hyp: Sequence, ref: Sequence) -> EditOps:
    """Unit-cost Levenshtein distance from ``hyp`` to ``ref`` with an operation breakdown.

    Insertions are hypothesis tokens absent from the reference; deletions are
    reference tokens the hypothesis misses.
    """
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if hyp[i - 1] == ref[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += int(hyp[i - 1] != ref[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditOps(int(d[n, m]), subs, ins, dels)


@dataclass
class RefScore:
    ops: EditOps
    ref_index: int
    ref_length: int
    exact_match: bool

    @property
    def rate(self) -> float:
        return self.ops.distance / self.ref_length if self.ref_length else float(self.ops.distance > 0)


def score_multi_ref(hyp: Sequence, refs: Sequence[Sequence]) -> RefScore:
    """Score against the reference with the lowest error rate.

    Ties go to the shorter reference, then to the one listed first.
    ``exact_match`` is set when the hypothesis equals any reference.
    """
    if not refs:
        raise ValueError("at least one reference is required")
    best = None
    for k, ref in enumerate(refs):
        ops = edit_distance(hyp, ref)
        cand = RefScore(ops, k, len(ref), False)
        if best is None or (cand.rate, cand.ref_length) < (best.rate, best.ref_length):
            best = cand
    best.exact_match = any(list(hyp) == list(r) for r in refs)
    return best


@dataclass
class EvalReport:
    items: List[RefScore] = field(default_factory=list)
    hypotheses: List[list] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return sum(it.ops.distance for it in self.items)

    @property
    def ref_tokens(self) -> int:
        return sum(it.ref_length for it in self.items)

    @property
    def per(self) -> float:
        """Token error rate: summed distances over summed chosen-reference lengths."""
        return self.errors / self.ref_tokens if self.ref_tokens else 0.0

    @property
    def seq_accuracy(self) -> float:
        return sum(it.exact_match for it in self.items) / len(self.items) if self.items else 0.0

    @property
    def wer(self) -> float:
        """Fraction of items whose output matches no reference."""
        return 1.0 - self.seq_accuracy if self.items else 0.0

    def summary(self) -> str:
        subs = sum(it.ops.subs for it in self.items)
        ins = sum(it.ops.ins for it in self.items)
        dels = sum(it.ops.dels for it in self.items)
        return (f"items={len(self.items)} errors={self.errors} ref_tokens={self.ref_tokens} "
                f"subs={subs} ins={ins} dels={dels} per={self.per:.6f} wer={self.wer:.6f} "
                f"seq_acc={self.seq_accuracy:.6f}")


def evaluate(hypotheses: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> EvalReport:
    report = EvalReport()
    for hyp, refs in zip(hypotheses, references):
        report.items.append(score_multi_ref(hyp, refs))
        report.hypotheses.append(list(hyp))
    return report


def decode(model: Seq2SeqModel, source, beam: int = 1, alpha: float = 1.0, max_len: int = 100) -> DecodeResult:
    """Best output under greedy (beam 1) or beam search."""
    if beam == 1:
        return greedy_decode(model, source, max_len)
    return beam_decode(model, source, beam, alpha, max_len)[0]


def alignment_trace(model: Seq2SeqModel, source, target_ids: Optional[List[int]] = None, max_len: int = 100):
    """Attention outputs per decode step: teacher-forced on ``target_ids`` when given, greedy otherwise."""
    steps = []
    with no_grad():
        enc = encode(model, source)
        state = model.initial_state()
        y = SOS
        for t in range(len(target_ids) if target_ids is not None else max_len):
            logits, att, state = decode_step(model, state, enc, y)
            steps.append(att)
            y = target_ids[t] if target_ids is not None else int(np.argmax(logits.data))
            if target_ids is None and y == EOS:
                break
    return steps, enc.length

"""Vocabularies, parallel corpora, synthetic monotonic tasks and batching."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import EmptyCorpusError, ParseError

PAD, UNK, SOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

TASK_KINDS = ("copy", "expansion", "toy-g2p")


class Vocab:
    """Token/id maps with reserved ids pad=0, unk=1, sos=2, eos=3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __repr__(self):
        return f"Vocab(size={len(self)})"

    @property
    def tokens(self) -> List[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> List[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, SOS):
                continue
            out.append(self.itos[i])
        return out


@dataclass
class Pair:
    source: Union[List[str], np.ndarray]
    references: List[List[str]]
    # target position -> source position, for the first reference (synthetic data only)
    alignment: Optional[List[int]] = None


@dataclass
class ParallelCorpus:
    pairs: List[Pair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ParallelCorpus(self.pairs[i])
        return self.pairs[i]

    @property
    def is_features(self) -> bool:
        return bool(self.pairs) and isinstance(self.pairs[0].source, np.ndarray)

    def validate(self) -> None:
        for k, p in enumerate(self.pairs):
            if len(p.source) == 0:
                raise ValueError(f"pair {k} has an empty source")
            if not p.references or any(len(r) == 0 for r in p.references):
                raise ValueError(f"pair {k} has a missing or empty reference")

    def to_tsv(self) -> str:
        """One ``source<TAB>reference`` line per reference (token sources only)."""
        lines = []
        for p in self.pairs:
            src = " ".join(p.source)
            for ref in p.references:
                lines.append(f"{src}\t{' '.join(ref)}\n")
        return "".join(lines)


def build_vocab(corpus, min_count: int = 1, side: str = "target") -> Vocab:
    """Vocabulary over one side of a corpus (or over plain token sequences).

    Tokens seen fewer than ``min_count`` times are left out and so encode to
    unk.  Ids are assigned by descending count, ties broken lexicographically.
    """
    if isinstance(corpus, ParallelCorpus):
        if len(corpus) == 0:
            raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
        if side == "source":
            seqs = [p.source for p in corpus]
        else:
            seqs = [r for p in corpus for r in p.references]
    else:
        seqs = list(corpus)
    counts = Counter(tok for seq in seqs for tok in seq)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    kind: str = "copy"
    alphabet_size: int = 20
    min_len: int = 5
    max_len: int = 20
    ratio_min: int = 2
    ratio_max: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.alphabet_size < 1:
            raise ValueError("alphabet_size must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if not 1 <= self.ratio_min <= self.ratio_max:
            raise ValueError(f"invalid ratio range [{self.ratio_min}, {self.ratio_max}]")


def alphabet(size: int) -> List[str]:
    letters = string.ascii_lowercase
    if size <= len(letters):
        return list(letters[:size])
    return [f"{letters[i % 26]}{i // 26}" if i >= 26 else letters[i] for i in range(size)]


def expansion_counts(spec: SyntheticTaskSpec) -> dict:
    """Repetition count of every alphabet symbol.

    Counts cycle through ``ratio_min..ratio_max`` over a fixed permutation of
    the alphabet, so each count value covers an equal share of symbols and
    the mean expansion ratio matches the midpoint of the range.  The table
    is part of the task definition: it ignores ``spec.seed``, so corpora
    sampled with different seeds follow the same rule.
    """
    syms = alphabet(spec.alphabet_size)
    rng = np.random.default_rng([spec.alphabet_size, spec.ratio_min, spec.ratio_max, 7919])
    order = rng.permutation(len(syms))
    values = list(range(spec.ratio_min, spec.ratio_max + 1))
    return {syms[j]: values[k % len(values)] for k, j in enumerate(order)}


def load_g2p_rules() -> List[tuple]:
    text = resources.files("monoattn").joinpath("resources/toy_g2p_rules.tsv").read_text()
    rules = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        graph, phone = line.split("\t")
        rules.append((graph, phone))
    return rules


def g2p_transcribe(word: str, rules: Optional[List[tuple]] = None):
    """Longest-match transcription; returns (phonemes, source start index per phoneme)."""
    rules = rules or load_g2p_rules()
    table = dict(rules)
    longest = max(len(g) for g, _ in rules)
    phones, starts = [], []
    i = 0
    while i < len(word):
        for n in range(min(longest, len(word) - i), 0, -1):
            chunk = word[i:i + n]
            if chunk in table:
                phones.append(table[chunk])
                starts.append(i)
                i += n
                break
        else:
            raise ValueError(f"no rule covers {word[i]!r} in {word!r}")
    return phones, starts


def gen_task(spec: SyntheticTaskSpec, n: int) -> ParallelCorpus:
    """``n`` pairs of a synthetic monotonic transduction task, reproducible from the seed."""
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    pairs = []
    if spec.kind == "toy-g2p":
        rules = load_g2p_rules()
        units = [g for g, _ in rules]
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            word = "".join(units[int(k)] for k in rng.integers(0, len(units), size=length))
            phones, starts = g2p_transcribe(word, rules)
            pairs.append(Pair(list(word), [phones], starts))
        return ParallelCorpus(pairs)

    syms = alphabet(spec.alphabet_size)
    counts = expansion_counts(spec) if spec.kind == "expansion" else None
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = [syms[int(k)] for k in rng.integers(0, len(syms), size=length)]
        if counts is None:
            pairs.append(Pair(src, [list(src)], list(range(length))))
        else:
            tgt, align = [], []
            for i, s in enumerate(src):
                tgt += [s] * counts[s]
                align += [i] * counts[s]
            pairs.append(Pair(src, [tgt], align))
    return ParallelCorpus(pairs)


def symbol_vector(symbol: str, dim: int, seed: int = 0) -> np.ndarray:
    """Fixed Gaussian vector for a symbol, independent of which corpus it appears in."""
    return np.random.default_rng([seed, 104729, *map(ord, symbol)]).normal(size=dim)


def render_features(corpus: ParallelCorpus, dim: int = 8, noise: float = 0.1, seed: int = 0) -> ParallelCorpus:
    """Speech-like variant of an expansion corpus.

    The long (expanded) side becomes the source, rendered frame by frame as a
    fixed random vector per symbol plus Gaussian noise; the short side becomes
    the target.  Alignments become target position -> first source frame.
    """
    rng = np.random.default_rng([seed, 104729])
    table = {}
    pairs = []
    for p in corpus:
        for tok in p.references[0]:
            if tok not in table:
                table[tok] = symbol_vector(tok, dim, seed)
    for p in corpus:
        frames_of = p.references[0]
        feats = np.stack([table[t] for t in frames_of]) + noise * rng.normal(size=(len(frames_of), dim))
        align = None
        if p.alignment is not None:
            first = {}
            for frame, s in enumerate(p.alignment):
                first.setdefault(s, frame)
            align = [first[i] for i in range(len(p.source))]
        pairs.append(Pair(feats, [list(p.source)], align))
    return ParallelCorpus(pairs)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def split_source(field_: str) -> List[str]:
    # "AB" (no whitespace) is a word spelled by characters; otherwise tokens are space separated
    field_ = field_.strip()
    return field_.split() if any(ch.isspace() for ch in field_) else list(field_)


def load_tsv(path) -> ParallelCorpus:
    """Read ``source<TAB>target`` lines; repeated sources merge into multi-reference entries."""
    entries = {}
    order = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("expected 'source<TAB>target'", lineno)
            src_field, tgt_field = line.split("\t", 1)
            src = split_source(src_field)
            tgt = tgt_field.split()
            if not src or not tgt:
                raise ParseError("empty source or target", lineno)
            key = tuple(src)
            if key not in entries:
                entries[key] = Pair(src, [])
                order.append(key)
            if tgt not in entries[key].references:
                entries[key].references.append(tgt)
    if not order:
        raise EmptyCorpusError(f"{path}: no sentence pairs")
    return ParallelCorpus([entries[k] for k in order])


def write_tsv(corpus: ParallelCorpus, path) -> None:
    Path(path).write_text(corpus.to_tsv(), encoding="utf-8")


def read_features(path) -> np.ndarray:
    """Feature file: header ``S D`` then S lines of D floats."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty feature file")
    try:
        S, D = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError(f"{path}: header must be 'S D'", 1) from None
    if len(lines) - 1 != S:
        raise ParseError(f"{path}: header announces {S} frames, found {len(lines) - 1}")
    rows = []
    for k, ln in enumerate(lines[1:], start=2):
        vals = ln.split()
        if len(vals) != D:
            raise ParseError(f"{path}: expected {D} values, found {len(vals)}", k)
        try:
            rows.append([float(v) for v in vals])
        except ValueError:
            raise ParseError(f"{path}: non-numeric value", k) from None
    return np.asarray(rows, dtype=np.float64).reshape(S, D)


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float64)
    S, D = feats.shape
    lines = [f"{S} {D}"] + [" ".join(format(v, ".17g") for v in row) for row in feats]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_tsv(path) -> ParallelCorpus:
    """Lines ``feature_file<TAB>target``; feature paths are relative to the TSV's directory."""
    base = Path(path).parent
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("expected 'feature_file<TAB>target'", lineno)
            fpath, tgt = line.split("\t", 1)
            tokens = tgt.split()
            if not tokens:
                raise ParseError("empty target", lineno)
            pairs.append(Pair(read_features(base / fpath.strip()), [tokens]))
    if not pairs:
        raise EmptyCorpusError(f"{path}: no utterances")
    return ParallelCorpus(pairs)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    sources: list  # id lists, or feature matrices
    targets: list  # id lists ending in eos

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        return iter(zip(self.sources, self.targets))

    @property
    def source_lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sources])

    @property
    def target_lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.targets])

    def padded_targets(self):
        """(ids [B x T_max] padded with pad, mask [B x T_max])."""
        return _pad(self.targets)

    def padded_sources(self):
        if self.sources and isinstance(self.sources[0], np.ndarray) and self.sources[0].ndim == 2:
            S = max(len(s) for s in self.sources)
            D = self.sources[0].shape[1]
            out = np.zeros((len(self.sources), S, D))
            mask = np.zeros((len(self.sources), S), dtype=bool)
            for k, s in enumerate(self.sources):
                out[k, :len(s)] = s
                mask[k, :len(s)] = True
            return out, mask
        return _pad(self.sources)


def _pad(seqs):
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for k, s in enumerate(seqs):
        ids[k, :len(s)] = s
        mask[k, :len(s)] = True
    return ids, mask


def encode_pairs(corpus: ParallelCorpus, vocab_src: Optional[Vocab], vocab_tgt: Vocab) -> list:
    """(source, target ids + eos) for every reference of every entry."""
    out = []
    for p in corpus:
        src = p.source if vocab_src is None else vocab_src.encode(p.source)
        for ref in p.references:
            out.append((src, vocab_tgt.encode(ref, add_eos=True)))
    return out


def batch_iter(corpus: ParallelCorpus, vocab_src: Optional[Vocab], vocab_tgt: Vocab,
               batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True) -> List[Batch]:
    """Shuffled batches for one epoch; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = encode_pairs(corpus, vocab_src, vocab_tgt)
    order = np.arange(len(items))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(items))
    batches = []
    for start in range(0, len(items), batch_size):
        chunk = [items[int(k)] for k in order[start:start + batch_size]]
        batches.append(Batch([c[0] for c in chunk], [c[1] for c in chunk]))
    return batches

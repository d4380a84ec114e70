"""Command-line entry points: train, eval, decode, align, bench.

Every run is driven by a :class:`RunConfig`.  A JSON config file supplies
values, command-line flags override it, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .attention import count_scorer_calls
from .autodiff import Tensor, no_grad
from .data import (
    SOS,
    ParallelCorpus,
    SyntheticTaskSpec,
    build_vocab,
    gen_task,
    load_feature_tsv,
    load_tsv,
    render_features,
    write_tsv,
)
from .decoding import alignment_trace, beam_decode, evaluate, greedy_decode
from .errors import ConfigError, EmptyCorpusError, MonoAttnError, VocabMismatchError
from .layers import AdamState
from .model import EncoderOutput, ModelConfig, Seq2SeqModel, decode_step
from .training import fit, max_decode_len

MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("input_mode", "src_vocab_size",
                                                                    "tgt_vocab_size", "feature_dim")]


@dataclass
class RunConfig:
    # data
    task: Optional[str] = "copy"  # copy | expansion | toy-g2p | features; ignored when --train is given
    train: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    n_train: int = 2000
    n_dev: int = 200
    alphabet_size: int = 20
    min_len: int = 5
    max_len: int = 20
    ratio_min: int = 2
    ratio_max: int = 3
    feature_dim: int = 8
    feature_noise: float = 0.1
    data_seed: int = 1
    min_count: int = 1
    # model
    attention: str = "local-mono-unconst"
    scorer: str = "mlp"
    two_sigma: float = 3.0
    c_max: float = 5.0
    src_embed_dim: int = 32
    tgt_embed_dim: int = 32
    feature_proj_dim: int = 64
    enc_layers: int = 1
    enc_hidden: int = 64
    subsample_layers: List[int] = field(default_factory=list)
    dec_layers: int = 1
    dec_hidden: int = 64
    scorer_hidden: int = 32
    position_hidden: int = 32
    local_m_ratio: float = 1.0
    # training
    lr: float = 5e-4
    epochs: int = 15
    batch_size: int = 16
    clip_norm: float = 5.0
    seed: int = 0
    stop_at_dev_acc: Optional[float] = None
    lr_decay: float = 1.0
    # decoding
    beam: int = 1
    alpha: float = 1.0
    decode_max_len: int = 0  # 0: twice the longest reference
    # output / execution
    out_dir: str = "run"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def task_spec(self, seed: int) -> SyntheticTaskSpec:
        kind = "expansion" if self.task == "features" else self.task
        return SyntheticTaskSpec(kind, self.alphabet_size, self.min_len, self.max_len,
                                 self.ratio_min, self.ratio_max, seed)

    def model_config(self, input_mode: str, src_vocab: int, tgt_vocab: int, feature_dim: int = 0) -> ModelConfig:
        kw = {k: getattr(self, k) for k in MODEL_KEYS if k != "seed"}
        return ModelConfig(input_mode=input_mode, src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab,
                           feature_dim=feature_dim, seed=self.seed, **kw)


# ---------------------------------------------------------------------------
# Data selection
# ---------------------------------------------------------------------------

def _synthetic(cfg: RunConfig, n: int, seed: int) -> ParallelCorpus:
    if cfg.task not in ("copy", "expansion", "toy-g2p", "features"):
        raise ConfigError(f"unknown task {cfg.task!r}")
    corpus = gen_task(cfg.task_spec(seed), n)
    if cfg.task == "features":
        corpus = render_features(corpus, cfg.feature_dim, cfg.feature_noise, seed=cfg.data_seed)
    return corpus


def _load(path: str) -> ParallelCorpus:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    field_ = first.split("\t", 1)[0].strip()
    if field_ and not any(ch.isspace() for ch in field_) and (Path(path).parent / field_).is_file():
        return load_feature_tsv(path)
    return load_tsv(path)


def load_splits(cfg: RunConfig):
    """(train, dev) corpora from files or the synthetic generator."""
    if cfg.train:
        train = _load(cfg.train)
        dev = _load(cfg.dev) if cfg.dev else None
    else:
        train = _synthetic(cfg, cfg.n_train, cfg.data_seed)
        dev = _synthetic(cfg, cfg.n_dev, cfg.data_seed + 1000) if cfg.n_dev else None
    return train, dev


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, log=print) -> Path:
    """Train and write ``train.log`` plus one checkpoint per epoch; returns the final checkpoint path."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev = load_splits(cfg)
    if len(train) == 0:
        raise EmptyCorpusError("training corpus is empty")
    if train.is_features:
        vocab_src = None
        model_cfg = cfg.model_config("features", 0, 0, train[0].source.shape[1])
    else:
        vocab_src = build_vocab(train, cfg.min_count, side="source")
        model_cfg = cfg.model_config("tokens", len(vocab_src), 0)
    vocab_tgt = build_vocab(train, cfg.min_count, side="target")
    model_cfg.tgt_vocab_size = len(vocab_tgt)
    model_cfg.validate()
    model = Seq2SeqModel(model_cfg)
    if not cfg.train and not train.is_features:
        write_tsv(train, out / "train.tsv")
        if dev is not None:
            write_tsv(dev, out / "dev.tsv")
    rng = np.random.default_rng(cfg.seed)

    def snapshot(epoch: int, optimizer: Optional[AdamState]) -> Path:
        ck = ckpt_io.from_model(model, vocab_src, vocab_tgt, epoch, rng, optimizer)
        path = out / f"epoch_{epoch:03d}.ckpt"
        ckpt_io.save(ck, path)
        ckpt_io.save(ck, out / "last.ckpt")
        return path

    log_path = out / "train.log"
    log_path.write_text("")
    snapshot(0, None)

    def on_epoch(rec, optimizer):
        line = rec.log_line()
        with open(log_path, "a") as fh:
            fh.write(line + "\n")
        log(line)
        snapshot(rec.epoch, optimizer)

    if cfg.epochs > 0:
        fit(model, train, vocab_src, vocab_tgt, dev=dev, epochs=cfg.epochs, lr=cfg.lr,
            batch_size=cfg.batch_size, clip_norm=cfg.clip_norm, seed=cfg.seed,
            stop_at_dev_acc=cfg.stop_at_dev_acc, lr_decay=cfg.lr_decay, on_epoch=on_epoch)
    return out / "last.ckpt"


def load_model(path):
    ck = ckpt_io.load(path)
    return ck, ck.build_model()


def _check_compatible(ck, corpus: ParallelCorpus) -> None:
    if len(corpus) == 0:
        raise EmptyCorpusError("evaluation corpus is empty")
    cfg = ck.config
    if corpus.is_features != (cfg.input_mode == "features"):
        raise VocabMismatchError(f"checkpoint expects {cfg.input_mode} input; corpus does not match")
    if corpus.is_features:
        width = corpus[0].source.shape[1]
        if width != cfg.feature_dim:
            raise VocabMismatchError(f"feature width {width} differs from checkpoint's {cfg.feature_dim}")
        return
    types = {t for p in corpus for t in p.source}
    known = sum(t in ck.src_vocab for t in types)
    if known * 2 < len(types):
        raise VocabMismatchError(
            f"only {known} of {len(types)} source token types are in the checkpoint vocabulary"
        )


def decode_corpus(model, ck, corpus: ParallelCorpus, beam: int = 1, alpha: float = 1.0,
                  max_len: int = 0, workers: int = 1) -> List[List[str]]:
    max_len = max_len or max_decode_len(corpus)

    def one(p):
        src = p.source if ck.src_vocab is None else ck.src_vocab.encode(p.source)
        if beam == 1:
            res = greedy_decode(model, src, max_len)
        else:
            res = beam_decode(model, src, beam, alpha, max_len)[0]
        return ck.tgt_vocab.decode(res.tokens)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, corpus))
    return [one(p) for p in corpus]


def cmd_eval(checkpoint_path, corpus: ParallelCorpus, beam: int = 1, alpha: float = 1.0,
             max_len: int = 0, workers: int = 1, out=print):
    """Decode and score a corpus; prints a per-item table then one key=value summary line."""
    ck, model = load_model(checkpoint_path)
    _check_compatible(ck, corpus)
    hyps = decode_corpus(model, ck, corpus, beam, alpha, max_len, workers)
    report = evaluate(hyps, [p.references for p in corpus])
    out("item\tdist\tsub\tins\tdel\tref_len\texact\thyp")
    for k, (item, hyp) in enumerate(zip(report.items, report.hypotheses)):
        out(f"{k}\t{item.ops.distance}\t{item.ops.subs}\t{item.ops.ins}\t{item.ops.dels}\t"
            f"{item.ref_length}\t{int(item.exact_match)}\t{' '.join(hyp)}")
    out(report.summary())
    return report


def cmd_decode(checkpoint_path, sources: List[List[str]], beam: int = 1, alpha: float = 1.0,
               max_len: int = 100, out=print) -> List[List[str]]:
    ck, model = load_model(checkpoint_path)
    corpus = ParallelCorpus([_pair(s) for s in sources])
    hyps = decode_corpus(model, ck, corpus, beam, alpha, max_len)
    for h in hyps:
        out(" ".join(h))
    return hyps


def _pair(src):
    from .data import Pair

    return Pair(src, [["-"]])


def write_alignment_csv(path, steps, S: int) -> None:
    lines = ["t,p,delta_p,lambda,window_lo,window_hi"]
    for t, a in enumerate(steps, start=1):
        lines.append(f"{t},{a.p!r},{a.delta_p!r},{a.lam!r},{a.window_lo},{a.window_hi}")
    lines.append("")
    for a in steps:
        lines.append(",".join(repr(float(v)) for v in a.full_posterior(S)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_alignment_csv(path):
    """(rows as dicts, posterior matrix) from a file written by :func:`write_alignment_csv`."""
    text = Path(path).read_text().split("\n\n", 1)
    head, _, body = text[0].partition("\n")
    keys = head.split(",")
    rows = []
    for ln in body.splitlines():
        vals = ln.split(",")
        rows.append({k: (int(v) if k in ("t", "window_lo", "window_hi") else float(v)) for k, v in zip(keys, vals)})
    matrix = np.array([[float(v) for v in ln.split(",")] for ln in text[1].splitlines() if ln.strip()])
    return rows, matrix


def cmd_align(checkpoint_path, corpus: ParallelCorpus, out_dir, teacher_forced: bool = True) -> List[Path]:
    """Write ``item<k>.csv`` alignment traces for every corpus entry."""
    ck, model = load_model(checkpoint_path)
    _check_compatible(ck, corpus)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, p in enumerate(corpus):
        src = p.source if ck.src_vocab is None else ck.src_vocab.encode(p.source)
        tgt = ck.tgt_vocab.encode(p.references[0], add_eos=True) if teacher_forced else None
        steps, S = alignment_trace(model, src, tgt, max_decode_len(corpus))
        path = out / f"item{k}.csv"
        write_alignment_csv(path, steps, S)
        paths.append(path)
    return paths


@dataclass
class BenchRow:
    S: int
    attention: str
    steps: int
    scorer_calls: int
    bound: int
    seconds: float
    right_clipped: bool


def cmd_bench(cfg: RunConfig, lengths: List[int], steps: int = 10, repeats: int = 3, out=print) -> List[BenchRow]:
    """Scorer-call counts and decode wall time of global vs local monotonic attention.

    Encoder states are random rows shared as a common prefix across lengths,
    so the local model follows the same trajectory whenever the window does
    not touch the right edge.
    """
    if list(lengths) != sorted(lengths):
        raise ConfigError("bench lengths must be sorted ascending")
    rng = np.random.default_rng(cfg.seed)
    vocab = 8
    base = cfg.model_config("tokens", vocab, vocab)
    states = rng.normal(size=(max(lengths), base.enc_dim))
    tokens = [SOS] + [int(t) for t in rng.integers(4, vocab, size=steps - 1)]
    rows = []
    for kind in ("global", "local-mono-unconst"):
        mcfg = dataclasses.replace(base, attention=kind, scorer=cfg.scorer if cfg.scorer != "none" else "mlp")
        model = Seq2SeqModel(mcfg)
        W = model.halfwidth
        for S in lengths:
            enc = EncoderOutput(Tensor(states[:S]), S)
            best = float("inf")
            for _ in range(repeats):
                clipped = False
                with no_grad(), count_scorer_calls() as counter:
                    state = model.initial_state()
                    start = time.perf_counter()
                    for y in tokens:
                        _, att, state = decode_step(model, state, enc, y)
                        if kind != "global" and int(np.floor(att.p)) + W > S - 1:
                            clipped = True
                    best = min(best, time.perf_counter() - start)
            bound = steps * S if kind == "global" else steps * (2 * W + 1)
            rows.append(BenchRow(S, kind, steps, counter.calls, bound, best, clipped))
    _check_bench(rows)
    out("S\tattention\tsteps\tscorer_calls\tbound\tseconds\tright_clipped")
    for r in rows:
        out(f"{r.S}\t{r.attention}\t{r.steps}\t{r.scorer_calls}\t{r.bound}\t{r.seconds:.6f}\t{int(r.right_clipped)}")
    return rows


def _check_bench(rows: List[BenchRow]) -> None:
    local_counts = set()
    for r in rows:
        if r.attention == "global":
            assert r.scorer_calls == r.steps * r.S, f"global attention scored {r.scorer_calls} pairs at S={r.S}"
        else:
            assert r.scorer_calls <= r.bound, f"local attention scored {r.scorer_calls} > {r.bound} at S={r.S}"
            if not r.right_clipped:
                local_counts.add(r.scorer_calls)
    assert len(local_counts) <= 1, f"local scorer calls vary with S: {sorted(local_counts)}"


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    for f in fields(RunConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if f.name == "subsample_layers":
            p.add_argument(_flag(f.name), type=int, nargs="*", default=None)
            continue
        if isinstance(default, bool):
            typ = None
        elif isinstance(default, int):
            typ = int
        elif isinstance(default, float) or f.name == "stop_at_dev_acc":
            typ = float
        else:
            typ = str
        p.add_argument(_flag(f.name), type=typ, default=None, help=f"default: {default}")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = dataclasses.asdict(RunConfig.from_file(args.config))
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            base[f.name] = val
    return RunConfig.from_dict(base)


def _corpus_from_args(args, cfg: RunConfig) -> ParallelCorpus:
    if args.corpus:
        return _load(args.corpus)
    _, dev = load_splits(dataclasses.replace(cfg, train=None))
    if dev is None:
        raise EmptyCorpusError("no corpus given and n_dev is 0")
    return dev


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monoattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)

    for name in ("eval", "align"):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a corpus")
        p.add_argument("checkpoint")
        p.add_argument("--corpus", help="TSV corpus (default: the configured synthetic dev split)")
        if name == "align":
            p.add_argument("--greedy", action="store_true", help="align greedy output instead of the reference")
        _add_config_flags(p)

    p = sub.add_parser("decode", help="decode sources read from a file or stdin")
    p.add_argument("checkpoint")
    p.add_argument("--input", help="one source per line (default: stdin)")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="scorer-call and timing benchmark")
    p.add_argument("--lengths", type=int, nargs="+", default=[10, 100, 1000])
    p.add_argument("--steps", type=int, default=10)
    _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, _corpus_from_args(args, cfg), cfg.beam, cfg.alpha,
                     cfg.decode_max_len, cfg.workers)
        elif args.command == "align":
            paths = cmd_align(args.checkpoint, _corpus_from_args(args, cfg), cfg.out_dir, not args.greedy)
            print(f"wrote {len(paths)} alignment files to {cfg.out_dir}")
        elif args.command == "decode":
            fh = open(args.input, encoding="utf-8") if args.input else sys.stdin
            with fh:
                sources = [_split(ln.split("\t", 1)[0]) for ln in fh if ln.strip()]
            cmd_decode(args.checkpoint, sources, cfg.beam, cfg.alpha, cfg.decode_max_len or 100)
        elif args.command == "bench":
            cmd_bench(cfg, args.lengths, args.steps)
    except MonoAttnError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except AssertionError as exc:
        print(f"error: bench-check: {exc}", file=sys.stderr)
        return 4
    return 0


def _split(field_: str) -> List[str]:
    from .data import split_source

    return split_source(field_)


if __name__ == "__main__":
    sys.exit(main())

"""Local monotonic attention for sequence-to-sequence transduction, on a small numpy autodiff core."""

from .data import ParallelCorpus, SyntheticTaskSpec, Vocab, gen_task
from .decoding import beam_decode, evaluate, greedy_decode
from .errors import MonoAttnError
from .estimator import MonotonicSeq2Seq
from .model import ModelConfig, Seq2SeqModel
from .training import fit

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "MonoAttnError",
    "MonotonicSeq2Seq",
    "ParallelCorpus",
    "Seq2SeqModel",
    "SyntheticTaskSpec",
    "Vocab",
    "beam_decode",
    "evaluate",
    "fit",
    "gen_task",
    "greedy_decode",
]

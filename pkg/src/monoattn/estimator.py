"""scikit-learn style wrapper around the model, training loop and decoders.

>>> est = MonotonicSeq2Seq(epochs=1, enc_hidden=8, dec_hidden=8)
>>> est.fit(["abc", "bca"], ["abc", "bca"]).predict(["abc"])  # doctest: +SKIP
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Pair, ParallelCorpus, Vocab, build_vocab, split_source
from .decoding import alignment_trace, decode, evaluate
from .model import ModelConfig, Seq2SeqModel
from .training import fit as fit_loop
from .training import max_decode_len


def check_sequences(X, name: str = "X", allow_features: bool = True) -> list:
    """Normalize a batch of sequences.

    Strings are split like TSV source fields, token lists are copied, and 2-D
    arrays are treated as feature matrices.  All items must be of one kind.
    """
    if isinstance(X, (str, np.ndarray)) and not (isinstance(X, np.ndarray) and X.dtype == object):
        raise ValueError(f"{name} must be a sequence of sequences, got a single {type(X).__name__}")
    out = []
    for k, item in enumerate(X):
        if isinstance(item, str):
            seq = split_source(item)
        elif isinstance(item, np.ndarray) and item.ndim == 2:
            if not allow_features:
                raise ValueError(f"{name}[{k}]: feature matrices are not allowed here")
            seq = np.asarray(item, dtype=np.float64)
            if not np.all(np.isfinite(seq)):
                raise ValueError(f"{name}[{k}] contains non-finite values")
        else:
            seq = [str(t) for t in item]
        if len(seq) == 0:
            raise ValueError(f"{name}[{k}] is empty")
        out.append(seq)
    if not out:
        raise ValueError(f"{name} is empty")
    kinds = {isinstance(s, np.ndarray) for s in out}
    if len(kinds) > 1:
        raise ValueError(f"{name} mixes feature matrices and token sequences")
    if kinds == {True} and len({s.shape[1] for s in out}) > 1:
        raise ValueError(f"{name} feature matrices differ in width")
    return out


def check_pairs(X, y) -> tuple:
    X = check_sequences(X, "X")
    y = check_sequences(y, "y", allow_features=False)
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} items but y has {len(y)}")
    return X, y


class MonotonicSeq2Seq(BaseEstimator):
    """Attention encoder-decoder for monotonic sequence transduction.

    Constructor arguments mirror :class:`~monoattn.model.ModelConfig` plus
    training and decoding settings.  ``predict`` returns token lists;
    ``score`` returns exact-match sequence accuracy.
    """

    def __init__(self, attention="local-mono-unconst", scorer="mlp", two_sigma=3.0, c_max=5.0,
                 src_embed_dim=32, tgt_embed_dim=32, feature_proj_dim=64, enc_layers=1, enc_hidden=64,
                 subsample_layers=(), dec_layers=1, dec_hidden=64, scorer_hidden=32, position_hidden=32,
                 local_m_ratio=1.0, lr=5e-4, lr_decay=1.0, epochs=15, batch_size=16, clip_norm=5.0,
                 beam=1, alpha=1.0, max_len=None, random_state=0):
        self.attention = attention
        self.scorer = scorer
        self.two_sigma = two_sigma
        self.c_max = c_max
        self.src_embed_dim = src_embed_dim
        self.tgt_embed_dim = tgt_embed_dim
        self.feature_proj_dim = feature_proj_dim
        self.enc_layers = enc_layers
        self.enc_hidden = enc_hidden
        self.subsample_layers = subsample_layers
        self.dec_layers = dec_layers
        self.dec_hidden = dec_hidden
        self.scorer_hidden = scorer_hidden
        self.position_hidden = position_hidden
        self.local_m_ratio = local_m_ratio
        self.lr = lr
        self.lr_decay = lr_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.beam = beam
        self.alpha = alpha
        self.max_len = max_len
        self.random_state = random_state

    def _model_config(self, features: bool, src_vocab: int, tgt_vocab: int, feature_dim: int) -> ModelConfig:
        cfg = ModelConfig(
            input_mode="features" if features else "tokens",
            src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab, feature_dim=feature_dim,
            src_embed_dim=self.src_embed_dim, tgt_embed_dim=self.tgt_embed_dim,
            feature_proj_dim=self.feature_proj_dim, enc_layers=self.enc_layers, enc_hidden=self.enc_hidden,
            subsample_layers=tuple(self.subsample_layers), dec_layers=self.dec_layers,
            dec_hidden=self.dec_hidden, attention=self.attention, scorer=self.scorer,
            scorer_hidden=self.scorer_hidden, two_sigma=float(self.two_sigma), c_max=float(self.c_max),
            position_hidden=self.position_hidden, local_m_ratio=float(self.local_m_ratio),
            seed=int(self.random_state),
        )
        cfg.validate()
        return cfg

    def fit(self, X, y, X_dev=None, y_dev=None):
        X, y = check_pairs(X, y)
        train = ParallelCorpus([Pair(s, [t]) for s, t in zip(X, y)])
        dev = None
        if X_dev is not None:
            Xd, yd = check_pairs(X_dev, y_dev)
            dev = ParallelCorpus([Pair(s, [t]) for s, t in zip(Xd, yd)])
        features = train.is_features
        self.src_vocab_: Optional[Vocab] = None if features else build_vocab(train, side="source")
        self.tgt_vocab_: Vocab = build_vocab(train, side="target")
        cfg = self._model_config(features, 0 if features else len(self.src_vocab_), len(self.tgt_vocab_),
                                 X[0].shape[1] if features else 0)
        self.model_ = Seq2SeqModel(cfg)
        self.history_ = fit_loop(self.model_, train, self.src_vocab_, self.tgt_vocab_, dev=dev,
                                 epochs=self.epochs, lr=self.lr, lr_decay=self.lr_decay,
                                 batch_size=self.batch_size, clip_norm=self.clip_norm,
                                 seed=int(self.random_state))
        self.max_len_ = self.max_len or max_decode_len(train)
        return self

    def predict(self, X) -> List[List[str]]:
        check_is_fitted(self, "model_")
        out = []
        for s in self._check_input(X):
            res = decode(self.model_, self._encode(s), self.beam, self.alpha, self.max_len_)
            out.append(self.tgt_vocab_.decode(res.tokens))
        return out

    def _check_input(self, X) -> list:
        X = check_sequences(X, "X")
        cfg = self.model_.config
        if (cfg.input_mode == "features") != isinstance(X[0], np.ndarray):
            raise ValueError(f"model was fitted on {cfg.input_mode} input")
        if cfg.input_mode == "features" and X[0].shape[1] != cfg.feature_dim:
            raise ValueError(f"X has {X[0].shape[1]} features, model expects {cfg.feature_dim}")
        return X

    def _encode(self, s):
        return s if self.src_vocab_ is None else self.src_vocab_.encode(s)

    def transform(self, X) -> List[np.ndarray]:
        """Alignment centers ``p_t`` of the greedy decode of every item, one array per item."""
        check_is_fitted(self, "model_")
        X = self._check_input(X)
        out = []
        for s in X:
            steps, _ = alignment_trace(self.model_, self._encode(s), None, self.max_len_)
            out.append(np.array([a.p for a in steps], dtype=np.float64))
        return out

    def score(self, X, y) -> float:
        X, y = check_pairs(X, y)
        return evaluate(self.predict(X), [[t] for t in y]).seq_accuracy

    def error_rate(self, X, y: Sequence) -> float:
        """Token error rate against the closest reference.

        A ``y`` item that is a string or a list of strings is one reference; a
        list of such sequences holds several.
        """
        X = check_sequences(X, "X")
        refs = []
        for item in y:
            if isinstance(item, (list, tuple)) and item and not isinstance(item[0], str):
                refs.append(check_sequences(item, "y", allow_features=False))
            else:
                refs.append(check_sequences([item], "y", allow_features=False))
        return evaluate(self.predict(X), refs).per

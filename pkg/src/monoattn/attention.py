"""Attention mechanisms: scorers, global attention, fixed-step local attention
and local monotonic attention with a predicted, forward-only alignment center.

Local monotonic attention runs in three stages per decode step:

1. a small MLP on the decoder state predicts a non-negative shift ``delta_p``
   and a positive scale ``lambda``; the new center is ``p_prev + delta_p``;
2. a scorer is evaluated only on encoder states within ``W`` positions of
   ``floor(p)`` and softmax-normalized there (the "likelihood");
3. the likelihood is multiplied by ``lambda * exp(-(s - p)^2 / (2 sigma^2))``
   (the "prior", evaluated at the real-valued center) and the product, left
   unnormalized, weights the encoder states into the context vector.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _result
from .errors import DimensionError, EmptySequenceError

SCORER_KINDS = ("dot", "bilinear", "mlp", "none")
POSITION_MODES = ("constrained", "unconstrained")

_count_local = threading.local()


class ScorerCounter:
    calls = 0


@contextlib.contextmanager
def count_scorer_calls():
    """Count (encoder state, decoder state) pairs scored in the current thread."""
    counter = ScorerCounter()
    stack = getattr(_count_local, "stack", None)
    if stack is None:
        stack = _count_local.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _bump(n: int) -> None:
    for c in getattr(_count_local, "stack", ()):
        c.calls += n


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

@dataclass
class ScorerParams:
    """Scorer weights.

    The MLP weight ``W_s`` of shape [K x (M+N)] is held as its two column
    blocks: ``w_enc`` [K x M] acting on the encoder state and ``w_dec``
    [K x N] acting on the decoder state.
    """

    kind: str
    enc_dim: int
    dec_dim: int
    w: Optional[Tensor] = None  # bilinear [M x N]
    v: Optional[Tensor] = None  # mlp [K]
    w_enc: Optional[Tensor] = None
    w_dec: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, kind: str, enc_dim: int, dec_dim: int, hidden: int = 32) -> "ScorerParams":
        if kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer kind {kind!r}; expected one of {SCORER_KINDS}")
        if kind == "dot":
            if enc_dim != dec_dim:
                raise DimensionError(f"dot scorer needs equal sizes, got M={enc_dim}, N={dec_dim}")
            return cls(kind, enc_dim, dec_dim)
        if kind == "bilinear":
            r = math.sqrt(6.0 / (enc_dim + dec_dim))
            w = Tensor(rng.uniform(-r, r, size=(enc_dim, dec_dim)), requires_grad=True, name="scorer.w")
            return cls(kind, enc_dim, dec_dim, w=w)
        if kind == "mlp":
            r = math.sqrt(6.0 / (hidden + enc_dim + dec_dim))
            w = rng.uniform(-r, r, size=(hidden, enc_dim + dec_dim))
            r = math.sqrt(6.0 / (hidden + 1))
            v = Tensor(rng.uniform(-r, r, size=hidden), requires_grad=True, name="scorer.v")
            return cls(
                kind, enc_dim, dec_dim, v=v,
                w_enc=Tensor(w[:, :enc_dim], requires_grad=True, name="scorer.w_enc"),
                w_dec=Tensor(w[:, enc_dim:], requires_grad=True, name="scorer.w_dec"),
            )
        return cls(kind, enc_dim, dec_dim)

    def parameters(self) -> list:
        return [t for t in (self.w, self.w_enc, self.w_dec, self.v) if t is not None]


def _check_scorer_inputs(scorer: ScorerParams, h_e: Tensor, h_d: Tensor) -> None:
    if scorer.kind == "none":
        raise ValueError("scorer kind 'none' has no score; callers use a constant likelihood")
    if h_e.shape[-1] != scorer.enc_dim or h_d.shape != (scorer.dec_dim,):
        raise DimensionError(
            f"{scorer.kind} scorer expects encoder width {scorer.enc_dim} and decoder "
            f"width {scorer.dec_dim}, got {h_e.shape} and {h_d.shape}"
        )


def score(scorer: ScorerParams, h_e: Tensor, h_d: Tensor) -> Tensor:
    """Relevance of a single encoder state to the decoder state."""
    _check_scorer_inputs(scorer, h_e, h_d)
    _bump(1)
    if scorer.kind == "dot":
        return ad.matmul(h_e, h_d)
    if scorer.kind == "bilinear":
        return ad.matmul(h_e, ad.matmul(scorer.w, h_d))
    pre = ad.add(ad.matmul(scorer.w_enc, h_e), ad.matmul(scorer.w_dec, h_d))
    return ad.matmul(scorer.v, ad.tanh(pre))


def score_rows(scorer: ScorerParams, H: Tensor, h_d: Tensor) -> Tensor:
    """Scores of every row of ``H`` against ``h_d``; same values as calling :func:`score` per row."""
    _check_scorer_inputs(scorer, H, h_d)
    _bump(H.shape[0])
    if scorer.kind == "dot":
        return ad.matmul(H, h_d)
    if scorer.kind == "bilinear":
        return ad.matmul(H, ad.matmul(scorer.w, h_d))
    enc_part = ad.matmul_t(H, scorer.w_enc)
    dec_part = ad.matmul(scorer.w_dec, h_d)
    return ad.matmul(ad.tanh(ad.add(enc_part, dec_part)), scorer.v)


# ---------------------------------------------------------------------------
# Outputs and state
# ---------------------------------------------------------------------------

@dataclass
class AttentionOutput:
    """Alignment artifacts of one decode step.

    ``prior``, ``likelihood`` and ``posterior`` cover encoder indices
    ``window_lo .. window_hi - 1``.  For global attention the window is the
    whole sequence and ``prior`` is ``None``.
    """

    context: Tensor
    posterior: np.ndarray
    window_lo: int
    window_hi: int
    likelihood: Optional[np.ndarray] = None
    prior: Optional[np.ndarray] = None
    p: float = float("nan")
    delta_p: float = float("nan")
    lam: float = float("nan")
    weights: Optional[Tensor] = field(default=None, repr=False)

    def full_posterior(self, S: int) -> np.ndarray:
        """Posterior scattered into a length-``S`` row, zero outside the window."""
        row = np.zeros(S)
        row[self.window_lo:self.window_hi] = self.posterior
        return row


@dataclass
class MonotonicState:
    """Alignment center carried between decode steps (a scalar tensor so gradients flow)."""

    p: Tensor

    @classmethod
    def initial(cls, p0: float = 0.0) -> "MonotonicState":
        if p0 < 0:
            raise ValueError(f"initial position must be >= 0, got {p0}")
        return cls(Tensor(float(p0)))

    @property
    def value(self) -> float:
        return float(self.p.data)


def _need_rows(H: Tensor) -> int:
    if H.ndim != 2 or H.shape[0] == 0:
        raise EmptySequenceError(f"encoder output must be a nonempty [S x M] matrix, got {H.shape}")
    return H.shape[0]


# ---------------------------------------------------------------------------
# Global and fixed-step local attention
# ---------------------------------------------------------------------------

def global_attend(scorer: ScorerParams, H: Tensor, h_d: Tensor):
    """Softmax over all encoder states; returns ``(context, weights)``."""
    _need_rows(H)
    if scorer.kind == "none":
        raise ValueError("global attention needs a scorer")
    weights = ad.softmax_masked(score_rows(scorer, H, h_d))
    return ad.matmul(weights, H), weights


def local_m_window(t: int, S: int, halfwidth: int, ratio: float = 1.0) -> tuple:
    """Window ``[lo, hi)`` centred on ``t * ratio`` with the center clipped to ``S - 1``."""
    if t < 0:
        raise ValueError(f"decode step must be >= 0, got {t}")
    center = min(int(math.floor(t * ratio)), S - 1)
    return max(0, center - halfwidth), min(S - 1, center + halfwidth) + 1


def local_m_attend(scorer: ScorerParams, H: Tensor, h_d: Tensor, t: int, halfwidth: int, ratio: float = 1.0):
    """Local attention at the fixed position ``t``; returns ``(context, weights, lo, hi)``."""
    S = _need_rows(H)
    lo, hi = local_m_window(t, S, halfwidth, ratio)
    Hw = ad.slice_rows(H, lo, hi)
    weights = ad.softmax_masked(score_rows(scorer, Hw, h_d))
    return ad.matmul(weights, Hw), weights, lo, hi


# ---------------------------------------------------------------------------
# Local monotonic attention
# ---------------------------------------------------------------------------

def window_halfwidth(two_sigma: float) -> int:
    return max(1, int(math.floor(two_sigma + 0.5)))


@dataclass
class PositionPredictor:
    mode: str
    w_p: Tensor  # [K x N], shared by the shift and scale heads
    v_p: Tensor  # [K]
    v_lam: Tensor  # [K]
    sigma: float
    c_max: float = 5.0

    def __post_init__(self):
        if self.mode not in POSITION_MODES:
            raise ValueError(f"unknown position mode {self.mode!r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.mode == "constrained" and self.c_max <= 0:
            raise ValueError(f"c_max must be > 0, got {self.c_max}")

    @classmethod
    def init(cls, rng, mode: str, dec_dim: int, hidden: int = 32, two_sigma: float = 3.0,
             c_max: float = 5.0) -> "PositionPredictor":
        r = math.sqrt(6.0 / (hidden + dec_dim))
        return cls(
            mode=mode,
            w_p=Tensor(rng.uniform(-r, r, size=(hidden, dec_dim)), requires_grad=True, name="position.w_p"),
            v_p=Tensor(np.zeros(hidden), requires_grad=True, name="position.v_p"),
            v_lam=Tensor(np.zeros(hidden), requires_grad=True, name="position.v_lam"),
            sigma=two_sigma / 2.0,
            c_max=c_max,
        )

    @property
    def window_halfwidth(self) -> int:
        return window_halfwidth(2.0 * self.sigma)

    def parameters(self) -> list:
        return [self.w_p, self.v_p, self.v_lam]


def predict_delta(pp: PositionPredictor, h_d: Tensor):
    """Forward shift of the alignment center and prior scale; both scalar tensors."""
    if h_d.shape != (pp.w_p.shape[1],):
        raise DimensionError(f"decoder state {h_d.shape} does not match W_p {pp.w_p.shape}")
    hidden = ad.tanh(ad.matmul(pp.w_p, h_d))
    z = ad.matmul(pp.v_p, hidden)
    if pp.mode == "constrained":
        delta = ad.scale(ad.sigmoid(z), pp.c_max)
    else:
        delta = ad.exp(z)
    lam = ad.exp(ad.matmul(pp.v_lam, hidden))
    return delta, lam


def gaussian_prior(p: float, sigma: float, lam: float, indices) -> np.ndarray:
    """``lam * exp(-(s - p)^2 / (2 sigma^2))`` at each integer ``s`` in ``indices``."""
    s = np.asarray(indices, dtype=np.float64)
    return lam * np.exp(-((s - p) ** 2) / (2.0 * sigma * sigma))


def gaussian_prior_op(p: Tensor, lam: Tensor, indices, sigma: float) -> Tensor:
    """Differentiable :func:`gaussian_prior` in the center and the scale."""
    s = np.asarray(indices, dtype=np.float64)
    pv = float(p.data)
    lv = float(lam.data)
    shape = np.exp(-((s - pv) ** 2) / (2.0 * sigma * sigma))
    out = lv * shape

    def bw(g):
        return np.dot(g, out * (s - pv)) / (sigma * sigma), np.dot(g, shape)

    return _result(out, (p, lam), bw, "gaussian_prior")


def monotonic_window(p: float, S: int, halfwidth: int) -> tuple:
    """Encoder index range ``[lo, hi)`` around ``floor(p)``, clipped to the sequence."""
    center = min(max(int(math.floor(p)), 0), S - 1)
    return max(0, center - halfwidth), min(S - 1, center + halfwidth) + 1


def attend_local_monotonic(state: MonotonicState, pp: PositionPredictor, scorer: ScorerParams,
                           H: Tensor, h_d: Tensor):
    """One step of local monotonic attention; returns ``(AttentionOutput, new_state)``."""
    S = _need_rows(H)
    delta, lam = predict_delta(pp, h_d)
    p_t = ad.add(state.p, delta)
    pv = float(p_t.data)
    lo, hi = monotonic_window(pv, S, pp.window_halfwidth)

    prior = gaussian_prior_op(p_t, lam, np.arange(lo, hi), pp.sigma)
    Hw = ad.slice_rows(H, lo, hi)
    if scorer.kind == "none":
        likelihood = np.ones(hi - lo)
        posterior = prior
    else:
        lik = ad.softmax_masked(score_rows(scorer, Hw, h_d))
        likelihood = lik.data
        posterior = ad.mul(prior, lik)
    context = ad.matmul(posterior, Hw)

    out = AttentionOutput(
        context=context,
        posterior=posterior.data,
        window_lo=lo,
        window_hi=hi,
        likelihood=likelihood,
        prior=prior.data,
        p=pv,
        delta_p=float(delta.data),
        lam=float(lam.data),
        weights=posterior,
    )
    return out, MonotonicState(p_t)

"""Training objectives: masked prediction, decoder sequence loss, CTC, and their joint forms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax, mean, mul
from .autodiff import sum as tsum
from .autodiff.tensor import _make

__all__ = [
    "JointSSLWeights",
    "JointFinetuneWeights",
    "cross_entropy",
    "masked_prediction_loss",
    "sequence_loss",
    "joint_ssl_loss",
    "ctc_min_length",
    "ctc_nll",
    "ctc_loss",
    "joint_finetune_loss",
    "BLANK",
]

BLANK = 0


@dataclass(frozen=True)
class JointSSLWeights:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class JointFinetuneWeights:
    beta: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """sum_i weights[i] * CE(logits[i], targets[i]) with optional label smoothing.

    The smoothed target puts ``1 - smoothing`` on the label and spreads
    ``smoothing`` uniformly over all V classes.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"cross_entropy: target id outside [0, {V})")
    q = np.full(logits.shape, smoothing / V, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / V, axis=-1)
    q *= np.asarray(weights, dtype=logits.dtype)[..., None]
    return -tsum(mul(log_softmax(logits), q))


def masked_prediction_loss(logits: Tensor, targets: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked frames only. logits (..., T, K)."""
    masked = np.asarray(masked, dtype=bool)
    if masked.shape != logits.shape[:-1]:
        raise ValueError(f"masked_prediction_loss: mask {masked.shape} does not match logits {logits.shape[:-1]}")
    n = int(masked.sum())
    if n == 0:
        raise ValueError("masked_prediction_loss: no masked frames")
    return cross_entropy(logits, targets, masked / n)


def sequence_loss(logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None,
                  smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy averaged over (valid) decoder positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"sequence_loss: {targets.shape[-1] if targets.ndim else 0} targets for "
                         f"{logits.shape[-2]} logit positions")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("sequence_loss: no valid positions")
    return cross_entropy(logits, np.where(valid, targets, 0), valid / n, smoothing)


def joint_ssl_loss(lm, ls, alpha: float | JointSSLWeights = 0.5):
    """alpha * L_M + (1 - alpha) * L_S."""
    a = alpha.alpha if isinstance(alpha, JointSSLWeights) else JointSSLWeights(alpha).alpha
    return lm * a + ls * (1.0 - a)


def joint_finetune_loss(ctc, attention, beta: float | JointFinetuneWeights = 0.3):
    """beta * CTC + (1 - beta) * attention."""
    b = beta.beta if isinstance(beta, JointFinetuneWeights) else JointFinetuneWeights(beta).beta
    return ctc * b + attention * (1.0 - b)


# -- CTC --------------------------------------------------------------------

def ctc_min_length(label: Sequence[int]) -> int:
    """Fewest frames that can emit ``label``: one per symbol plus a blank between repeats."""
    label = list(label)
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _logsumexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """x moved k states along the last axis (right if k > 0), padded with -inf."""
    out = np.full_like(x, -np.inf)
    n = x.shape[-1]
    if abs(k) < n:
        if k > 0:
            out[:, k:] = x[:, : n - k]
        else:
            out[:, : n + k] = x[:, -k:]
    return out


def ctc_nll(logp: Tensor, labels: Sequence[Sequence[int]], lengths: Sequence[int] | None = None,
            blank: int = BLANK) -> Tensor:
    """Per-utterance -log P(label | x) from (B, T, V) log-probabilities.

    Forward (alpha) and backward (beta) recursions run in log space over the
    blank-interleaved label. The gradient w.r.t. ``logp`` is minus the state
    occupation posterior, accumulated per output symbol.
    """
    if logp.ndim != 3:
        raise ValueError(f"ctc: expected (B, T, V) log-probs, got {logp.shape}")
    B, Tmax, V = logp.shape
    if len(labels) != B:
        raise ValueError(f"ctc: {len(labels)} labels for batch of {B}")
    lengths = np.full(B, Tmax) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if (lengths < 1).any() or (lengths > Tmax).any():
        raise ValueError(f"ctc: frame lengths {lengths.tolist()} outside [1, {Tmax}]")
    for b, lab in enumerate(labels):
        if any(k == blank or k < 0 or k >= V for k in lab):
            raise ValueError(f"ctc: label {list(lab)} contains blank or out-of-range symbols")
        need = ctc_min_length(lab)
        if need > lengths[b]:
            raise ValueError(f"ctc: label of length {len(lab)} needs {need} frames, utterance {b} has {lengths[b]}")

    S = 2 * max(len(l) for l in labels) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    S_b = np.zeros(B, dtype=np.int64)
    for b, lab in enumerate(labels):
        ext[b, 1 : 2 * len(lab) : 2] = lab
        S_b[b] = 2 * len(lab) + 1
    state_ok = np.arange(S)[None, :] < S_b[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    lp = logp.data.astype(np.float64)
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, Tmax, S)), axis=2)
    emit = np.where(state_ok[:, None, :], emit, -np.inf)

    with np.errstate(invalid="ignore"):
        alpha = np.full((B, Tmax, S), -np.inf)
        alpha[:, 0, 0] = emit[:, 0, 0]
        if S > 1:
            alpha[:, 0, 1] = emit[:, 0, 1]
        for t in range(1, Tmax):
            prev = alpha[:, t - 1]
            s2 = np.where(skip, _shift(prev, 2), -np.inf)
            alpha[:, t] = _logsumexp3(prev, _shift(prev, 1), s2) + emit[:, t]

        last = alpha[np.arange(B), lengths - 1]
        end1 = last[np.arange(B), S_b - 1]
        end2 = np.where(S_b > 1, last[np.arange(B), np.maximum(S_b - 2, 0)], -np.inf)
        log_p = np.logaddexp(end1, end2)

        # beta[t, s]: log prob of emitting the rest from state s at t, excluding frame t
        beta = np.full((B, Tmax, S), -np.inf)
        skip_next = np.zeros((B, S), dtype=bool)
        skip_next[:, :-2] = skip[:, 2:]
        final = np.full((B, S), -np.inf)
        final[np.arange(B), S_b - 1] = 0.0
        final[S_b > 1, np.maximum(S_b - 2, 0)[S_b > 1]] = 0.0
        for t in range(Tmax - 1, -1, -1):
            if t == Tmax - 1:
                rec = np.full((B, S), -np.inf)
            else:
                nxt = beta[:, t + 1] + emit[:, t + 1]
                n2 = np.where(skip_next, _shift(nxt, -2), -np.inf)
                rec = _logsumexp3(nxt, _shift(nxt, -1), n2)
            at_end = (lengths - 1 == t)[:, None]
            beta[:, t] = np.where(at_end, final, rec)

    if not np.isfinite(log_p).all():
        raise FloatingPointError("ctc: label has zero probability under the given log-probs")
    active = (np.arange(Tmax)[None, :] < lengths[:, None])[:, :, None]

    def bw(g):
        post = np.where(active, np.exp(alpha + beta - log_p[:, None, None]), 0.0)
        onehot = np.zeros((B, S, V))
        onehot[np.arange(B)[:, None], np.arange(S)[None, :], ext] = state_ok
        grad = -(post @ onehot) * np.asarray(g, dtype=np.float64)[:, None, None]
        return (grad.astype(logp.dtype),)

    return _make((-log_p).astype(logp.dtype), (logp,), bw, "ctc")


def ctc_loss(logits: Tensor, labels: Sequence[Sequence[int]], lengths: Sequence[int] | None = None,
             blank: int = BLANK) -> Tensor:
    """Mean over the batch of -log P(label | logits). logits (B, T, C+1) or (T, C+1)."""
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        if len(labels) == 0 or np.isscalar(labels[0]):
            labels = [labels]
    return mean(ctc_nll(log_softmax(logits), labels, lengths, blank))

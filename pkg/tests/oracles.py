"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: enumeration, explicit loops, or a
different algorithm from the code under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from jedssl import autodiff as ad
from jedssl.frontend import FrontendConfig
from jedssl.losses import masked_prediction_loss, sequence_loss, ctc_loss
from jedssl.model import (
    DecoderConfig,
    EncoderConfig,
    ModelConfig,
    decoder_forward,
    encoder_forward,
    init_params,
    linear,
)


# -- CTC ----------------------------------------------------------------------

def ctc_collapse(path, blank=0):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(logp: np.ndarray, label, blank=0) -> float:
    """-log sum over all V^T frame paths that collapse to ``label``."""
    T, V = logp.shape
    label = tuple(label)
    total = -math.inf
    for path in itertools.product(range(V), repeat=T):
        if ctc_collapse(path, blank) == label:
            total = np.logaddexp(total, sum(logp[t, s] for t, s in enumerate(path)))
    return -total


def all_ctc_labels(T: int, V: int, blank=0):
    """Every label reachable by some length-T path (the support of the CTC distribution)."""
    return {ctc_collapse(p, blank) for p in itertools.product(range(V), repeat=T)}


def random_logits(rng, *shape, scale=2.0):
    return rng.normal(0.0, scale, shape)


def log_softmax_np(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


# -- masking ------------------------------------------------------------------

def simulate_mask(T: int, p: float, span: int, rng) -> np.ndarray:
    """Frame-by-frame loop: each selected frame masks itself and the next span-1 frames."""
    masked = np.zeros(T, dtype=bool)
    for t in range(T):
        if rng.random() < p:
            for u in range(t, min(t + span, T)):
                masked[u] = True
    return masked


def expected_masked_fraction(T: int, p: float, span: int) -> float:
    """Closed form: frame t is unmasked iff none of the min(t+1, span) frames that cover it was selected."""
    return float(np.mean([1.0 - (1.0 - p) ** min(t + 1, span) for t in range(T)]))


def is_union_of_spans(masked: np.ndarray, starts, span: int) -> bool:
    T = len(masked)
    ref = np.zeros(T, dtype=bool)
    for s in starts:
        ref[s : min(s + span, T)] = True
    return bool(np.array_equal(ref, masked))


# -- k-means --------------------------------------------------------------------

def brute_force_assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    for i, row in enumerate(x):
        best, best_d = 0, math.inf
        for j, c in enumerate(centroids):
            d = float(sum((float(a) - float(b)) ** 2 for a, b in zip(row, c)))
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


# -- sequences --------------------------------------------------------------

def levenshtein_recursive(a, b) -> int:
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def exhaustive_best_sequence(step_logp, n_tokens: int, max_len: int):
    """Best (tokens, score) over every sequence of ``max_len`` steps or fewer that ends in EOS.

    ``step_logp(prefix)`` returns log-probabilities over n_tokens + 2 outputs.
    """
    eos = n_tokens + 1
    best = (None, -math.inf)
    for L in range(max_len):
        for seq in itertools.product(range(n_tokens), repeat=L):
            score = 0.0
            for i in range(L):
                score += step_logp(seq[:i])[seq[i]]
            score += step_logp(seq)[eos]
            if score > best[1] + 1e-12:
                best = (list(seq), score)
    return best


# -- gradient cases -----------------------------------------------------------
# each builder maps rng -> (fn, inputs); fn() returns a scalar Tensor

def _t(rng, *shape, scale=1.0, offset=0.0):
    return ad.Tensor(rng.normal(offset, scale, shape), requires_grad=True)


def _weighted(out, rng):
    w = rng.normal(size=out.shape)
    return ad.sum(ad.mul(out, w))


def _binary(op):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        if op is ad.div:
            b = ad.Tensor(rng.uniform(0.5, 2.0, 4) * rng.choice([-1, 1], 4), requires_grad=True)
        w = rng.normal(size=(3, 4))
        return (lambda: ad.sum(ad.mul(op(a, b), w))), [a, b]
    return build


def _unary(op, positive=False, away_from_zero=False):
    def build(rng):
        if positive:
            x = ad.Tensor(rng.uniform(0.2, 3.0, (3, 5)), requires_grad=True)
        elif away_from_zero:
            x = ad.Tensor(rng.uniform(0.1, 2.0, (3, 5)) * rng.choice([-1, 1], (3, 5)), requires_grad=True)
        else:
            x = _t(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        return (lambda: ad.sum(ad.mul(op(x), w))), [x]
    return build


def _masked_fill(rng):
    x = _t(rng, 4, 5)
    mask = rng.random((4, 5)) < 0.3
    w = rng.normal(size=(4, 5))
    return (lambda: ad.sum(ad.mul(ad.masked_fill(x, mask, -3.0), w))), [x]


def _dropout(rng):
    x = _t(rng, 4, 6)
    seed = int(rng.integers(1 << 30))
    w = rng.normal(size=(4, 6))
    return (lambda: ad.sum(ad.mul(ad.dropout(x, 0.3, np.random.default_rng(seed)), w))), [x]


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: ad.sum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _batched_matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
    w = rng.normal(size=(2, 3, 2))
    return (lambda: ad.sum(ad.mul(ad.matmul(a, b), w))), [a, b]


def _transpose(rng):
    x = _t(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: ad.sum(ad.mul(ad.transpose(x, (2, 0, 1)), w))), [x]


def _reshape(rng):
    x = _t(rng, 2, 6)
    w = rng.normal(size=(3, 4))
    return (lambda: ad.sum(ad.mul(ad.reshape(x, (3, 4)), w))), [x]


def _getitem_basic(rng):
    x = _t(rng, 5, 6)
    w = rng.normal(size=(2, 3))
    return (lambda: ad.sum(ad.mul(ad.getitem(x, (slice(1, 3), slice(0, 6, 2))), w))), [x]


def _getitem_fancy(rng):
    x = _t(rng, 5, 3)
    idx = rng.integers(0, 5, 7)
    w = rng.normal(size=(7, 3))
    return (lambda: ad.sum(ad.mul(ad.getitem(x, idx), w))), [x]


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 4)
    w = rng.normal(size=(2, 7))
    return (lambda: ad.sum(ad.mul(ad.concat([a, b], axis=1), w))), [a, b]


def _reduce(op):
    def build(rng):
        x = _t(rng, 3, 4, 2)
        w = rng.normal(size=(3, 2))
        return (lambda: ad.sum(ad.mul(op(x, axis=1), w))), [x]
    return build


def _layer_norm(rng):
    x, g, b = _t(rng, 3, 6), _t(rng, 6, offset=1.0), _t(rng, 6)
    w = rng.normal(size=(3, 6))
    return (lambda: ad.sum(ad.mul(ad.layer_norm(x, g, b), w))), [x, g, b]


def _embedding(rng):
    table = _t(rng, 5, 3)
    ids = rng.integers(0, 5, (2, 4))
    w = rng.normal(size=(2, 4, 3))
    return (lambda: ad.sum(ad.mul(ad.embedding(table, ids), w))), [table]


def _conv(stride, K):
    def build(rng):
        x, wt, b = _t(rng, 2, 11, 3), _t(rng, K, 3, 4), _t(rng, 4)
        T = (11 - K) // stride + 1
        w = rng.normal(size=(2, T, 4))
        return (lambda: ad.sum(ad.mul(ad.conv1d(x, wt, b, stride=stride), w))), [x, wt, b]
    return build


def _attention(rng):
    q, k, v = _t(rng, 1, 2, 3, 4), _t(rng, 1, 2, 5, 4), _t(rng, 1, 2, 5, 4)
    mask = np.zeros((1, 1, 3, 5), dtype=bool)
    mask[..., 4] = True
    w = rng.normal(size=(1, 2, 3, 4))
    return (lambda: ad.sum(ad.mul(ad.scaled_dot_product_attention(q, k, v, mask)[0], w))), [q, k, v]


TINY_MODEL = ModelConfig(
    frontend=FrontendConfig(channels=4, kernels=(4,), strides=(2,), pool=2),
    encoder=EncoderConfig(n_layers=1, n_heads=2, d_model=4, d_ff=4, dropout=0.0),
    decoder=DecoderConfig(n_layers=1, n_heads=2, d_model=4, d_ff=4, dropout=0.0),
    n_units=2,
    n_chars=2,
)


def _tiny_setup(rng):
    seed = int(rng.integers(1 << 30))
    params = init_params(TINY_MODEL, seed)
    for t in params.values():
        t.data += rng.normal(0.0, 0.1, t.shape)  # break symmetric init (zero biases, unit gains)
    feats = ad.Tensor(rng.normal(size=(2, 5, 4)))
    valid = np.array([[True] * 5, [True] * 4 + [False]])
    return params, feats, valid


def _full_model(rng):
    params, feats, valid = _tiny_setup(rng)
    tokens = rng.integers(0, TINY_MODEL.n_units + 2, (2, 3))
    tok_valid = np.array([[True] * 3, [True, True, False]])
    w = rng.normal(size=(2, 3, TINY_MODEL.n_units + 2))

    def fn():
        enc = encoder_forward(feats, params, TINY_MODEL.encoder, valid)
        dec = decoder_forward(tokens, enc.states, params, TINY_MODEL.decoder, valid, tok_valid, "ssl")
        return ad.sum(ad.mul(dec.logits, w)) + ad.sum(ad.mul(linear(enc.states, params, "encoder_head"), 0.5))

    inputs = [t for n, t in sorted(params.items()) if not n.startswith("frontend.") and n != "mask_embedding"]
    return fn, inputs


def _frontend(rng):
    params, _, _ = _tiny_setup(rng)
    from jedssl.frontend import conv_feature_extractor

    wav = rng.normal(size=(2, 24))
    w = rng.normal(size=(2, 5, 4))
    fn = lambda: ad.sum(ad.mul(conv_feature_extractor(wav, params, TINY_MODEL.frontend), w))
    return fn, [t for n, t in sorted(params.items()) if n.startswith("frontend.")]


def _masked_prediction(rng):
    logits = _t(rng, 2, 6, 4)
    targets = rng.integers(0, 4, (2, 6))
    masked = rng.random((2, 6)) < 0.5
    masked[0, 0] = True
    return (lambda: masked_prediction_loss(logits, targets, masked)), [logits]


def _sequence(rng):
    logits = _t(rng, 2, 5, 6)
    targets = rng.integers(0, 6, (2, 5))
    valid = np.array([[True] * 5, [True] * 3 + [False] * 2])
    return (lambda: sequence_loss(logits, targets, valid, smoothing=0.1)), [logits]


def _ctc(rng):
    T, V = 6, 4
    logits = _t(rng, 2, T, V)
    labels = [list(rng.integers(1, V, int(rng.integers(0, 3)))), list(rng.integers(1, V, int(rng.integers(1, 3))))]
    lengths = [T, T - 1]
    return (lambda: ctc_loss(logits, labels, lengths)), [logits]


GRADIENT_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "relu": _unary(ad.relu, away_from_zero=True),
    "gelu": _unary(ad.gelu),
    "masked_fill": _masked_fill,
    "dropout": _dropout,
    "matmul": _matmul,
    "batched_matmul": _batched_matmul,
    "transpose": _transpose,
    "reshape": _reshape,
    "getitem_slice": _getitem_basic,
    "getitem_index": _getitem_fancy,
    "concat": _concat,
    "sum": _reduce(ad.sum),
    "mean": _reduce(ad.mean),
    "softmax": _unary(ad.softmax),
    "log_softmax": _unary(ad.log_softmax),
    "layer_norm": _layer_norm,
    "embedding": _embedding,
    "conv1d_strided": _conv(2, 3),
    "conv1d_kernel_eq_stride": _conv(2, 2),
    "attention": _attention,
    "frontend": _frontend,
    "encoder_decoder": _full_model,
    "masked_prediction_loss": _masked_prediction,
    "sequence_loss": _sequence,
    "ctc_loss": _ctc,
}

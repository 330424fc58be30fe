"""Greedy CTC decoding, attention beam search, and character error rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax, no_grad
from .losses import BLANK
from .model import DecoderConfig, decoder_forward
from .targets import collapse_repetitions

__all__ = ["Hypothesis", "ctc_greedy_decode", "attention_decode", "edit_distance", "cer"]


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    terminated: bool = True
    extra: dict = field(default_factory=dict)


def ctc_greedy_decode(logits, blank: int = BLANK) -> list[int]:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if x.ndim != 2:
        raise ValueError(f"ctc_greedy_decode: expected (T, V) logits, got {x.shape}")
    if len(x) == 0:
        return []
    return [k for k in collapse_repetitions(x.argmax(axis=-1)) if k != blank]


def _rank_key(tokens: tuple[int, ...], score: float, terminated: bool):
    # higher score first, then the earlier EOS, then lexicographic order
    return (-score, len(tokens) if terminated else float("inf"), tokens)


def attention_decode(params: dict[str, Tensor], cfg: DecoderConfig, encoder_states: Tensor, n_tokens: int,
                     beam_size: int = 1, max_len: int = 50, task: str = "asr") -> Hypothesis:
    """Beam search over the decoder for one utterance.

    ``n_tokens`` is the vocabulary size without sentinels (SOS = n_tokens,
    EOS = n_tokens + 1). ``max_len`` bounds the number of decoder steps, EOS
    included; a hypothesis still open at the cap is returned with
    ``terminated=False``. ``beam_size=1`` is greedy decoding.
    """
    if beam_size < 1:
        raise ValueError(f"attention_decode: beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ValueError(f"attention_decode: max_len must be >= 1, got {max_len}")
    enc = encoder_states.data
    if enc.ndim == 2:
        enc = enc[None]
    if enc.shape[0] != 1:
        raise ValueError("attention_decode: expects a single utterance")
    sos, eos = n_tokens, n_tokens + 1
    allowed = np.r_[np.arange(n_tokens), eos]

    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float, bool]] = []
    with no_grad():
        for _ in range(max_len):
            prefixes = np.array([[sos, *seq] for seq, _ in alive], dtype=np.int64)
            states = Tensor(np.repeat(enc, len(alive), axis=0))
            out = decoder_forward(prefixes, states, params, cfg, task=task)
            lp = log_softmax(out.logits).data[:, -1, :]
            cands = []
            for (seq, score), row in zip(alive, lp):
                for tok in allowed:
                    new = score + float(row[tok])
                    if tok == eos:
                        cands.append((seq, new, True))
                    else:
                        cands.append((seq + (int(tok),), new, False))
            cands.sort(key=lambda c: _rank_key(c[0], c[1], c[2]))
            kept = cands[:beam_size]
            finished += [c for c in kept if c[2]]
            alive = [(c[0], c[1]) for c in kept if not c[2]]
            if not alive:
                break
            # open hypotheses only lose probability mass from here on
            if finished and max(f[1] for f in finished) >= max(s for _, s in alive):
                alive = []
                break
    pool = finished + [(seq, s, False) for seq, s in alive]
    best = min(pool, key=lambda c: _rank_key(c[0], c[1], c[2]))
    return Hypothesis(tokens=list(best[0]), score=best[1], terminated=best[2])


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"cer: {len(refs)} references but {len(hyps)} hypotheses")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("cer: references have zero total length")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total

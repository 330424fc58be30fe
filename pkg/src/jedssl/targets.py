"""Span masking of encoder inputs and decoder target preparation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, mul

__all__ = [
    "MaskSpec",
    "MaskedBatch",
    "DecoderTargets",
    "spans_from_starts",
    "sample_mask_spans",
    "apply_mask",
    "collapse_repetitions",
    "run_lengths",
    "add_sos_eos",
    "strip_sos_eos",
    "decoder_targets",
]


@dataclass
class MaskSpec:
    masked: np.ndarray  # bool (T,)
    starts: np.ndarray  # selected frame indices
    selection_prob: float
    span_length: int

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def spans_from_starts(T: int, starts: Sequence[int], span_length: int = 10) -> np.ndarray:
    """Union of ``[s, min(s + span_length, T))`` over every start."""
    masked = np.zeros(T, dtype=bool)
    for s in starts:
        masked[s : min(s + span_length, T)] = True
    return masked


def sample_mask_spans(T: int, p: float = 0.08, span_length: int = 10,
                      rng: np.random.Generator | None = None) -> MaskSpec:
    """Select each frame independently with probability ``p``; each selected
    frame masks itself and the following ``span_length - 1`` frames."""
    if T < 1:
        raise ValueError(f"sample_mask_spans: T must be >= 1, got {T}")
    if not 0 < p < 1:
        raise ValueError(f"sample_mask_spans: p must be in (0, 1), got {p}")
    if span_length < 1:
        raise ValueError(f"sample_mask_spans: span_length must be >= 1, got {span_length}")
    rng = rng if rng is not None else np.random.default_rng()
    starts = np.flatnonzero(rng.random(T) < p)
    # running coverage: frame t is masked iff some start lies in (t - span_length, t]
    hits = np.zeros(T + 1, dtype=np.int64)
    np.add.at(hits, starts, 1)
    np.add.at(hits, np.minimum(starts + span_length, T), -1)
    masked = np.cumsum(hits[:T]) > 0
    return MaskSpec(masked=masked, starts=starts, selection_prob=p, span_length=span_length)


@dataclass
class MaskedBatch:
    features: Tensor  # (B, T, D)
    masked: np.ndarray  # bool (B, T)
    targets: np.ndarray  # int (B, T) encoder cluster targets


def apply_mask(features: Tensor, masked: np.ndarray, mask_embedding: Tensor) -> Tensor:
    """Replace masked rows of ``features`` (..., T, D) by ``mask_embedding`` (D,).

    Unmasked rows pass through bit-exactly; the embedding's gradient is the
    sum of the upstream gradients at masked rows.
    """
    masked = np.asarray(masked, dtype=bool)
    if mask_embedding.shape != (features.shape[-1],):
        raise ValueError(f"apply_mask: embedding shape {mask_embedding.shape} does not match feature dim "
                         f"{features.shape[-1]}")
    if masked.shape != features.shape[:-1]:
        raise ValueError(f"apply_mask: mask shape {masked.shape} does not match features {features.shape[:-1]}")
    m = masked[..., None].astype(features.dtype)
    return add(mul(features, 1.0 - m), mul(mask_embedding, m))


def collapse_repetitions(ids: Sequence[int]) -> list[int]:
    """Replace every run of equal consecutive IDs by a single ID."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("collapse_repetitions: empty sequence")
    keep = np.ones(len(ids), dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    return ids[keep].tolist()


def run_lengths(ids: Sequence[int]) -> list[int]:
    ids = np.asarray(ids)
    if ids.size == 0:
        return []
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    return np.diff(np.r_[starts, len(ids)]).tolist()


@dataclass
class DecoderTargets:
    inputs: list[int]  # [SOS, y1, ..., yL]
    targets: list[int]  # [y1, ..., yL, EOS]


def add_sos_eos(seq: Sequence[int], vocab_size: int) -> DecoderTargets:
    """Teacher-forcing pair with SOS = ``vocab_size`` and EOS = ``vocab_size + 1``."""
    seq = [int(s) for s in seq]
    if any(s < 0 or s >= vocab_size for s in seq):
        raise ValueError(f"add_sos_eos: ids must lie in [0, {vocab_size})")
    sos, eos = vocab_size, vocab_size + 1
    return DecoderTargets(inputs=[sos] + seq, targets=seq + [eos])


def strip_sos_eos(t: DecoderTargets) -> list[int]:
    return list(t.inputs[1:])


def decoder_targets(cluster_ids: Sequence[int], n_units: int) -> DecoderTargets:
    """Decoder supervision from the unmasked frame targets of a whole utterance."""
    return add_sos_eos(collapse_repetitions(cluster_ids), n_units)

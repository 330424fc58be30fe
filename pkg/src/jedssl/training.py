"""Pre-training, continued pre-training, finetuning, and evaluation loops."""

from __future__ import annotations

import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, AdamState, Tensor, WarmupSchedule, backward, no_grad
from .checkpoint import Checkpoint, save_checkpoint
from .decoding import attention_decode, cer, ctc_greedy_decode, edit_distance
from .frontend import Utterance, conv_feature_extractor, extract_features, num_frames
from .losses import (
    ctc_loss,
    ctc_min_length,
    joint_finetune_loss,
    joint_ssl_loss,
    masked_prediction_loss,
    sequence_loss,
)
from .model import (
    ModelConfig,
    decoder_forward,
    encoder_forward,
    init_decoder_params,
    init_finetune_heads,
    init_params,
    is_decoder_param,
    is_encoder_param,
    linear,
)
from .targets import add_sos_eos, apply_mask, collapse_repetitions, sample_mask_spans
from .units import KMeansModel, kmeans_assign

log = logging.getLogger(__name__)

__all__ = [
    "MaskConfig",
    "PretrainConfig",
    "FinetuneConfig",
    "FINETUNE_MODES",
    "NumericalError",
    "RunMetrics",
    "make_batches",
    "label_units",
    "pretrain",
    "finetune",
    "evaluate",
    "ssl_loss",
]

FINETUNE_MODES = (
    "ctc_only_encoder",
    "joint_enc_dec",
    "enc_plus_random_decoder",
    "proposed_enc_with_random_decoder",
)
_RANDOM_DECODER_SEED_OFFSET = 7919


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    selection_prob: float = 0.08
    span_length: int = 10

    def __post_init__(self):
        if not 0 < self.selection_prob < 1:
            raise ValueError("mask: selection_prob must be in (0, 1)")
        if self.span_length < 1:
            raise ValueError("mask: span_length must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    max_steps: int = 1000
    epochs: int | None = None
    frame_budget: int = 400
    lr: float = 1e-3
    warmup_steps: int = 500
    alpha: float = 0.5
    smoothing: float = 0.1
    use_decoder: bool = True
    mask: MaskConfig = field(default_factory=MaskConfig)
    seed: int = 0
    checkpoint_every: int = 0
    keep_last: int = 3
    log_every: int = 1
    max_mask_retries: int = 10

    def __post_init__(self):
        if isinstance(self.mask, dict):
            object.__setattr__(self, "mask", MaskConfig(**self.mask))
        if self.max_steps < 1 or self.frame_budget < 1 or self.warmup_steps < 1 or not self.lr > 0:
            raise ValueError("pretrain: max_steps, frame_budget, warmup_steps and lr must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("pretrain: epochs must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("pretrain: alpha must be in [0, 1]")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("pretrain: smoothing must be in [0, 1)")


@dataclass(frozen=True)
class FinetuneConfig:
    mode: str = "joint_enc_dec"
    max_steps: int = 1000
    epochs: int | None = None
    frame_budget: int = 400
    beta: float = 0.3
    lr: float = 3e-4
    warmup_steps: int = 200
    smoothing: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    keep_last: int = 3
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"finetune: mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.max_steps < 1 or self.frame_budget < 1 or self.warmup_steps < 1 or not self.lr > 0:
            raise ValueError("finetune: max_steps, frame_budget, warmup_steps and lr must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("finetune: beta must be in [0, 1]")

    @property
    def uses_decoder(self) -> bool:
        return self.mode != "ctc_only_encoder"

    @property
    def effective_beta(self) -> float:
        return 1.0 if self.mode == "ctc_only_encoder" else self.beta


@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("RunMetrics: steps must strictly increase")
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"RunMetrics: non-finite {k} at step {rec['step']}")
        self.records.append(rec)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def extend(self, other: "RunMetrics") -> None:
        for r in other.records:
            self.append(r)


# -- batching ---------------------------------------------------------------

def make_batches(lengths: Sequence[int], frame_budget: int) -> list[list[int]]:
    """Group utterance indices by length so each batch's padded frame count fits the budget."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches: list[list[int]] = []
    cur: list[int] = []
    for i in order:
        if lengths[i] > frame_budget:
            raise ValueError(f"utterance {i} has {lengths[i]} frames, above the frame budget {frame_budget}")
        if cur and (len(cur) + 1) * lengths[i] > frame_budget:
            batches.append(cur)
            cur = []
        cur.append(i)
    if cur:
        batches.append(cur)
    return batches


def _epoch_order(n_batches: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 17]).permutation(n_batches)


def _batch_for_step(batches: list[list[int]], seed: int, step: int) -> list[int]:
    """Batch used at 1-based ``step``; a pure function so resumed runs see the same data."""
    epoch, pos = divmod(step - 1, len(batches))
    return batches[_epoch_order(len(batches), seed, epoch)[pos]]


def _pad_waves(utts: Sequence[Utterance], dtype) -> np.ndarray:
    n = max(len(u.samples) for u in utts)
    out = np.zeros((len(utts), n), dtype=dtype)
    for i, u in enumerate(utts):
        out[i, : len(u.samples)] = u.samples
    return out


def _frame_lengths(utts: Sequence[Utterance], model_cfg: ModelConfig) -> np.ndarray:
    return np.array([num_frames(len(u.samples), model_cfg.frontend) for u in utts])


def _check_corpus(utts: Sequence[Utterance], model_cfg: ModelConfig) -> np.ndarray:
    if not utts:
        raise ValueError("corpus is empty")
    lengths = _frame_lengths(utts, model_cfg)
    short = [u.uid for u, n in zip(utts, lengths) if n < 2]
    if short:
        raise ValueError(f"utterances shorter than 2 frames: {short}")
    return lengths


def _valid_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def _pad_tokens(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), L), dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def _dtype(precision: str):
    return {"f32": np.float32, "f64": np.float64, "float32": np.float32, "float64": np.float64}[precision]


# -- unit targets -----------------------------------------------------------

def label_units(corpus: Sequence[Utterance], kmeans: KMeansModel, feature_params: dict[str, Tensor],
                model_cfg: ModelConfig) -> list[np.ndarray]:
    """Cluster ID per frame for every utterance, using the frontend that produced the k-means features."""
    feats = extract_features(corpus, feature_params, model_cfg.frontend)
    return [kmeans_assign(kmeans, f.frames) for f in feats]


# -- pre-training -----------------------------------------------------------

@dataclass
class SSLLoss:
    loss: Tensor
    lm: Tensor
    ls: Tensor | None
    n_masked: int


def ssl_loss(params: dict[str, Tensor], model_cfg: ModelConfig, utts: Sequence[Utterance],
             unit_targets: Sequence[np.ndarray], cfg: PretrainConfig, rng: np.random.Generator | None,
             dropout_rng: np.random.Generator | None = None, masks: np.ndarray | None = None) -> SSLLoss:
    """Joint masked-prediction + sequence loss on one batch.

    ``masks`` (B, T) overrides span sampling. Decoder targets come from the
    full per-frame targets, independent of the mask.
    """
    dtype = params["encoder.proj.weight"].dtype
    lengths = _frame_lengths(utts, model_cfg)
    T = int(lengths.max())
    feats = conv_feature_extractor(_pad_waves(utts, dtype), params, model_cfg.frontend)
    if feats.shape[1] != T:
        feats = feats[:, :T]
    valid = _valid_mask(lengths, T)
    targets = np.zeros((len(utts), T), dtype=np.int64)
    for i, (n, t) in enumerate(zip(lengths, unit_targets)):
        if len(t) != n:
            raise ValueError(f"{utts[i].uid}: {len(t)} unit targets for {n} frames")
        targets[i, :n] = t
    if masks is None:
        masks = np.zeros((len(utts), T), dtype=bool)
        for attempt in range(cfg.max_mask_retries + 1):
            for i, n in enumerate(lengths):
                masks[i, :n] = sample_mask_spans(int(n), cfg.mask.selection_prob, cfg.mask.span_length, rng).masked
            if masks.any():
                break
        else:
            raise ValueError(f"no frame masked after {cfg.max_mask_retries} resamples")
    masks = np.asarray(masks, dtype=bool) & valid
    x = apply_mask(feats, masks, params["mask_embedding"])
    enc = encoder_forward(x, params, model_cfg.encoder, valid, dropout_rng)
    lm = masked_prediction_loss(linear(enc.states, params, "encoder_head"), targets, masks)
    if not (cfg.use_decoder and model_cfg.decoder is not None):
        return SSLLoss(loss=lm, lm=lm, ls=None, n_masked=int(masks.sum()))
    pairs = [add_sos_eos(collapse_repetitions(t[:n]), model_cfg.n_units) for t, n in zip(targets, lengths)]
    dec_in, tok_valid = _pad_tokens([p.inputs for p in pairs])
    dec_out, _ = _pad_tokens([p.targets for p in pairs])
    dec = decoder_forward(dec_in, enc.states, params, model_cfg.decoder, valid, tok_valid, "ssl", dropout_rng)
    ls = sequence_loss(dec.logits, dec_out, tok_valid, cfg.smoothing)
    return SSLLoss(loss=joint_ssl_loss(lm, ls, cfg.alpha), lm=lm, ls=ls, n_masked=int(masks.sum()))


class _CheckpointKeeper:
    """Periodic checkpoints: keep the newest ``keep`` plus the lowest-loss one."""

    def __init__(self, directory: str | Path | None, keep: int):
        self.dir = Path(directory) if directory else None
        self.keep = keep
        self.saved: list[tuple[int, float, Path]] = []
        self.last_good: Path | None = None

    def save(self, ckpt: Checkpoint, loss: float) -> None:
        if self.dir is None:
            return
        path = save_checkpoint(ckpt, self.dir / f"step-{ckpt.step:07d}")
        self.saved.append((ckpt.step, loss, path))
        self.last_good = path
        best = min(self.saved, key=lambda s: (s[1], s[0]))
        recent = {s[2] for s in self.saved[-self.keep :]}
        for s in list(self.saved):
            if s[2] not in recent and s[2] != best[2]:
                shutil.rmtree(s[2], ignore_errors=True)
                self.saved.remove(s)


def _restore(params: dict[str, Tensor], ckpt: Checkpoint) -> None:
    for name, t in params.items():
        if name not in ckpt.params:
            raise ValueError(f"resume: checkpoint lacks parameter {name!r}")
        t.data = np.array(ckpt.params[name], dtype=t.dtype)


def _copy_adam(state: AdamState, dtype) -> AdamState:
    return AdamState(beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=state.step,
                     m={k: np.array(v, dtype=dtype) for k, v in state.m.items()},
                     v={k: np.array(v, dtype=dtype) for k, v in state.v.items()})


def pretrain(corpus: Sequence[Utterance], unit_targets: Sequence[np.ndarray], model_cfg: ModelConfig,
             cfg: PretrainConfig, init_mode: str = "scratch", init_checkpoint: Checkpoint | None = None,
             resume: Checkpoint | None = None, precision: str = "f64", checkpoint_dir: str | Path | None = None,
             metrics_sink=None, step_callback=None) -> tuple[Checkpoint, RunMetrics]:
    """Joint encoder-decoder SSL (or encoder-only when ``cfg.use_decoder`` is off).

    ``init_mode="encoder_from_checkpoint_decoder_random"`` with
    ``init_checkpoint`` continues pre-training of a trained encoder with a
    fresh decoder. ``resume`` restarts an interrupted run at its saved step.
    """
    lengths = _check_corpus(corpus, model_cfg)
    if len(unit_targets) != len(corpus):
        raise ValueError(f"{len(unit_targets)} target sequences for {len(corpus)} utterances")
    dtype = _dtype(precision)
    if not cfg.use_decoder:
        model_cfg = ModelConfig(frontend=model_cfg.frontend, encoder=model_cfg.encoder, decoder=None,
                                n_units=model_cfg.n_units, n_chars=model_cfg.n_chars)
    params = init_params(model_cfg, cfg.seed, init_mode, init_checkpoint, dtype=dtype)
    opt = Adam(params)
    sched = WarmupSchedule(cfg.lr, cfg.warmup_steps)
    start = 0
    if resume is not None:
        _restore(params, resume)
        opt.state = _copy_adam(resume.adam, dtype)
        start = resume.step
    batches = make_batches(lengths, cfg.frame_budget)
    last = cfg.max_steps if cfg.epochs is None else min(cfg.max_steps, cfg.epochs * len(batches))
    keeper = _CheckpointKeeper(checkpoint_dir, cfg.keep_last)
    metrics = RunMetrics()
    meta = {"kind": "pretrain", "init_mode": init_mode, "use_decoder": cfg.use_decoder}

    def snapshot(step):
        return Checkpoint.from_params(params, model_config=model_cfg.to_dict(), step=step, seed=cfg.seed,
                                      adam=_copy_adam(opt.state, dtype),
                                      schedule={"peak_lr": cfg.lr, "warmup_steps": cfg.warmup_steps},
                                      train_config=_asdict(cfg), meta=dict(meta))

    t0 = time.perf_counter()
    for step in range(start + 1, last + 1):
        idx = _batch_for_step(batches, cfg.seed, step)
        lr = sched.lr_at_step(step)
        opt.zero_grad()
        try:
            out = ssl_loss(params, model_cfg, [corpus[i] for i in idx], [unit_targets[i] for i in idx], cfg,
                           np.random.default_rng([cfg.seed, step, 0]), np.random.default_rng([cfg.seed, step, 1]))
            if not math.isfinite(out.loss.item()):
                raise FloatingPointError("non-finite loss")
            backward(out.loss)
            opt.step(lr)
        except FloatingPointError as e:
            raise NumericalError(f"pretrain step {step}: {e}; last good checkpoint: {keeper.last_good}") from e
        rec = {"stage": "pretrain", "step": step, "lr": lr, "loss": out.loss.item(), "lm": out.lm.item(),
               "ls": out.ls.item() if out.ls is not None else None, "n_masked": out.n_masked,
               "batch_frames": int(len(idx) * lengths[idx].max()), "wall_time": time.perf_counter() - t0}
        metrics.append(rec)
        if metrics_sink is not None and (step % cfg.log_every == 0 or step == last):
            metrics_sink(rec)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            keeper.save(snapshot(step), rec["loss"])
        # called with the live parameter tensors; a true return ends the run early
        if step_callback is not None and step_callback(step, metrics, params):
            last = step
            break
    return snapshot(last), metrics


def _asdict(cfg) -> dict:
    return asdict(cfg)


# -- finetuning -------------------------------------------------------------

def _char_ids(text: str, n_chars: int) -> list[int]:
    ids = [ord(c) - ord("a") for c in text]
    bad = sorted({c for c, i in zip(text, ids) if not 0 <= i < n_chars})
    if bad:
        raise ValueError(f"transcript characters {bad} outside the {n_chars}-letter head alphabet")
    return ids


def _ids_to_text(ids: Sequence[int]) -> str:
    return "".join(chr(ord("a") + i) for i in ids)


def prepare_finetune_params(ckpt: Checkpoint, model_cfg: ModelConfig, cfg: FinetuneConfig,
                            dtype) -> dict[str, Tensor]:
    """Encoder (and decoder) from ``ckpt`` plus fresh character heads, per finetune mode."""
    has_decoder = any(is_decoder_param(n) for n in ckpt.params)
    if cfg.mode in ("joint_enc_dec", "proposed_enc_with_random_decoder") and not has_decoder:
        raise ValueError(f"finetune mode {cfg.mode} needs a checkpoint with decoder weights")
    if cfg.uses_decoder and model_cfg.decoder is None:
        raise ValueError(f"finetune mode {cfg.mode} needs a decoder config")
    params: dict[str, Tensor] = {}
    for name, arr in ckpt.params.items():
        keep = is_encoder_param(name) or (cfg.mode == "joint_enc_dec" and is_decoder_param(name))
        if keep:
            params[name] = Tensor(np.array(arr, dtype=dtype), requires_grad=True, name=name)
    if cfg.mode in ("enc_plus_random_decoder", "proposed_enc_with_random_decoder"):
        params.update(init_decoder_params(model_cfg, cfg.seed + _RANDOM_DECODER_SEED_OFFSET, dtype))
    if cfg.uses_decoder:
        for name in ("decoder.embed", "decoder_head.weight", "decoder_head.bias"):
            params.pop(name, None)
    params.update(init_finetune_heads(model_cfg, cfg.seed, dtype, with_decoder=cfg.uses_decoder))
    for name, t in params.items():
        if name.startswith("frontend.") or name == "mask_embedding" or name.startswith("encoder_head."):
            t.requires_grad = False
    return params


@dataclass
class _FTBatch:
    feats: Tensor
    lengths: np.ndarray
    ctc_labels: list[list[int]]
    dec_in: np.ndarray
    dec_out: np.ndarray
    tok_valid: np.ndarray


def _finetune_batch(utts, params, model_cfg, n_chars) -> _FTBatch:
    dtype = params["encoder.proj.weight"].dtype
    lengths = _frame_lengths(utts, model_cfg)
    with no_grad():
        feats = conv_feature_extractor(_pad_waves(utts, dtype), params, model_cfg.frontend)
    feats = Tensor(feats.data[:, : lengths.max()])
    chars = [_char_ids(u.transcript, n_chars) for u in utts]
    for u, c, n in zip(utts, chars, lengths):
        if ctc_min_length(c) > n:
            raise ValueError(f"{u.uid}: transcript of {len(c)} characters does not fit {n} frames")
    pairs = [add_sos_eos(c, n_chars) for c in chars]
    dec_in, tok_valid = _pad_tokens([p.inputs for p in pairs])
    dec_out, _ = _pad_tokens([p.targets for p in pairs])
    return _FTBatch(feats, lengths, [[k + 1 for k in c] for c in chars], dec_in, dec_out, tok_valid)


def finetune_loss(params, model_cfg: ModelConfig, batch: _FTBatch, cfg: FinetuneConfig,
                  dropout_rng: np.random.Generator | None = None):
    valid = _valid_mask(batch.lengths, batch.feats.shape[1])
    enc = encoder_forward(batch.feats, params, model_cfg.encoder, valid, dropout_rng)
    ctc = ctc_loss(linear(enc.states, params, "ctc_head"), batch.ctc_labels, batch.lengths)
    if not cfg.uses_decoder:
        return ctc, ctc, None
    dec = decoder_forward(batch.dec_in, enc.states, params, model_cfg.decoder, valid, batch.tok_valid, "asr",
                          dropout_rng)
    att = sequence_loss(dec.logits, batch.dec_out, batch.tok_valid, cfg.smoothing)
    return joint_finetune_loss(ctc, att, cfg.beta), ctc, att


def finetune(ckpt: Checkpoint, corpus: Sequence[Utterance], model_cfg: ModelConfig, cfg: FinetuneConfig,
             precision: str = "f64", checkpoint_dir: str | Path | None = None, resume: Checkpoint | None = None,
             metrics_sink=None, step_callback=None) -> tuple[Checkpoint, RunMetrics]:
    """Supervised character finetuning with a frozen frontend.

    ``ctc_only_encoder`` trains encoder + CTC head on plain CTC. The joint
    modes add the decoder with the weighted CTC/attention loss; the two
    random-decoder modes re-initialise every decoder tensor first.
    """
    lengths = _check_corpus(corpus, model_cfg)
    dtype = _dtype(precision)
    n_chars = model_cfg.n_chars
    if not cfg.uses_decoder:
        model_cfg = ModelConfig(frontend=model_cfg.frontend, encoder=model_cfg.encoder, decoder=None,
                                n_units=model_cfg.n_units, n_chars=model_cfg.n_chars)
    params = prepare_finetune_params(ckpt, model_cfg, cfg, dtype)
    trainable = {n: t for n, t in params.items() if t.requires_grad}
    opt = Adam(trainable)
    sched = WarmupSchedule(cfg.lr, cfg.warmup_steps)
    start = 0
    if resume is not None:
        _restore(params, resume)
        opt.state = _copy_adam(resume.adam, dtype)
        start = resume.step
    batches = make_batches(lengths, cfg.frame_budget)
    cache: dict[int, _FTBatch] = {}
    last = cfg.max_steps if cfg.epochs is None else min(cfg.max_steps, cfg.epochs * len(batches))
    keeper = _CheckpointKeeper(checkpoint_dir, cfg.keep_last)
    metrics = RunMetrics()
    frozen = [t for n, t in params.items() if n.startswith("frontend.")]
    meta = {"kind": "finetune", "mode": cfg.mode, "model_tag": cfg.mode, "source_meta": ckpt.meta}

    def snapshot(step):
        return Checkpoint.from_params(params, model_config=model_cfg.to_dict(), step=step, seed=cfg.seed,
                                      adam=_copy_adam(opt.state, dtype),
                                      schedule={"peak_lr": cfg.lr, "warmup_steps": cfg.warmup_steps},
                                      train_config=_asdict(cfg), meta=dict(meta))

    t0 = time.perf_counter()
    for step in range(start + 1, last + 1):
        epoch, pos = divmod(step - 1, len(batches))
        b = int(_epoch_order(len(batches), cfg.seed, epoch)[pos])
        if b not in cache:
            cache[b] = _finetune_batch([corpus[i] for i in batches[b]], params, model_cfg, n_chars)
        lr = sched.lr_at_step(step)
        opt.zero_grad()
        try:
            loss, ctc, att = finetune_loss(params, model_cfg, cache[b], cfg, np.random.default_rng([cfg.seed, step, 1]))
            backward(loss)
            opt.step(lr)
        except FloatingPointError as e:
            raise NumericalError(f"finetune step {step}: {e}; last good checkpoint: {keeper.last_good}") from e
        frontend_grad = max((float(np.abs(t.grad).max()) for t in frozen if t.grad is not None), default=0.0)
        rec = {"stage": f"finetune:{cfg.mode}", "step": step, "lr": lr, "loss": loss.item(), "ctc": ctc.item(),
               "attention": att.item() if att is not None else None, "frontend_grad": frontend_grad,
               "wall_time": time.perf_counter() - t0}
        metrics.append(rec)
        if metrics_sink is not None and (step % cfg.log_every == 0 or step == last):
            metrics_sink(rec)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            keeper.save(snapshot(step), rec["loss"])
        if step_callback is not None and step_callback(step, metrics, params):
            last = step
            break
    return snapshot(last), metrics


# -- evaluation -------------------------------------------------------------

def params_from_checkpoint(ckpt: Checkpoint, dtype=np.float64) -> dict[str, Tensor]:
    return {n: Tensor(np.array(a, dtype=dtype), name=n) for n, a in ckpt.params.items()}


def transcribe(params: dict[str, Tensor], model_cfg: ModelConfig, utts: Sequence[Utterance], decoder: str,
               beam_size: int = 1) -> list[str]:
    """Character hypotheses via ``decoder="ctc"`` (greedy) or ``"attention"`` (beam search)."""
    hyps = []
    with no_grad():
        for u in utts:
            n = num_frames(len(u.samples), model_cfg.frontend)
            feats = conv_feature_extractor(u.samples[None, :].astype(params["encoder.proj.weight"].dtype),
                                           params, model_cfg.frontend)
            enc = encoder_forward(Tensor(feats.data[:, :n]), params, model_cfg.encoder)
            if decoder == "ctc":
                ids = [k - 1 for k in ctc_greedy_decode(linear(enc.states, params, "ctc_head").data[0])]
            else:
                ids = attention_decode(params, model_cfg.decoder, enc.states, model_cfg.n_chars,
                                       beam_size=beam_size, max_len=n + 1, task="asr").tokens
            hyps.append(_ids_to_text(ids))
    return hyps


def evaluate(ckpt: Checkpoint, corpus: Sequence[Utterance], beam_size: int = 4,
             decoder: str | None = None) -> dict:
    """Per-utterance hypotheses and corpus CER for a finetuned checkpoint."""
    model_cfg = ModelConfig.from_dict(ckpt.model_config)
    mode = ckpt.meta.get("mode", "ctc_only_encoder")
    if decoder is None:
        decoder = "ctc" if mode == "ctc_only_encoder" else "attention"
    params = params_from_checkpoint(ckpt)
    hyps = transcribe(params, model_cfg, corpus, decoder, beam_size)
    refs = [u.transcript for u in corpus]
    per_utt = [{"id": u.uid, "ref": r, "hyp": h, "distance": edit_distance(r, h)}
               for u, r, h in zip(corpus, refs, hyps)]
    return {"model_tag": ckpt.meta.get("model_tag", mode), "mode": mode, "decoder": decoder,
            "beam_size": beam_size if decoder == "attention" else None,
            "cer": cer(refs, hyps), "utterances": per_utt}

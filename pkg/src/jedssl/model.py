"""Transformer encoder, causal decoder with source attention, and output heads.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, which
is also the checkpoint layout.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import (
    Tensor,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scaled_dot_product_attention,
    sinusoidal_positions,
    transpose,
)
from .frontend import FrontendConfig, init_frontend_params

__all__ = [
    "EncoderConfig",
    "DecoderConfig",
    "ModelConfig",
    "EncoderOutput",
    "init_params",
    "init_encoder_params",
    "init_decoder_params",
    "init_finetune_heads",
    "encoder_forward",
    "decoder_forward",
    "causal_mask",
    "DecoderOutput",
    "linear",
    "multi_head_attention",
    "is_encoder_param",
    "is_decoder_param",
    "parameter_count",
    "ENCODER_PREFIXES",
    "DECODER_PREFIXES",
]

ENCODER_PREFIXES = ("frontend.", "mask_embedding", "encoder.", "encoder_head.")
DECODER_PREFIXES = ("decoder.", "decoder_head.")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        _check_block("encoder", self.n_layers, self.n_heads, self.d_model, self.d_ff, self.dropout)


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        _check_block("decoder", self.n_layers, self.n_heads, self.d_model, self.d_ff, self.dropout)


def _check_block(kind, n_layers, n_heads, d_model, d_ff, p):
    if n_layers < 0 or n_heads < 1 or d_model < 1 or d_ff < 1:
        raise ValueError(f"{kind}: layer sizes must be positive")
    if d_model % n_heads:
        raise ValueError(f"{kind}: d_model {d_model} not divisible by n_heads {n_heads}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"{kind}: dropout must be in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig | None = field(default_factory=DecoderConfig)
    n_units: int = 8
    n_chars: int = 3

    def __post_init__(self):
        if self.decoder is not None and self.decoder.d_model != self.encoder.d_model:
            raise ValueError(f"decoder d_model {self.decoder.d_model} must equal encoder d_model "
                             f"{self.encoder.d_model}")
        if self.n_units < 1 or self.n_chars < 1:
            raise ValueError("n_units and n_chars must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(frontend=FrontendConfig(**d["frontend"]), encoder=EncoderConfig(**d["encoder"]),
                   decoder=DecoderConfig(**d["decoder"]) if d.get("decoder") else None,
                   n_units=d["n_units"], n_chars=d["n_chars"])


# -- initialisation ---------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _linear(p: dict, seed: int, name: str, fan_in: int, fan_out: int) -> None:
    p[f"{name}.weight"] = _rng_for(seed, name).normal(0.0, fan_in ** -0.5, (fan_in, fan_out))
    p[f"{name}.bias"] = np.zeros(fan_out)


def _norm(p: dict, name: str, d: int) -> None:
    p[f"{name}.gain"] = np.ones(d)
    p[f"{name}.bias"] = np.zeros(d)


def _attn(p: dict, seed: int, name: str, d: int) -> None:
    for part in ("q", "k", "v", "o"):
        _linear(p, seed, f"{name}.{part}", d, d)


def _tensors(p: dict, dtype) -> dict[str, Tensor]:
    return {n: Tensor(v, requires_grad=True, dtype=dtype, name=n) for n, v in p.items()}


def init_encoder_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    enc, d_in = cfg.encoder, cfg.frontend.channels
    out = init_frontend_params(cfg.frontend, _rng_for(seed, "frontend"), dtype)
    p: dict[str, np.ndarray] = {"mask_embedding": _rng_for(seed, "mask_embedding").uniform(0.0, 1.0, d_in)}
    _linear(p, seed, "encoder.proj", d_in, enc.d_model)
    for i in range(enc.n_layers):
        pre = f"encoder.layers.{i}"
        _norm(p, f"{pre}.ln1", enc.d_model)
        _attn(p, seed, f"{pre}.attn", enc.d_model)
        _norm(p, f"{pre}.ln2", enc.d_model)
        _linear(p, seed, f"{pre}.ffn.w1", enc.d_model, enc.d_ff)
        _linear(p, seed, f"{pre}.ffn.w2", enc.d_ff, enc.d_model)
    if enc.n_layers:
        _norm(p, "encoder.norm", enc.d_model)
    _linear(p, seed, "encoder_head", enc.d_model, cfg.n_units)
    out.update(_tensors(p, dtype))
    return out


def init_decoder_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    dec = cfg.decoder
    if dec is None:
        return {}
    vocab = cfg.n_units + 2
    p: dict[str, np.ndarray] = {"decoder.embed": _rng_for(seed, "decoder.embed").normal(0.0, 1.0, (vocab, dec.d_model))}
    for i in range(dec.n_layers):
        pre = f"decoder.layers.{i}"
        _norm(p, f"{pre}.ln1", dec.d_model)
        _attn(p, seed, f"{pre}.self_attn", dec.d_model)
        _norm(p, f"{pre}.ln2", dec.d_model)
        _attn(p, seed, f"{pre}.cross_attn", dec.d_model)
        _norm(p, f"{pre}.ln3", dec.d_model)
        _linear(p, seed, f"{pre}.ffn.w1", dec.d_model, dec.d_ff)
        _linear(p, seed, f"{pre}.ffn.w2", dec.d_ff, dec.d_model)
    _norm(p, "decoder.norm", dec.d_model)
    _linear(p, seed, "decoder_head", dec.d_model, vocab)
    return _tensors(p, dtype)


def init_finetune_heads(cfg: ModelConfig, seed: int, dtype=np.float64, with_decoder: bool = True) -> dict[str, Tensor]:
    """Fresh character heads: CTC (blank + chars) and, when a decoder exists,
    the character embedding and output layer (chars + SOS + EOS)."""
    d = cfg.encoder.d_model
    p: dict[str, np.ndarray] = {}
    _linear(p, seed, "ctc_head", d, cfg.n_chars + 1)
    if with_decoder and cfg.decoder is not None:
        p["asr.embed"] = _rng_for(seed, "asr.embed").normal(0.0, 1.0, (cfg.n_chars + 2, d))
        _linear(p, seed, "asr_head", d, cfg.n_chars + 2)
    return _tensors(p, dtype)


def _config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    diffs = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs += _config_diff(va, vb, f"{prefix}{key}.")
        elif va != vb and not (isinstance(va, (list, tuple)) and isinstance(vb, (list, tuple)) and list(va) == list(vb)):
            diffs.append(f"{prefix}{key}: {va!r} != {vb!r}")
    return diffs


def init_params(cfg: ModelConfig, seed: int, mode: str = "scratch", checkpoint=None,
                dtype=np.float64) -> dict[str, Tensor]:
    """Fresh parameters, or a checkpointed encoder plus a randomly initialised decoder.

    ``checkpoint`` is any object with ``params`` (name -> array) and
    ``model_config`` (a dict); it is required for
    ``mode="encoder_from_checkpoint_decoder_random"``.
    """
    if mode == "scratch":
        params = init_encoder_params(cfg, seed, dtype)
        params.update(init_decoder_params(cfg, seed, dtype))
        return params
    if mode != "encoder_from_checkpoint_decoder_random":
        raise ValueError(f"init_params: unknown mode {mode!r}")
    if checkpoint is None:
        raise ValueError("init_params: mode encoder_from_checkpoint_decoder_random needs a checkpoint")
    mine = {k: v for k, v in cfg.to_dict().items() if k in ("frontend", "encoder", "n_units")}
    theirs = {k: v for k, v in checkpoint.model_config.items() if k in ("frontend", "encoder", "n_units")}
    diffs = _config_diff(mine, theirs)
    if diffs:
        raise ValueError("init_params: encoder config differs from checkpoint: " + "; ".join(diffs))
    params = init_encoder_params(cfg, seed, dtype)
    for name in params:
        if name not in checkpoint.params:
            raise ValueError(f"init_params: checkpoint lacks encoder tensor {name!r}")
        params[name] = Tensor(np.array(checkpoint.params[name], dtype=dtype), requires_grad=True, name=name)
    params.update(init_decoder_params(cfg, seed, dtype))
    return params


def is_encoder_param(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


def is_decoder_param(name: str) -> bool:
    return name.startswith(DECODER_PREFIXES)


# -- forward ----------------------------------------------------------------

def linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _norm_fwd(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, T, D = x.shape
    return transpose(reshape(x, (B, T, h, D // h)), (0, 2, 1, 3))


def multi_head_attention(params: dict[str, Tensor], name: str, xq: Tensor, xkv: Tensor, n_heads: int,
                         mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    B, Tq, D = xq.shape
    q = _split_heads(linear(xq, params, f"{name}.q"), n_heads)
    k = _split_heads(linear(xkv, params, f"{name}.k"), n_heads)
    v = _split_heads(linear(xkv, params, f"{name}.v"), n_heads)
    out, weights = scaled_dot_product_attention(q, k, v, mask)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, Tq, D))
    return linear(out, params, f"{name}.o"), weights


def _ffn(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return linear(gelu(linear(x, params, f"{name}.w1")), params, f"{name}.w2")


def causal_mask(L: int) -> np.ndarray:
    """(1, 1, L, L) boolean, true above the diagonal (blocked)."""
    return np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]


def _key_padding(valid: np.ndarray | None) -> np.ndarray | None:
    if valid is None:
        return None
    return ~np.asarray(valid, dtype=bool)[:, None, None, :]


@dataclass
class EncoderOutput:
    states: Tensor  # (B, T, d_model)
    intermediates: list[Tensor]  # [encoder input, block 1 output, ...]
    attention: list[Tensor]


def encoder_forward(features: Tensor, params: dict[str, Tensor], cfg: EncoderConfig,
                    valid: np.ndarray | None = None, rng: np.random.Generator | None = None) -> EncoderOutput:
    """Pre-norm transformer encoder over (B, T, D_in) features.

    ``valid`` (B, T) marks real frames; padding is excluded from attention.
    ``rng`` enables dropout.
    """
    if features.ndim != 3:
        raise ValueError(f"encoder_forward: expected (B, T, D) features, got {features.shape}")
    if features.shape[-1] != params["encoder.proj.weight"].shape[0]:
        raise ValueError(f"encoder_forward: feature dim {features.shape[-1]} != projection input "
                         f"{params['encoder.proj.weight'].shape[0]}")
    T = features.shape[1]
    pad = _key_padding(valid)
    x = linear(features, params, "encoder.proj") + sinusoidal_positions(T, cfg.d_model, features.dtype)
    x = dropout(x, cfg.dropout, rng)
    inter, attn = [features], []
    for i in range(cfg.n_layers):
        pre = f"encoder.layers.{i}"
        h = _norm_fwd(x, params, f"{pre}.ln1")
        a, w = multi_head_attention(params, f"{pre}.attn", h, h, cfg.n_heads, pad)
        x = x + dropout(a, cfg.dropout, rng)
        x = x + dropout(_ffn(_norm_fwd(x, params, f"{pre}.ln2"), params, f"{pre}.ffn"), cfg.dropout, rng)
        inter.append(x)
        attn.append(w)
    if cfg.n_layers:
        x = _norm_fwd(x, params, "encoder.norm")
    return EncoderOutput(states=x, intermediates=inter, attention=attn)


@dataclass
class DecoderOutput:
    logits: Tensor  # (B, L, V)
    self_attention: list[Tensor]
    cross_attention: list[Tensor]


def decoder_forward(tokens: np.ndarray, encoder_states: Tensor, params: dict[str, Tensor], cfg: DecoderConfig,
                    encoder_valid: np.ndarray | None = None, token_valid: np.ndarray | None = None,
                    task: str = "ssl", rng: np.random.Generator | None = None) -> DecoderOutput:
    """Teacher-forced logits for every prefix position.

    ``task="ssl"`` uses the cluster-ID embedding and head, ``task="asr"`` the
    character ones. Position ``i`` sees tokens ``<= i`` and every valid
    encoder frame.
    """
    embed_name, head_name = ("decoder.embed", "decoder_head") if task == "ssl" else ("asr.embed", "asr_head")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    table = params[embed_name]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise IndexError(f"decoder_forward: token id outside vocabulary of size {table.shape[0]}")
    B, L = tokens.shape
    x = embedding(table, tokens) + sinusoidal_positions(L, cfg.d_model, encoder_states.dtype)
    x = dropout(x, cfg.dropout, rng)
    self_mask = causal_mask(L)
    if token_valid is not None:
        self_mask = self_mask | _key_padding(token_valid)
    cross_mask = _key_padding(encoder_valid)
    sa, ca = [], []
    for i in range(cfg.n_layers):
        pre = f"decoder.layers.{i}"
        h = _norm_fwd(x, params, f"{pre}.ln1")
        a, w = multi_head_attention(params, f"{pre}.self_attn", h, h, cfg.n_heads, self_mask)
        x = x + dropout(a, cfg.dropout, rng)
        a, w2 = multi_head_attention(params, f"{pre}.cross_attn", _norm_fwd(x, params, f"{pre}.ln2"),
                                     encoder_states, cfg.n_heads, cross_mask)
        x = x + dropout(a, cfg.dropout, rng)
        x = x + dropout(_ffn(_norm_fwd(x, params, f"{pre}.ln3"), params, f"{pre}.ffn"), cfg.dropout, rng)
        sa.append(w)
        ca.append(w2)
    x = _norm_fwd(x, params, "decoder.norm")
    return DecoderOutput(logits=linear(x, params, head_name), self_attention=sa, cross_attention=ca)


def parameter_count(params: dict[str, Tensor], names: Iterable[str] | None = None) -> int:
    names = params.keys() if names is None else names
    return int(sum(params[n].size for n in names))

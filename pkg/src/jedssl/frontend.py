"""Strided convolutional feature extractor and the synthetic speech corpus."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, conv1d, gelu, layer_norm, mean, reshape

__all__ = [
    "FrontendConfig",
    "CorpusSpec",
    "Utterance",
    "FeatureFrames",
    "init_frontend_params",
    "num_frames",
    "min_samples",
    "conv_feature_extractor",
    "extract_features",
    "frame_phone_labels",
    "generate_synthetic_corpus",
    "save_corpus",
    "load_corpus",
    "phone_to_char",
]


@dataclass(frozen=True)
class FrontendConfig:
    channels: int = 64
    kernels: tuple[int, ...] = (32, 4)
    strides: tuple[int, ...] = (4, 2)
    pool: int = 40
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.kernels) != len(self.strides) or not self.kernels:
            raise ValueError("frontend: kernels and strides must be non-empty and of equal length")
        if min(self.kernels) < 1 or min(self.strides) < 1 or self.channels < 1 or self.pool < 1:
            raise ValueError("frontend: kernels, strides, pool and channels must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides)) * self.pool

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.total_stride


@dataclass
class FeatureFrames:
    frames: np.ndarray  # (T, D)
    frame_rate: float


def num_frames(n_samples: int, cfg: FrontendConfig) -> int:
    """Frame count after composing every conv layer's floor arithmetic (0 if too short)."""
    n = n_samples
    for k, s in zip(cfg.kernels, cfg.strides):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n // cfg.pool


def min_samples(cfg: FrontendConfig) -> int:
    """Receptive field of one output frame."""
    n = cfg.pool
    for k, s in reversed(list(zip(cfg.kernels, cfg.strides))):
        n = (n - 1) * s + k
    return n


def init_frontend_params(cfg: FrontendConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    params = {}
    cin = 1
    for i, k in enumerate(cfg.kernels):
        std = 1.0 / np.sqrt(k * cin)
        params[f"frontend.conv{i}.weight"] = rng.normal(0.0, std, (k, cin, cfg.channels))
        params[f"frontend.conv{i}.bias"] = np.zeros(cfg.channels)
        cin = cfg.channels
    params["frontend.norm.gain"] = np.ones(cfg.channels)
    params["frontend.norm.bias"] = np.zeros(cfg.channels)
    return {n: Tensor(v, requires_grad=True, dtype=dtype, name=n) for n, v in params.items()}


def conv_feature_extractor(waves: Tensor | np.ndarray, params: dict[str, Tensor], cfg: FrontendConfig) -> Tensor:
    """(B, N) samples -> (B, T, channels) frame features.

    GELU conv layers followed by mean pooling over ``cfg.pool`` positions: the
    rectify-then-average step turns band-passed oscillations into
    phase-invariant band energies, then a per-frame layer norm.
    """
    if not isinstance(waves, Tensor):
        waves = Tensor(np.asarray(waves), dtype=params["frontend.norm.gain"].dtype)
    if waves.ndim == 1:
        waves = reshape(waves, (1, waves.shape[0]))
    need = min_samples(cfg)
    if waves.shape[1] < need:
        raise ValueError(f"waveform has {waves.shape[1]} samples; the frontend needs at least {need}")
    x = reshape(waves, (waves.shape[0], waves.shape[1], 1))
    for i, s in enumerate(cfg.strides):
        x = gelu(conv1d(x, params[f"frontend.conv{i}.weight"], params[f"frontend.conv{i}.bias"], stride=s))
    if cfg.pool > 1:
        B, n, C = x.shape
        T = n // cfg.pool
        x = mean(reshape(x[:, : T * cfg.pool], (B, T, cfg.pool, C)), axis=2)
    return layer_norm(x, params["frontend.norm.gain"], params["frontend.norm.bias"])


def extract_features(utterances, params: dict[str, Tensor], cfg: FrontendConfig) -> list[FeatureFrames]:
    """Per-utterance features without recording a graph."""
    from .autodiff import no_grad

    out = []
    with no_grad():
        for u in utterances:
            feats = conv_feature_extractor(u.samples[None, :], params, cfg)
            out.append(FeatureFrames(frames=feats.data[0], frame_rate=cfg.frame_rate))
    return out


# -- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    n_utterances: int = 4
    min_duration: float = 0.6
    max_duration: float = 1.0
    n_latent_phones: int = 3
    min_segment: float = 0.08
    max_segment: float = 0.16
    snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances < 0:
            raise ValueError("corpus: n_utterances must be >= 0")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("corpus: need 0 < min_duration <= max_duration")
        if not 0 < self.min_segment <= self.max_segment:
            raise ValueError("corpus: need 0 < min_segment <= max_segment")
        if not 1 <= self.n_latent_phones <= 26:
            raise ValueError("corpus: n_latent_phones must be in [1, 26]")


@dataclass
class Utterance:
    uid: str
    samples: np.ndarray  # float32
    phones: list[int]
    boundaries: list[int]  # sample offsets, len(phones) + 1
    sample_rate: int = 16000
    transcript: str = field(default="")

    def __post_init__(self):
        if not self.transcript:
            self.transcript = "".join(phone_to_char(p) for p in self.phones)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def phone_to_char(p: int) -> str:
    return chr(ord("a") + int(p))


def _phone_textures(n_phones: int, rng: np.random.Generator) -> list[dict]:
    centers = np.geomspace(300.0, 1500.0, n_phones) if n_phones > 1 else np.array([1000.0])
    textures = []
    for c in centers:
        ratios = np.sort(rng.uniform(0.85, 1.15, size=3))
        textures.append({
            "freqs": c * ratios,
            "amps": rng.uniform(0.5, 1.0, size=3),
            "band": (0.8 * c, 1.2 * c),
        })
    return textures


def _render_segment(tex: dict, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    sig = np.zeros(n)
    for f, a in zip(tex["freqs"], tex["amps"]):
        sig += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    lo, hi = tex["band"]
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n)
    noise *= 0.5 * np.sqrt(np.mean(sig ** 2)) / (np.sqrt(np.mean(noise ** 2)) + 1e-12)
    seg = (sig + noise) * rng.uniform(0.8, 1.2)
    ramp = min(n // 2, int(0.005 * sr))
    if ramp > 0:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        seg *= env
    return seg


def _generate_one(idx: int, spec: CorpusSpec, textures: list[dict], seed_seq: np.random.SeedSequence,
                  sample_rate: int) -> Utterance:
    rng = np.random.default_rng(seed_seq)
    target = int(rng.uniform(spec.min_duration, spec.max_duration) * sample_rate)
    phones, lengths = [], []
    while sum(lengths) < target:
        choices = [p for p in range(spec.n_latent_phones) if not phones or p != phones[-1]]
        phones.append(int(choices[rng.integers(len(choices))]) if choices else 0)
        lengths.append(int(rng.uniform(spec.min_segment, spec.max_segment) * sample_rate))
    clean = np.concatenate([_render_segment(textures[p], n, sample_rate, rng) for p, n in zip(phones, lengths)])
    clean *= 0.3 / (np.sqrt(np.mean(clean ** 2)) + 1e-12)
    noise_power = np.mean(clean ** 2) / (10.0 ** (spec.snr_db / 10.0))
    wave = clean + rng.normal(0.0, np.sqrt(noise_power), size=clean.shape)
    bounds = [0] + np.cumsum(lengths).tolist()
    return Utterance(uid=f"utt{idx:05d}", samples=wave.astype(np.float32), phones=phones,
                     boundaries=[int(b) for b in bounds], sample_rate=sample_rate)


def generate_synthetic_corpus(spec: CorpusSpec, sample_rate: int = 16000,
                              workers: int | None = None) -> list[Utterance]:
    """Deterministic corpus of tone+noise phone sequences.

    Utterance ``i`` draws from its own spawned seed, so the result does not
    depend on ``workers``. Adjacent segments always carry different phones.
    """
    master = np.random.SeedSequence(spec.seed)
    tex_seq, utt_seq = master.spawn(2)
    textures = _phone_textures(spec.n_latent_phones, np.random.default_rng(tex_seq))
    seeds = utt_seq.spawn(spec.n_utterances)
    workers = workers or int(os.environ.get("JEDSSL_THREADS", "1"))
    if workers > 1 and spec.n_utterances > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: _generate_one(i, spec, textures, seeds[i], sample_rate),
                                 range(spec.n_utterances)))
    return [_generate_one(i, spec, textures, seeds[i], sample_rate) for i in range(spec.n_utterances)]


def frame_phone_labels(utt: Utterance, cfg: FrontendConfig) -> np.ndarray:
    """Hidden phone under the centre sample of each frame."""
    T = num_frames(len(utt.samples), cfg)
    rf = min_samples(cfg)
    centres = np.arange(T) * cfg.total_stride + rf // 2
    seg = np.searchsorted(np.asarray(utt.boundaries), centres, side="right") - 1
    seg = np.clip(seg, 0, len(utt.phones) - 1)
    return np.asarray(utt.phones)[seg]


def save_corpus(corpus: list[Utterance], out_dir: str | os.PathLike, spec: CorpusSpec | None = None) -> Path:
    """Write manifest.json plus one little-endian float32 file per utterance.

    The directory is assembled next to ``out_dir`` and renamed into place, so a
    failure leaves nothing behind.
    """
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"parent directory {out_dir.parent} does not exist")
    if out_dir.exists():
        raise FileExistsError(f"{out_dir} already exists")
    tmp = Path(tempfile.mkdtemp(prefix=".corpus-", dir=out_dir.parent))
    try:
        (tmp / "wav").mkdir()
        entries = []
        for u in corpus:
            fname = f"wav/{u.uid}.f32"
            u.samples.astype("<f4").tofile(tmp / fname)
            entries.append({
                "id": u.uid,
                "duration": round(u.duration, 6),
                "transcript": u.transcript,
                "phones": list(u.phones),
                "boundaries": list(u.boundaries),
                "num_samples": int(len(u.samples)),
                "file": fname,
            })
        manifest = {
            "format": "jedssl-corpus/1",
            "sample_rate": corpus[0].sample_rate if corpus else 16000,
            "spec": asdict(spec) if spec is not None else None,
            "utterances": entries,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.rename(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def load_corpus(path: str | os.PathLike) -> list[Utterance]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    sr = manifest["sample_rate"]
    out = []
    for e in manifest["utterances"]:
        samples = np.fromfile(path / e["file"], dtype="<f4").astype(np.float32)
        if len(samples) != e["num_samples"]:
            raise ValueError(f"corpus: {e['file']} has {len(samples)} samples, manifest says {e['num_samples']}")
        out.append(Utterance(uid=e["id"], samples=samples, phones=e["phones"], boundaries=e["boundaries"],
                             sample_rate=sr, transcript=e["transcript"]))
    return out

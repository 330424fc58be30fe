"""Held-out comparison of pre-training and finetuning regimes on synthetic splits."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .frontend import extract_features, generate_synthetic_corpus
from .model import init_encoder_params
from .training import evaluate, finetune, label_units, pretrain
from .units import kmeans_fit

log = logging.getLogger(__name__)

__all__ = ["RegimeResult", "DirectionalReport", "discover_units", "run_regimes", "directional_check"]

# name -> (pre-train with decoder?, finetune mode)
REGIMES = {
    "joint_pretrain+joint_finetune": (True, "joint_enc_dec"),
    "encoder_pretrain+ctc_finetune": (False, "ctc_only_encoder"),
    "joint_pretrain+random_decoder_finetune": (True, "proposed_enc_with_random_decoder"),
}


@dataclass
class RegimeResult:
    regime: str
    seed: int
    cer: float
    train_cer: float | None = None


@dataclass
class DirectionalReport:
    results: list[RegimeResult] = field(default_factory=list)
    seconds: float = 0.0

    def mean_cer(self, regime: str) -> float:
        return float(np.mean([r.cer for r in self.results if r.regime == regime]))

    @property
    def means(self) -> dict[str, float]:
        return {name: self.mean_cer(name) for name in REGIMES}

    @property
    def ordering_holds(self) -> bool:
        m = self.means
        joint = m["joint_pretrain+joint_finetune"]
        return joint <= m["encoder_pretrain+ctc_finetune"] and m["joint_pretrain+random_decoder_finetune"] > joint

    def summary(self) -> str:
        lines = [f"{name:42s} mean test CER {cer:.4f}" for name, cer in self.means.items()]
        verdict = "ordering holds" if self.ordering_holds else "ORDERING FAILED at this scale"
        return "\n".join(lines + [verdict])


def discover_units(cfg: ExperimentConfig, train):
    """K-means on features of the seeded random-init frontend; returns (model, per-utterance ids)."""
    model_cfg = cfg.model_config()
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    fp = init_encoder_params(model_cfg, cfg.seed, dtype)
    km = kmeans_fit([f.frames for f in extract_features(train, fp, cfg.frontend)], cfg.kmeans.k,
                    max_iters=cfg.kmeans.max_iters, seed=cfg.seed)
    return km, label_units(train, km, fp, model_cfg)


def run_regimes(cfg: ExperimentConfig, seed: int, regimes=tuple(REGIMES),
                score_train: bool = False) -> list[RegimeResult]:
    """Train every regime on one seed's split and score it on the held-out utterances."""
    cfg = dataclasses.replace(cfg, seed=seed)
    c = cfg.corpus
    if c.n_test < 1:
        raise ValueError("directional check needs corpus.n_test > 0")
    utts = generate_synthetic_corpus(c.spec(seed), cfg.frontend.sample_rate)
    train, test = utts[: c.n_utterances], utts[c.n_utterances :]
    model_cfg = cfg.model_config()
    _, targets = discover_units(cfg, train)
    pretrained = {}
    out = []
    for name in regimes:
        with_decoder, mode = REGIMES[name]
        if with_decoder not in pretrained:
            pretrained[with_decoder], _ = pretrain(train, targets, model_cfg,
                                                   cfg.pretrain_config(use_decoder=with_decoder),
                                                   precision=cfg.precision)
        ft, _ = finetune(pretrained[with_decoder], train, model_cfg, cfg.finetune_config(mode=mode),
                         precision=cfg.precision)
        res = RegimeResult(name, seed, evaluate(ft, test, beam_size=cfg.eval.beam_size)["cer"])
        if score_train:
            res.train_cer = evaluate(ft, train, beam_size=cfg.eval.beam_size)["cer"]
        log.info("seed %d %s: test CER %.4f (train %s)", seed, name, res.cer, res.train_cer)
        out.append(res)
    return out


def directional_check(cfg: ExperimentConfig, seeds=(0, 1, 2), score_train: bool = False) -> DirectionalReport:
    t0 = time.perf_counter()
    report = DirectionalReport()
    for s in seeds:
        report.results += run_regimes(cfg, s, score_train=score_train)
    report.seconds = time.perf_counter() - t0
    return report

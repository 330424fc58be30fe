"""``jedssl`` command line: one subcommand per pipeline stage over an experiment directory.

Directory layout::

    config.yaml                 resolved config snapshot (written first)
    corpus/train, corpus/test   synthetic audio + manifests
    kmeans/                     centroids and unit-discovery report
    checkpoints/pretrain/       periodic step-* checkpoints and final/
    checkpoints/continue/       continued pre-training (fresh decoder)
    checkpoints/finetune-<mode>/
    metrics.jsonl               one JSON record per logged step
    eval/report.json            latest evaluation; eval/<mode>.json per model
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, apply_overrides, from_dict, load_config
from .frontend import extract_features, frame_phone_labels, generate_synthetic_corpus, load_corpus, save_corpus
from .model import init_encoder_params
from .training import FINETUNE_MODES, NumericalError, evaluate, finetune, label_units, pretrain
from .units import cluster_purity, kmeans_assign, kmeans_fit, load_kmeans, save_kmeans

log = logging.getLogger("jedssl")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


# -- experiment directory ---------------------------------------------------

class Experiment:
    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = root
        self.cfg = cfg

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str, hint: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"missing {p} (run `jedssl {hint}` first)")
        return p

    def corpus(self, split: str = "train"):
        return load_corpus(self.require(f"corpus/{split}", "gen-corpus"))

    def log_metrics(self, rec: dict) -> None:
        line = (json.dumps(rec, sort_keys=True) + "\n").encode()
        # a single O_APPEND write keeps concurrent readers from seeing half a record
        fd = os.open(self.path("metrics.jsonl"), os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line)
        finally:
            os.close(fd)

    def frontend_params(self):
        """Frontend used for unit discovery: the seeded random initialisation of the pretraining model."""
        dtype = np.float64 if self.cfg.precision == "f64" else np.float32
        return init_encoder_params(self.cfg.model_config(), self.cfg.seed, dtype)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _open_experiment(args) -> Experiment:
    root = Path(args.dir)
    snap = root / "config.yaml"
    if args.config is None:
        if not snap.exists():
            raise ConfigError(f"no --config given and {snap} does not exist")
        raw = load_config(snap)
    else:
        raw = load_config(args.config)
    raw = apply_overrides(raw, seed=args.seed, precision=args.precision)
    cfg = from_dict(raw)
    resolved = cfg.to_dict()
    if snap.exists():
        old = from_dict(load_config(snap)).to_dict()
        if old != resolved:
            if not args.force:
                raise ConfigError(f"{snap} differs from the requested config; pass --force to replace it")
            log.warning("replacing config snapshot %s", snap)
    if not root.parent.exists():
        raise MissingArtifact(f"parent directory {root.parent} does not exist")
    root.mkdir(exist_ok=True)
    if not snap.exists() or args.force:
        tmp = snap.with_name("config.yaml.tmp")
        tmp.write_text(yaml.safe_dump(_plain(resolved), sort_keys=True))
        os.replace(tmp, snap)
    return Experiment(root, cfg)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _done(path: Path, force: bool) -> bool:
    """True if ``path`` exists and should be kept; with ``force`` it is removed first."""
    if path.exists():
        if not force:
            log.info("%s exists; skipping (use --force to redo)", path)
            return True
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    return False


# -- subcommands ------------------------------------------------------------

def cmd_gen_corpus(exp: Experiment, args) -> None:
    out = exp.path("corpus")
    if _done(out, args.force):
        return
    c = exp.cfg.corpus
    utts = generate_synthetic_corpus(c.spec(exp.cfg.seed), exp.cfg.frontend.sample_rate)
    tmp = exp.path(".corpus.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    save_corpus(utts[: c.n_utterances], tmp / "train", c.spec(exp.cfg.seed))
    if c.n_test:
        save_corpus(utts[c.n_utterances :], tmp / "test", c.spec(exp.cfg.seed))
    os.rename(tmp, out)
    log.info("wrote %d train / %d test utterances to %s", c.n_utterances, c.n_test, out)


def cmd_discover_units(exp: Experiment, args) -> None:
    out = exp.path("kmeans")
    if _done(out, args.force):
        return
    corpus = exp.corpus("train")
    fp = exp.frontend_params()
    feats = [f.frames for f in extract_features(corpus, fp, exp.cfg.frontend)]
    km = kmeans_fit(feats, exp.cfg.kmeans.k, max_iters=exp.cfg.kmeans.max_iters, seed=exp.cfg.seed)
    ids = np.concatenate([kmeans_assign(km, f) for f in feats])
    labels = np.concatenate([frame_phone_labels(u, exp.cfg.frontend) for u in corpus])
    tmp = exp.path(".kmeans.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    save_kmeans(km, tmp)
    report = {"k": km.k, "inertia": km.inertia, "n_iter": km.n_iter, "n_frames": int(len(ids)),
              "purity": cluster_purity(ids, labels)}
    _write_json(tmp / "report.json", report)
    os.rename(tmp, out)
    log.info("k-means: K=%d inertia=%.4f purity=%.3f", km.k, km.inertia, report["purity"])


def _latest_step_checkpoint(d: Path):
    steps = sorted(p for p in d.glob("step-*") if p.is_dir())
    return load_checkpoint(steps[-1]) if steps else None


def _run_pretrain(exp: Experiment, args, stage: str, cfg, init_mode: str, init_ckpt) -> None:
    ckdir = exp.path("checkpoints", stage)
    final = ckdir / "final"
    if _done(final, args.force):
        return
    if args.force and ckdir.exists():
        shutil.rmtree(ckdir)
    corpus = exp.corpus("train")
    km = load_kmeans(exp.require("kmeans", "discover-units"))
    targets = label_units(corpus, km, exp.frontend_params(), exp.cfg.model_config())
    resume = _latest_step_checkpoint(ckdir) if ckdir.exists() else None
    if resume is not None:
        log.info("resuming %s from step %d", stage, resume.step)
    ckpt, _ = pretrain(corpus, targets, exp.cfg.model_config(), cfg, init_mode=init_mode, init_checkpoint=init_ckpt,
                       resume=resume, precision=exp.cfg.precision, checkpoint_dir=ckdir,
                       metrics_sink=lambda r: exp.log_metrics({**r, "stage": stage}))
    save_checkpoint(ckpt, final)
    log.info("%s finished at step %d", stage, ckpt.step)


def cmd_pretrain(exp: Experiment, args) -> None:
    _run_pretrain(exp, args, "pretrain", exp.cfg.pretrain_config(), "scratch", None)


def cmd_continue_pretrain(exp: Experiment, args) -> None:
    if exp.cfg.decoder is None:
        raise ConfigError("continue-pretrain needs a decoder section")
    base = load_checkpoint(exp.require("checkpoints/pretrain/final", "pretrain"))
    _run_pretrain(exp, args, "continue", exp.cfg.continue_config(), "encoder_from_checkpoint_decoder_random", base)


def _source_checkpoint(exp: Experiment, source: str):
    if source == "auto":
        source = "continue" if exp.path("checkpoints/continue/final").exists() else "pretrain"
    hint = "continue-pretrain" if source == "continue" else "pretrain"
    return load_checkpoint(exp.require(f"checkpoints/{source}/final", hint))


def _mode_override(args) -> dict:
    # the finetune regime is chosen per invocation so one directory can hold all four
    return {"mode": args.mode} if getattr(args, "mode", None) else {}


def cmd_finetune(exp: Experiment, args) -> None:
    cfg = exp.cfg.finetune_config(**_mode_override(args))
    ckdir = exp.path("checkpoints", f"finetune-{cfg.mode}")
    if _done(ckdir / "final", args.force):
        return
    if args.force and ckdir.exists():
        shutil.rmtree(ckdir)
    source = _source_checkpoint(exp, args.source)
    ckpt, _ = finetune(source, exp.corpus("train"), exp.cfg.model_config(), cfg, precision=exp.cfg.precision,
                       checkpoint_dir=ckdir, metrics_sink=exp.log_metrics)
    save_checkpoint(ckpt, ckdir / "final")
    log.info("finetune %s finished at step %d", cfg.mode, ckpt.step)


def cmd_evaluate(exp: Experiment, args) -> None:
    mode = exp.cfg.finetune_config(**_mode_override(args)).mode
    split = exp.cfg.eval.split
    per_mode = exp.path("eval", f"{mode}.json")
    if _done(per_mode, args.force):
        shutil.copyfile(per_mode, exp.path("eval", "report.json"))
        return
    ckpt = load_checkpoint(exp.require(f"checkpoints/finetune-{mode}/final", f"finetune --mode {mode}"))
    report = evaluate(ckpt, exp.corpus(split), beam_size=exp.cfg.eval.beam_size)
    report["split"] = split
    exp.path("eval").mkdir(exist_ok=True)
    _write_json(per_mode, report)
    _write_json(exp.path("eval", "report.json"), report)
    log.info("%s on %s: CER %.4f", report["model_tag"], split, report["cer"])


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "discover-units": cmd_discover_units,
    "pretrain": cmd_pretrain,
    "continue-pretrain": cmd_continue_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jedssl", description="Joint encoder-decoder SSL pipeline on synthetic speech.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file or preset name (desk-tiny, desk-small, paper-360h); "
                                        "defaults to the directory's config.yaml")
        p.add_argument("--dir", required=True, help="experiment directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--force", action="store_true", help="redo the stage even if its artifacts exist")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("finetune", "evaluate"):
            p.add_argument("--mode", choices=FINETUNE_MODES)
        if name == "finetune":
            p.add_argument("--source", choices=("auto", "pretrain", "continue"), default="auto",
                           help="pre-trained checkpoint to start from (auto prefers continue)")
    return parser


@contextmanager
def _thread_cap():
    n = os.environ.get("JEDSSL_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        with _thread_cap():
            exp = _open_experiment(args)
            COMMANDS[args.command](exp, args)
    except ConfigError as e:
        print(f"jedssl: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError, FileNotFoundError) as e:
        print(f"jedssl: missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as e:
        print(f"jedssl: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"jedssl: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    log.info("%s done in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

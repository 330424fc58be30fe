"""Acoustic unit discovery: Lloyd's k-means over frame features."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "KMeansModel",
    "kmeans_fit",
    "kmeans_assign",
    "refit_from_model_layer",
    "cluster_purity",
    "save_kmeans",
    "load_kmeans",
]


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (K, D)
    seed: int = 0
    n_iter: int = 0
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _assign(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, c)
    # argmin returns the first minimum, i.e. the lowest centroid index on ties
    ids = d.argmin(axis=1)
    return ids, d[np.arange(len(x)), ids]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans_fit(features: np.ndarray | Sequence[np.ndarray], k: int, max_iters: int = 100,
               seed: int = 0) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations until the assignment is a fixpoint.

    ``features`` is an (N, D) matrix or a list of (T_i, D) matrices. An empty
    cluster is re-seeded at the point farthest from its current centroid.
    Centroids are rounded to float32 so the persisted model is exact.
    """
    x = _stack(features)
    if k < 1:
        raise ValueError(f"kmeans_fit: K must be >= 1, got {k}")
    if len(x) < k:
        raise ValueError(f"kmeans_fit: {len(x)} frames is fewer than K={k}")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    ids, d = _assign(x, c)
    history = [float(d.sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_c = np.empty_like(c)
        counts = np.bincount(ids, minlength=k)
        for j in range(k):
            if counts[j]:
                new_c[j] = x[ids == j].mean(axis=0)
            else:
                far = int(d.argmax())
                new_c[j] = x[far]
                d[far] = 0.0
        c = new_c
        new_ids, d = _assign(x, c)
        inertia = float(d.sum())
        if inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"kmeans_fit: inertia increased {history[-1]} -> {inertia} at iteration {n_iter}")
        history.append(inertia)
        converged = np.array_equal(new_ids, ids)
        ids = new_ids
        if converged:
            break
    c = c.astype(np.float32)
    _, d = _assign(x, c.astype(np.float64))
    return KMeansModel(centroids=c, seed=seed, n_iter=n_iter, inertia=float(d.sum()),
                       inertia_history=history)


def kmeans_assign(model: KMeansModel, features: np.ndarray) -> np.ndarray:
    """Nearest centroid (squared Euclidean) per frame; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"kmeans_assign: features of shape {x.shape} do not match centroid dim {model.dim}")
    return _assign(x, model.centroids.astype(np.float64))[0]


def refit_from_model_layer(layer_fn: Callable[[object, int], np.ndarray], layer_index: int, n_layers: int,
                           corpus: Sequence, k: int, max_iters: int = 100, seed: int = 0) -> KMeansModel:
    """Fit k-means on intermediate activations ``layer_fn(utt, layer_index)``.

    Layer 0 is the encoder input (frontend features); layer ``i`` the output
    of encoder block ``i``.
    """
    if not 0 <= layer_index <= n_layers:
        raise ValueError(f"refit_from_model_layer: layer {layer_index} outside [0, {n_layers}]")
    feats = [np.asarray(layer_fn(u, layer_index)) for u in corpus]
    return kmeans_fit(feats, k, max_iters=max_iters, seed=seed)


def cluster_purity(ids: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of frames whose cluster's majority label matches their own."""
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if len(ids) == 0:
        raise ValueError("cluster_purity: empty input")
    hits = 0
    for c in np.unique(ids):
        hits += np.bincount(labels[ids == c]).max()
    return hits / len(ids)


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = features
    else:
        x = np.concatenate([np.asarray(f) for f in features], axis=0)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"k-means features must be 2-D, got shape {x.shape}")
    return x


def save_kmeans(model: KMeansModel, out_dir: str | os.PathLike) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"K": model.k, "D": model.dim, "seed": model.seed, "inertia": model.inertia,
              "n_iter": model.n_iter, "dtype": "<f4"}
    model.centroids.astype("<f4").tofile(out_dir / "centroids.f32")
    (out_dir / "kmeans.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_kmeans(path: str | os.PathLike) -> KMeansModel:
    path = Path(path)
    header = json.loads((path / "kmeans.json").read_text())
    c = np.fromfile(path / "centroids.f32", dtype="<f4")
    if c.size != header["K"] * header["D"]:
        raise ValueError(f"kmeans: centroid payload has {c.size} values, header says {header['K']}x{header['D']}")
    return KMeansModel(centroids=c.reshape(header["K"], header["D"]).astype(np.float32), seed=header["seed"],
                       n_iter=header["n_iter"], inertia=header["inertia"])

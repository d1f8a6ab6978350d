"""Naive comparator: k-means on raw instruments, then discrete bounds.

The baseline discretizes the instrument space by clustering alone (no
outcome signal), refits the nuisance nets on one-hot cluster labels with
the same architectures as the main method, and applies the
discrete-instrument bounds over the k labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bounds as bnd
from .data import DatasetSplit, OutcomeRange, SampleBatch
from .nets import PropensityNet, TrainConfig, TwoHeadOutcomeNet, train_with_early_stopping
from .rng import stream_rng


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (k, d)
    inertia: float
    history: list[float]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, z: np.ndarray) -> np.ndarray:
        """Nearest centroid; ties resolve to the smallest index."""
        z = np.atleast_2d(z)
        d2 = ((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def _inertia(z: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((z - centroids[labels]) ** 2).sum())


def _plusplus_seed(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centroids = [z[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((z[:, None, :] - np.array(centroids)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(z[rng.integers(n)])
            continue
        centroids.append(z[rng.choice(n, p=d2 / total)])
    return np.array(centroids)


def kmeans_fit(z: np.ndarray, k: int, seed: int, n_restarts: int = 10,
               tol: float = 1e-6, max_iter: int = 300) -> KMeansModel:
    """Lloyd's iterations from k-means++ seeding, best of ``n_restarts``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] < z.shape[1] and z.ndim == 2 and z.shape[1] > 20:
        raise ValueError("z must be (n, d)")
    distinct = np.unique(z, axis=0)
    if len(distinct) < k:
        raise ValueError(f"need at least {k} distinct instrument values, found {len(distinct)}")
    rng = stream_rng(seed, "kmeans")
    best: KMeansModel | None = None
    for _ in range(n_restarts):
        centroids = _plusplus_seed(z, k, rng)
        history: list[float] = []
        for _ in range(max_iter):
            d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            history.append(_inertia(z, centroids, labels))
            new_centroids = centroids.copy()
            for j in range(k):
                members = labels == j
                if members.any():
                    new_centroids[j] = z[members].mean(axis=0)
                else:
                    # Re-seed an empty cluster at the worst-fit point.
                    new_centroids[j] = z[np.argmax(d2[np.arange(len(z)), labels])]
            movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1).max()))
            centroids = new_centroids
            if movement < tol:
                break
        labels = np.argmin(((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
        history.append(_inertia(z, centroids, labels))
        model = KMeansModel(centroids=centroids, inertia=history[-1], history=history)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class NaiveFit:
    kmeans: KMeansModel
    mu: TwoHeadOutcomeNet
    pi: PropensityNet


def fit_naive(split: DatasetSplit, k: int, config: TrainConfig) -> NaiveFit:
    """Cluster train instruments; refit outcome/propensity on one-hot labels."""
    km = kmeans_fit(split.train.z, k, config.seed)
    present = set(np.unique(split.train.a))
    if present != {0, 1}:
        raise ValueError("both treatment arms required in training data")

    def arrays(batch: SampleBatch) -> dict[str, np.ndarray]:
        return {
            "x": batch.x,
            "z": _one_hot(km.assign(batch.z), k),
            "a": batch.a.astype(np.float64),
            "y": batch.y,
        }

    train, val = arrays(split.train), arrays(split.val)
    mu = TwoHeadOutcomeNet.create(1, k, stream_rng(config.seed, "naive-mu-init"))
    train_with_early_stopping(mu, lambda m, b: m.loss_graph(b), train, val, config,
                              rng=stream_rng(config.seed, "naive-mu-batches"))
    pi = PropensityNet.create(1, k, stream_rng(config.seed, "naive-pi-init"))
    train_with_early_stopping(pi, lambda m, b: m.loss_graph(b), train, val, config,
                              rng=stream_rng(config.seed, "naive-pi-batches"))
    return NaiveFit(kmeans=km, mu=mu, pi=pi)


def naive_bounds(fit: NaiveFit, batch: SampleBatch, rng_range: OutcomeRange) -> tuple[bnd.BoundPair, dict]:
    """Discrete-instrument bounds over the k cluster labels at each query."""
    k = fit.kmeans.k
    eye = np.eye(k)
    nq = len(batch)
    pi = np.empty((nq, k))
    mu1 = np.empty((nq, k))
    mu0 = np.empty((nq, k))
    for c in range(k):
        zc = np.tile(eye[c], (nq, 1))
        preds = fit.mu.predict(batch.x, zc)
        mu0[:, c] = preds[:, 0]
        mu1[:, c] = preds[:, 1]
        pi[:, c] = fit.pi.predict(batch.x, zc)
    pair = bnd.discrete_bounds_on_grid(batch.x, pi, mu1, mu0, rng_range)
    masses = np.bincount(fit.kmeans.assign(batch.z), minlength=k) / nq
    return pair, {"cell_masses": masses, "min_cell_mass": float(masses.min())}


def naive_bounds_pipeline(split: DatasetSplit, k: int, rng_range: OutcomeRange,
                          config: TrainConfig) -> tuple[bnd.BoundPair, NaiveFit, dict]:
    fit = fit_naive(split, k, config)
    pair, diag = naive_bounds(fit, split.test, rng_range)
    return pair, fit, diag

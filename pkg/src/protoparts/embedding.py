"""3-D neighbour embedding of prototype activation vectors, plus kNN purity.

A small UMAP-style pipeline: exact kNN, fuzzy simplicial weights, then SGD
on the attractive/repulsive cross-entropy surrogate with negative sampling.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numba
import numpy as np
import scipy.sparse as sp
from scipy.optimize import curve_fit
from scipy.sparse.csgraph import connected_components

from .data import whiten_batch


@dataclass
class EmbeddingConfig:
    k_neighbors: int = 15
    n_components: int = 3
    min_dist: float = 0.1
    spread: float = 1.0
    epochs: int = 200
    negative_samples: int = 5
    learning_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_components != 3:
            raise ValueError("n_components is fixed at 3")
        if self.k_neighbors < 2:
            raise ValueError("k_neighbors must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def activation_vectors(model, images, stats=None, batch_size: int = 64) -> np.ndarray:
    """Per-image top similarity to every prototype (M x P), in input order.

    ``images`` is a uint8 M x S x S x 3 array or an already whitened float batch.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("activation_vectors: empty dataset")
    if images.dtype == np.uint8:
        images = whiten_batch(images, stats or model.stats)
    return model.activations(images, batch_size)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    step = max(1, 2_000_000 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def knn_graph(vectors: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours (self excluded, ties by index): indices and distances, M x k."""
    m = len(vectors)
    if m <= k:
        raise ValueError(f"knn_graph needs more than k={k} points, got {m}")
    d = _pairwise(vectors, vectors)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def _smooth_sigma(dist_row: np.ndarray, rho: float, target: float) -> float:
    lo, hi = 1e-8, 1e8
    excess = np.maximum(dist_row - rho, 0.0)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if np.exp(-excess / mid).sum() > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def membership_weights(knn_dist: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed weights exp(-max(0, d - rho) / sigma) with sigma solved per point."""
    k = knn_dist.shape[1]
    target = np.log2(k)
    rho = knn_dist[:, 0].copy()
    sigma = np.array([_smooth_sigma(row, r, target) for row, r in zip(knn_dist, rho)])
    w = np.exp(-np.maximum(knn_dist - rho[:, None], 0.0) / sigma[:, None])
    return w, rho, sigma


def fuzzy_graph(knn: tuple[np.ndarray, np.ndarray]) -> sp.csr_matrix:
    """Symmetric fuzzy union W = w + w^T - w * w^T of the directed kNN memberships."""
    idx, dist = knn
    m, k = idx.shape
    w, _, _ = membership_weights(dist)
    rows = np.repeat(np.arange(m), k)
    directed = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(m, m))
    t = directed.T.tocsr()
    sym = directed + t - directed.multiply(t)
    sym = sym.tocsr()
    sym.eliminate_zeros()
    sym.sort_indices()
    return sym


def find_ab_params(spread: float = 1.0, min_dist: float = 0.1) -> tuple[float, float]:
    """Least-squares fit of 1 / (1 + a d^{2b}) to the min_dist-offset exponential."""
    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0, spread * 3, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    (a, b), _ = curve_fit(curve, xv, yv)
    return float(a), float(b)


def spectral_init(graph: sp.csr_matrix, dim: int = 3) -> np.ndarray:
    m = graph.shape[0]
    deg = np.asarray(graph.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    lap = np.eye(m) - (graph.toarray() * inv[:, None]) * inv[None, :]
    _, vecs = np.linalg.eigh(lap)
    coords = vecs[:, 1:dim + 1].copy()
    for c in range(dim):  # eigenvector sign is arbitrary; pin it
        if coords[np.argmax(np.abs(coords[:, c])), c] < 0:
            coords[:, c] *= -1
    coords *= 10.0 / np.abs(coords).max()
    return coords


@numba.njit(cache=True)
def _sgd_epoch(coords, heads, tails, negatives, a, b, alpha):
    dim = coords.shape[1]
    for e in range(heads.shape[0]):
        i = heads[e]
        j = tails[e]
        d2 = 0.0
        for c in range(dim):
            diff = coords[i, c] - coords[j, c]
            d2 += diff * diff
        if d2 > 0.0:
            gc = -2.0 * a * b * d2 ** (b - 1.0) / (1.0 + a * d2 ** b)
            for c in range(dim):
                g = gc * (coords[i, c] - coords[j, c])
                g = min(max(g, -4.0), 4.0)
                coords[i, c] += g * alpha
                coords[j, c] -= g * alpha
        for s in range(negatives.shape[1]):
            k = negatives[e, s]
            if k == i:
                continue
            d2 = 0.0
            for c in range(dim):
                diff = coords[i, c] - coords[k, c]
                d2 += diff * diff
            gc = 0.0
            if d2 > 0.0:
                gc = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2 ** b))
            for c in range(dim):
                if gc > 0.0:
                    g = min(max(gc * (coords[i, c] - coords[k, c]), -4.0), 4.0)
                else:
                    g = 4.0
                coords[i, c] += g * alpha


def optimize_layout(graph: sp.csr_matrix, cfg: EmbeddingConfig,
                    init: np.ndarray | None = None) -> np.ndarray:
    """SGD layout; edges are visited at a rate proportional to their weight."""
    m = graph.shape[0]
    rng = np.random.default_rng(cfg.seed)
    a, b = find_ab_params(cfg.spread, cfg.min_dist)
    if init is not None:
        coords = np.array(init, dtype=np.float64)
    elif connected_components(graph, directed=False)[0] == 1 and m > cfg.n_components + 1:
        coords = spectral_init(graph, cfg.n_components)
    else:
        coords = rng.normal(0.0, 0.1, size=(m, cfg.n_components))
    coo = graph.tocoo()
    keep = coo.data >= coo.data.max() / cfg.epochs
    heads = coo.row[keep].astype(np.int64)
    tails = coo.col[keep].astype(np.int64)
    weights = coo.data[keep]
    per_sample = weights.max() / weights
    next_due = per_sample.copy()
    for epoch in range(cfg.epochs):
        due = np.flatnonzero(next_due <= epoch + 1)
        next_due[due] += per_sample[due]
        neg = rng.integers(0, m, size=(len(due), cfg.negative_samples))
        alpha = cfg.learning_rate * (1.0 - epoch / cfg.epochs)
        _sgd_epoch(coords, heads[due], tails[due], neg, a, b, alpha)
        if not np.isfinite(coords).all():
            raise FloatingPointError(f"optimize_layout: non-finite coordinate at epoch {epoch}")
    return coords


def embed(vectors: np.ndarray, cfg: EmbeddingConfig | None = None) -> np.ndarray:
    cfg = cfg or EmbeddingConfig()
    return optimize_layout(fuzzy_graph(knn_graph(vectors, cfg.k_neighbors)), cfg)


def project_new(train_coords: np.ndarray, train_vectors: np.ndarray, new_vectors: np.ndarray,
                cfg: EmbeddingConfig | None = None) -> np.ndarray:
    """Place held-out points against a frozen layout: weighted-mean start, one attraction epoch."""
    cfg = cfg or EmbeddingConfig()
    a, b = find_ab_params(cfg.spread, cfg.min_dist)
    d = _pairwise(new_vectors, train_vectors)
    idx = np.argsort(d, axis=1, kind="stable")[:, :cfg.k_neighbors]
    dist = np.take_along_axis(d, idx, axis=1)
    w, _, _ = membership_weights(dist)
    out = np.empty((len(new_vectors), train_coords.shape[1]))
    for n in range(len(new_vectors)):
        y = (w[n][:, None] * train_coords[idx[n]]).sum(axis=0) / w[n].sum()
        for j, wj in zip(idx[n], w[n]):
            diff = y - train_coords[j]
            d2 = float(diff @ diff)
            if d2 > 0:
                gc = -2.0 * a * b * d2 ** (b - 1.0) / (1.0 + a * d2 ** b)
                y = y + np.clip(gc * diff, -4, 4) * cfg.learning_rate * wj
        out[n] = y
    return out


def knn_purity(coords: np.ndarray, labels, k: int = 10, per_point: bool = False):
    """Mean fraction of each point's k nearest embedded neighbours sharing its label."""
    labels = np.asarray(labels)
    idx, _ = knn_graph(coords, k)
    frac = (labels[idx] == labels[:, None]).mean(axis=1)
    return (float(frac.mean()), frac) if per_point else float(frac.mean())


def point_certainty(train_coords: np.ndarray, train_labels, point: np.ndarray, label: int,
                    k: int = 10) -> float:
    """Share of a new point's k nearest training neighbours (in the layout) with ``label``."""
    d = _pairwise(np.atleast_2d(point), train_coords)[0]
    nearest = np.argsort(d, kind="stable")[:k]
    return float((np.asarray(train_labels)[nearest] == label).mean())


def write_embedding_csv(path, coords, labels, splits, point_ids) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["umap1", "umap2", "umap3", "label", "split", "point_id"])
        for c, lab, s, pid in zip(coords, labels, splits, point_ids):
            w.writerow([f"{c[0]:.6g}", f"{c[1]:.6g}", f"{c[2]:.6g}", lab, s, pid])


def plot_embedding(path, coords, labels, class_names=None) -> None:
    """Scatter of the three pairwise projections, one colour per class."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = np.asarray(labels)
    names = class_names or [str(v) for v in np.unique(labels)]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4.2))
    for ax, (p, q) in zip(axes, [(0, 1), (0, 2), (1, 2)]):
        for k, name in enumerate(names):
            sel = labels == (name if labels.dtype.kind in "US" else k)
            ax.scatter(coords[sel, p], coords[sel, q], s=6, label=name)
        ax.set_xlabel(f"umap{p + 1}")
        ax.set_ylabel(f"umap{q + 1}")
    axes[0].legend(markerscale=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)

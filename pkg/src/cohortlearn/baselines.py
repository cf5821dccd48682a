"""Representation-enhancement baselines.

Each baseline transforms a matrix of per-sample initial representations:
KNN replaces every row by the mean of itself and its K nearest rows; K-Means
groups rows with Lloyd's algorithm and averages each row with K uniformly
drawn same-cluster members; GRASP-lite clusters rows, runs the inter-cohort
graph convolution over cluster centroids, and adds each row's cluster output
back (no intra-cohort branch); demographic cohorts group patients by gender
and/or decade age bins and reuse the intra+inter machinery on those fixed
groups with equal branch weights.

Lloyd's algorithm is hand-rolled (not sklearn) because the deterministic
tie-break and empty-cluster reseeding rules here are part of the contract:
assignment ties go to the lowest centroid index and an emptied centroid is
reseeded from the sample farthest from its own centroid.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .cohort_model import (
    GraphConvolution,
    build_inter_graph,
    build_intra_selection,
    cohort_centroids,
    normalized_adjacency,
)
from .data import Dataset
from .errors import ValidationError
from .rng import stream
from .validation import check_finite_array, check_matrix

_CHUNK = 256


@dataclass
class BaselineConfig:
    method: str
    K: int = 10
    n_clusters: int = 8
    age_bin_width: int = 10

    def __post_init__(self):
        known = ("knn", "kmeans", "grasp_lite", "mc_gender", "mc_age", "mc_gender_age")
        if self.method not in known:
            raise ValidationError(f"unknown baseline method {self.method!r}")
        if self.K < 0:
            raise ValidationError(f"K must be >= 0, got {self.K}")
        if self.n_clusters < 1:
            raise ValidationError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.age_bin_width < 1:
            raise ValidationError(f"age_bin_width must be >= 1, got {self.age_bin_width}")


def knn_neighbor_lists(matrix: np.ndarray, K: int) -> np.ndarray:
    """Indices of each row's K nearest other rows (Euclidean; ties by index)."""
    X = check_matrix(np.asarray(matrix, dtype=np.float64), "matrix")
    n = X.shape[0]
    if not 0 < K < n:
        raise ValidationError(f"K must satisfy 0 < K < {n}, got {K}")
    sq = np.sum(X * X, axis=1)
    out = np.empty((n, K), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        block = sq[start:stop, None] + sq[None, :] - 2.0 * (X[start:stop] @ X.T)
        for row in range(start, stop):
            block[row - start, row] = np.inf
        order = np.argsort(block, axis=1, kind="stable")
        out[start:stop] = order[:, :K]
    return out


def knn_enhance(matrix: np.ndarray, K: int) -> np.ndarray:
    """Replace each row by the mean of itself and its K nearest rows."""
    X = np.asarray(matrix, dtype=np.float64)
    neighbors = knn_neighbor_lists(X, K)
    return (X + X[neighbors].sum(axis=1)) / (K + 1)


def lloyd_kmeans(matrix: np.ndarray, n_clusters: int, seed: int = 0,
                 max_iter: int = 100, tol: float = 1e-6):
    """Plain Lloyd iterations from a seeded uniform draw of distinct rows.

    Returns (labels, centroids). Assignment ties pick the lowest centroid
    index; a cluster left empty is reseeded from the sample farthest from its
    own centroid.
    """
    X = check_matrix(np.asarray(matrix, dtype=np.float64), "matrix")
    n = X.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValidationError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    rng = stream(seed, "kmeans-init")
    centroids = X[rng.choice(n, size=n_clusters, replace=False)].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        sq_c = np.sum(centroids * centroids, axis=1)
        dist = sq_c[None, :] - 2.0 * (X @ centroids.T)  # row offsets don't affect argmin
        labels = np.argmin(dist, axis=1)
        # Reseed any emptied cluster from the sample farthest from its centroid.
        for c in range(n_clusters):
            if not np.any(labels == c):
                gaps = np.linalg.norm(X - centroids[labels], axis=1)
                far = int(np.argmax(gaps))
                centroids[c] = X[far]
                labels[far] = c
        new_centroids = np.stack([X[labels == c].mean(axis=0) for c in range(n_clusters)])
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    return labels, centroids


def kmeans_neighbor_lists(matrix: np.ndarray, n_clusters: int, K: int, seed: int = 0):
    """Cluster rows, then draw up to K distinct same-cluster members per row.

    Returns (list of per-row index arrays, labels). Rows in singleton clusters
    get empty draws.
    """
    X = np.asarray(matrix, dtype=np.float64)
    labels, _ = lloyd_kmeans(X, n_clusters, seed=seed)
    rng = stream(seed, "kmeans-neighbors")
    members = {c: np.flatnonzero(labels == c) for c in range(n_clusters)}
    draws = []
    for row in range(X.shape[0]):
        pool = members[int(labels[row])]
        pool = pool[pool != row]
        take = min(K, len(pool))
        if take == 0:
            draws.append(np.empty(0, dtype=np.int64))
        else:
            picked = rng.choice(len(pool), size=take, replace=False)
            draws.append(np.sort(pool[picked]))
    return draws, labels


def kmeans_enhance(matrix: np.ndarray, n_clusters: int, K: int, seed: int = 0) -> np.ndarray:
    """Average each row with K seeded uniform draws from its own cluster."""
    X = np.asarray(matrix, dtype=np.float64)
    draws, _ = kmeans_neighbor_lists(X, n_clusters, K, seed=seed)
    out = np.empty_like(X)
    for row, picked in enumerate(draws):
        out[row] = (X[row] + X[picked].sum(axis=0)) / (1 + len(picked))
    return out


def grasp_lite_enhance(matrix: np.ndarray, n_clusters: int, S: int,
                       gcn: GraphConvolution, seed: int = 0) -> np.ndarray:
    """Cluster rows directly, convolve cluster centroids, add each row's
    cluster output back. No similarity pretext, no intra-cohort branch."""
    X = check_matrix(np.asarray(matrix, dtype=np.float64), "matrix")
    labels, _ = lloyd_kmeans(X, n_clusters, seed=seed)
    centroids = cohort_centroids(X, labels, n_clusters)
    graph = build_inter_graph(centroids, S)
    dtype = gcn.w1.dtype
    adj = torch.as_tensor(normalized_adjacency(graph.adjacency()), dtype=dtype)
    with torch.no_grad():
        nodes = gcn(adj, torch.as_tensor(graph.centroids, dtype=dtype)).numpy()
    return X + nodes[labels].astype(np.float64)


def age_bin(age: int, width: int = 10, n_bins: int = 10) -> int:
    """Decade bin over [0, 100); ages at or beyond 100 merge into the last bin."""
    if not 0 <= age <= 120:
        raise ValidationError(f"age must be in [0, 120], got {age}")
    return min(age // width, n_bins - 1)


def demographic_cohorts(dataset: Dataset, mode: str) -> dict:
    """patient_id -> cohort index for gender / age / gender-and-age grouping.

    Indices are contiguous over the non-empty bins, ordered by bin key.
    """
    if mode == "gender":
        keyer = lambda p: (p.gender,)
    elif mode == "age":
        keyer = lambda p: (age_bin(p.age),)
    elif mode == "gender_age":
        keyer = lambda p: (p.gender, age_bin(p.age))
    else:
        raise ValidationError(f"unknown demographic mode {mode!r}")
    keys = {p.patient_id: keyer(p) for p in dataset.patients}
    index_of = {key: k for k, key in enumerate(sorted(set(keys.values())))}
    return {pid: index_of[key] for pid, key in keys.items()}


def medical_cohort_enhance(dataset: Dataset, matrix: np.ndarray, sample_patient,
                           mode: str, K: int, gcn: GraphConvolution) -> np.ndarray:
    """Fixed demographic cohorts + the intra/inter machinery, equal weights.

    `matrix` rows are per-sample representations; `sample_patient` maps each
    row index to its owning patient_id. Intra neighbors are the up-to-K most
    similar positively-aligned (cosine > 0) same-cohort samples; the inter
    branch is the centroid graph convolution over the demographic cohorts
    (complete graph — the cohort count here is tiny).
    Output: row + 0.5 * mean(row, neighbors) + 0.5 * inter(cohort).
    """
    X = check_finite_array(np.asarray(matrix, dtype=np.float64), "matrix")
    patient_cohort = demographic_cohorts(dataset, mode)
    n = X.shape[0]
    sample_ids = [f"s{row:06d}" for row in range(n)]
    cohort_of = {sample_ids[row]: patient_cohort[sample_patient[row]] for row in range(n)}
    features = {sample_ids[row]: X[row] for row in range(n)}
    selection = build_intra_selection(sample_ids, cohort_of, features,
                                      gamma=1e-9, K=K)
    n_cohorts = max(cohort_of.values()) + 1
    labels = np.array([cohort_of[sid] for sid in sample_ids], dtype=np.int64)
    centroids = cohort_centroids(X, labels, n_cohorts)
    graph = build_inter_graph(centroids, n_cohorts - 1)
    dtype = gcn.w1.dtype
    adj = torch.as_tensor(normalized_adjacency(graph.adjacency()), dtype=dtype)
    with torch.no_grad():
        nodes = gcn(adj, torch.as_tensor(graph.centroids, dtype=dtype)).numpy()

    out = np.empty_like(X)
    position = {sid: k for k, sid in enumerate(sample_ids)}
    for row, sid in enumerate(sample_ids):
        picked = [position[nbr] for nbr in selection.neighbors[sid]]
        intra = (X[row] + X[picked].sum(axis=0)) / (1 + len(picked))
        out[row] = X[row] + 0.5 * intra + 0.5 * nodes[labels[row]]
    return out

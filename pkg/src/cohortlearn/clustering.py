"""Bottom-up average-linkage clustering with deterministic tie-breaking.

Hand-rolled rather than delegated to scipy/sklearn because merge ties (exactly
equal cluster distances, e.g. duplicated points) must resolve to the pair with
the lexicographically smallest (min member id, max member id) key — that
tie-break is part of the clustering contract here and is not configurable in
library implementations.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ValidationError


def average_linkage_labels(features, n_clusters: int, ids=None) -> np.ndarray:
    """Cluster rows of `features` to n_clusters by average-linkage Euclidean merging.

    Returns integer labels aligned with rows. Cluster indices are assigned by
    ascending minimum member id. `ids` (strings) drive tie-breaks; defaults to
    zero-padded row positions.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("features contain non-finite values")
    n = X.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValidationError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    if ids is None:
        width = len(str(max(n - 1, 0)))
        ids = [f"{k:0{width}d}" for k in range(n)]
    else:
        ids = [str(x) for x in ids]
        if len(ids) != n:
            raise ValidationError("ids length must match the number of rows")

    if n_clusters == n:
        order = sorted(range(n), key=lambda k: ids[k])
        labels = np.empty(n, dtype=np.int64)
        for rank, row in enumerate(order):
            labels[row] = rank
        return labels

    diff = X[:, None, :] - X[None, :, :] if n * n * X.shape[1] <= 2_000_000 else None
    if diff is not None:
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        sq = np.sum(X * X, axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
        np.maximum(dist, 0.0, out=dist)
        np.sqrt(dist, out=dist)
    np.fill_diagonal(dist, np.inf)

    active = np.ones(n, dtype=bool)
    sizes = np.ones(n, dtype=np.int64)
    reps = list(ids)  # min member id per cluster
    members = [[k] for k in range(n)]

    # cached per-row nearest distance/arg; args only drive cache invalidation
    row_min = dist.min(axis=1)
    row_arg = dist.argmin(axis=1)

    for _ in range(n - n_clusters):
        act = np.flatnonzero(active)
        mins = row_min[act]
        best = mins.min()
        # all tied pairs at the global minimum; pick the smallest rep key
        best_pair = None
        best_key = None
        for i in act[mins == best]:
            for j in np.flatnonzero(active & (dist[i] == best)):
                if i == j:
                    continue
                key = (min(reps[i], reps[j]), max(reps[i], reps[j]))
                if best_key is None or key < best_key:
                    best_key = key
                    best_pair = (int(i), int(j))
        i, j = best_pair

        # Lance-Williams average-linkage update of cluster i := i ∪ j
        ni, nj = sizes[i], sizes[j]
        merged_row = (ni * dist[i] + nj * dist[j]) / (ni + nj)
        active[j] = False
        dist[i, :] = merged_row
        dist[:, i] = merged_row
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        sizes[i] = ni + nj
        reps[i] = min(reps[i], reps[j])
        members[i].extend(members[j])

        act = np.flatnonzero(active)
        others = act[act != i]
        if len(others) == 0:
            row_min[i] = np.inf
            row_arg[i] = i
            continue
        row_min[i] = dist[i, others].min()
        row_arg[i] = others[dist[i, others].argmin()]

        newd = dist[others, i]
        improved = newd <= row_min[others]
        hit = others[improved]
        row_min[hit] = newd[improved]
        row_arg[hit] = i
        rest = others[~improved]
        stale = rest[(row_arg[rest] == i) | (row_arg[rest] == j)]
        for k in stale:
            peers = act[act != k]
            row_min[k] = dist[k, peers].min()
            row_arg[k] = peers[dist[k, peers].argmin()]

    clusters = sorted(
        (reps[k], members[k]) for k in np.flatnonzero(active)
    )
    labels = np.empty(n, dtype=np.int64)
    for label, (_, rows) in enumerate(clusters):
        for row in rows:
            labels[row] = label
    return labels


class AgglomerativeCohorts(BaseEstimator):
    """Estimator wrapper: fit_predict assigns average-linkage cluster labels."""

    def __init__(self, n_clusters: int = 2):
        self.n_clusters = n_clusters

    def fit(self, X, y=None, ids=None):
        self.labels_ = average_linkage_labels(X, self.n_clusters, ids=ids)
        return self

    def fit_predict(self, X, y=None, ids=None) -> np.ndarray:
        return self.fit(X, ids=ids).labels_

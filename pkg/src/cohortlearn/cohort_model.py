"""Cohort-based representation enhancement.

Given per-sample initial representations and a cohort assignment, three
signals are combined: an intra-cohort branch (mean over the sample and its
greedily selected high-similarity cohort members), an inter-cohort branch
(two-layer graph convolution over the cohort-centroid nearest-neighbor
graph, read off at the sample's cohort node), and a learned two-way softmax
attention that weights the two branches on top of the initial representation:

    R_final = R_ini + att_intra * R_intra + att_inter * R_inter

Branch activity masks make the attention exact at the edges: a sample with an
inactive branch gets attention exactly 0 there (and exactly 1 on a lone active
branch), so disabling both branches reproduces the initial representation
bit-for-bit. The unmasked two-way softmax remains available through `fuse`.
"""

import csv
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .validation import check_finite_array


def _cosine_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-normalized copy; zero rows stay zero (cosine 0 against anything)."""
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return matrix / safe


@dataclass(frozen=True)
class IntraCohortSelection:
    """Per-sample selected neighbor ids (descending similarity), with the
    threshold and capacity that produced them."""

    gamma: float
    capacity: int
    neighbors: dict  # sample_id -> tuple of sample ids


def select_neighbors(sample_id, cohort_members, features, gamma: float, K: int):
    """Greedy neighbor pick: repeatedly add the most similar remaining cohort
    member while cosine similarity exceeds gamma and fewer than K are chosen.

    Similarity ties break by ascending sample id. `features` maps sample id to
    the similarity feature vector (the owning patient's pretext feature).
    Returns the selected ids as a tuple in descending-similarity order.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValidationError(f"gamma must be in (0, 1], got {gamma}")
    if K < 0:
        raise ValidationError(f"K must be >= 0, got {K}")
    if sample_id not in set(cohort_members):
        raise ValidationError(f"sample {sample_id!r} is not in the cohort")
    if K == 0:
        return ()
    anchor = np.asarray(features[sample_id], dtype=np.float64)
    candidates = sorted(m for m in cohort_members if m != sample_id)
    if not candidates:
        return ()
    matrix = np.stack([np.asarray(features[m], dtype=np.float64) for m in candidates])
    normed = _cosine_rows(matrix)
    anchor_norm = np.linalg.norm(anchor)
    anchor_unit = anchor / anchor_norm if anchor_norm > 0.0 else anchor
    # Clamp to the mathematical range: rounding on identical vectors can land
    # a hair above 1, which must not slip past a threshold of exactly 1.
    sims = np.clip(normed @ anchor_unit, -1.0, 1.0)
    order = np.argsort(-sims, kind="stable")
    chosen = []
    for j in order:
        if len(chosen) >= K:
            break
        if sims[j] <= gamma:
            break
        chosen.append(candidates[int(j)])
    return tuple(chosen)


def build_intra_selection(sample_ids, cohort_of, features, gamma: float,
                          K: int) -> IntraCohortSelection:
    """Vectorized select_neighbors over every sample, one cohort at a time."""
    if not 0.0 < gamma <= 1.0:
        raise ValidationError(f"gamma must be in (0, 1], got {gamma}")
    if K < 0:
        raise ValidationError(f"K must be >= 0, got {K}")
    ordered = sorted(sample_ids)
    by_cohort = {}
    for sid in ordered:
        by_cohort.setdefault(cohort_of[sid], []).append(sid)
    neighbors = {}
    for members in by_cohort.values():
        matrix = np.stack([np.asarray(features[m], dtype=np.float64) for m in members])
        normed = _cosine_rows(matrix)
        cos = np.clip(normed @ normed.T, -1.0, 1.0)
        for row, sid in enumerate(members):
            if K == 0 or len(members) == 1:
                neighbors[sid] = ()
                continue
            sims = cos[row]
            order = np.argsort(-sims, kind="stable")
            chosen = []
            for j in order:
                if int(j) == row:
                    continue
                if len(chosen) >= K or sims[j] <= gamma:
                    break
                chosen.append(members[int(j)])
            neighbors[sid] = tuple(chosen)
    return IntraCohortSelection(gamma=gamma, capacity=K, neighbors=neighbors)


def intra_aggregate(anchor, neighbor_vectors):
    """Mean of the anchor and its neighbors (anchor always participates, so an
    empty neighbor list returns the anchor unchanged)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.ndim != 1:
        raise ValidationError(f"anchor must be a vector, got shape {anchor.shape}")
    stack = [anchor]
    for vec in neighbor_vectors:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != anchor.shape:
            raise ValidationError(
                f"neighbor shape {vec.shape} does not match anchor {anchor.shape}"
            )
        stack.append(vec)
    return np.mean(stack, axis=0)


@dataclass
class InterCohortGraph:
    """Cohort centroids plus the symmetrized S-nearest-centroid edge set."""

    centroids: np.ndarray  # [n_cohorts, d]
    edges: tuple           # sorted (i, j) pairs with i < j
    degree: int            # S

    @property
    def n_cohorts(self) -> int:
        return self.centroids.shape[0]

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_cohorts, self.n_cohorts), dtype=np.float64)
        for i, j in self.edges:
            adj[i, j] = 1.0
            adj[j, i] = 1.0
        return adj


def build_inter_graph(centroids, S: int) -> InterCohortGraph:
    """Directed S-nearest-centroid edges (Euclidean, ascending-index ties),
    symmetrized to an undirected graph."""
    centroids = check_finite_array(np.asarray(centroids, dtype=np.float64), "centroids")
    if centroids.ndim != 2:
        raise ValidationError(f"centroids must be 2-D, got shape {centroids.shape}")
    n = centroids.shape[0]
    if not 0 <= S < n:
        raise ValidationError(f"S must satisfy 0 <= S < n_cohorts={n}, got {S}")
    edges = set()
    if S > 0:
        diff = centroids[:, None, :] - centroids[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(dist, np.inf)
        for i in range(n):
            order = np.argsort(dist[i], kind="stable")[:S]
            for j in order:
                a, b = (i, int(j)) if i < j else (int(j), i)
                edges.add((a, b))
    return InterCohortGraph(centroids=centroids, edges=tuple(sorted(edges)), degree=S)


def cohort_centroids(r_ini: np.ndarray, cohort_index: np.ndarray, n_cohorts: int) -> np.ndarray:
    """Mean initial representation of each cohort's member samples."""
    r_ini = np.asarray(r_ini, dtype=np.float64)
    out = np.zeros((n_cohorts, r_ini.shape[1]), dtype=np.float64)
    counts = np.zeros(n_cohorts, dtype=np.int64)
    np.add.at(out, cohort_index, r_ini)
    np.add.at(counts, cohort_index, 1)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValidationError(f"cohort {empty} has no member samples")
    return out / counts[:, None]


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {adj.shape}")
    with_loops = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(with_loops.sum(axis=1))
    return with_loops * inv_sqrt[:, None] * inv_sqrt[None, :]


class GraphConvolution(nn.Module):
    """Two-layer graph convolution without biases: A'·ReLU(A'·X·W1)·W2."""

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.w1 = nn.Parameter(torch.zeros(d, d, dtype=dtype))
        self.w2 = nn.Parameter(torch.zeros(d, d, dtype=dtype))

    def forward(self, adj_norm: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hidden = torch.relu(adj_norm @ x @ self.w1)
        return adj_norm @ hidden @ self.w2


def gcn_forward(gcn: GraphConvolution, graph: InterCohortGraph) -> np.ndarray:
    """Numpy convenience wrapper: per-cohort inter representations."""
    adj_norm = torch.as_tensor(normalized_adjacency(graph.adjacency()),
                               dtype=gcn.w1.dtype)
    x = torch.as_tensor(graph.centroids, dtype=gcn.w1.dtype)
    with torch.no_grad():
        out = gcn(adj_norm, x)
    return out.numpy()


class FusionAttention(nn.Module):
    """Two scoring heads (one per branch) sharing a softmax.

    Scores come from separate 2d -> d -> tanh -> 1 heads over the initial
    representation concatenated with the branch representation. Activity masks
    remove a branch exactly: its attention is 0, and a lone active branch gets
    attention exactly 1.
    """

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.intra_score = nn.Sequential(
            nn.Linear(2 * d, d, dtype=dtype), nn.Tanh(), nn.Linear(d, 1, dtype=dtype)
        )
        self.inter_score = nn.Sequential(
            nn.Linear(2 * d, d, dtype=dtype), nn.Tanh(), nn.Linear(d, 1, dtype=dtype)
        )

    def forward(self, r_ini, r_intra, r_inter, intra_active=None, inter_active=None):
        score_a = self.intra_score(torch.cat([r_ini, r_intra], dim=-1)).squeeze(-1)
        score_b = self.inter_score(torch.cat([r_ini, r_inter], dim=-1)).squeeze(-1)
        scores = torch.stack([score_a, score_b], dim=-1)
        if intra_active is None:
            intra_active = torch.ones_like(score_a)
        if inter_active is None:
            inter_active = torch.ones_like(score_b)
        mask = torch.stack([intra_active, inter_active], dim=-1).to(scores.dtype)
        masked = scores.masked_fill(mask == 0, float("-inf"))
        peak = masked.max(dim=-1, keepdim=True).values
        peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
        exps = torch.exp(masked - peak)
        denom = exps.sum(dim=-1, keepdim=True)
        denom = denom.clamp_min(torch.finfo(scores.dtype).tiny)
        return exps / denom


@dataclass
class RepresentationBundle:
    r_ini: np.ndarray
    r_intra: np.ndarray
    r_inter: np.ndarray
    r_final: np.ndarray
    att_intra: float
    att_inter: float


def fuse(r_ini, r_intra, r_inter, fusion: FusionAttention) -> RepresentationBundle:
    """Unmasked two-way attention combine of one sample's three signals."""
    dtype = next(fusion.parameters()).dtype
    vectors = []
    for name, vec in (("r_ini", r_ini), ("r_intra", r_intra), ("r_inter", r_inter)):
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"{name} must be a vector, got shape {arr.shape}")
        vectors.append(arr)
    if len({v.shape for v in vectors}) != 1:
        raise ValidationError("r_ini, r_intra, r_inter must share one dimension")
    tensors = [torch.as_tensor(v, dtype=dtype).unsqueeze(0) for v in vectors]
    with torch.no_grad():
        att = fusion(*tensors)[0]
        final = tensors[0][0] + att[0] * tensors[1][0] + att[1] * tensors[2][0]
    return RepresentationBundle(
        r_ini=vectors[0], r_intra=vectors[1], r_inter=vectors[2],
        r_final=final.numpy().astype(np.float64),
        att_intra=float(att[0]), att_inter=float(att[1]),
    )


def total_loss(predictions: torch.Tensor, labels: torch.Tensor, pre_loss,
               lambda_pre: float = 0.1) -> torch.Tensor:
    """Joint objective: downstream BCE over probabilities + lambda * pretext loss."""
    if not torch.isfinite(predictions).all():
        raise ValidationError("predictions are not finite")
    if float(predictions.min()) <= 0.0 or float(predictions.max()) >= 1.0:
        raise ValidationError("predictions must lie strictly inside (0, 1)")
    bce = nn.functional.binary_cross_entropy(predictions, labels.to(predictions.dtype))
    return bce + lambda_pre * pre_loss


def total_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, pre_loss,
                           lambda_pre: float = 0.1) -> torch.Tensor:
    """Same objective computed from logits (numerically safe for training)."""
    bce = nn.functional.binary_cross_entropy_with_logits(
        logits, labels.to(logits.dtype)
    )
    return bce + lambda_pre * pre_loss


@dataclass
class EnhancementStructures:
    """Per-epoch discrete context for the enhancement head.

    Built once per epoch from a representation snapshot: neighbor gather
    indices (self first, self-padded) with a participation mask, per-sample
    cohort indices, the normalized centroid-graph adjacency, the detached
    centroid snapshot, and per-sample branch-activity masks.
    """

    sample_ids: tuple
    cohort_of: torch.Tensor       # [n] long
    neighbor_index: torch.Tensor  # [n, width] long
    neighbor_mask: torch.Tensor   # [n, width]
    adjacency_norm: torch.Tensor  # [C, C]
    centroids: torch.Tensor       # [C, d], detached snapshot
    intra_active: torch.Tensor    # [n]
    inter_active: torch.Tensor    # [n]


def build_structures(sample_ids, cohort_of, selection: IntraCohortSelection,
                     graph: InterCohortGraph, use_intra: bool, use_inter: bool,
                     dtype=torch.float32) -> EnhancementStructures:
    ordered = tuple(sorted(sample_ids))
    position = {sid: k for k, sid in enumerate(ordered)}
    n = len(ordered)
    width = 1 + max((len(selection.neighbors.get(sid, ())) for sid in ordered), default=0)
    index = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.float64)
    intra_active = np.zeros(n, dtype=np.float64)
    cohort_idx = np.zeros(n, dtype=np.int64)
    for k, sid in enumerate(ordered):
        cohort_idx[k] = cohort_of[sid]
        index[k, :] = k
        mask[k, 0] = 1.0
        chosen = selection.neighbors.get(sid, ())
        for slot, nbr in enumerate(chosen, start=1):
            index[k, slot] = position[nbr]
            mask[k, slot] = 1.0
        if use_intra and chosen:
            intra_active[k] = 1.0
    inter_active = np.full(n, 1.0 if use_inter else 0.0)
    return EnhancementStructures(
        sample_ids=ordered,
        cohort_of=torch.as_tensor(cohort_idx),
        neighbor_index=torch.as_tensor(index),
        neighbor_mask=torch.as_tensor(mask, dtype=dtype),
        adjacency_norm=torch.as_tensor(
            normalized_adjacency(graph.adjacency()), dtype=dtype
        ),
        centroids=torch.as_tensor(graph.centroids, dtype=dtype),
        intra_active=torch.as_tensor(intra_active, dtype=dtype),
        inter_active=torch.as_tensor(inter_active, dtype=dtype),
    )


class CohortHead(nn.Module):
    """Batched enhancement head: intra mean, centroid GCN, masked fusion,
    readmission classifier. Consumes live initial representations plus the
    epoch's EnhancementStructures."""

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.gcn = GraphConvolution(d, dtype=dtype)
        self.fusion = FusionAttention(d, dtype=dtype)
        self.classifier = nn.Linear(d, 1, dtype=dtype)

    def forward(self, r_ini: torch.Tensor, structures: EnhancementStructures):
        gathered = r_ini[structures.neighbor_index]
        mask = structures.neighbor_mask.unsqueeze(-1)
        counts = structures.neighbor_mask.sum(dim=1, keepdim=True)
        r_intra = (gathered * mask).sum(dim=1) / counts
        inter_nodes = self.gcn(structures.adjacency_norm, structures.centroids)
        r_inter = inter_nodes[structures.cohort_of]
        att = self.fusion(r_ini, r_intra, r_inter,
                          structures.intra_active, structures.inter_active)
        r_final = r_ini + att[:, :1] * r_intra + att[:, 1:] * r_inter
        logits = self.classifier(r_final).squeeze(-1)
        return {
            "logits": logits,
            "attention": att,
            "r_intra": r_intra,
            "r_inter": r_inter,
            "r_final": r_final,
        }


def save_inter_edges(graph: InterCohortGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cohort_i", "cohort_j"])
        for i, j in graph.edges:
            writer.writerow([i, j])

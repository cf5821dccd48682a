"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way — explicit loops, exhaustive
enumeration, float64 throughout — so agreement with the package code means
something. None of these functions import from cohortlearn.
"""

import numpy as np
import torch


# ---------------------------------------------------------------------------
# Precision-recall curve, O(n^2)
# ---------------------------------------------------------------------------

def pr_auc_bruteforce(scores, labels):
    """Step-wise interpolated area under the PR curve.

    Sweep distinct score thresholds in descending order (ties grouped); at
    each threshold predict positive for score >= threshold and accumulate
    precision * recall-increment. Rescans the full sample list per threshold.
    """
    scores = [float(s) for s in scores]
    labels = [int(y) for y in labels]
    n_pos = sum(labels)
    if n_pos == 0:
        raise ValueError("no positive labels")
    area = 0.0
    prev_recall = 0.0
    for threshold in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= threshold and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= threshold and y == 0)
        precision = tp / (tp + fp)
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def thresholded_counts(scores, labels, threshold=0.5):
    """(accuracy, precision, recall, f1) at a fixed threshold, by raw counting."""
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        predicted = 1 if float(s) >= threshold else 0
        if predicted == 1 and y == 1:
            tp += 1
        elif predicted == 1 and y == 0:
            fp += 1
        elif predicted == 0 and y == 0:
            tn += 1
        else:
            fn += 1
    n = tp + fp + tn + fn
    accuracy = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


# ---------------------------------------------------------------------------
# Neighbor selection / graphs
# ---------------------------------------------------------------------------

def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def greedy_neighbors(anchor_id, members, features, gamma, K):
    """Greedy same-cohort neighbor pick: most similar first while cosine > gamma
    and fewer than K chosen; ties broken by ascending sample id."""
    chosen = []
    remaining = [m for m in members if m != anchor_id]
    while len(chosen) < K and remaining:
        best = None
        best_sim = None
        for candidate in sorted(remaining):
            sim = cosine(features[anchor_id], features[candidate])
            if best_sim is None or sim > best_sim:
                best, best_sim = candidate, sim
        if best_sim <= gamma:
            break
        chosen.append(best)
        remaining.remove(best)
    return tuple(chosen)


def snn_edges(centroids, S):
    """Undirected edge set from directed S-nearest-neighbor (Euclidean) links.

    Per node, candidates sort by (distance, index); the first S become directed
    edges, then the union is symmetrized into sorted (i, j) pairs with i < j.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    edges = set()
    for i in range(n):
        ranked = sorted(
            (float(np.linalg.norm(centroids[i] - centroids[j])), j)
            for j in range(n) if j != i
        )
        for _, j in ranked[:S]:
            edges.add((min(i, j), max(i, j)))
    return tuple(sorted(edges))


def knn_mean_rows(matrix, K):
    """Each row replaced by the mean of itself and its K nearest (Euclidean) rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    out = np.zeros_like(matrix)
    for i in range(n):
        ranked = sorted(
            (float(np.linalg.norm(matrix[i] - matrix[j])), j)
            for j in range(n) if j != i
        )
        group = [i] + [j for _, j in ranked[:K]]
        out[i] = matrix[sorted(group)].mean(axis=0)
    return out


def jaccard_sets(set_a, set_b):
    union = set_a | set_b
    if not union:
        raise ValueError("both sets empty")
    return len(set_a & set_b) / len(union)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def autograd_gradients(loss_fn, module):
    """Backward-pass gradients of loss_fn() per named parameter of module."""
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    out = {}
    for name, param in module.named_parameters():
        if param.grad is None:
            out[name] = np.zeros(tuple(param.shape), dtype=np.float64)
        else:
            out[name] = param.grad.detach().double().numpy().copy()
    return out


def fd_gradients(loss_fn, module, eps=1e-4):
    """Central finite-difference gradients of loss_fn() per named parameter.

    Parameters are perturbed in place one scalar at a time; loss_fn must
    recompute the loss from the module's current parameter values.
    """
    out = {}
    for name, param in module.named_parameters():
        flat = param.detach().reshape(-1)
        grad = np.zeros(flat.numel(), dtype=np.float64)
        for k in range(flat.numel()):
            base = flat[k].item()
            with torch.no_grad():
                flat[k] = base + eps
            up = float(loss_fn().detach())
            with torch.no_grad():
                flat[k] = base - eps
            down = float(loss_fn().detach())
            with torch.no_grad():
                flat[k] = base
            grad[k] = (up - down) / (2.0 * eps)
        out[name] = grad.reshape(tuple(param.shape))
    return out


def max_rel_grad_err(loss_fn, module, eps=1e-4):
    """Worst per-tensor relative error between autograd and central differences."""
    analytic = autograd_gradients(loss_fn, module)
    numeric = fd_gradients(loss_fn, module, eps=eps)
    worst = 0.0
    for name in analytic:
        a = analytic[name].ravel()
        b = numeric[name].ravel()
        scale = max(np.linalg.norm(a), np.linalg.norm(b))
        if scale < 1e-10:
            continue
        worst = max(worst, float(np.linalg.norm(a - b) / scale))
    return worst


# ---------------------------------------------------------------------------
# Recurrences
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_states(inputs, w_ih, w_hh, b_ih, b_hh):
    """Hand-rolled single-layer GRU over a [T, d_in] sequence.

    Weight layout matches the standard stacked convention: rows [0:d) reset,
    [d:2d) update, [2d:3d) candidate; the candidate's hidden contribution is
    gated before the hidden-side bias addition's nonlinearity, i.e.
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
    Returns the [T, d] state sequence.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    d = w_hh.shape[1]
    wr_i, wz_i, wn_i = w_ih[:d], w_ih[d:2 * d], w_ih[2 * d:]
    wr_h, wz_h, wn_h = w_hh[:d], w_hh[d:2 * d], w_hh[2 * d:]
    br_i, bz_i, bn_i = b_ih[:d], b_ih[d:2 * d], b_ih[2 * d:]
    br_h, bz_h, bn_h = b_hh[:d], b_hh[d:2 * d], b_hh[2 * d:]
    h = np.zeros(d, dtype=np.float64)
    states = []
    for x in inputs:
        r = sigmoid(wr_i @ x + br_i + wr_h @ h + br_h)
        z = sigmoid(wz_i @ x + bz_i + wz_h @ h + bz_h)
        n = np.tanh(wn_i @ x + bn_i + r * (wn_h @ h + bn_h))
        h = (1.0 - z) * n + z * h
        states.append(h.copy())
    return np.asarray(states)


def reverse_attention_encode(visit_features, gru_params, w_score, b_score):
    """Reference for the reverse-time attention patient encoding.

    Runs the GRU over the visit features in reverse chronological order,
    scores each state affinely, softmaxes, and mixes the *reversed* features
    by those weights. Returns (patient_vector, attention in chronological
    order)."""
    feats = np.asarray(visit_features, dtype=np.float64)
    rev = feats[::-1]
    states = gru_states(rev, *gru_params)
    scores = states @ np.asarray(w_score, dtype=np.float64).reshape(-1) + float(b_score)
    scores = scores - scores.max()
    weights = np.exp(scores)
    weights = weights / weights.sum()
    patient = (weights[:, None] * rev).sum(axis=0)
    return patient, weights[::-1]

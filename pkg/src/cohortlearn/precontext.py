"""Patient-similarity pretext task and cohort construction.

Pipeline: Jaccard similarity over each patient's union-of-visits diagnosis
codes yields pseudo-labels (top-k most similar patients are positives, seeded
uniform draws are negatives). A recurrent encoder consumes visit features in
reverse chronological order; a learned score over the recurrent states gives
softmax attention, and the patient feature is the attention-weighted sum of
the (chronological) visit features. A bilinear classifier over patient-feature
pairs is trained with binary cross-entropy. Cohorts are built by agglomerative
average-linkage clustering of the patient features.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .clustering import average_linkage_labels
from .data import Dataset, Patient
from .errors import ValidationError
from .rng import stream
from .validation import check_positive_int


def jaccard_similarity(patient_a: Patient, patient_b: Patient) -> float:
    """Jaccard index of the two patients' union-over-visits diagnosis code sets."""
    set_a = patient_a.diagnosis_union()
    set_b = patient_b.diagnosis_union()
    if not set_a:
        raise ValidationError(f"patient {patient_a.patient_id!r} has no diagnosis codes")
    if not set_b:
        raise ValidationError(f"patient {patient_b.patient_id!r} has no diagnosis codes")
    inter = len(set_a & set_b)
    union = len(set_a | set_b)
    return inter / union


def jaccard_matrix(dataset: Dataset) -> np.ndarray:
    """All-pairs Jaccard over patients, rows/cols in dataset patient order.

    Uses binary membership matrices so the n_patients² pair count stays cheap:
    intersections come from one matrix product, unions from set sizes.
    """
    code_ids = sorted({cid for p in dataset.patients for cid in p.diagnosis_union()})
    index = {cid: k for k, cid in enumerate(code_ids)}
    n = len(dataset.patients)
    member = np.zeros((n, len(code_ids)), dtype=np.float64)
    for row, patient in enumerate(dataset.patients):
        union = patient.diagnosis_union()
        if not union:
            raise ValidationError(f"patient {patient.patient_id!r} has no diagnosis codes")
        for cid in union:
            member[row, index[cid]] = 1.0
    inter = member @ member.T
    sizes = member.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class SimilarityLabelSet:
    """Pseudo-labeled patient pairs: (anchor_id, other_id, label)."""

    pairs: tuple
    pos_k: int
    neg_k: int


def build_similarity_labels(dataset: Dataset, pos_k: int = 5, neg_k: int = 5,
                            seed: int = 0) -> SimilarityLabelSet:
    """Per anchor: top-pos_k patients by Jaccard (ties by ascending patient_id)
    labeled 1, plus neg_k uniform draws from the remainder labeled 0."""
    check_positive_int(pos_k, "pos_k")
    check_positive_int(neg_k, "neg_k")
    n = len(dataset.patients)
    if n < pos_k + neg_k + 1:
        raise ValidationError(
            f"need at least {pos_k + neg_k + 1} patients for pos_k={pos_k}, "
            f"neg_k={neg_k}; got {n}"
        )
    # Work in ascending-patient-id order so index order realizes the tie-break.
    order = sorted(range(n), key=lambda k: dataset.patients[k].patient_id)
    ids = [dataset.patients[k].patient_id for k in order]
    sims = jaccard_matrix(dataset)[np.ix_(order, order)]
    rng = stream(seed, "similarity-negatives")

    pairs = []
    for a in range(n):
        row = sims[a].copy()
        row[a] = -np.inf
        ranked = np.lexsort((np.arange(n), -row))
        positives = ranked[:pos_k]
        pos_set = set(int(x) for x in positives)
        remainder = np.array([k for k in range(n) if k != a and k not in pos_set])
        negatives = rng.choice(len(remainder), size=neg_k, replace=False)
        for b in positives:
            pairs.append((ids[a], ids[int(b)], 1))
        for b in negatives:
            pairs.append((ids[a], ids[int(remainder[int(b)])], 0))
    return SimilarityLabelSet(pairs=tuple(pairs), pos_k=pos_k, neg_k=neg_k)


class PatientEncoder(nn.Module):
    """Reverse-time recurrent attention over visit features.

    The recurrent unit runs over the visit features in reverse chronological
    order; each state is scored by an affine map, scores are softmaxed, and the
    patient feature is the weighted sum of the visit features. Attention is
    reported in chronological order.
    """

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.d = d
        self.gru = nn.GRU(d, d, batch_first=True)
        self.score = nn.Linear(d, 1)
        self.to(dtype)

    def forward(self, padded: torch.Tensor, lengths: torch.Tensor):
        """padded: [B, T, d] chronological visit features (zero past length).

        Returns (patient features [B, d], attention [B, T] chronological with
        zeros past each row's length).
        """
        if padded.ndim != 3:
            raise ValidationError(f"padded must be [B, T, d], got shape {tuple(padded.shape)}")
        bsz, tmax, _ = padded.shape
        if int(lengths.min()) < 1:
            raise ValidationError("every patient needs at least one visit")
        positions = torch.arange(tmax, device=padded.device)
        # Per-row reversal of the first `length` positions (involution).
        rev_index = (lengths.unsqueeze(1) - 1 - positions.unsqueeze(0)).clamp(min=0)
        reversed_feats = torch.gather(
            padded, 1, rev_index.unsqueeze(-1).expand(bsz, tmax, padded.shape[-1])
        )
        states, _ = self.gru(reversed_feats)
        scores = self.score(states).squeeze(-1)
        valid = positions.unsqueeze(0) < lengths.unsqueeze(1)
        scores = scores.masked_fill(~valid, float("-inf"))
        att_rev = torch.softmax(scores, dim=1)
        features = torch.einsum("bt,btd->bd", att_rev, reversed_feats)
        att_chron = torch.gather(att_rev, 1, rev_index) * valid.to(att_rev.dtype)
        return features, att_chron


def encode_patient(visit_features, encoder: PatientEncoder):
    """Encode one patient's chronological visit features; returns (F_p, attention)."""
    if isinstance(visit_features, torch.Tensor):
        feats = visit_features
    else:
        feats = torch.as_tensor(np.asarray(visit_features))
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValidationError("visit_features must be a non-empty [n_visits, d] array")
    feats = feats.to(next(encoder.parameters()).dtype)
    length = torch.tensor([feats.shape[0]])
    patient_feature, attention = encoder(feats.unsqueeze(0), length)
    return patient_feature[0], attention[0]


class BilinearSimilarity(nn.Module):
    """sigmoid(F_i · W · F_j + b) pairwise scorer; forward returns the logit."""

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(0.1 * torch.eye(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros((), dtype=dtype))

    def forward(self, feats_i: torch.Tensor, feats_j: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bi,ij,bj->b", feats_i, self.weight, feats_j) + self.bias


def precontext_loss(similarity: BilinearSimilarity, feature_lookup,
                    label_set: SimilarityLabelSet, pairs=None) -> torch.Tensor:
    """Mean binary cross-entropy of the bilinear scorer over labeled pairs.

    feature_lookup maps patient_id -> feature tensor (grad-carrying). `pairs`
    restricts the loss to a subset (a minibatch); defaults to all pairs.
    """
    chosen = label_set.pairs if pairs is None else pairs
    if not chosen:
        raise ValidationError("no pairs to score")
    feats_i = torch.stack([feature_lookup[a] for a, _, _ in chosen])
    feats_j = torch.stack([feature_lookup[b] for _, b, _ in chosen])
    labels = torch.tensor([float(y) for _, _, y in chosen], dtype=feats_i.dtype)
    logits = similarity(feats_i, feats_j)
    if not torch.isfinite(logits).all():
        raise ValidationError("similarity logits are not finite")
    return nn.functional.binary_cross_entropy_with_logits(logits, labels)


@dataclass
class PatientFeatureTable:
    """Per-patient features plus the visit features they were pooled from."""

    dim: int
    features: dict = field(default_factory=dict)        # patient_id -> [d]
    visit_features: dict = field(default_factory=dict)  # patient_id -> [n_visits, d]

    def matrix(self, patient_ids) -> np.ndarray:
        rows = []
        for pid in patient_ids:
            if pid not in self.features:
                raise ValidationError(f"patient {pid!r} missing from feature table")
            rows.append(np.asarray(self.features[pid], dtype=np.float64))
        return np.stack(rows)


@dataclass
class CohortAssignment:
    n_cohorts: int
    assignment: dict  # patient_id -> cohort index
    members: dict = field(init=False)

    def __post_init__(self):
        self.members = {}
        for pid, idx in self.assignment.items():
            if not 0 <= idx < self.n_cohorts:
                raise ValidationError(
                    f"cohort index {idx} for {pid!r} outside [0, {self.n_cohorts})"
                )
            self.members.setdefault(idx, []).append(pid)
        for idx in range(self.n_cohorts):
            if not self.members.get(idx):
                raise ValidationError(f"cohort {idx} is empty")
        for pids in self.members.values():
            pids.sort()


def cluster_patients(table: PatientFeatureTable, n_cohorts: int) -> CohortAssignment:
    """Agglomerative average-linkage (Euclidean) cohorts from patient features."""
    patient_ids = sorted(table.features)
    n = len(patient_ids)
    if not 2 <= n_cohorts <= n:
        raise ValidationError(f"n_cohorts must be in [2, {n}], got {n_cohorts}")
    labels = average_linkage_labels(table.matrix(patient_ids), n_cohorts, ids=patient_ids)
    assignment = {pid: int(lab) for pid, lab in zip(patient_ids, labels)}
    return CohortAssignment(n_cohorts=n_cohorts, assignment=assignment)


def save_cohorts(cohorts: CohortAssignment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "cohort_index"])
        for pid in sorted(cohorts.assignment):
            writer.writerow([pid, cohorts.assignment[pid]])


def load_cohorts(path) -> CohortAssignment:
    assignment = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "cohort_index"]:
            raise ValidationError(f"{path}: unexpected header {header}")
        for row in reader:
            if len(row) != 2:
                raise ValidationError(f"{path}: malformed row {row}")
            assignment[row[0]] = int(row[1])
    if not assignment:
        raise ValidationError(f"{path}: no cohort rows")
    return CohortAssignment(n_cohorts=max(assignment.values()) + 1, assignment=assignment)

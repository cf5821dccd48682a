"""Baseline enhancement tests: KNN averaging, seeded k-means grouping,
GRASP-lite centroid convolution, and demographic cohorts."""

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from cohortlearn.baselines import (
    BaselineConfig,
    age_bin,
    demographic_cohorts,
    grasp_lite_enhance,
    kmeans_enhance,
    kmeans_neighbor_lists,
    knn_enhance,
    knn_neighbor_lists,
    lloyd_kmeans,
    medical_cohort_enhance,
)
from cohortlearn.cohort_model import GraphConvolution, normalized_adjacency
from cohortlearn.data import Dataset, MedicalCode, Patient, Visit
from cohortlearn.errors import ValidationError

from oracles import greedy_neighbors, knn_mean_rows


def _identity_gcn(d):
    gcn = GraphConvolution(d, dtype=torch.float64)
    with torch.no_grad():
        gcn.w1.copy_(torch.eye(d, dtype=torch.float64))
        gcn.w2.copy_(torch.eye(d, dtype=torch.float64))
    return gcn


# ---------------------------------------------------------------------------
# KNN


def test_knn_covering_everything_gives_global_mean():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 3))
    out = knn_enhance(X, K=6)
    mean = X.mean(axis=0)
    assert np.allclose(out, np.tile(mean, (7, 1)), atol=1e-12)


def test_knn_identical_rows_fixed_point():
    X = np.tile([2.0, -1.0, 0.5], (6, 1))
    assert np.allclose(knn_enhance(X, K=3), X, atol=1e-12)


def test_knn_small_hand_case():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [10.0, 10.0], [11.0, 10.0]])
    out = knn_enhance(X, K=2)
    assert np.allclose(out, knn_mean_rows(X, 2), atol=1e-12)
    # row 0 averages with rows 1 and 2
    assert np.allclose(out[0], [1.0 / 3.0, 1.0 / 3.0], atol=1e-12)
    # row 3 averages with row 4 and then the nearest of the origin cluster
    assert np.allclose(out[3], (X[3] + X[4] + X[1]) / 3.0, atol=1e-12)


def test_knn_matches_oracle_randomized():
    rng = np.random.default_rng(91)
    for trial in range(60):
        n = int(rng.integers(2, 16))
        d = int(rng.integers(1, 5))
        X = rng.normal(size=(n, d))
        K = int(rng.integers(1, n))
        assert np.allclose(knn_enhance(X, K), knn_mean_rows(X, K), atol=1e-12), trial


def test_knn_permutation_equivariant():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(12, 4))
    perm = rng.permutation(12)
    assert np.allclose(knn_enhance(X, 4)[perm], knn_enhance(X[perm], 4), atol=1e-12)


def test_knn_validation():
    X = np.zeros((4, 2))
    with pytest.raises(ValidationError):
        knn_enhance(X, K=0)
    with pytest.raises(ValidationError):
        knn_enhance(X, K=4)
    with pytest.raises(ValidationError):
        knn_neighbor_lists(np.zeros(4), K=1)


# ---------------------------------------------------------------------------
# k-means


def _blobs(rng, centers, per=10, scale=0.05):
    points, truth = [], []
    for k, center in enumerate(centers):
        points.append(np.asarray(center) + scale * rng.normal(size=(per, len(center))))
        truth.extend([k] * per)
    return np.concatenate(points), np.array(truth)


def test_lloyd_recovers_separated_blobs():
    rng = np.random.default_rng(6)
    X, truth = _blobs(rng, [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    for seed in range(3):
        labels, centroids = lloyd_kmeans(X, 3, seed=seed)
        assert adjusted_rand_score(truth, labels) == 1.0
        assert centroids.shape == (3, 2)


def test_lloyd_single_cluster_is_global_mean():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(9, 3))
    labels, centroids = lloyd_kmeans(X, 1, seed=0)
    assert np.all(labels == 0)
    assert np.allclose(centroids[0], X.mean(axis=0), atol=1e-12)


def test_lloyd_deterministic_per_seed():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(30, 2))
    a_labels, a_cents = lloyd_kmeans(X, 4, seed=5)
    b_labels, b_cents = lloyd_kmeans(X, 4, seed=5)
    assert np.array_equal(a_labels, b_labels)
    assert np.array_equal(a_cents, b_cents)


def test_lloyd_validation():
    X = np.zeros((3, 2))
    with pytest.raises(ValidationError):
        lloyd_kmeans(X, 0)
    with pytest.raises(ValidationError):
        lloyd_kmeans(X, 4)


def test_kmeans_enhance_singleton_cluster_unchanged():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [100.0, 0.0]])
    out = kmeans_enhance(X, n_clusters=2, K=5, seed=0)
    assert np.array_equal(out[2], X[2])
    assert np.allclose(out[0], X[0], atol=1e-12)
    assert np.allclose(out[1], X[1], atol=1e-12)


def test_kmeans_enhance_identical_members_fixed_point():
    X = np.concatenate([np.tile([1.0, 1.0], (8, 1)), np.tile([-5.0, 3.0], (8, 1))])
    out = kmeans_enhance(X, n_clusters=2, K=3, seed=1)
    assert np.allclose(out, X, atol=1e-12)


def test_kmeans_enhance_big_capacity_gives_cluster_means():
    rng = np.random.default_rng(10)
    X, _ = _blobs(rng, [[0.0, 0.0], [30.0, 0.0]], per=6)
    draws, labels = kmeans_neighbor_lists(X, 2, K=50, seed=2)
    out = kmeans_enhance(X, n_clusters=2, K=50, seed=2)
    for row in range(X.shape[0]):
        cluster_mean = X[labels == labels[row]].mean(axis=0)
        assert np.allclose(out[row], cluster_mean, atol=1e-12), row
        assert len(draws[row]) == (labels == labels[row]).sum() - 1


def test_kmeans_enhance_deterministic_per_seed():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(20, 3))
    assert np.array_equal(kmeans_enhance(X, 4, K=3, seed=9),
                          kmeans_enhance(X, 4, K=3, seed=9))


# ---------------------------------------------------------------------------
# GRASP-lite


def test_grasp_lite_zero_gcn_is_identity():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(12, 3))
    gcn = GraphConvolution(3, dtype=torch.float64)  # weights default to zero
    out = grasp_lite_enhance(X, n_clusters=3, S=1, gcn=gcn, seed=0)
    assert np.array_equal(out, X)


def test_grasp_lite_single_cluster_identity_gcn():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(10, 2))
    out = grasp_lite_enhance(X, n_clusters=1, S=0, gcn=_identity_gcn(2), seed=0)
    expected = X + np.maximum(X.mean(axis=0), 0.0)
    assert np.allclose(out, expected, atol=1e-10)


def test_grasp_lite_three_clusters_matches_twin():
    rng = np.random.default_rng(15)
    X, _ = _blobs(rng, [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], per=5)
    out = grasp_lite_enhance(X, n_clusters=3, S=2, gcn=_identity_gcn(2), seed=3)

    labels, _ = lloyd_kmeans(X, 3, seed=3)
    centroids = np.stack([X[labels == c].mean(axis=0) for c in range(3)])
    a_hat = normalized_adjacency(np.ones((3, 3)) - np.eye(3))  # S=2 completes it
    nodes = a_hat @ np.maximum(a_hat @ centroids, 0.0)
    assert np.allclose(out, X + nodes[labels], atol=1e-10)


# ---------------------------------------------------------------------------
# demographic cohorts


def _demo_patient(pid, gender, age):
    visit = Visit(visit_id=f"{pid}-v0", admit_day=0,
                  diagnosis_codes=[MedicalCode(kind="diagnosis", id="dx0",
                                               vocab_index=0)],
                  medication_codes=[], lab_codes=[])
    return Patient(patient_id=pid, gender=gender, age=age, visits=[visit])


def _demo_dataset(specs):
    patients = tuple(_demo_patient(pid, g, a) for pid, g, a in specs)
    return Dataset(patients=patients,
                   vocabularies={"diagnosis": {"dx0": 0}, "medication": {}, "lab": {}})


def test_age_bin_values():
    assert age_bin(0) == 0
    assert age_bin(9) == 0
    assert age_bin(37) == 3
    assert age_bin(99) == 9
    assert age_bin(100) == 9   # merged into the last bin
    assert age_bin(115) == 9
    for bad in (-1, 121):
        with pytest.raises(ValidationError):
            age_bin(bad)


def test_demographic_cohorts_gender():
    ds = _demo_dataset([("p0", "F", 30), ("p1", "M", 40), ("p2", "F", 70)])
    got = demographic_cohorts(ds, "gender")
    assert got == {"p0": 0, "p1": 1, "p2": 0}


def test_demographic_cohorts_age_contiguous():
    ds = _demo_dataset([("p0", "F", 5), ("p1", "M", 41), ("p2", "F", 44),
                        ("p3", "M", 95)])
    got = demographic_cohorts(ds, "age")
    # bins 0, 4, 4, 9 -> contiguous cohorts 0, 1, 1, 2
    assert got == {"p0": 0, "p1": 1, "p2": 1, "p3": 2}


def test_demographic_cohorts_gender_age_bounded():
    rng = np.random.default_rng(44)
    specs = [(f"p{i:03d}", "MF"[int(rng.integers(0, 2))], int(rng.integers(0, 120)))
             for i in range(200)]
    ds = _demo_dataset(specs)
    got = demographic_cohorts(ds, "gender_age")
    values = set(got.values())
    assert len(values) <= 20
    assert values == set(range(len(values)))  # contiguous indices
    with pytest.raises(ValidationError):
        demographic_cohorts(ds, "zip_code")


def test_medical_cohort_enhance_zero_gcn_formula():
    ds = _demo_dataset([("p0", "F", 30), ("p1", "F", 35), ("p2", "M", 60),
                        ("p3", "M", 62)])
    rng = np.random.default_rng(46)
    X = rng.normal(size=(4, 3))
    sample_patient = {0: "p0", 1: "p1", 2: "p2", 3: "p3"}
    gcn = GraphConvolution(3, dtype=torch.float64)  # zero weights
    out = medical_cohort_enhance(ds, X, sample_patient, mode="gender", K=4, gcn=gcn)
    # inter branch contributes nothing; intra neighbors come from the greedy
    # positively-aligned pick inside each gender cohort
    cohort_members = {0: ["s000000", "s000001"], 1: ["s000002", "s000003"]}
    features = {f"s{row:06d}": X[row] for row in range(4)}
    for row in range(4):
        sid = f"s{row:06d}"
        members = cohort_members[0 if row < 2 else 1]
        picked = greedy_neighbors(sid, members, features, gamma=1e-9, K=4)
        idxs = [int(p[1:]) for p in picked]
        intra = (X[row] + X[idxs].sum(axis=0)) / (1 + len(idxs))
        assert np.allclose(out[row], X[row] + 0.5 * intra, atol=1e-10), row


def test_medical_cohort_enhance_identity_gcn_inter_branch():
    ds = _demo_dataset([("p0", "F", 30), ("p1", "F", 31), ("p2", "M", 60),
                        ("p3", "M", 61)])
    # orthogonal rows: no positive cosine alignments, so intra = row itself
    X = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    sample_patient = {0: "p0", 1: "p1", 2: "p2", 3: "p3"}
    out = medical_cohort_enhance(ds, X, sample_patient, mode="gender", K=4,
                                 gcn=_identity_gcn(4))
    centroids = np.stack([X[:2].mean(axis=0), X[2:].mean(axis=0)])
    a_hat = normalized_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    nodes = a_hat @ np.maximum(a_hat @ centroids, 0.0)
    labels = np.array([0, 0, 1, 1])
    expected = X + 0.5 * X + 0.5 * nodes[labels]
    assert np.allclose(out, expected, atol=1e-10)


def test_medical_cohort_enhance_preserves_shape_and_finiteness():
    rng = np.random.default_rng(48)
    specs = [(f"p{i:02d}", "MF"[i % 2], int(rng.integers(20, 90))) for i in range(12)]
    ds = _demo_dataset(specs)
    X = rng.normal(size=(12, 5))
    sample_patient = {row: f"p{row:02d}" for row in range(12)}
    gcn = _identity_gcn(5)
    for mode in ("gender", "age", "gender_age"):
        out = medical_cohort_enhance(ds, X, sample_patient, mode=mode, K=3, gcn=gcn)
        assert out.shape == X.shape
        assert np.all(np.isfinite(out))


def test_baseline_config_validation():
    cfg = BaselineConfig(method="knn", K=5)
    assert cfg.K == 5
    for bad in ({"method": "pca"}, {"method": "knn", "K": -1},
                {"method": "kmeans", "n_clusters": 0},
                {"method": "mc_age", "age_bin_width": 0}):
        with pytest.raises(ValidationError):
            BaselineConfig(**bad)

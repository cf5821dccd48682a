"""Training and evaluation harness.

run_train drives the full pipeline: data load/synthesis, patient-level
splits, frozen code-feature preparation, module assembly, a similarity-task
warmup, and the joint loop. Each joint epoch refreshes the discrete context
(patient features, cohorts, neighbor selections, centroid graph) from a
parameter snapshot, then takes minibatch steps on the joint objective with
live representations. The best-validation-AUPRC epoch is checkpointed
together with the exact structures it was evaluated under, so reloading the
checkpoint reproduces the reported metrics.

Every random draw comes from a named stream keyed on (seed, purpose), and all
module parameters are filled from those streams, so two methods sharing a
module see identical initialization and identical batch order at equal seed.
Runs are single-threaded for bit-reproducibility.
"""

import csv
import itertools
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .backbones import VisitBatch, create_backbone, visit_batch_from_patients
from .baselines import demographic_cohorts, kmeans_neighbor_lists, knn_neighbor_lists, lloyd_kmeans
from .clustering import average_linkage_labels
from .cohort_model import (
    CohortHead,
    EnhancementStructures,
    GraphConvolution,
    InterCohortGraph,
    IntraCohortSelection,
    build_inter_graph,
    build_intra_selection,
    build_structures,
    cohort_centroids,
    save_inter_edges,
)
from .config import RunConfig
from .data import DIAGNOSIS, Dataset, derive_readmission_labels, generate_synthetic, load_patients, save_patients, split_dataset, SyntheticSpec
from .errors import ConfigError, DivergenceError, ValidationError
from .metrics import MetricsReport, compute_metrics
from .nn_init import init_module, zero_module
from .ontology import (
    code_feature_matrix,
    code_sentence,
    load_ontology,
    save_ontology,
    train_node_embeddings,
    train_semantic_vectors,
)
from .precontext import (
    BilinearSimilarity,
    CohortAssignment,
    PatientEncoder,
    PatientFeatureTable,
    build_similarity_labels,
    cluster_patients,
    precontext_loss,
    save_cohorts,
)
from .rng import stream
from .visit_encoder import CodeViewProjection, VisitEncoder

ABLATION_VARIANTS = (
    ("core", "full"),
    ("-M_P", "no_pretext"),
    ("-M_intra", "no_intra"),
    ("-M_inter", "no_inter"),
)

_METRIC_COLUMNS = ("auprc", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class MethodPlan:
    """What the selected method actually computes."""

    uses_precontext: bool = False
    uses_head: bool = False
    uses_intra: bool = False
    uses_inter: bool = False
    mean_replace: bool = False   # knn / kmeans: output = mean over self + neighbors
    direct_inter: bool = False   # grasp_lite: output = input + cohort GCN node
    cohort_source: str = "none"  # none | precontext | patient_rini | sample_kmeans | demographic
    neighbor_source: str = "none"   # none | cosine | knn | kmeans_draw
    similarity_space: str = "none"  # none | fp | patient_rini | sample_rini
    demographic_mode: str = ""

    @property
    def needs_graph(self) -> bool:
        return self.uses_inter or self.direct_inter

    @property
    def needs_structures(self) -> bool:
        return self.uses_head or self.mean_replace or self.direct_inter


def method_plan(method: str, variant: str = "full") -> MethodPlan:
    if variant != "full" and method != "core":
        raise ConfigError(f"ablation variant {variant!r} only applies to method core")
    if method == "core":
        plan = MethodPlan(
            uses_precontext=True, uses_head=True, uses_intra=True, uses_inter=True,
            cohort_source="precontext", neighbor_source="cosine", similarity_space="fp",
        )
        if variant == "no_pretext":
            plan = replace(plan, uses_precontext=False, cohort_source="patient_rini",
                           similarity_space="patient_rini")
        elif variant == "no_intra":
            plan = replace(plan, uses_intra=False, neighbor_source="none",
                           similarity_space="none")
        elif variant == "no_inter":
            plan = replace(plan, uses_inter=False)
        elif variant != "full":
            raise ConfigError(f"unknown ablation variant {variant!r}")
        return plan
    if method == "backbone_only":
        return MethodPlan()
    if method == "knn":
        return MethodPlan(mean_replace=True, neighbor_source="knn")
    if method == "kmeans":
        return MethodPlan(mean_replace=True, cohort_source="sample_kmeans",
                          neighbor_source="kmeans_draw")
    if method == "grasp_lite":
        return MethodPlan(direct_inter=True, cohort_source="sample_kmeans")
    if method.startswith("mc_"):
        mode = method[len("mc_"):]
        return MethodPlan(uses_head=True, uses_intra=True, uses_inter=True,
                          cohort_source="demographic", neighbor_source="cosine",
                          similarity_space="sample_rini", demographic_mode=mode)
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class RunTensors:
    """Dataset turned into padded tensors plus the sample bookkeeping."""

    batch: VisitBatch
    patients: tuple
    row_of: dict
    sample_ids: tuple
    sample_patient: tuple
    sample_row: torch.Tensor
    sample_pos: torch.Tensor
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    dx_feature: torch.Tensor | None
    code_feature_dim: int


@dataclass
class ModelBundle:
    plan: MethodPlan
    d: int
    dtype: torch.dtype
    backbone: nn.Module
    head: CohortHead | None = None
    classifier: nn.Module | None = None
    gcn: GraphConvolution | None = None
    code_view: CodeViewProjection | None = None
    visit_encoder: VisitEncoder | None = None
    patient_encoder: PatientEncoder | None = None
    similarity: BilinearSimilarity | None = None

    def modules(self) -> dict:
        out = {"backbone": self.backbone}
        for name in ("head", "classifier", "gcn", "code_view", "visit_encoder",
                     "patient_encoder", "similarity"):
            module = getattr(self, name)
            if module is not None:
                out[name] = module
        return out

    def parameters(self):
        for module in self.modules().values():
            yield from module.parameters()


@dataclass
class EpochStructures:
    """The discrete context one epoch trains and evaluates under."""

    enh: EnhancementStructures | None = None
    patient_cohorts: dict | None = None  # patient_id -> cohort index
    sample_cohorts: dict | None = None   # sample_id -> cohort index
    graph: InterCohortGraph | None = None


@dataclass
class Checkpoint:
    config_hash: str
    method: str
    variant: str
    best_epoch: int
    state: dict
    structure_blob: dict | None
    history: list = field(default_factory=list)


def prepare_data(config: RunConfig):
    """Load or synthesize the labeled dataset plus its split and ontology."""
    if config.synthetic:
        spec = SyntheticSpec(
            n_patients=config.syn_n_patients,
            n_planted_cohorts=config.syn_n_cohorts,
            codes_per_cohort=config.syn_codes_per_cohort,
            noise_rate=config.syn_noise_rate,
            readmit_base_rate=config.syn_base_rate,
            readmit_cohort_shift=config.syn_shift,
            visits_per_patient_mean=config.syn_visits_mean,
            seed=config.seed,
            block_size=config.syn_block_size or None,
        )
        dataset, tree, planted = generate_synthetic(spec)
    else:
        if not os.path.exists(config.patients_path):
            raise ConfigError(f"patient file not found: {config.patients_path}")
        tree = None
        if config.ontology_path:
            if not os.path.exists(config.ontology_path):
                raise ConfigError(f"ontology file not found: {config.ontology_path}")
            tree = load_ontology(config.ontology_path)
        dataset = derive_readmission_labels(load_patients(config.patients_path, tree))
        planted = None
    splits = split_dataset(
        dataset, (config.split_train, config.split_val, config.split_test),
        seed=config.seed,
    )
    return dataset, splits, tree, planted


def _frozen_code_features(dataset: Dataset, tree, config: RunConfig) -> np.ndarray:
    """Per-diagnosis-code frozen feature rows: concat(tree walk, semantics)."""
    if tree is None:
        raise ConfigError(
            f"method {config.method!r} needs diagnosis code features; "
            "provide data.ontology or use synthetic data"
        )
    vocab = dataset.vocabularies.get(DIAGNOSIS, {})
    code_ids = sorted(vocab, key=lambda cid: vocab[cid])
    missing = [cid for cid in code_ids if cid not in tree]
    if missing:
        raise ConfigError(
            f"{len(missing)} diagnosis codes missing from the ontology "
            f"(first: {missing[0]!r})"
        )
    node_table = train_node_embeddings(tree, dim=config.node_dim, seed=config.seed)
    sentences = {cid: code_sentence(cid, tree) for cid in code_ids}
    word_vectors = train_semantic_vectors(
        [sentences[cid] for cid in code_ids], dim=config.word_dim, seed=config.seed
    )
    return code_feature_matrix(code_ids, node_table, word_vectors, sentences)


def build_tensors(dataset: Dataset, splits, config: RunConfig, plan: MethodPlan,
                  tree=None, dtype=torch.float32) -> RunTensors:
    patients = tuple(sorted(dataset.patients, key=lambda p: p.patient_id))
    batch = visit_batch_from_patients(list(patients), dataset.vocabularies, dtype=dtype)
    row_of = {p.patient_id: row for row, p in enumerate(patients)}

    split_of = {}
    for part, ds in zip(("train", "val", "test"), splits):
        for pid in ds.patient_ids():
            split_of[pid] = part

    records = []
    for patient in patients:
        for t, visit in enumerate(patient.visits):
            if visit.readmit_label is None:
                raise ValidationError(
                    f"visit {visit.visit_id!r} has no readmission label; "
                    "run label derivation first"
                )
            sid = f"{patient.patient_id}:{visit.visit_id}"
            records.append((sid, patient.patient_id, row_of[patient.patient_id],
                            t, visit.readmit_label))
    records.sort(key=lambda r: r[0])
    sample_ids = tuple(r[0] for r in records)
    if len(set(sample_ids)) != len(sample_ids):
        raise ValidationError("sample ids are not unique (duplicate visit_id in a patient)")
    sample_patient = tuple(r[1] for r in records)
    labels = np.array([r[4] for r in records], dtype=np.int64)
    parts = np.array([split_of[r[1]] for r in records])

    dx_feature = None
    code_feature_dim = 0
    if plan.uses_precontext:
        code_feat = _frozen_code_features(dataset, tree, config)
        code_feature_dim = code_feat.shape[1]
        counts = batch.diagnosis.sum(dim=-1, keepdim=True).clamp(min=1.0)
        dx_feature = (batch.diagnosis @ torch.as_tensor(code_feat, dtype=dtype)) / counts

    return RunTensors(
        batch=batch,
        patients=patients,
        row_of=row_of,
        sample_ids=sample_ids,
        sample_patient=sample_patient,
        sample_row=torch.as_tensor(np.array([r[2] for r in records], dtype=np.int64)),
        sample_pos=torch.as_tensor(np.array([r[3] for r in records], dtype=np.int64)),
        labels=labels,
        train_idx=np.flatnonzero(parts == "train"),
        val_idx=np.flatnonzero(parts == "val"),
        test_idx=np.flatnonzero(parts == "test"),
        dx_feature=dx_feature,
        code_feature_dim=code_feature_dim,
    )


def assemble_bundle(config: RunConfig, plan: MethodPlan, vocab_sizes: dict,
                    code_feature_dim: int, dtype=torch.float32) -> ModelBundle:
    d, seed = config.d, config.seed
    backbone = create_backbone(config.backbone, d, vocab_sizes, dtype=dtype)
    init_module(backbone, stream(seed, "init-backbone"))
    bundle = ModelBundle(plan=plan, d=d, dtype=dtype, backbone=backbone)

    if plan.uses_head:
        head = CohortHead(d, dtype=dtype)
        if config.gcn_init_zero:
            zero_module(head.gcn)
        else:
            init_module(head.gcn, stream(seed, "init-gcn"))
        init_module(head.fusion, stream(seed, "init-fusion"))
        init_module(head.classifier, stream(seed, "init-classifier"))
        bundle.head = head
    else:
        classifier = nn.Linear(d, 1, dtype=dtype)
        init_module(classifier, stream(seed, "init-classifier"))
        bundle.classifier = classifier

    if plan.direct_inter:
        gcn = GraphConvolution(d, dtype=dtype)
        if config.gcn_init_zero:
            zero_module(gcn)
        else:
            init_module(gcn, stream(seed, "init-gcn"))
        bundle.gcn = gcn

    if plan.uses_precontext:
        code_view = CodeViewProjection(code_feature_dim, d, dtype=dtype)
        init_module(code_view, stream(seed, "init-code-view"))
        visit_encoder = VisitEncoder(
            med_vocab=vocab_sizes.get("medication", 0),
            lab_vocab=vocab_sizes.get("lab", 0),
            code_feature_dim=d, d=d, use_tanh=config.use_tanh, dtype=dtype,
        )
        init_module(visit_encoder, stream(seed, "init-visit-encoder"))
        patient_encoder = PatientEncoder(d, dtype=dtype)
        init_module(patient_encoder, stream(seed, "init-patient-encoder"))
        bundle.code_view = code_view
        bundle.visit_encoder = visit_encoder
        bundle.patient_encoder = patient_encoder
        bundle.similarity = BilinearSimilarity(d, dtype=dtype)
    return bundle


def _visit_features(bundle: ModelBundle, tensors: RunTensors, rows=None) -> torch.Tensor:
    """[rows, T, d] visit features through the code-view + visit encoder."""
    med = tensors.batch.medication
    lab = tensors.batch.lab
    dxf = tensors.dx_feature
    if rows is not None:
        med, lab, dxf = med[rows], lab[rows], dxf[rows]
    return bundle.visit_encoder(med, lab, bundle.code_view(dxf))


def _patient_features(bundle: ModelBundle, tensors: RunTensors, patient_ids=None):
    """Patient features (and the row list used) for all or selected patients."""
    if patient_ids is None:
        rows = None
        ordered = [p.patient_id for p in tensors.patients]
        lengths = tensors.batch.lengths
    else:
        ordered = sorted(set(patient_ids))
        rows = torch.as_tensor([tensors.row_of[pid] for pid in ordered])
        lengths = tensors.batch.lengths[rows]
    feats = _visit_features(bundle, tensors, rows)
    patient_feats, _ = bundle.patient_encoder(feats, lengths)
    return {pid: patient_feats[k] for k, pid in enumerate(ordered)}


def _sample_r_ini(bundle: ModelBundle, tensors: RunTensors) -> torch.Tensor:
    states = bundle.backbone(tensors.batch)
    return states[tensors.sample_row, tensors.sample_pos]


def forward_pass(bundle: ModelBundle, tensors: RunTensors,
                 structures: EpochStructures | None) -> dict:
    """Live logits for every sample (plus fusion attention when present)."""
    r_ini = _sample_r_ini(bundle, tensors)
    if not torch.isfinite(r_ini).all():
        raise DivergenceError("backbone produced non-finite representations")
    plan = bundle.plan
    if plan.uses_head:
        out = bundle.head(r_ini, structures.enh)
        return {"logits": out["logits"], "attention": out["attention"], "r_ini": r_ini,
                "r_final": out["r_final"]}
    if plan.mean_replace:
        enh = structures.enh
        gathered = r_ini[enh.neighbor_index]
        mask = enh.neighbor_mask.unsqueeze(-1)
        r_final = (gathered * mask).sum(dim=1) / enh.neighbor_mask.sum(dim=1, keepdim=True)
        logits = bundle.classifier(r_final).squeeze(-1)
        return {"logits": logits, "attention": None, "r_ini": r_ini, "r_final": r_final}
    if plan.direct_inter:
        enh = structures.enh
        nodes = bundle.gcn(enh.adjacency_norm, enh.centroids)
        r_final = r_ini + nodes[enh.cohort_of]
        logits = bundle.classifier(r_final).squeeze(-1)
        return {"logits": logits, "attention": None, "r_ini": r_ini, "r_final": r_final}
    logits = bundle.classifier(r_ini).squeeze(-1)
    return {"logits": logits, "attention": None, "r_ini": r_ini, "r_final": r_ini}


def _patient_mean_rini(tensors: RunTensors, r_ini: np.ndarray) -> dict:
    sums = {}
    counts = {}
    for k, pid in enumerate(tensors.sample_patient):
        if pid not in sums:
            sums[pid] = np.zeros(r_ini.shape[1], dtype=np.float64)
            counts[pid] = 0
        sums[pid] += r_ini[k]
        counts[pid] += 1
    return {pid: sums[pid] / counts[pid] for pid in sums}


def refresh_structures(bundle: ModelBundle, tensors: RunTensors, dataset: Dataset,
                       config: RunConfig, epoch_seed: int) -> EpochStructures:
    """Rebuild cohorts, neighbor selections, and the centroid graph from a
    current-parameter snapshot (no gradients flow through these)."""
    plan = bundle.plan
    if not plan.needs_structures:
        return EpochStructures()
    d = bundle.d
    with torch.no_grad():
        r_ini = _sample_r_ini(bundle, tensors).double().numpy()
        fp = None
        if plan.uses_precontext:
            feats = _visit_features(bundle, tensors)
            patient_feats, _ = bundle.patient_encoder(feats, tensors.batch.lengths)
            fp = {p.patient_id: patient_feats[k].double().numpy()
                  for k, p in enumerate(tensors.patients)}
            if plan.cohort_source == "precontext" and config.visit_level_cohorts:
                sample_visit_feats = feats[tensors.sample_row, tensors.sample_pos]
                sample_visit_feats = sample_visit_feats.double().numpy()

    patient_cohorts = None
    sample_cohorts = None
    n_samples = len(tensors.sample_ids)

    if plan.cohort_source == "precontext":
        if config.visit_level_cohorts:
            labels = average_linkage_labels(sample_visit_feats, config.n_cohorts,
                                            ids=tensors.sample_ids)
            sample_cohorts = {sid: int(c) for sid, c in zip(tensors.sample_ids, labels)}
        else:
            table = PatientFeatureTable(dim=d, features=fp)
            patient_cohorts = cluster_patients(table, config.n_cohorts).assignment
    elif plan.cohort_source == "patient_rini":
        means = _patient_mean_rini(tensors, r_ini)
        table = PatientFeatureTable(dim=d, features=means)
        patient_cohorts = cluster_patients(table, config.n_cohorts).assignment
    elif plan.cohort_source == "sample_kmeans":
        labels, _ = lloyd_kmeans(r_ini, config.n_cohorts, seed=epoch_seed)
        sample_cohorts = {sid: int(c) for sid, c in zip(tensors.sample_ids, labels)}
    elif plan.cohort_source == "demographic":
        patient_cohorts = demographic_cohorts(dataset, plan.demographic_mode)

    if sample_cohorts is None and patient_cohorts is not None:
        sample_cohorts = {sid: patient_cohorts[pid]
                          for sid, pid in zip(tensors.sample_ids, tensors.sample_patient)}
    if sample_cohorts is None:
        sample_cohorts = {sid: 0 for sid in tensors.sample_ids}

    if plan.similarity_space == "fp":
        sim_features = {sid: fp[pid]
                        for sid, pid in zip(tensors.sample_ids, tensors.sample_patient)}
    elif plan.similarity_space == "patient_rini":
        means = _patient_mean_rini(tensors, r_ini)
        sim_features = {sid: means[pid]
                        for sid, pid in zip(tensors.sample_ids, tensors.sample_patient)}
    elif plan.similarity_space == "sample_rini":
        sim_features = {sid: r_ini[k] for k, sid in enumerate(tensors.sample_ids)}
    else:
        sim_features = None

    if plan.neighbor_source == "cosine" and plan.uses_intra:
        selection = build_intra_selection(tensors.sample_ids, sample_cohorts,
                                          sim_features, config.gamma, config.intra_k)
    elif plan.neighbor_source == "knn":
        lists = knn_neighbor_lists(r_ini, min(config.intra_k, n_samples - 1))
        selection = IntraCohortSelection(gamma=1.0, capacity=config.intra_k, neighbors={
            sid: tuple(tensors.sample_ids[j] for j in lists[k])
            for k, sid in enumerate(tensors.sample_ids)
        })
    elif plan.neighbor_source == "kmeans_draw":
        draws, _ = kmeans_neighbor_lists(r_ini, config.n_cohorts, config.intra_k,
                                         seed=epoch_seed)
        selection = IntraCohortSelection(gamma=1.0, capacity=config.intra_k, neighbors={
            sid: tuple(tensors.sample_ids[j] for j in draws[k])
            for k, sid in enumerate(tensors.sample_ids)
        })
    else:
        selection = IntraCohortSelection(gamma=config.gamma, capacity=config.intra_k,
                                         neighbors={sid: () for sid in tensors.sample_ids})

    n_cohorts = max(sample_cohorts.values()) + 1
    if plan.needs_graph:
        cohort_idx = np.array([sample_cohorts[sid] for sid in tensors.sample_ids])
        centroids = cohort_centroids(r_ini, cohort_idx, n_cohorts)
        degree = min(config.inter_degree, n_cohorts - 1)
        graph = build_inter_graph(centroids, degree)
    else:
        # Inactive branch: the gather through cohort_of must stay in range, so
        # keep one (zero) node per cohort; the fusion mask nulls the result.
        graph = InterCohortGraph(centroids=np.zeros((n_cohorts, d)), edges=(), degree=0)

    enh = build_structures(tensors.sample_ids, sample_cohorts, selection, graph,
                           use_intra=plan.uses_intra, use_inter=plan.uses_inter,
                           dtype=bundle.dtype)
    return EpochStructures(enh=enh, patient_cohorts=patient_cohorts,
                           sample_cohorts=sample_cohorts, graph=graph)


def _metrics_or_none(scores: np.ndarray, labels: np.ndarray, threshold: float):
    try:
        return compute_metrics(scores, labels, threshold=threshold)
    except ValidationError:
        return None


def _snapshot_state(bundle: ModelBundle) -> dict:
    return {
        name: {k: v.detach().clone() for k, v in module.state_dict().items()}
        for name, module in bundle.modules().items()
    }


def _restore_state(bundle: ModelBundle, state: dict) -> None:
    for name, module in bundle.modules().items():
        module.load_state_dict(state[name])


def _structure_blob(structures: EpochStructures) -> dict | None:
    if structures.enh is None:
        return None
    enh = structures.enh
    return {
        "sample_ids": list(enh.sample_ids),
        "cohort_of": enh.cohort_of.numpy(),
        "neighbor_index": enh.neighbor_index.numpy(),
        "neighbor_mask": enh.neighbor_mask.numpy(),
        "adjacency_norm": enh.adjacency_norm.numpy(),
        "centroids": enh.centroids.numpy(),
        "intra_active": enh.intra_active.numpy(),
        "inter_active": enh.inter_active.numpy(),
        "patient_cohorts": structures.patient_cohorts,
        "sample_cohorts": structures.sample_cohorts,
        "graph_edges": list(structures.graph.edges) if structures.graph else [],
        "graph_degree": structures.graph.degree if structures.graph else 0,
        "graph_centroids": structures.graph.centroids if structures.graph else None,
    }


def _structures_from_blob(blob: dict | None, dtype) -> EpochStructures:
    if blob is None:
        return EpochStructures()
    enh = EnhancementStructures(
        sample_ids=tuple(blob["sample_ids"]),
        cohort_of=torch.as_tensor(blob["cohort_of"]),
        neighbor_index=torch.as_tensor(blob["neighbor_index"]),
        neighbor_mask=torch.as_tensor(blob["neighbor_mask"], dtype=dtype),
        adjacency_norm=torch.as_tensor(blob["adjacency_norm"], dtype=dtype),
        centroids=torch.as_tensor(blob["centroids"], dtype=dtype),
        intra_active=torch.as_tensor(blob["intra_active"], dtype=dtype),
        inter_active=torch.as_tensor(blob["inter_active"], dtype=dtype),
    )
    graph = None
    if blob["graph_centroids"] is not None:
        graph = InterCohortGraph(centroids=blob["graph_centroids"],
                                 edges=tuple(tuple(e) for e in blob["graph_edges"]),
                                 degree=blob["graph_degree"])
    return EpochStructures(enh=enh, patient_cohorts=blob["patient_cohorts"],
                           sample_cohorts=blob["sample_cohorts"], graph=graph)


def _pair_minibatch_loss(bundle: ModelBundle, tensors: RunTensors, label_set,
                         pair_subset) -> torch.Tensor:
    patient_ids = sorted({a for a, _, _ in pair_subset} | {b for _, b, _ in pair_subset})
    lookup = _patient_features(bundle, tensors, patient_ids)
    return precontext_loss(bundle.similarity, lookup, label_set, pairs=pair_subset)


def _similarity_warmup(bundle: ModelBundle, tensors: RunTensors, label_set,
                       config: RunConfig, optimizer, pre_rng) -> None:
    n_pairs = len(label_set.pairs)
    for _ in range(config.warmup_epochs):
        order = pre_rng.permutation(n_pairs)
        for start in range(0, n_pairs, config.batch_size):
            chosen = [label_set.pairs[int(k)] for k in order[start:start + config.batch_size]]
            loss = _pair_minibatch_loss(bundle, tensors, label_set, chosen)
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite warmup loss in the similarity pretext task")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()


def learn_precontext(config: RunConfig):
    """Run only the patient-similarity phase: warmup training of the visit and
    patient encoders on Jaccard pseudo-labels, then clustering of the learned
    patient features.

    Returns (PatientFeatureTable, CohortAssignment, planted assignment or None).
    """
    torch.set_num_threads(1)
    plan = method_plan("core")
    dataset, splits, tree, planted = prepare_data(config)
    tensors = build_tensors(dataset, splits, config, plan, tree=tree)
    vocab_sizes = {kind: dataset.vocab_size(kind)
                   for kind in ("diagnosis", "medication", "lab")}
    bundle = assemble_bundle(config, plan, vocab_sizes, tensors.code_feature_dim)
    optimizer = torch.optim.Adam(list(bundle.parameters()), lr=config.learning_rate,
                                 betas=(0.9, 0.999))
    label_set = build_similarity_labels(splits[0], pos_k=config.pos_k,
                                        neg_k=config.neg_k, seed=config.seed)
    pre_rng = stream(config.seed, "batches-pre")
    _similarity_warmup(bundle, tensors, label_set, config, optimizer, pre_rng)
    with torch.no_grad():
        features = _patient_features(bundle, tensors)
    table = PatientFeatureTable(
        dim=bundle.d,
        features={pid: feat.double().numpy() for pid, feat in features.items()},
    )
    cohorts = cluster_patients(table, config.n_cohorts)
    return table, cohorts, planted


def _train_on(dataset: Dataset, splits, tree, config: RunConfig, variant: str = "full",
              write_outputs: bool = True):
    """Inner training loop over an already-prepared dataset."""
    torch.set_num_threads(1)
    plan = method_plan(config.method, variant)
    tensors = build_tensors(dataset, splits, config, plan, tree=tree)
    vocab_sizes = {kind: dataset.vocab_size(kind)
                   for kind in ("diagnosis", "medication", "lab")}
    bundle = assemble_bundle(config, plan, vocab_sizes, tensors.code_feature_dim)
    optimizer = torch.optim.Adam(list(bundle.parameters()), lr=config.learning_rate,
                                 betas=(0.9, 0.999))

    labels_t = torch.as_tensor(tensors.labels, dtype=bundle.dtype)
    train_ds = splits[0]
    label_set = None
    if plan.uses_precontext:
        label_set = build_similarity_labels(train_ds, pos_k=config.pos_k,
                                            neg_k=config.neg_k, seed=config.seed)

    pre_rng = stream(config.seed, "batches-pre")
    batch_rng = stream(config.seed, "batches")
    epoch_seeds = stream(config.seed, "epoch-seeds").integers(
        0, 2**31 - 1, size=config.epochs
    )

    # Similarity-task warmup: shapes the patient features before the first
    # cohort construction. Downstream modules receive no gradients here.
    if plan.uses_precontext and config.warmup_epochs > 0:
        _similarity_warmup(bundle, tensors, label_set, config, optimizer, pre_rng)

    best = {"auprc": -np.inf, "epoch": -1, "state": None, "structures": None}
    history = []
    n_pairs = len(label_set.pairs) if label_set is not None else 0
    for epoch in range(config.epochs):
        structures = refresh_structures(bundle, tensors, dataset, config,
                                        epoch_seed=int(epoch_seeds[epoch]))
        order = batch_rng.permutation(len(tensors.train_idx))
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch_idx = tensors.train_idx[order[start:start + config.batch_size]]
            batch_t = torch.as_tensor(batch_idx)
            out = forward_pass(bundle, tensors, structures)
            logits = out["logits"]
            if not torch.isfinite(logits).all():
                raise DivergenceError("non-finite logits from the cohort head/classifier")
            loss = nn.functional.binary_cross_entropy_with_logits(
                logits[batch_t], labels_t[batch_t]
            )
            if plan.uses_precontext and config.lambda_pre > 0.0:
                take = min(config.batch_size, n_pairs)
                pair_sel = pre_rng.choice(n_pairs, size=take, replace=False)
                chosen = [label_set.pairs[int(k)] for k in pair_sel]
                pre = _pair_minibatch_loss(bundle, tensors, label_set, chosen)
                if not torch.isfinite(pre):
                    raise DivergenceError("non-finite similarity pretext loss")
                loss = loss + config.lambda_pre * pre
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite joint loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_steps += 1

        with torch.no_grad():
            out = forward_pass(bundle, tensors, structures)
            scores = torch.sigmoid(out["logits"]).double().numpy()
        val_report = _metrics_or_none(scores[tensors.val_idx],
                                      tensors.labels[tensors.val_idx], config.threshold)
        val_auprc = val_report.auprc if val_report is not None else float("nan")
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_steps, 1),
            "val_auprc": None if val_report is None else val_auprc,
        })
        if val_report is not None and val_auprc > best["auprc"]:
            best = {"auprc": val_auprc, "epoch": epoch,
                    "state": _snapshot_state(bundle),
                    "structures": structures}

    if best["state"] is None:
        # No epoch produced a valid validation score; keep the final state.
        best = {"auprc": float("nan"), "epoch": config.epochs - 1,
                "state": _snapshot_state(bundle),
                "structures": structures}
    _restore_state(bundle, best["state"])
    structures = best["structures"]

    with torch.no_grad():
        out = forward_pass(bundle, tensors, structures)
        scores = torch.sigmoid(out["logits"]).double().numpy()
    if tensors.labels[tensors.test_idx].sum() == 0:
        raise ValidationError(
            "test split has no positive labels; enlarge the dataset or change the seed"
        )
    report = compute_metrics(scores[tensors.test_idx],
                             tensors.labels[tensors.test_idx], config.threshold)

    checkpoint = Checkpoint(
        config_hash=config.config_hash(),
        method=config.method,
        variant=variant,
        best_epoch=best["epoch"],
        state=best["state"],
        structure_blob=_structure_blob(structures),
        history=history,
    )
    if write_outputs:
        _write_run_outputs(config, bundle, tensors, structures, checkpoint, report, out)
    return checkpoint, report, bundle, tensors, structures


def run_train(config: RunConfig, variant: str = "full", write_outputs: bool = True):
    """Train per config; returns (Checkpoint, MetricsReport on the test split)."""
    dataset, splits, tree, _ = prepare_data(config)
    checkpoint, report, *_ = _train_on(dataset, splits, tree, config, variant=variant,
                                       write_outputs=write_outputs)
    return checkpoint, report


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    torch.save({
        "config_hash": checkpoint.config_hash,
        "method": checkpoint.method,
        "variant": checkpoint.variant,
        "best_epoch": checkpoint.best_epoch,
        "state": checkpoint.state,
        "structure_blob": checkpoint.structure_blob,
        "history": checkpoint.history,
    }, path)


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(**blob)


def run_eval(config: RunConfig):
    """Re-evaluate a saved checkpoint on the test split; returns MetricsReport."""
    torch.set_num_threads(1)
    if not config.checkpoint_path:
        raise ConfigError("eval needs eval.checkpoint = <path to checkpoint>")
    checkpoint = load_checkpoint(config.checkpoint_path)
    if checkpoint.config_hash != config.config_hash():
        raise ConfigError(
            "checkpoint was trained under a different configuration "
            f"(checkpoint {checkpoint.config_hash}, config {config.config_hash()})"
        )
    plan = method_plan(checkpoint.method, checkpoint.variant)
    dataset, splits, tree, _ = prepare_data(config)
    tensors = build_tensors(dataset, splits, config, plan, tree=tree)
    vocab_sizes = {kind: dataset.vocab_size(kind)
                   for kind in ("diagnosis", "medication", "lab")}
    bundle = assemble_bundle(config, plan, vocab_sizes, tensors.code_feature_dim)
    _restore_state(bundle, checkpoint.state)
    structures = _structures_from_blob(checkpoint.structure_blob, bundle.dtype)
    with torch.no_grad():
        out = forward_pass(bundle, tensors, structures)
        scores = torch.sigmoid(out["logits"]).double().numpy()
    report = compute_metrics(scores[tensors.test_idx],
                             tensors.labels[tensors.test_idx], config.threshold)
    os.makedirs(config.out_dir, exist_ok=True)
    _write_report_json(config, checkpoint, report)
    return report


_SWEEP_FIELD = {
    "n_cohorts": "n_cohorts",
    "gamma": "gamma",
    "K": "intra_k",
    "S": "inter_degree",
    "lambda_pre": "lambda_pre",
    "method": "method",
}


def run_sweep(base: RunConfig, grid: dict | None = None) -> list:
    """Cartesian-product runs over the grid; one result row per run.

    Failing runs are recorded (status column) and the sweep continues.
    """
    grid = dict(base.sweep_grid if grid is None else grid)
    if not grid:
        grid = {}
    for param in grid:
        if param not in _SWEEP_FIELD:
            raise ConfigError(
                f"cannot sweep {param!r}; allowed: {', '.join(sorted(_SWEEP_FIELD))}"
            )
    params = sorted(grid)
    value_lists = [grid[p] if isinstance(grid[p], list) else [grid[p]] for p in params]
    dataset, splits, tree, _ = prepare_data(base)

    rows = []
    for combo in itertools.product(*value_lists) if params else [()]:
        config = replace(base, sweep_grid={})
        for param, value in zip(params, combo):
            setattr(config, _SWEEP_FIELD[param], value)
        row = {param: value for param, value in zip(params, combo)}
        row["seed"] = config.seed
        try:
            config.validate()
            _, report, *_ = _train_on(dataset, splits, tree, config,
                                      write_outputs=False)
            row.update({name: getattr(report, name) for name in _METRIC_COLUMNS})
            row["status"] = "ok"
        except (ConfigError, ValidationError, DivergenceError) as exc:
            for name in _METRIC_COLUMNS:
                row[name] = ""
            row["status"] = f"error: {exc}"
        rows.append(row)

    os.makedirs(os.path.join(base.out_dir, "curves"), exist_ok=True)
    _write_rows_csv(os.path.join(base.out_dir, "sweep.csv"),
                    params + ["seed"] + list(_METRIC_COLUMNS) + ["status"], rows)
    _write_sweep_charts(base.out_dir, params, rows)
    return rows


def run_ablation(base: RunConfig) -> list:
    """Four runs: the full pipeline and three single-module removals."""
    dataset, splits, tree, _ = prepare_data(base)
    rows = []
    for label, variant in ABLATION_VARIANTS:
        config = replace(base, method="core", sweep_grid={})
        config.validate()
        _, report, *_ = _train_on(dataset, splits, tree, config, variant=variant,
                                  write_outputs=False)
        row = {"variant": label, "config_hash": config.config_hash(), "seed": base.seed}
        row.update({name: getattr(report, name) for name in _METRIC_COLUMNS})
        rows.append(row)
    os.makedirs(base.out_dir, exist_ok=True)
    _write_rows_csv(os.path.join(base.out_dir, "sweep.csv"),
                    ["variant", "config_hash", "seed"] + list(_METRIC_COLUMNS), rows)
    return rows


def generate_data_files(config: RunConfig) -> dict:
    """gen-data: synthesize a dataset and write patients/ontology/ground truth."""
    if not config.synthetic:
        raise ConfigError("gen-data needs data.synthetic = true")
    dataset, splits, tree, planted = prepare_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    patients_path = os.path.join(config.out_dir, "patients.jsonl")
    ontology_path = os.path.join(config.out_dir, "ontology.csv")
    planted_path = os.path.join(config.out_dir, "planted.csv")
    save_patients(dataset, patients_path)
    save_ontology(tree, ontology_path)
    with open(planted_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "cohort_index"])
        for pid in sorted(planted):
            writer.writerow([pid, planted[pid]])
    return {"patients": patients_path, "ontology": ontology_path, "planted": planted_path}


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write_report_json(config: RunConfig, checkpoint: Checkpoint,
                       report: MetricsReport) -> None:
    payload = {
        "config_hash": checkpoint.config_hash,
        "method": checkpoint.method,
        "variant": checkpoint.variant,
        "backbone": config.backbone,
        "seed": config.seed,
        "best_epoch": checkpoint.best_epoch,
        "metrics": report.to_dict(),
    }
    path = os.path.join(config.out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_canonical_json(payload))


def _write_rows_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(col, "")) for col in columns])


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.10g}"
    return value


def _write_run_outputs(config: RunConfig, bundle: ModelBundle, tensors: RunTensors,
                       structures: EpochStructures, checkpoint: Checkpoint,
                       report: MetricsReport, out: dict) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    os.makedirs(os.path.join(config.out_dir, "curves"), exist_ok=True)
    _write_report_json(config, checkpoint, report)
    save_checkpoint(checkpoint, os.path.join(config.out_dir, "checkpoint.pt"))

    cohorts_path = os.path.join(config.out_dir, "cohorts.csv")
    if structures is not None and structures.patient_cohorts:
        save_cohorts(CohortAssignment(
            n_cohorts=max(structures.patient_cohorts.values()) + 1,
            assignment=structures.patient_cohorts,
        ), cohorts_path)
    elif structures is not None and structures.sample_cohorts:
        with open(cohorts_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "cohort_index"])
            for sid in sorted(structures.sample_cohorts):
                writer.writerow([sid, structures.sample_cohorts[sid]])
    else:
        with open(cohorts_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["patient_id", "cohort_index"])

    attention_path = os.path.join(config.out_dir, "attention.csv")
    with open(attention_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "att_intra", "att_inter"])
        if out.get("attention") is not None:
            att = out["attention"].detach().double().numpy()
            for k, sid in enumerate(tensors.sample_ids):
                writer.writerow([sid, f"{att[k, 0]:.10g}", f"{att[k, 1]:.10g}"])

    if structures is not None and structures.graph is not None:
        save_inter_edges(structures.graph, os.path.join(config.out_dir, "inter_edges.csv"))

    _write_training_chart(os.path.join(config.out_dir, "curves", "training.svg"),
                          checkpoint.history)


def _chart_backend():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cohortlearn"
    import matplotlib.pyplot as plt
    return plt


def _write_training_chart(path, history) -> None:
    plt = _chart_backend()
    epochs = [h["epoch"] for h in history]
    losses = [h["train_loss"] for h in history]
    val = [(h["epoch"], h["val_auprc"]) for h in history if h["val_auprc"] is not None]
    fig, axes = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    axes[0].plot(epochs, losses, color="tab:blue")
    axes[0].set_ylabel("train loss")
    if val:
        axes[1].plot([e for e, _ in val], [v for _, v in val], color="tab:orange")
    axes[1].set_ylabel("val AUPRC")
    axes[1].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_sweep_charts(out_dir, params, rows) -> None:
    plt = _chart_backend()
    for param in params:
        values = []
        for row in rows:
            if row["status"] == "ok" and not isinstance(row[param], str):
                values.append((row[param], row["auprc"]))
        if not values:
            continue
        xs = sorted({v for v, _ in values})
        ys = [float(np.median([a for v, a in values if v == x])) for x in xs]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, ys, marker="o", color="tab:blue")
        ax.set_xlabel(param)
        ax.set_ylabel("AUPRC")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "curves", f"sweep_{param}.svg"),
                    format="svg", metadata={"Date": None})
        plt.close(fig)


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------

class CohortReadmissionEstimator(BaseEstimator):
    """Estimator-style wrapper: fit on a labeled Dataset, predict per-sample
    readmission probabilities for that dataset's visits.

    The model is transductive (cohorts and graphs are built over the fitted
    population), so predictions are only defined for samples seen in fit.
    """

    def __init__(self, method: str = "core", backbone: str = "code_mlp", d: int = 32,
                 n_cohorts: int = 4, gamma: float = 0.9, K: int = 10, S: int = 2,
                 lambda_pre: float = 0.1, learning_rate: float = 1e-3,
                 epochs: int = 10, batch_size: int = 64, warmup_epochs: int = 2,
                 seed: int = 0):
        self.method = method
        self.backbone = backbone
        self.d = d
        self.n_cohorts = n_cohorts
        self.gamma = gamma
        self.K = K
        self.S = S
        self.lambda_pre = lambda_pre
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def _config(self) -> RunConfig:
        return RunConfig(
            method=self.method, backbone=self.backbone, d=self.d,
            n_cohorts=self.n_cohorts, gamma=self.gamma, intra_k=self.K,
            inter_degree=self.S, lambda_pre=self.lambda_pre,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
            seed=self.seed, synthetic=True,
        )

    def fit(self, dataset: Dataset, tree=None):
        config = self._config()
        splits = split_dataset(
            dataset, (config.split_train, config.split_val, config.split_test),
            seed=config.seed,
        )
        checkpoint, report, bundle, tensors, structures = _train_on(
            dataset, splits, tree if tree is not None else dataset.ontology,
            config, write_outputs=False,
        )
        self.checkpoint_ = checkpoint
        self.report_ = report
        self._bundle = bundle
        self._tensors = tensors
        self._structures = structures
        return self

    def _check_fitted(self):
        if not hasattr(self, "_bundle"):
            raise ValidationError("estimator is not fitted; call fit first")

    def predict_proba(self) -> dict:
        """sample_id -> readmission probability for every fitted sample."""
        self._check_fitted()
        with torch.no_grad():
            out = forward_pass(self._bundle, self._tensors, self._structures)
            scores = torch.sigmoid(out["logits"]).double().numpy()
        return {sid: float(scores[k]) for k, sid in enumerate(self._tensors.sample_ids)}

    def predict(self, threshold: float = 0.5) -> dict:
        return {sid: int(p >= threshold) for sid, p in self.predict_proba().items()}

    def score(self) -> float:
        """Test-split AUPRC of the fitted model."""
        self._check_fitted()
        return self.report_.auprc

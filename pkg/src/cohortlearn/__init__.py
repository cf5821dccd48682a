"""Cohort-aware representation learning for hospital readmission prediction.

The pipeline: encode per-visit medical codes (diagnosis codes enriched with
ontology-walk and semantic features), learn patient-level features on a
similarity pretext task, cluster patients into fine-grained cohorts, then
enhance each visit representation with attention-fused intra-cohort and
inter-cohort (centroid graph) context before classifying 30-day readmission.
"""

__version__ = "0.1.0"

from .errors import (
    CohortLearnError,
    ConfigError,
    DivergenceError,
    ParseError,
    RegistrationError,
    ValidationError,
)
from .data import (
    DIAGNOSIS,
    LAB,
    MEDICATION,
    Dataset,
    Patient,
    SyntheticSpec,
    Visit,
    derive_readmission_labels,
    generate_synthetic,
    load_patients,
    save_patients,
    split_dataset,
)
from .ontology import (
    EmbeddingTable,
    OntologyNode,
    OntologyTree,
    load_ontology,
    save_ontology,
    train_node_embeddings,
    train_semantic_vectors,
)
from .clustering import AgglomerativeCohorts, average_linkage_labels
from .visit_encoder import CodeViewProjection, VisitEncoder, encode_visit
from .precontext import (
    BilinearSimilarity,
    CohortAssignment,
    PatientEncoder,
    PatientFeatureTable,
    build_similarity_labels,
    cluster_patients,
    jaccard_similarity,
    load_cohorts,
    precontext_loss,
    save_cohorts,
)
from .backbones import (
    Backbone,
    VisitBatch,
    backbone_encode,
    create_backbone,
    register_backbone,
    registered_backbones,
    visit_batch_from_patients,
)
from .cohort_model import (
    CohortHead,
    FusionAttention,
    GraphConvolution,
    InterCohortGraph,
    IntraCohortSelection,
    build_inter_graph,
    build_intra_selection,
    build_structures,
    cohort_centroids,
    fuse,
    intra_aggregate,
    select_neighbors,
    total_loss,
)
from .baselines import (
    demographic_cohorts,
    grasp_lite_enhance,
    kmeans_enhance,
    knn_enhance,
    lloyd_kmeans,
    medical_cohort_enhance,
)
from .metrics import MetricsReport, auprc_score, compute_metrics
from .config import RunConfig, build_run_config, load_config_file, load_run_config
from .harness import (
    CohortReadmissionEstimator,
    run_ablation,
    run_eval,
    run_sweep,
    run_train,
)

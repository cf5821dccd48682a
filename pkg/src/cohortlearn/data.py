"""EHR data model: coded visits, patients, labeling, splits, synthetic generation.

Patients are read from JSONL (one object per line) with visits carrying three
families of codes (dx/rx/lab). Readmission labels are derived per visit from
admission-day gaps. The synthetic generator plants cohort structure: each
cohort owns a block of diagnosis codes under a 3-level ontology, and each
cohort shifts the per-visit readmission probability, so both the clustering
signal and the outcome signal have a known ground truth.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, ValidationError
from .ontology import OntologyNode, OntologyTree
from .rng import stream
from .validation import check_probability

DIAGNOSIS = "diagnosis"
MEDICATION = "medication"
LAB = "lab"
CODE_KINDS = (DIAGNOSIS, MEDICATION, LAB)

_KIND_TO_JSON = {DIAGNOSIS: "dx", MEDICATION: "rx", LAB: "lab"}
_JSON_TO_KIND = {v: k for k, v in _KIND_TO_JSON.items()}

# Synthetic visit chains are capped; beyond this the final visit is labeled 0.
_MAX_SYNTHETIC_VISITS = 20

_BLOCK_NAMES = (
    "cardiac", "renal", "hepatic", "pulmonary", "neural", "vascular",
    "metabolic", "immune", "dermal", "skeletal", "gastric", "ocular",
)


@dataclass(frozen=True)
class MedicalCode:
    kind: str
    id: str
    vocab_index: int

    def __post_init__(self):
        if self.kind not in CODE_KINDS:
            raise ValidationError(f"unknown code kind {self.kind!r}")
        if not self.id:
            raise ValidationError("code id must be non-empty")
        if self.vocab_index < 0:
            raise ValidationError("vocab_index must be non-negative")


@dataclass(frozen=True)
class Visit:
    visit_id: str
    admit_day: int
    diagnosis_codes: frozenset
    medication_codes: frozenset
    lab_codes: frozenset
    readmit_label: int | None = None

    def codes(self, kind: str) -> frozenset:
        if kind == DIAGNOSIS:
            return self.diagnosis_codes
        if kind == MEDICATION:
            return self.medication_codes
        if kind == LAB:
            return self.lab_codes
        raise ValidationError(f"unknown code kind {kind!r}")


@dataclass(frozen=True)
class Patient:
    patient_id: str
    gender: str
    age: int
    visits: tuple

    def __post_init__(self):
        if self.gender not in ("M", "F"):
            raise ValidationError(
                f"patient {self.patient_id!r}: gender must be 'M' or 'F', got {self.gender!r}"
            )
        if not 0 <= self.age <= 120:
            raise ValidationError(
                f"patient {self.patient_id!r}: age must be in [0, 120], got {self.age}"
            )
        if not self.visits:
            raise ValidationError(f"patient {self.patient_id!r} has no visits")

    def diagnosis_union(self) -> frozenset:
        """Union of diagnosis code ids over all visits."""
        out = set()
        for visit in self.visits:
            out.update(code.id for code in visit.diagnosis_codes)
        return frozenset(out)


@dataclass
class Dataset:
    patients: tuple
    vocabularies: dict  # kind -> {code id -> vocab_index}
    ontology: OntologyTree | None = None
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {}
        for patient in self.patients:
            if patient.patient_id in self._by_id:
                raise ValidationError(f"duplicate patient_id {patient.patient_id!r}")
            self._by_id[patient.patient_id] = patient

    def __len__(self) -> int:
        return len(self.patients)

    def patient(self, patient_id: str) -> Patient:
        if patient_id not in self._by_id:
            raise ValidationError(f"unknown patient_id {patient_id!r}")
        return self._by_id[patient_id]

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def vocab_size(self, kind: str) -> int:
        return len(self.vocabularies.get(kind, {}))


def _build_vocabularies(raw_codes: dict) -> dict:
    """Sorted code ids per kind -> stable vocab indices."""
    return {
        kind: {cid: k for k, cid in enumerate(sorted(raw_codes[kind]))}
        for kind in CODE_KINDS
    }


def _make_code_set(ids, kind: str, vocab: dict) -> frozenset:
    return frozenset(MedicalCode(kind, cid, vocab[kind][cid]) for cid in set(ids))


def _sorted_visits(visits) -> tuple:
    return tuple(sorted(visits, key=lambda v: (v.admit_day, v.visit_id)))


def load_patients(path, ontology: OntologyTree | None = None) -> Dataset:
    """Read patient JSONL; builds per-kind vocabularies from observed codes."""
    raw_records = []
    raw_codes = {kind: set() for kind in CODE_KINDS}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ParseError(f"{path}: line {lineno}: expected an object")
            for key in ("patient_id", "gender", "age", "visits"):
                if key not in record:
                    raise ParseError(f"{path}: line {lineno}: missing field {key!r}")
            for visit in record["visits"]:
                for json_key in ("visit_id", "admit_day", "dx", "rx", "lab"):
                    if json_key not in visit:
                        raise ParseError(
                            f"{path}: line {lineno}: visit missing field {json_key!r}"
                        )
                for json_key, kind in _JSON_TO_KIND.items():
                    raw_codes[kind].update(visit[json_key])
            raw_records.append((lineno, record))

    vocab = _build_vocabularies(raw_codes)
    patients = []
    seen_ids = set()
    for lineno, record in raw_records:
        pid = record["patient_id"]
        if pid in seen_ids:
            raise ValidationError(f"{path}: line {lineno}: duplicate patient_id {pid!r}")
        seen_ids.add(pid)
        visits = []
        for raw_visit in record["visits"]:
            visits.append(Visit(
                visit_id=str(raw_visit["visit_id"]),
                admit_day=int(raw_visit["admit_day"]),
                diagnosis_codes=_make_code_set(raw_visit["dx"], DIAGNOSIS, vocab),
                medication_codes=_make_code_set(raw_visit["rx"], MEDICATION, vocab),
                lab_codes=_make_code_set(raw_visit["lab"], LAB, vocab),
            ))
        patients.append(Patient(
            patient_id=str(pid),
            gender=record["gender"],
            age=int(record["age"]),
            visits=_sorted_visits(visits),
        ))
    return Dataset(patients=tuple(patients), vocabularies=vocab, ontology=ontology)


def save_patients(dataset: Dataset, path) -> None:
    """Write patient JSONL with a stable field order (labels are not serialized)."""
    with open(path, "w", encoding="utf-8") as fh:
        for patient in dataset.patients:
            record = {
                "patient_id": patient.patient_id,
                "gender": patient.gender,
                "age": patient.age,
                "visits": [
                    {
                        "visit_id": v.visit_id,
                        "admit_day": v.admit_day,
                        "dx": sorted(c.id for c in v.diagnosis_codes),
                        "rx": sorted(c.id for c in v.medication_codes),
                        "lab": sorted(c.id for c in v.lab_codes),
                    }
                    for v in patient.visits
                ],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def derive_readmission_labels(dataset: Dataset, window_days: int = 30) -> Dataset:
    """Label each visit 1 iff the next admission falls within window_days.

    A patient's final visit is labeled 0: no subsequent admission is observable.
    """
    patients = []
    for patient in dataset.patients:
        visits = list(patient.visits)
        labeled = []
        for k, visit in enumerate(visits):
            if k + 1 < len(visits):
                gap = visits[k + 1].admit_day - visit.admit_day
                label = 1 if gap <= window_days else 0
            else:
                label = 0
            labeled.append(replace(visit, readmit_label=label))
        patients.append(replace(patient, visits=tuple(labeled)))
    return Dataset(patients=tuple(patients), vocabularies=dataset.vocabularies,
                   ontology=dataset.ontology)


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Patient-level split, deterministic by seed; every part is non-empty."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be 3 positive reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got sum {sum(ratios)}")
    n = len(dataset.patients)
    if n < 3:
        raise ValidationError(f"need at least 3 patients to split, got {n}")

    sizes = [int(n * r) for r in ratios]
    fractions = [n * r - s for r, s in zip(ratios, sizes)]
    for _ in range(n - sum(sizes)):
        k = int(np.argmax(fractions))
        sizes[k] += 1
        fractions[k] = -1.0
    while min(sizes) == 0:
        sizes[int(np.argmax(sizes))] -= 1
        sizes[sizes.index(0)] += 1

    order = stream(seed, "split").permutation(n)
    bounds = (sizes[0], sizes[0] + sizes[1])
    groups = (order[:bounds[0]], order[bounds[0]:bounds[1]], order[bounds[1]:])
    out = []
    for idx in groups:
        chosen = tuple(dataset.patients[i] for i in sorted(idx))
        out.append(Dataset(patients=chosen, vocabularies=dataset.vocabularies,
                           ontology=dataset.ontology))
    return tuple(out)


@dataclass
class SyntheticSpec:
    """Knobs for the planted-cohort generator.

    readmit_cohort_shift is either a per-cohort list of probability offsets or a
    single non-negative spread s, expanded to evenly spaced shifts in [-s, +s].
    block_size (codes owned by each cohort) defaults to 2*codes_per_cohort - 1,
    which guarantees any two same-cohort visits share at least one code.
    """

    n_patients: int = 2000
    n_planted_cohorts: int = 8
    codes_per_cohort: int = 3
    noise_rate: float = 0.1
    readmit_base_rate: float = 0.25
    readmit_cohort_shift: object = 0.0
    visits_per_patient_mean: float = 1.4
    seed: int = 0
    block_size: int | None = None


def _normalize_shifts(spec: SyntheticSpec) -> np.ndarray:
    raw = spec.readmit_cohort_shift
    if isinstance(raw, (int, float)):
        spread = float(raw)
        if spread < 0:
            raise ValidationError("scalar readmit_cohort_shift must be non-negative")
        shifts = np.linspace(-spread, spread, spec.n_planted_cohorts)
    else:
        shifts = np.asarray([float(x) for x in raw], dtype=np.float64)
        if len(shifts) != spec.n_planted_cohorts:
            raise ValidationError(
                f"readmit_cohort_shift needs {spec.n_planted_cohorts} entries, got {len(shifts)}"
            )
    for sh in shifts:
        rate = spec.readmit_base_rate + sh
        if rate < 0.0 or rate > 1.0:
            raise ValidationError(f"base rate + shift = {rate:.4f} falls outside [0, 1]")
    return shifts


def _synthetic_ontology(n_cohorts: int, block_size: int) -> OntologyTree:
    nodes = {"root": OntologyNode("root", None, "clinical findings")}
    for b in range(n_cohorts):
        cycle, pos = divmod(b, len(_BLOCK_NAMES))
        name = _BLOCK_NAMES[pos] + (str(cycle + 1) if cycle else "")
        block_id = f"grp{b:02d}"
        nodes[block_id] = OntologyNode(block_id, "root", f"{name} disorders")
        for j in range(block_size):
            leaf_id = f"{b:03d}.{j}"
            nodes[leaf_id] = OntologyNode(leaf_id, block_id, f"{name} disorder variant {j}")
    return OntologyTree(nodes)


def generate_synthetic(spec: SyntheticSpec):
    """Generate (Dataset, OntologyTree, planted patient_id -> cohort index).

    Per-visit readmission labels are sampled at base_rate + shift(cohort) and
    realized through admission-day gaps (label 1 forces the next admission
    within 30 days), so derive_readmission_labels reproduces them exactly.
    Continuation after a non-readmission visit is tuned toward
    visits_per_patient_mean; cohorts whose readmission rate alone implies a
    longer chain will exceed that mean.
    """
    if spec.n_patients < 1:
        raise ValidationError("n_patients must be >= 1")
    if spec.n_planted_cohorts < 2:
        raise ValidationError("n_planted_cohorts must be >= 2")
    if spec.codes_per_cohort < 1:
        raise ValidationError("codes_per_cohort must be >= 1")
    if spec.visits_per_patient_mean < 1.0:
        raise ValidationError("visits_per_patient_mean must be >= 1")
    check_probability(spec.noise_rate, "noise_rate")
    check_probability(spec.readmit_base_rate, "readmit_base_rate")
    shifts = _normalize_shifts(spec)

    block_size = spec.block_size
    if block_size is None:
        block_size = max(1, 2 * spec.codes_per_cohort - 1)
    if spec.codes_per_cohort > block_size:
        raise ValidationError(
            f"codes_per_cohort={spec.codes_per_cohort} exceeds the feasible vocabulary "
            f"(block_size={block_size})"
        )

    tree = _synthetic_ontology(spec.n_planted_cohorts, block_size)
    blocks = [
        [f"{b:03d}.{j}" for j in range(block_size)]
        for b in range(spec.n_planted_cohorts)
    ]
    all_codes = [cid for block in blocks for cid in block]

    rng = stream(spec.seed, "synthetic-data")
    rates = spec.readmit_base_rate + shifts
    target_cont = 1.0 - 1.0 / spec.visits_per_patient_mean
    cont_given_no_readmit = np.clip(
        (target_cont - rates) / np.maximum(1e-12, 1.0 - rates), 0.0, 1.0
    )

    raw_patients = []
    planted = {}
    raw_codes = {kind: set() for kind in CODE_KINDS}
    for p in range(spec.n_patients):
        pid = f"p{p:05d}"
        cohort = int(rng.integers(spec.n_planted_cohorts))
        planted[pid] = cohort
        gender = "M" if rng.random() < 0.5 else "F"
        age = int(rng.integers(20, 91))

        day = int(rng.integers(0, 3651))
        visits = []
        while True:
            picks = rng.choice(block_size, size=spec.codes_per_cohort, replace=False)
            dx = {blocks[cohort][i] for i in picks}
            n_noise = int(rng.binomial(spec.codes_per_cohort, spec.noise_rate))
            for _ in range(n_noise):
                dx.add(all_codes[int(rng.integers(len(all_codes)))])
            at_cap = len(visits) + 1 >= _MAX_SYNTHETIC_VISITS
            label = 0 if at_cap else int(rng.random() < rates[cohort])
            visits.append((day, sorted(dx), label))
            raw_codes[DIAGNOSIS].update(dx)
            if at_cap:
                break
            if label == 1:
                day += int(rng.integers(1, 31))
            elif rng.random() < cont_given_no_readmit[cohort]:
                day += int(rng.integers(31, 367))
            else:
                break
        raw_patients.append((pid, gender, age, visits))

    vocab = _build_vocabularies(raw_codes)
    patients = []
    for pid, gender, age, visits in raw_patients:
        built = tuple(
            Visit(
                visit_id=f"{pid}-v{k:03d}",
                admit_day=day,
                diagnosis_codes=_make_code_set(dx, DIAGNOSIS, vocab),
                medication_codes=frozenset(),
                lab_codes=frozenset(),
                readmit_label=label,
            )
            for k, (day, dx, label) in enumerate(visits)
        )
        patients.append(Patient(patient_id=pid, gender=gender, age=age, visits=built))

    dataset = Dataset(patients=tuple(patients), vocabularies=vocab, ontology=tree)
    return dataset, tree, planted

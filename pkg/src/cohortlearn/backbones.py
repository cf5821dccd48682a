"""Backbone encoders producing initial per-visit sample representations.

A backbone maps a patient's visit sequence to one vector per visit. Two
reference backbones ship: a code-embedding MLP that encodes each visit
independently, and a forward recurrent encoder whose state at visit t sees
visits 1..t only. Backbones register by name; construction goes through the
registry so the training harness can select one from config. A linear adapter
is inserted automatically when a backbone's native width differs from the
requested representation width.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import CODE_KINDS, DIAGNOSIS, LAB, MEDICATION, Patient
from .errors import ConfigError, RegistrationError, ValidationError


@dataclass
class VisitBatch:
    """Padded per-visit multi-hot inputs for a list of patients.

    Tensors are [n_patients, max_visits, vocab_size] per code kind, plus the
    true visit counts. Positions past a patient's length are zero.
    """

    diagnosis: torch.Tensor
    medication: torch.Tensor
    lab: torch.Tensor
    lengths: torch.Tensor

    @property
    def n_patients(self) -> int:
        return self.diagnosis.shape[0]

    @property
    def max_visits(self) -> int:
        return self.diagnosis.shape[1]


def visit_batch_from_patients(patients, vocabularies: dict, dtype=torch.float32) -> VisitBatch:
    """Build the padded multi-hot tensors for `patients` (order preserved)."""
    if not patients:
        raise ValidationError("need at least one patient")
    tmax = max(len(p.visits) for p in patients)
    n = len(patients)
    sizes = {kind: len(vocabularies.get(kind, {})) for kind in CODE_KINDS}
    arrays = {kind: np.zeros((n, tmax, sizes[kind]), dtype=np.float64) for kind in CODE_KINDS}
    lengths = np.zeros(n, dtype=np.int64)
    for row, patient in enumerate(patients):
        lengths[row] = len(patient.visits)
        for t, visit in enumerate(patient.visits):
            for kind in CODE_KINDS:
                for code in visit.codes(kind):
                    if code.vocab_index >= sizes[kind]:
                        raise ValidationError(
                            f"code {code.id!r} index {code.vocab_index} outside "
                            f"{kind} vocabulary of size {sizes[kind]}"
                        )
                    arrays[kind][row, t, code.vocab_index] = 1.0
    return VisitBatch(
        diagnosis=torch.as_tensor(arrays[DIAGNOSIS], dtype=dtype),
        medication=torch.as_tensor(arrays[MEDICATION], dtype=dtype),
        lab=torch.as_tensor(arrays[LAB], dtype=dtype),
        lengths=torch.as_tensor(lengths),
    )


class Backbone(nn.Module):
    """Base contract: forward(batch) -> [n_patients, max_visits, native_dim]."""

    name = "base"
    native_dim = 0

    def forward(self, batch: VisitBatch) -> torch.Tensor:  # pragma: no cover
        raise NotImplementedError


class CodeMLPBackbone(Backbone):
    """Per-kind code embedding sums -> affine -> tanh -> affine, per visit."""

    name = "code_mlp"

    def __init__(self, d: int, vocab_sizes: dict, dtype=torch.float32):
        super().__init__()
        self.native_dim = d
        self.embed_dx = nn.Parameter(torch.zeros(vocab_sizes.get(DIAGNOSIS, 0), d, dtype=dtype))
        self.embed_rx = nn.Parameter(torch.zeros(vocab_sizes.get(MEDICATION, 0), d, dtype=dtype))
        self.embed_lab = nn.Parameter(torch.zeros(vocab_sizes.get(LAB, 0), d, dtype=dtype))
        self.hidden = nn.Linear(3 * d, d, dtype=dtype)
        self.out = nn.Linear(d, d, dtype=dtype)

    def forward(self, batch: VisitBatch) -> torch.Tensor:
        parts = [
            batch.diagnosis @ self.embed_dx,
            batch.medication @ self.embed_rx,
            batch.lab @ self.embed_lab,
        ]
        x = torch.cat(parts, dim=-1)
        return self.out(torch.tanh(self.hidden(x)))


class SeqGRUBackbone(Backbone):
    """Code-set projection + forward recurrence; state at visit t sees visits 1..t."""

    name = "seq_gru"

    def __init__(self, d: int, vocab_sizes: dict, dtype=torch.float32):
        super().__init__()
        self.native_dim = d
        in_width = sum(vocab_sizes.get(kind, 0) for kind in CODE_KINDS)
        self.project = nn.Linear(in_width, d)
        self.gru = nn.GRU(d, d, batch_first=True)
        self.to(dtype)

    def forward(self, batch: VisitBatch) -> torch.Tensor:
        x = torch.cat([batch.diagnosis, batch.medication, batch.lab], dim=-1)
        states, _ = self.gru(self.project(x))
        return states


class AdaptedBackbone(Backbone):
    """Wraps a backbone whose native width differs from the requested one."""

    def __init__(self, inner: Backbone, d: int, dtype=torch.float32):
        super().__init__()
        self.name = inner.name
        self.native_dim = d
        self.inner = inner
        self.adapter = nn.Linear(inner.native_dim, d, dtype=dtype)

    def forward(self, batch: VisitBatch) -> torch.Tensor:
        return self.adapter(self.inner(batch))


_REGISTRY: dict = {}


def register_backbone(name: str, factory) -> None:
    """factory(d, vocab_sizes, dtype) -> Backbone. Names are single-use."""
    if name in _REGISTRY:
        raise RegistrationError(f"backbone {name!r} is already registered")
    _REGISTRY[name] = factory


def registered_backbones() -> list:
    return sorted(_REGISTRY)


def create_backbone(name: str, d: int, vocab_sizes: dict, dtype=torch.float32) -> Backbone:
    if name not in _REGISTRY:
        raise ConfigError(
            f"unknown backbone {name!r}; registered: {', '.join(registered_backbones())}"
        )
    backbone = _REGISTRY[name](d, vocab_sizes, dtype)
    if backbone.native_dim != d:
        backbone = AdaptedBackbone(backbone, d, dtype=dtype)
    return backbone


register_backbone("code_mlp", CodeMLPBackbone)
register_backbone("seq_gru", SeqGRUBackbone)


def backbone_encode(backbone: Backbone, patient: Patient, visit_index: int,
                    vocabularies: dict) -> np.ndarray:
    """Initial representation of one visit (with its patient context)."""
    if not 0 <= visit_index < len(patient.visits):
        raise ValidationError(
            f"visit_index {visit_index} out of range for patient "
            f"{patient.patient_id!r} with {len(patient.visits)} visits"
        )
    dtype = next(backbone.parameters()).dtype
    batch = visit_batch_from_patients([patient], vocabularies, dtype=dtype)
    with torch.no_grad():
        states = backbone(batch)
    return states[0, visit_index].numpy()

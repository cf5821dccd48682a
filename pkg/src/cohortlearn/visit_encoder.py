"""Visit-level feature encoder.

A visit is summarized from its three code families: medications and lab tests
enter as multi-hot vectors through per-family affine projections; diagnoses
enter through the frozen two-view code features (tree walk + semantics)
projected by a trainable affine map and mean-pooled over the visit's codes.
The family features are merged by two further affine maps into the final
visit feature F(v). The stack is purely affine by default; `use_tanh` inserts
tanh after the two merge maps.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Visit
from .errors import ValidationError


def _linear(in_dim: int, out_dim: int, dtype) -> nn.Linear:
    """nn.Linear that stays quiet for legal width-0 inputs (empty vocabularies)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return nn.Linear(in_dim, out_dim, dtype=dtype)


def encode_code_multihot(codes, kind: str, vocab_size: int) -> np.ndarray:
    """Multi-hot vector over the kind's vocabulary (1 at each member's index)."""
    out = np.zeros(vocab_size, dtype=np.float32)
    for code in codes:
        if code.kind != kind:
            raise ValidationError(f"code {code.id!r} has kind {code.kind!r}, expected {kind!r}")
        if code.vocab_index >= vocab_size:
            raise ValidationError(
                f"code {code.id!r} index {code.vocab_index} >= vocab size {vocab_size}"
            )
        out[code.vocab_index] = 1.0
    return out


@dataclass(frozen=True)
class VisitFeature:
    visit_id: str
    vector: np.ndarray


class CodeViewProjection(nn.Module):
    """Trainable affine map over the frozen concat(node, word) code features."""

    def __init__(self, in_dim: int, out_dim: int, dtype=torch.float32):
        super().__init__()
        self.proj = nn.Linear(in_dim, out_dim, dtype=dtype)

    def forward(self, code_features: torch.Tensor) -> torch.Tensor:
        return self.proj(code_features)


class VisitEncoder(nn.Module):
    """Multi-hot med/lab branches + pooled diagnosis branch -> visit feature.

    Empty med/lab vocabularies are legal: a width-0 multi-hot contributes only
    the branch bias, keeping a single code path for datasets without those
    code families.
    """

    def __init__(self, med_vocab: int, lab_vocab: int, code_feature_dim: int,
                 d: int, use_tanh: bool = False, dtype=torch.float32):
        super().__init__()
        self.d = d
        self.med_vocab = med_vocab
        self.lab_vocab = lab_vocab
        self.use_tanh = use_tanh
        self.med_proj = _linear(med_vocab, d, dtype)
        self.lab_proj = _linear(lab_vocab, d, dtype)
        self.dx_proj = nn.Linear(code_feature_dim, d, dtype=dtype)
        self.code_merge = nn.Linear(2 * d, d, dtype=dtype)
        self.visit_merge = nn.Linear(2 * d, d, dtype=dtype)

    def forward(self, med_multihot: torch.Tensor, lab_multihot: torch.Tensor,
                dx_feature: torch.Tensor) -> torch.Tensor:
        med = self.med_proj(med_multihot)
        lab = self.lab_proj(lab_multihot)
        dx = self.dx_proj(dx_feature)
        inter = self.code_merge(torch.cat([med, lab], dim=-1))
        if self.use_tanh:
            inter = torch.tanh(inter)
        out = self.visit_merge(torch.cat([inter, dx], dim=-1))
        if self.use_tanh:
            out = torch.tanh(out)
        return out


def encode_visit(visit: Visit, encoder: VisitEncoder, dx_feature_fn) -> VisitFeature:
    """Encode one visit; dx_feature_fn maps the diagnosis code set to its pooled feature."""
    if not visit.diagnosis_codes:
        raise ValidationError(f"visit {visit.visit_id!r} has no diagnosis codes")
    med = encode_code_multihot(visit.medication_codes, "medication", encoder.med_vocab)
    lab = encode_code_multihot(visit.lab_codes, "lab", encoder.lab_vocab)
    dx_feature = np.asarray(dx_feature_fn(visit.diagnosis_codes), dtype=np.float64)
    dtype = encoder.visit_merge.weight.dtype
    with torch.no_grad():
        vector = encoder(
            torch.as_tensor(med, dtype=dtype).unsqueeze(0),
            torch.as_tensor(lab, dtype=dtype).unsqueeze(0),
            torch.as_tensor(dx_feature, dtype=dtype).unsqueeze(0),
        )[0]
    return VisitFeature(visit_id=visit.visit_id, vector=vector.numpy())

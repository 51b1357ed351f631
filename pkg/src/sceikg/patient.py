"""Per-visit patient modeling.

A visit contributes three signals: free-text condition notes, a multi-hot
symptom set, and (after prescribing) a herb set. The condition encoder
pools token states from a pluggable text encoder; the symptom embedding is
a row-sum over the shared entity codes; a two-token self-attention fuses
the symptom vector with the carried-over state; a recurrent cell threads
the patient across visits; and the transition module predicts the
post-medication state that seeds the next visit.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

DTYPE = torch.float64

PAD_TOKEN = 0
BEGIN_TOKEN = 1
RESERVED_TOKENS = 2


@dataclass
class VisitRecord:
    text: str
    symptoms: list[int]
    herbs: list[int]
    is_pad: bool = False

    def __post_init__(self):
        if not self.is_pad and not self.text and not self.symptoms:
            raise ValueError("a real visit needs text or at least one symptom")


@dataclass
class PatientHistory:
    patient_id: str
    visits: list[VisitRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")

    def __len__(self) -> int:
        return len(self.visits)


def load_patients(path: str | Path, max_symptom_id: int | None = None,
                  max_herb_id: int | None = None) -> list[PatientHistory]:
    """Read one patient per JSON line; ids are validated when bounds are given.

    Herb ids in the file use the shared entity index space (offset by the
    symptom count); symptom bounds check `0 <= id < M` and herbs
    `M <= id < M + N` when the bounds are supplied as (M, M + N).
    """
    patients = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            visits = []
            for v in obj["visits"]:
                for s in v["symptoms"]:
                    if max_symptom_id is not None and not (0 <= s < max_symptom_id):
                        raise ValueError(f"patients line {lineno}: symptom id {s} out of range")
                for h in v["herbs"]:
                    if max_herb_id is not None and not (
                            (max_symptom_id or 0) <= h < max_herb_id):
                        raise ValueError(f"patients line {lineno}: herb id {h} out of range")
                visits.append(VisitRecord(v.get("text", ""), list(v["symptoms"]), list(v["herbs"])))
            patients.append(PatientHistory(str(obj["patient_id"]), visits))
    return patients


def save_patients(patients: list[PatientHistory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in patients:
            obj = {"patient_id": p.patient_id,
                   "visits": [{"text": v.text, "symptoms": v.symptoms, "herbs": v.herbs}
                              for v in p.visits]}
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# text encoding


def hash_tokenize(text: str, max_tokens: int, buckets: int) -> tuple[list[int], list[bool]]:
    """Whitespace-split, crc32-hash into buckets, truncate/pad to max_tokens.

    Empty text falls back to the begin token alone so every visit yields at
    least one pooled state.
    """
    words = text.split()
    if not words:
        ids = [BEGIN_TOKEN]
    else:
        ids = [RESERVED_TOKENS + (zlib.crc32(w.encode("utf-8")) % buckets) for w in words]
    ids = ids[:max_tokens]
    mask = [True] * len(ids)
    while len(ids) < max_tokens:
        ids.append(PAD_TOKEN)
        mask.append(False)
    return ids, mask


class HashedTextEncoder(nn.Module):
    """Trainable embedding-plus-position token encoder.

    Stands in for a pretrained contextual encoder at desk scale; anything
    producing (batch, tokens, width) states behind the same `encode`
    signature can be slotted in.
    """

    def __init__(self, buckets: int = 4096, width: int = 64, max_tokens: int = 128,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        self.buckets = buckets
        self.width = width
        self.max_tokens = max_tokens
        self.token_embed = nn.Parameter(torch.empty(buckets + RESERVED_TOKENS, width, dtype=dtype))
        self.position_embed = nn.Parameter(torch.empty(max_tokens, width, dtype=dtype))
        nn.init.xavier_uniform_(self.token_embed)
        nn.init.xavier_uniform_(self.position_embed)

    def tokenize(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids, masks = [], []
        for text in texts:
            i, m = hash_tokenize(text, self.max_tokens, self.buckets)
            ids.append(i)
            masks.append(m)
        return torch.tensor(ids, dtype=torch.int64), torch.tensor(masks, dtype=torch.bool)

    def encode(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(batch, tokens) ids -> (batch, tokens, width) states."""
        return self.token_embed[token_ids] + self.position_embed[: token_ids.shape[1]]


class ConditionEncoder(nn.Module):
    """Attention-pool token states and map them into the entity-code space."""

    def __init__(self, text_encoder: HashedTextEncoder, out_dim: int, dropout: float = 0.5,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        self.text_encoder = text_encoder
        self.pool_score = nn.Linear(text_encoder.width, 1, dtype=dtype)
        self.project = nn.Linear(text_encoder.width, out_dim, dtype=dtype)
        self.dropout = nn.Dropout(dropout)
        nn.init.xavier_uniform_(self.pool_score.weight)
        nn.init.xavier_uniform_(self.project.weight)

    def forward(self, texts: list[str], return_pool_weights: bool = False):
        token_ids, mask = self.text_encoder.tokenize(texts)
        states = self.text_encoder.encode(token_ids)
        logits = self.pool_score(states).squeeze(-1)
        logits = logits.masked_fill(~mask, -torch.inf)
        weights = torch.softmax(logits, dim=1)
        pooled = (weights.unsqueeze(-1) * states).sum(dim=1)
        out = self.dropout(self.project(pooled))
        if return_pool_weights:
            return out, weights
        return out


# ---------------------------------------------------------------------------
# per-visit blocks


def encode_symptoms(symptom_hot: torch.Tensor, symptom_codes: torch.Tensor) -> torch.Tensor:
    """Sum the entity-code rows of active symptoms: (.., M) x (M, D) -> (.., D)."""
    if symptom_hot.shape[-1] != symptom_codes.shape[0]:
        raise ValueError(
            f"symptom vector of length {symptom_hot.shape[-1]} does not match "
            f"table with {symptom_codes.shape[0]} rows")
    return symptom_hot.to(symptom_codes.dtype) @ symptom_codes


class FusePair(nn.Module):
    """Fuse the symptom vector with the carried state as a 2-token sequence.

    Scaled dot-product self-attention over the two tokens (no projections),
    then an affine map from the concatenated attended tokens back to width D.
    """

    def __init__(self, dim: int, leaky_slope: float = 0.2, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.dim = dim
        self.combine = nn.Linear(2 * dim, dim, dtype=dtype)
        self.act = nn.LeakyReLU(leaky_slope)
        nn.init.xavier_uniform_(self.combine.weight)

    def forward(self, symptom_vec: torch.Tensor, carried: torch.Tensor) -> torch.Tensor:
        tokens = torch.stack([symptom_vec, carried], dim=-2)  # (..., 2, D)
        scores = tokens @ tokens.transpose(-1, -2) / self.dim ** 0.5
        attn = torch.softmax(scores, dim=-1)
        attended = attn @ tokens
        flat = attended.flatten(start_dim=-2)
        return self.act(self.combine(flat))


class RecurrentState(nn.Module):
    """LSTM cell over fused visit inputs, projected into the entity-code space."""

    def __init__(self, dim: int, hidden_dim: int = 64, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.cell = nn.LSTMCell(dim, hidden_dim)
        self.cell.to(dtype)
        self.project = nn.Linear(hidden_dim, dim, dtype=dtype)
        nn.init.xavier_uniform_(self.cell.weight_ih)
        nn.init.xavier_uniform_(self.cell.weight_hh)
        nn.init.xavier_uniform_(self.project.weight)

    def initial_carry(self, batch: int, dtype: torch.dtype = DTYPE) -> tuple[torch.Tensor, torch.Tensor]:
        z = torch.zeros(batch, self.hidden_dim, dtype=dtype)
        return z, z.clone()

    def forward(self, fused: torch.Tensor, carry: tuple[torch.Tensor, torch.Tensor]):
        h, c = carry
        if h.shape[-1] != self.hidden_dim or c.shape[-1] != self.hidden_dim:
            raise ValueError(f"carry width must be {self.hidden_dim}")
        h_next, c_next = self.cell(fused, (h, c))
        return self.project(h_next), (h_next, c_next)


def match_herbs(patient_vec: torch.Tensor, herb_codes: torch.Tensor) -> torch.Tensor:
    """Sigmoid of the inner product against every herb row: scores in (0, 1)."""
    return torch.sigmoid(patient_vec @ herb_codes.T)


class TransitionModule(nn.Module):
    """Post-medication state: conv-mixed herb vector, interaction, affine merge.

    The weighted herb mix (weights x herb codes) is convolved along the
    feature axis (kernel 3, same padding, one channel), multiplied into the
    patient vector for the interaction term, and the three pieces are
    concatenated and mapped back to width D.
    """

    def __init__(self, dim: int, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel_size=3, padding=1)
        self.conv.to(dtype)
        self.merge = nn.Linear(3 * dim, dim, dtype=dtype)
        nn.init.xavier_uniform_(self.merge.weight)

    def forward(self, patient_vec: torch.Tensor, herb_weights: torch.Tensor,
                herb_codes: torch.Tensor) -> torch.Tensor:
        mixed = herb_weights.to(herb_codes.dtype) @ herb_codes        # (..., D)
        squeeze = mixed.dim() == 1
        if squeeze:
            mixed = mixed.unsqueeze(0)
            patient_vec = patient_vec.unsqueeze(0)
        herb_vec = self.conv(mixed.unsqueeze(1)).squeeze(1)
        out = self.merge(torch.cat([patient_vec, patient_vec * herb_vec, herb_vec], dim=-1))
        return out.squeeze(0) if squeeze else out

"""The assembled recommendation model.

Owns the embedding tables, the propagation stack, the condition/fuse/
recurrent/transition blocks, and the (constant-per-epoch) propagation
matrix. The per-visit loop threads the recurrent carry and the
post-medication state across a padded batch of patients; padded visits
bypass every state update so trailing pads are inert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .config import TrainConfig
from .encoder import DTYPE, EmbeddingTables, PropagationStack, encode_all
from .patient import (
    ConditionEncoder,
    FusePair,
    HashedTextEncoder,
    PatientHistory,
    RecurrentState,
    TransitionModule,
    encode_symptoms,
    match_herbs,
)


@dataclass
class PaddedBatch:
    """ζ patients stacked to a common visit count with a real-visit mask.

    ``herbs`` uses local herb indices (entity id minus the symptom count).
    """

    patient_ids: list[str]
    texts: list[list[str]]            # [patient][visit]
    symptoms: torch.Tensor            # (B, T, M) float
    herbs: torch.Tensor               # (B, T, N) float
    mask: torch.Tensor                # (B, T) bool

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    @property
    def max_visits(self) -> int:
        return self.mask.shape[1]


def pad_batch(histories: list[PatientHistory], num_symptoms: int, num_herbs: int
              ) -> PaddedBatch:
    """Stack patients to the longest visit count in the batch."""
    if not histories:
        raise ValueError("cannot pad an empty batch")
    B = len(histories)
    T = max(len(p) for p in histories)
    symptoms = torch.zeros(B, T, num_symptoms, dtype=DTYPE)
    herbs = torch.zeros(B, T, num_herbs, dtype=DTYPE)
    mask = torch.zeros(B, T, dtype=torch.bool)
    texts = []
    for b, patient in enumerate(histories):
        row = []
        for t, visit in enumerate(patient.visits):
            for s in visit.symptoms:
                symptoms[b, t, s] = 1.0
            for h in visit.herbs:
                local = h - num_symptoms
                if not (0 <= local < num_herbs):
                    raise ValueError(f"herb id {h} outside the herb block")
                herbs[b, t, local] = 1.0
            mask[b, t] = True
            row.append(visit.text)
        row.extend([""] * (T - len(patient.visits)))
        texts.append(row)
    return PaddedBatch([p.patient_id for p in histories], texts, symptoms, herbs, mask)


@dataclass
class VisitOutputs:
    patient_vecs: torch.Tensor     # (B, T, D) state before prescribing
    herb_scores: torch.Tensor      # (B, T, N) sigmoid matching scores
    post_states: torch.Tensor      # (B, T, D) transition output (zeros without sequence)
    fuse_partners: list[torch.Tensor] = field(default_factory=list)  # instrumentation


class SceikgModel(nn.Module):
    def __init__(self, num_entities: int, num_relations: int, num_symptoms: int,
                 num_herbs: int, config: TrainConfig):
        super().__init__()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.num_symptoms = num_symptoms
        self.num_herbs = num_herbs
        self.config = config
        D = config.out_dim
        self.tables = EmbeddingTables(num_entities, num_relations, config.embed_dim)
        self.stack = PropagationStack(config.embed_dim, config.layer_dims, config.leaky_slope)
        self.condition = ConditionEncoder(
            HashedTextEncoder(config.text_hash_buckets, config.text_embed_dim,
                              config.max_text_tokens),
            out_dim=D, dropout=config.dropout)
        self.fuse = FusePair(D, config.leaky_slope)
        self.recurrent = RecurrentState(D, config.hidden_dim)
        self.transition = TransitionModule(D)
        # propagation matrix as COO buffers so checkpoints carry it
        self.register_buffer("prop_indices", torch.zeros(2, 0, dtype=torch.int64))
        self.register_buffer("prop_values", torch.zeros(0, dtype=DTYPE))

    # -- propagation matrix ------------------------------------------------

    def set_propagation(self, sparse: torch.Tensor) -> None:
        sparse = sparse.coalesce()
        self.prop_indices = sparse.indices().clone()
        self.prop_values = sparse.values().detach().clone().to(DTYPE)

    def propagation_matrix(self) -> torch.Tensor:
        V = self.num_entities
        return torch.sparse_coo_tensor(self.prop_indices, self.prop_values, (V, V),
                                       check_invariants=False).coalesce()

    def encode_entities(self) -> torch.Tensor:
        return encode_all(self.tables, self.stack, self.propagation_matrix())

    def split_codes(self, entity_codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        M, N = self.num_symptoms, self.num_herbs
        return entity_codes[:M], entity_codes[M:M + N]

    # -- per-visit loop ------------------------------------------------------

    def forward_visits(self, batch: PaddedBatch, entity_codes: torch.Tensor,
                       sequence: bool = True, transition_input: str | None = None,
                       record_fuse_inputs: bool = False) -> VisitOutputs:
        """Run all visits, threading carry and post-medication state.

        With ``sequence=False`` every visit is scored independently: the
        carry resets to zero, the fuse partner is that visit's own condition
        text, and no transition is computed.
        """
        transition_input = transition_input or self.config.transition_input
        symptom_codes, herb_codes = self.split_codes(entity_codes)
        B, T = batch.mask.shape
        D = self.config.out_dim
        carry = self.recurrent.initial_carry(B)
        psi_prev: torch.Tensor | None = None
        phis, scores, psis = [], [], []
        fuse_partners: list[torch.Tensor] = []
        for t in range(T):
            mask_t = batch.mask[:, t].unsqueeze(-1).to(DTYPE)
            h_s = encode_symptoms(batch.symptoms[:, t], symptom_codes)
            if not sequence:
                partner = self.condition([row[t] for row in batch.texts])
                carry = self.recurrent.initial_carry(B)
            elif t == 0:
                partner = self.condition([row[0] for row in batch.texts])
            else:
                partner = psi_prev
            if record_fuse_inputs:
                fuse_partners.append(partner.detach().clone())
            fused = self.fuse(h_s, partner)
            phi, (h_new, c_new) = self.recurrent(fused, carry)
            if sequence:
                carry = (torch.where(mask_t.bool(), h_new, carry[0]),
                         torch.where(mask_t.bool(), c_new, carry[1]))
            score_t = match_herbs(phi, herb_codes)
            if sequence:
                herb_in = batch.herbs[:, t] if transition_input == "truth" else score_t
                psi = self.transition(phi, herb_in, herb_codes)
                psi_prev = psi if psi_prev is None else torch.where(mask_t.bool(), psi, psi_prev)
            else:
                psi = torch.zeros(B, D, dtype=DTYPE)
            phis.append(phi)
            scores.append(score_t)
            psis.append(psi)
        return VisitOutputs(torch.stack(phis, dim=1), torch.stack(scores, dim=1),
                            torch.stack(psis, dim=1), fuse_partners)

    # -- checkpointing -------------------------------------------------------

    def state_hash(self) -> str:
        import hashlib
        digest = hashlib.sha256()
        state = self.state_dict()
        for name in sorted(state):
            digest.update(name.encode("utf-8"))
            digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def checkpoint_payload(self, extra: dict | None = None) -> dict:
        from .config import config_hash, config_to_dict
        state = self.state_dict()
        payload = {
            "format_version": 1,
            "config": config_to_dict(self.config),
            "config_hash": config_hash(self.config),
            "counts": {"entities": self.num_entities, "relations": self.num_relations,
                       "symptoms": self.num_symptoms, "herbs": self.num_herbs},
            "shapes": {k: list(v.shape) for k, v in state.items()},
            "state": state,
            "state_hash": self.state_hash(),
        }
        if extra:
            payload.update(extra)
        return payload

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "SceikgModel":
        from .config import train_config_from_dict
        if payload.get("format_version") != 1:
            raise ValueError("unsupported checkpoint format")
        cfg = train_config_from_dict(payload["config"])
        counts = payload["counts"]
        model = cls(counts["entities"], counts["relations"], counts["symptoms"],
                    counts["herbs"], cfg)
        state = payload["state"]
        model.prop_indices = state["prop_indices"].clone()
        model.prop_values = state["prop_values"].clone()
        model.load_state_dict(state)
        return model

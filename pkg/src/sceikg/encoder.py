"""Entity representation learning over the interaction graph.

Two cooperating parts: attention-weighted neighborhood propagation that
refines entity features layer by layer, and a translation-plus-rotation
triple scorer whose pairwise loss completes missing graph links. Entity
codes are the concatenation of the input table with every layer output.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .kgstore import InteractionGraph

DTYPE = torch.float64


class EmbeddingTables(nn.Module):
    """Entity/relation embeddings plus one square transform per relation."""

    def __init__(self, num_entities: int, num_relations: int, embed_dim: int = 64,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.embed_dim = embed_dim
        self.entity = nn.Parameter(torch.empty(num_entities, embed_dim, dtype=dtype))
        self.relation = nn.Parameter(torch.empty(num_relations, embed_dim, dtype=dtype))
        self.rel_transform = nn.Parameter(
            torch.empty(num_relations, embed_dim, embed_dim, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / self.embed_dim ** 0.5
        nn.init.uniform_(self.entity, -bound, bound)
        nn.init.xavier_uniform_(self.relation)
        for r in range(self.num_relations):
            nn.init.xavier_uniform_(self.rel_transform[r])

    def project(self, relation_ids: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
        """Apply each relation's transform to its paired vector: W_r v."""
        T = self.rel_transform[relation_ids]
        return torch.einsum("nij,nj->ni", T, vectors)


class PropagationLayer(nn.Module):
    """One message-passing layer: additive and multiplicative neighbor mixing.

    Given neighbor aggregate N = W E, computes
    act((E + N @ mix_add) @ ff_add) + act((E * (N @ mix_mul)) @ ff_mul).
    """

    def __init__(self, in_dim: int, out_dim: int, leaky_slope: float = 0.2,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mix_add = nn.Parameter(torch.empty(in_dim, in_dim, dtype=dtype))
        self.mix_mul = nn.Parameter(torch.empty(in_dim, in_dim, dtype=dtype))
        self.ff_add = nn.Linear(in_dim, out_dim, dtype=dtype)
        self.ff_mul = nn.Linear(in_dim, out_dim, dtype=dtype)
        self.act = nn.LeakyReLU(leaky_slope)
        nn.init.xavier_uniform_(self.mix_add)
        nn.init.xavier_uniform_(self.mix_mul)
        nn.init.xavier_uniform_(self.ff_add.weight)
        nn.init.xavier_uniform_(self.ff_mul.weight)

    def forward(self, feats: torch.Tensor, weight_matrix: torch.Tensor) -> torch.Tensor:
        if feats.shape[1] != self.in_dim:
            raise ValueError(f"expected features of width {self.in_dim}, got {tuple(feats.shape)}")
        if weight_matrix.shape != (feats.shape[0], feats.shape[0]):
            raise ValueError(
                f"weight matrix {tuple(weight_matrix.shape)} does not match {feats.shape[0]} entities")
        if weight_matrix.is_sparse:
            agg = torch.sparse.mm(weight_matrix, feats)
        else:
            agg = weight_matrix @ feats
        add_part = self.act(self.ff_add(feats + agg @ self.mix_add))
        mul_part = self.act(self.ff_mul(feats * (agg @ self.mix_mul)))
        return add_part + mul_part


class PropagationStack(nn.Module):
    def __init__(self, in_dim: int, layer_dims: tuple[int, ...], leaky_slope: float = 0.2,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        dims = [in_dim, *layer_dims]
        self.layers = nn.ModuleList(
            PropagationLayer(dims[k], dims[k + 1], leaky_slope, dtype) for k in range(len(layer_dims)))

    @property
    def out_dim(self) -> int:
        return sum(layer.out_dim for layer in self.layers)


def graph_index_tensors(graph: InteractionGraph) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    heads, rels, tails = graph.triple_arrays()
    return (torch.from_numpy(heads), torch.from_numpy(rels), torch.from_numpy(tails))


def attention_update(graph: InteractionGraph, tables: EmbeddingTables) -> torch.Tensor:
    """Recompute propagation weights from the current tables.

    Each triple scores (W_r e_h + e_r) . (W_r e_t); scores are softmaxed over
    every (relation, tail) neighbor of the head, and duplicate (head, tail)
    cells are summed into a sparse V x V matrix. Isolated heads get empty rows.
    """
    V = graph.num_entities
    heads, rels, tails = graph_index_tensors(graph)
    if heads.numel() == 0:
        return torch.sparse_coo_tensor(torch.zeros(2, 0, dtype=torch.int64),
                                       torch.zeros(0, dtype=tables.entity.dtype),
                                       (V, V), check_invariants=False).coalesce()
    with torch.no_grad():
        q = tables.project(rels, tables.entity[heads]) + tables.relation[rels]
        k = tables.project(rels, tables.entity[tails])
        scores = (q * k).sum(dim=1)
        # softmax per head over all (r, t) neighbors
        head_max = torch.full((V,), -torch.inf, dtype=scores.dtype)
        head_max.scatter_reduce_(0, heads, scores, reduce="amax", include_self=True)
        expd = torch.exp(scores - head_max[heads])
        denom = torch.zeros(V, dtype=scores.dtype)
        denom.index_add_(0, heads, expd)
        weights = expd / denom[heads]
    idx = torch.stack([heads, tails])
    return torch.sparse_coo_tensor(idx, weights, (V, V), check_invariants=False).coalesce()


def encode_all(tables: EmbeddingTables, stack: PropagationStack,
               weight_matrix: torch.Tensor) -> torch.Tensor:
    """Concatenated per-entity codes: input table plus every layer output."""
    feats = tables.entity
    outputs = [feats]
    for layer in stack.layers:
        feats = layer(feats, weight_matrix)
        outputs.append(feats)
    return torch.cat(outputs, dim=1)


def kge_score(tables: EmbeddingTables, heads: torch.Tensor, rels: torch.Tensor,
              tails: torch.Tensor, modulus: float = 1.0) -> torch.Tensor:
    """Triple plausibility f = C * |sin(W_r e_h + e_r - W_r e_t)|_1; lower is better."""
    residual = (tables.project(rels, tables.entity[heads]) + tables.relation[rels]
                - tables.project(rels, tables.entity[tails]))
    return modulus * torch.sin(residual).abs().sum(dim=-1)


def kge_pairwise_loss(tables: EmbeddingTables, quadruples: torch.Tensor,
                      modulus: float = 1.0, reduction: str = "sum") -> torch.Tensor:
    """Link-completion loss sum(-log sigmoid(f(h,r,t') - f(h,r,t))) over the batch."""
    if quadruples.numel() == 0:
        raise ValueError("empty quadruple batch")
    h, r, t, t_neg = quadruples.unbind(dim=1)
    pos = kge_score(tables, h, r, t, modulus)
    neg = kge_score(tables, h, r, t_neg, modulus)
    per_pair = -torch.nn.functional.logsigmoid(neg - pos)
    if reduction == "sum":
        return per_pair.sum()
    if reduction == "mean":
        return per_pair.mean()
    raise ValueError(f"unknown reduction {reduction!r}")

"""Interaction knowledge graph: construction, co-occurrence weighting, persistence.

The graph unions a curated herb/symptom knowledge graph with co-occurrence
edges mined from prescriptions. Edge affinities are normalized pointwise
mutual information summed over relations, then symmetrically normalized
with unit self-loops; the herb-herb block of that matrix doubles as the
compatibility prior used by the training objective.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger("sceikg.kgstore")

ENTITY_KINDS = ("symptom", "herb", "other")


class GraphFormatError(ValueError):
    """Raised when graph input files violate the TSV contracts."""


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    kind: str


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    invertible: bool


@dataclass
class BuildReport:
    duplicates_dropped: int = 0
    inverses_added: int = 0


@dataclass
class InteractionGraph:
    """Dense-id entity/relation/triple store with a head-indexed adjacency.

    Entity ids are 0..V-1 with symptoms first (0..M-1), herbs next
    (M..M+N-1), and any remaining entities after that.
    """

    entities: list[Entity]
    relations: list[Relation]
    triples: list[tuple[int, int, int]]
    num_symptoms: int
    num_herbs: int
    adjacency: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    triple_set: set[tuple[int, int, int]] = field(default_factory=set)

    def __post_init__(self):
        if not self.adjacency:
            self.adjacency = {}
            for h, r, t in self.triples:
                self.adjacency.setdefault(h, []).append((r, t))
        if not self.triple_set:
            self.triple_set = set(self.triples)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def neighbors(self, head: int) -> list[tuple[int, int]]:
        return self.adjacency.get(head, [])

    def triple_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Triples as three aligned int64 arrays (heads, relations, tails)."""
        if not self.triples:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        arr = np.asarray(self.triples, dtype=np.int64)
        return arr[:, 0], arr[:, 1], arr[:, 2]


@dataclass
class CooccurrenceStats:
    """Counting model behind the NPMI weights.

    Every stored triple is one co-occurrence event of its relation:
    ``joint[(r, i, j)]`` counts directed (i, r, j) events, ``marginal[e]``
    counts appearances of e as head or tail under any relation, and
    ``relation_totals[r]`` counts events of relation r.
    """

    num_entities: int
    num_relations: int
    joint: dict[tuple[int, int, int], int]
    marginal: np.ndarray
    relation_totals: np.ndarray

    def __post_init__(self):
        if any(c < 0 for c in self.joint.values()) or (self.marginal < 0).any():
            raise ValueError("co-occurrence counts must be nonnegative")
        for (r, i, j), c in self.joint.items():
            if c > min(self.marginal[i], self.marginal[j]):
                raise ValueError(f"joint count for ({i},{j}) under relation {r} exceeds a marginal")

    @property
    def total_events(self) -> int:
        return int(self.relation_totals.sum())

    @classmethod
    def from_events(cls, events: list[tuple[int, int, int]], num_entities: int,
                    num_relations: int) -> "CooccurrenceStats":
        joint: dict[tuple[int, int, int], int] = {}
        marginal = np.zeros(num_entities, dtype=np.int64)
        totals = np.zeros(num_relations, dtype=np.int64)
        for i, r, j in events:
            joint[(r, i, j)] = joint.get((r, i, j), 0) + 1
            marginal[i] += 1
            marginal[j] += 1
            totals[r] += 1
        return cls(num_entities, num_relations, joint, marginal, totals)

    @classmethod
    def from_graph(cls, graph: InteractionGraph) -> "CooccurrenceStats":
        return cls.from_events(graph.triples, graph.num_entities, graph.num_relations)


@dataclass
class WeightMatrix:
    """Sparse V x V affinity matrix tagged with its processing stage."""

    matrix: sp.csr_matrix
    variant: str  # {"raw_npmi", "laplacian", "attention"}

    def __post_init__(self):
        if self.variant not in ("raw_npmi", "laplacian", "attention"):
            raise ValueError(f"unknown weight-matrix variant {self.variant!r}")
        if not np.isfinite(self.matrix.data).all():
            raise ValueError("weight matrix contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


# ---------------------------------------------------------------------------
# construction


def _parse_tsv(path: str | Path, n_fields: int, what: str):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise GraphFormatError(
                    f"{what} line {lineno}: expected {n_fields} tab-separated fields, got {len(parts)}")
            rows.append((lineno, parts))
    return rows


def build_ikg(entity_file: str | Path, relation_file: str | Path, triple_file: str | Path,
              symptom_vocab: list[str] | None = None,
              herb_vocab: list[str] | None = None) -> tuple[InteractionGraph, BuildReport]:
    """Load the three TSV files into one graph with vocabulary-first indexing.

    When vocab name lists are given, entities are reindexed so the symptom
    vocabulary occupies ids 0..M-1 (in vocab order) and the herb vocabulary
    M..M+N-1; otherwise the file's own kind column must already respect that
    layout. Duplicate triples are dropped and, for relations flagged
    invertible, missing reverse triples are added; both are counted in the
    returned report.
    """
    raw_entities = []
    seen_ids = set()
    for lineno, (eid_s, name, kind) in _parse_tsv(entity_file, 3, "entities"):
        try:
            eid = int(eid_s)
        except ValueError:
            raise GraphFormatError(f"entities line {lineno}: bad id {eid_s!r}")
        if kind not in ENTITY_KINDS:
            raise GraphFormatError(f"entities line {lineno}: kind must be one of {ENTITY_KINDS}")
        if eid in seen_ids:
            raise GraphFormatError(f"entities line {lineno}: duplicate entity id {eid}")
        seen_ids.add(eid)
        raw_entities.append(Entity(eid, name, kind))

    relations = []
    for lineno, (rid_s, name, inv_s) in _parse_tsv(relation_file, 3, "relations"):
        try:
            rid = int(rid_s)
        except ValueError:
            raise GraphFormatError(f"relations line {lineno}: bad id {rid_s!r}")
        if inv_s not in ("0", "1"):
            raise GraphFormatError(f"relations line {lineno}: invertible flag must be 0 or 1")
        relations.append(Relation(rid, name, inv_s == "1"))
    relations.sort(key=lambda r: r.id)
    if [r.id for r in relations] != list(range(len(relations))):
        raise GraphFormatError("relation ids must be dense 0..R-1")

    # Resolve the new id order: symptoms first, then herbs, then the rest.
    by_name = {e.name: e for e in raw_entities}
    if symptom_vocab is not None or herb_vocab is not None:
        symptom_vocab = symptom_vocab or []
        herb_vocab = herb_vocab or []
        ordered = []
        for name in symptom_vocab:
            if name not in by_name:
                raise GraphFormatError(f"symptom vocab name {name!r} missing from entity file")
            ordered.append(by_name[name])
        for name in herb_vocab:
            if name not in by_name:
                raise GraphFormatError(f"herb vocab name {name!r} missing from entity file")
            ordered.append(by_name[name])
        chosen = {e.id for e in ordered}
        rest = sorted((e for e in raw_entities if e.id not in chosen), key=lambda e: e.id)
        ordered.extend(rest)
        num_symptoms, num_herbs = len(symptom_vocab), len(herb_vocab)
    else:
        ordered = sorted(raw_entities, key=lambda e: e.id)
        if [e.id for e in ordered] != list(range(len(ordered))):
            raise GraphFormatError("entity ids must be dense 0..V-1 when no vocab is given")
        kinds = [e.kind for e in ordered]
        num_symptoms = kinds.count("symptom")
        num_herbs = kinds.count("herb")
        expected = ["symptom"] * num_symptoms + ["herb"] * num_herbs + ["other"] * (len(kinds) - num_symptoms - num_herbs)
        if kinds != expected:
            raise GraphFormatError("entity file must list all symptoms, then all herbs, then others")

    old_to_new = {e.id: new_id for new_id, e in enumerate(ordered)}
    # Re-kind the vocab entities: the vocab position is authoritative.
    entities = []
    for new_id, e in enumerate(ordered):
        kind = "symptom" if new_id < num_symptoms else ("herb" if new_id < num_symptoms + num_herbs else e.kind)
        entities.append(Entity(new_id, e.name, kind))

    report = BuildReport()
    triples: list[tuple[int, int, int]] = []
    triple_set: set[tuple[int, int, int]] = set()
    num_relations = len(relations)
    for lineno, (h_s, r_s, t_s) in _parse_tsv(triple_file, 3, "triples"):
        try:
            h, r, t = int(h_s), int(r_s), int(t_s)
        except ValueError:
            raise GraphFormatError(f"triples line {lineno}: non-integer field")
        if h not in old_to_new or t not in old_to_new:
            raise GraphFormatError(f"triples line {lineno}: dangling entity reference ({h_s} or {t_s})")
        if not (0 <= r < num_relations):
            raise GraphFormatError(f"triples line {lineno}: dangling relation reference {r}")
        trip = (old_to_new[h], r, old_to_new[t])
        if trip in triple_set:
            report.duplicates_dropped += 1
            continue
        triple_set.add(trip)
        triples.append(trip)

    for h, r, t in list(triples):
        if relations[r].invertible and (t, r, h) not in triple_set:
            triple_set.add((t, r, h))
            triples.append((t, r, h))
            report.inverses_added += 1

    graph = InteractionGraph(entities, relations, triples, num_symptoms, num_herbs)
    log.info("built graph: %d entities, %d relations, %d triples (%d duplicates dropped, %d inverses added)",
             graph.num_entities, graph.num_relations, len(triples),
             report.duplicates_dropped, report.inverses_added)
    return graph, report


# ---------------------------------------------------------------------------
# weighting


def _npmi_contribution(p_joint: float, p_i: float, p_j: float) -> float:
    """One relation's affinity contribution, clamped into [0, 1].

    The degenerate p_joint == 1 case takes the perfect-dependence limit 1.
    """
    if p_joint >= 1.0:
        return 1.0
    pmi = np.log(p_joint / (p_i * p_j))
    value = pmi / (-np.log(p_joint))
    return float(min(1.0, max(0.0, value)))


def compute_npmi_adjacency(graph: InteractionGraph, stats: CooccurrenceStats) -> WeightMatrix:
    """Sum per-relation normalized-PMI affinities into a sparse V x V matrix.

    Entries stay zero for pairs that never co-occur under any relation.
    """
    if stats.num_entities != graph.num_entities or stats.num_relations != graph.num_relations:
        raise ValueError("stats shape does not match graph")
    total_all = stats.total_events
    rows, cols, vals = [], [], []
    acc: dict[tuple[int, int], float] = {}
    for (r, i, j), c in stats.joint.items():
        if c == 0:
            continue
        total_r = stats.relation_totals[r]
        p_joint = c / total_r
        p_i = stats.marginal[i] / total_all
        p_j = stats.marginal[j] / total_all
        contrib = _npmi_contribution(p_joint, p_i, p_j)
        if contrib != 0.0:
            acc[(i, j)] = acc.get((i, j), 0.0) + contrib
    for (i, j), v in acc.items():
        rows.append(i)
        cols.append(j)
        vals.append(v)
    V = graph.num_entities
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(V, V), dtype=np.float64)
    return WeightMatrix(mat, "raw_npmi")


def normalize_laplacian(weights: WeightMatrix) -> WeightMatrix:
    """Symmetric normalization with unit self-loops: W = D^-1/2 (A+I) D^-1/2.

    The self-loop convention saturates the diagonal at 1 so all-zero rows
    become pure self-loops and isolated entities stay representable.
    """
    if weights.variant != "raw_npmi":
        raise ValueError(f"expected a raw_npmi matrix, got {weights.variant!r}")
    A = weights.matrix.tocsr(copy=True)
    if A.nnz and A.data.min() < 0:
        raise ValueError("raw NPMI matrix has negative entries; clamping must happen upstream")
    A = A.tolil()
    A.setdiag(1.0)
    A = A.tocsr()
    degree = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degree)
    D = sp.diags(inv_sqrt)
    W = (D @ A @ D).tocsr()
    return WeightMatrix(W, "laplacian")


def herb_compatibility_block(weights: WeightMatrix, num_symptoms: int, num_herbs: int) -> np.ndarray:
    """Restriction of the normalized matrix to the contiguous herb id block."""
    V = weights.shape[0]
    lo, hi = num_symptoms, num_symptoms + num_herbs
    if hi > V:
        raise ValueError(f"herb block [{lo},{hi}) exceeds matrix of size {V}")
    return weights.matrix[lo:hi, lo:hi].toarray()


# ---------------------------------------------------------------------------
# negative sampling


def sample_broken_triples(graph: InteractionGraph, batch_size: int, seed: int,
                          corrupt_heads: bool = False) -> list[tuple[int, int, int, int]]:
    """Sample (h, r, t, t') quadruples where (h, r, t') is absent from the graph.

    Positives are drawn uniformly with replacement; the corrupted entity is
    resampled up to 100 times before the quadruple is skipped with a warning.
    With ``corrupt_heads`` the corrupted slot still sits in the fourth field.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not graph.triples:
        raise ValueError("cannot sample from a graph with no triples")
    rng = np.random.default_rng(seed)
    V = graph.num_entities
    n = len(graph.triples)
    out: list[tuple[int, int, int, int]] = []
    picks = rng.integers(0, n, size=batch_size)
    for idx in picks:
        h, r, t = graph.triples[int(idx)]
        found = False
        for _ in range(100):
            cand = int(rng.integers(0, V))
            broken = (cand, r, t) if corrupt_heads else (h, r, cand)
            if broken not in graph.triple_set:
                out.append((h, r, t, cand))
                found = True
                break
        if not found:
            warnings.warn(f"no negative found for ({h},{r},{t}) after 100 attempts; skipping")
    return out


# ---------------------------------------------------------------------------
# persistence


def save_weight_matrix(weights: WeightMatrix, path: str | Path) -> None:
    """Write a sorted row/col/value coordinate list with a variant header."""
    coo = weights.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# variant={weights.variant} shape={coo.shape[0]}x{coo.shape[1]}\n")
        for i in order:
            fh.write(f"{coo.row[i]}\t{coo.col[i]}\t{float(coo.data[i])!r}\n")


def load_weight_matrix(path: str | Path) -> WeightMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# variant="):
            raise GraphFormatError(f"{path}: missing variant header")
        fields = dict(part.split("=", 1) for part in header[2:].split())
        variant = fields["variant"]
        n_rows, n_cols = (int(x) for x in fields["shape"].split("x"))
        rows, cols, vals = [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            i, j, v = line.split("\t")
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols), dtype=np.float64)
    return WeightMatrix(mat, variant)


def save_graph(graph: InteractionGraph, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "entities.tsv", "w", encoding="utf-8") as fh:
        for e in graph.entities:
            fh.write(f"{e.id}\t{e.name}\t{e.kind}\n")
    with open(out / "relations.tsv", "w", encoding="utf-8") as fh:
        for r in graph.relations:
            fh.write(f"{r.id}\t{r.name}\t{int(r.invertible)}\n")
    with open(out / "triples.tsv", "w", encoding="utf-8") as fh:
        for h, r, t in graph.triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def load_graph(data_dir: str | Path) -> tuple[InteractionGraph, BuildReport]:
    d = Path(data_dir)
    return build_ikg(d / "entities.tsv", d / "relations.tsv", d / "triples.tsv")

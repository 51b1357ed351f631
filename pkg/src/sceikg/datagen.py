"""Synthetic clinic-world generator.

Each patient carries a hidden constitution (fixed) and a disease stage
(evolving). Symptoms are emitted from the stage alone; the correct herb
set unions stage-specific herbs with constitution-specific herbs; taking
the herbs moves the stage through a constitution-dependent transition
table. Two patients can therefore present identical symptoms yet need
different prescriptions, and only their visit history tells them apart,
which is exactly the signal sequence-aware models must exploit.

A knowledge graph consistent with the efficacy maps is emitted alongside:
herb-treats-symptom edges inside each stage, co-function edges between
herbs prescribed together, symptom co-occurrence edges, and filler
taxonomy links to the extra entities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import WorldSpec
from .patient import PatientHistory, VisitRecord, save_patients

KEEP_PROB = 0.9      # chance each stage symptom shows at a visit
EXTRA_PROB = 0.5     # chance of one unrelated noise symptom
JUMP_PROB = 0.15     # chance the stage transition is random instead of tabled

RELATION_TEMPLATES = [
    ("treats", True),
    ("co_function", True),
    ("co_symptom", True),
    ("category_of", False),
    ("indicates", False),
    ("related_concept", True),
]


@dataclass
class WorldMaps:
    n_constitutions: int
    n_stages: int
    stage_symptoms: list[list[int]]        # symptom entity ids per stage
    stage_herbs: list[list[int]]           # herb entity ids per stage
    constitution_herbs: list[list[int]]    # herb entity ids per constitution
    transition: list[list[int]]            # next stage for (constitution, stage)


def _derive_counts(spec: WorldSpec) -> tuple[int, int]:
    n_const = max(2, spec.latent_dim // 2)
    n_stage = max(2, spec.latent_dim - n_const)
    return n_const, n_stage


def _build_maps(spec: WorldSpec, rng: np.random.Generator) -> WorldMaps:
    n_const, n_stage = _derive_counts(spec)
    herbs_per_const = max(1, min(5, spec.herbs // (2 * n_const)))
    herbs_per_stage = max(1, min(5, (spec.herbs - n_const * herbs_per_const) // n_stage))
    symptoms_per_stage = max(1, min(6, spec.symptoms // n_stage))

    herb_base = spec.symptoms  # herbs start after the symptom block
    reserved = rng.permutation(spec.herbs)
    constitution_herbs = []
    cursor = 0
    for _ in range(n_const):
        constitution_herbs.append(sorted(int(herb_base + h) for h in reserved[cursor:cursor + herbs_per_const]))
        cursor += herbs_per_const
    pool = reserved[cursor:]
    stage_herbs = [sorted(int(herb_base + h) for h in rng.choice(pool, size=herbs_per_stage, replace=False))
                   for _ in range(n_stage)]
    stage_symptoms = [sorted(int(s) for s in rng.choice(spec.symptoms, size=symptoms_per_stage, replace=False))
                      for _ in range(n_stage)]

    transition: list[list[int]] = []
    seen: set[tuple[int, ...]] = set()
    for _ in range(n_const):
        for _attempt in range(50):
            table = tuple(int(rng.integers(0, n_stage)) for _ in range(n_stage))
            if table not in seen or len(seen) >= n_stage ** n_stage:
                break
        seen.add(table)
        transition.append(list(table))
    return WorldMaps(n_const, n_stage, stage_symptoms, stage_herbs,
                     constitution_herbs, transition)


def _visit_rng(seed: int, patient_idx: int, visit_idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, patient_idx, visit_idx])


def _emit_visit(maps: WorldMaps, spec: WorldSpec, constitution: int, stage: int,
                rng: np.random.Generator) -> tuple[list[int], list[int], str]:
    base = maps.stage_symptoms[stage]
    kept = [s for s in base if rng.random() < KEEP_PROB]
    if not kept:
        kept = [base[int(rng.integers(0, len(base)))]]
    if rng.random() < EXTRA_PROB:
        kept.append(int(rng.integers(0, spec.symptoms)))
    symptoms = sorted(set(kept))
    herbs = sorted(set(maps.stage_herbs[stage]) | set(maps.constitution_herbs[constitution]))
    text = " ".join(f"symptom_{s:03d}" for s in symptoms)
    return symptoms, herbs, text


def _patient_trajectory(maps: WorldMaps, spec: WorldSpec, patient_idx: int
                        ) -> tuple[int, list[int]]:
    rng = np.random.default_rng([spec.seed, 1, patient_idx])
    constitution = int(rng.integers(0, maps.n_constitutions))
    p_more = (spec.avg_visits - 1.0) / max(1, spec.max_visits - 1)
    n_visits = 1 + int(rng.binomial(spec.max_visits - 1, p_more)) if spec.max_visits > 1 else 1
    stage = int(rng.integers(0, maps.n_stages))
    stages = [stage]
    for _ in range(n_visits - 1):
        if rng.random() < JUMP_PROB:
            stage = int(rng.integers(0, maps.n_stages))
        else:
            stage = maps.transition[constitution][stage]
        stages.append(stage)
    return constitution, stages


def _make_entities(spec: WorldSpec) -> list[tuple[int, str, str]]:
    rows = []
    for s in range(spec.symptoms):
        rows.append((s, f"symptom_{s:03d}", "symptom"))
    for h in range(spec.herbs):
        rows.append((spec.symptoms + h, f"herb_{h:03d}", "herb"))
    base = spec.symptoms + spec.herbs
    n_cat = min(20, spec.extra_entities)
    n_dis = min(30, max(0, spec.extra_entities - n_cat))
    idx = 0
    for c in range(n_cat):
        rows.append((base + idx, f"category_{c:02d}", "other"))
        idx += 1
    for d in range(n_dis):
        rows.append((base + idx, f"disease_{d:02d}", "other"))
        idx += 1
    while idx < spec.extra_entities:
        rows.append((base + idx, f"concept_{idx:04d}", "other"))
        idx += 1
    return rows


def _make_triples(spec: WorldSpec, maps: WorldMaps, rng: np.random.Generator,
                  n_relations: int) -> list[tuple[int, int, int]]:
    triples: set[tuple[int, int, int]] = set()
    base_other = spec.symptoms + spec.herbs
    n_cat = min(20, spec.extra_entities)
    n_dis = min(30, max(0, spec.extra_entities - n_cat))

    def add(h, r, t):
        if r < n_relations and h != t:
            triples.add((h, r, t))

    for s_idx in range(maps.n_stages):
        for herb in maps.stage_herbs[s_idx]:
            for sym in maps.stage_symptoms[s_idx]:
                if rng.random() < 0.8:
                    add(herb, 0, sym)
        herbs = maps.stage_herbs[s_idx]
        for i in range(len(herbs)):
            for j in range(i + 1, len(herbs)):
                add(herbs[i], 1, herbs[j])
        syms = maps.stage_symptoms[s_idx]
        for i in range(len(syms)):
            for j in range(i + 1, len(syms)):
                add(syms[i], 2, syms[j])
    for c_idx in range(maps.n_constitutions):
        herbs = maps.constitution_herbs[c_idx]
        for i in range(len(herbs)):
            for j in range(i + 1, len(herbs)):
                add(herbs[i], 1, herbs[j])
    if n_cat:
        for h in range(spec.herbs):
            add(spec.symptoms + h, 3, base_other + int(rng.integers(0, n_cat)))
    if n_dis:
        for s in range(spec.symptoms):
            add(s, 4, base_other + n_cat + int(rng.integers(0, n_dis)))
    if spec.extra_entities >= 2:
        for _ in range(spec.extra_entities):
            a = base_other + int(rng.integers(0, spec.extra_entities))
            b = base_other + int(rng.integers(0, spec.extra_entities))
            add(a, 5, b)
    return sorted(triples)


def generate_world(spec: WorldSpec, out_dir: str | Path) -> dict:
    """Write patients.jsonl, entities.tsv, relations.tsv, triples.tsv and
    ground_truth.json under out_dir; returns the ground-truth document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng_world = np.random.default_rng([spec.seed, 0])
    maps = _build_maps(spec, rng_world)

    patients: list[PatientHistory] = []
    gt_patients = []
    for p_idx in range(spec.patients):
        constitution, stages = _patient_trajectory(maps, spec, p_idx)
        visits = []
        for t, stage in enumerate(stages):
            symptoms, herbs, text = _emit_visit(
                maps, spec, constitution, stage, _visit_rng(spec.seed, p_idx, t))
            visits.append(VisitRecord(text, symptoms, herbs))
        pid = f"patient_{p_idx:04d}"
        patients.append(PatientHistory(pid, visits))
        gt_patients.append({"patient_id": pid, "constitution": constitution, "stages": stages})

    save_patients(patients, out / "patients.jsonl")

    entities = _make_entities(spec)
    with open(out / "entities.tsv", "w", encoding="utf-8") as fh:
        for eid, name, kind in entities:
            fh.write(f"{eid}\t{name}\t{kind}\n")
    n_relations = min(spec.relations, len(RELATION_TEMPLATES))
    with open(out / "relations.tsv", "w", encoding="utf-8") as fh:
        for rid in range(n_relations):
            name, invertible = RELATION_TEMPLATES[rid]
            fh.write(f"{rid}\t{name}\t{int(invertible)}\n")
    triples = _make_triples(spec, maps, rng_world, n_relations)
    with open(out / "triples.tsv", "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")

    ground_truth = {
        "format_version": 1,
        "world": {
            "symptoms": spec.symptoms, "herbs": spec.herbs,
            "extra_entities": spec.extra_entities, "relations": spec.relations,
            "patients": spec.patients, "max_visits": spec.max_visits,
            "latent_dim": spec.latent_dim, "avg_visits": spec.avg_visits,
            "seed": spec.seed,
        },
        "n_constitutions": maps.n_constitutions,
        "n_stages": maps.n_stages,
        "emission": {"keep_prob": KEEP_PROB, "extra_prob": EXTRA_PROB, "jump_prob": JUMP_PROB},
        "stage_symptoms": maps.stage_symptoms,
        "stage_herbs": maps.stage_herbs,
        "constitution_herbs": maps.constitution_herbs,
        "transition": maps.transition,
        "patients": gt_patients,
    }
    with open(out / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump(ground_truth, fh, indent=1)
    return ground_truth


def replay_patients(ground_truth: dict) -> list[PatientHistory]:
    """Regenerate every visit from the recorded latent states and seed."""
    w = ground_truth["world"]
    spec = WorldSpec(symptoms=w["symptoms"], herbs=w["herbs"],
                     extra_entities=w["extra_entities"], relations=w["relations"],
                     patients=w["patients"], max_visits=w["max_visits"],
                     latent_dim=w["latent_dim"], avg_visits=w["avg_visits"], seed=w["seed"])
    maps = WorldMaps(
        ground_truth["n_constitutions"], ground_truth["n_stages"],
        ground_truth["stage_symptoms"], ground_truth["stage_herbs"],
        ground_truth["constitution_herbs"], ground_truth["transition"])
    out = []
    for p_idx, entry in enumerate(ground_truth["patients"]):
        visits = []
        for t, stage in enumerate(entry["stages"]):
            symptoms, herbs, text = _emit_visit(
                maps, spec, entry["constitution"], stage, _visit_rng(spec.seed, p_idx, t))
            visits.append(VisitRecord(text, symptoms, herbs))
        out.append(PatientHistory(entry["patient_id"], visits))
    return out


def latent_state_vector(ground_truth: dict, constitution: int, stage: int) -> np.ndarray:
    """One-hot concatenation of (constitution, stage); the per-visit latent state."""
    v = np.zeros(ground_truth["n_constitutions"] + ground_truth["n_stages"])
    v[constitution] = 1.0
    v[ground_truth["n_constitutions"] + stage] = 1.0
    return v

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from sceikg.config import WorldSpec
from sceikg.datagen import generate_world, latent_state_vector, replay_patients
from sceikg.kgstore import load_graph
from sceikg.patient import load_patients

SMALL = WorldSpec(symptoms=30, herbs=16, extra_entities=20, relations=6,
                  patients=25, max_visits=6, latent_dim=8, seed=11)


def read_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


def test_generation_is_byte_deterministic(tmp_path):
    generate_world(WorldSpec(symptoms=20, herbs=10, extra_entities=10, patients=8, seed=7),
                   tmp_path / "a")
    generate_world(WorldSpec(symptoms=20, herbs=10, extra_entities=10, patients=8, seed=7),
                   tmp_path / "b")
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_average_visit_count_near_target(tmp_path):
    spec = WorldSpec(seed=3)  # defaults: 200 patients, avg 3.68, max 8
    generate_world(spec, tmp_path)
    patients = load_patients(tmp_path / "patients.jsonl")
    lengths = [len(p) for p in patients]
    assert max(lengths) <= spec.max_visits
    assert abs(np.mean(lengths) - 3.68) < 0.5


def test_identical_symptoms_different_state_diverge(tmp_path):
    generate_world(WorldSpec(seed=5), tmp_path)
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    patients = load_patients(tmp_path / "patients.jsonl")

    groups = defaultdict(list)  # symptom set -> [(latent, herbs)]
    for p, entry in zip(patients, gt["patients"]):
        for v, stage in zip(p.visits, entry["stages"]):
            key = tuple(v.symptoms)
            groups[key].append(((entry["constitution"], stage), tuple(v.herbs)))

    collisions = divergent = 0
    for members in groups.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                (lat_i, herbs_i), (lat_j, herbs_j) = members[i], members[j]
                if lat_i != lat_j:
                    collisions += 1
                    if herbs_i != herbs_j:
                        divergent += 1
    assert collisions > 50, "world produced too few symptom collisions to matter"
    assert divergent / collisions >= 0.30


def test_replay_reproduces_all_visits(tmp_path):
    gt = generate_world(SMALL, tmp_path)
    patients = load_patients(tmp_path / "patients.jsonl")
    replayed = replay_patients(gt)
    assert len(replayed) == len(patients)
    for a, b in zip(patients, replayed):
        assert a.patient_id == b.patient_id
        for va, vb in zip(a.visits, b.visits):
            assert va.symptoms == vb.symptoms
            assert va.herbs == vb.herbs
            assert va.text == vb.text


def test_replay_from_file_roundtrip(tmp_path):
    generate_world(SMALL, tmp_path)
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    replayed = replay_patients(gt)
    patients = load_patients(tmp_path / "patients.jsonl")
    assert [v.herbs for p in replayed for v in p.visits] == \
           [v.herbs for p in patients for v in p.visits]


def test_all_ids_resolve_against_entities(tmp_path):
    generate_world(SMALL, tmp_path)
    graph, _ = load_graph(tmp_path)
    assert graph.num_symptoms == SMALL.symptoms
    assert graph.num_herbs == SMALL.herbs
    patients = load_patients(tmp_path / "patients.jsonl",
                             max_symptom_id=SMALL.symptoms,
                             max_herb_id=SMALL.symptoms + SMALL.herbs)
    V = graph.num_entities
    for h, r, t in graph.triples:
        assert 0 <= h < V and 0 <= t < V and 0 <= r < graph.num_relations
    assert patients  # ids validated inside load_patients


def test_herb_labels_depend_on_constitution(tmp_path):
    gt = generate_world(SMALL, tmp_path)
    sets = [frozenset(h) for h in gt["constitution_herbs"]]
    assert len(set(sets)) == len(sets)  # disjoint-by-construction herb blocks
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            assert not (sets[a] & sets[b])


def test_latent_state_vector_shape(tmp_path):
    gt = generate_world(SMALL, tmp_path)
    v = latent_state_vector(gt, 1, 2)
    assert v.shape == (gt["n_constitutions"] + gt["n_stages"],)
    assert v.sum() == 2.0


def test_rejects_degenerate_spec():
    with pytest.raises(ValueError):
        WorldSpec(symptoms=0)
    with pytest.raises(ValueError):
        WorldSpec(herbs=0)

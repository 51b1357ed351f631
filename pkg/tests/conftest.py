import numpy as np
import pytest
import torch

from sceikg.kgstore import Entity, InteractionGraph, Relation


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)


def toy_graph(num_symptoms=2, num_herbs=2, num_other=1, triples=None, relations=None):
    """Small dense-id graph for unit tests; triples default to a short chain."""
    entities = []
    for i in range(num_symptoms):
        entities.append(Entity(i, f"symptom_{i:03d}", "symptom"))
    for i in range(num_herbs):
        entities.append(Entity(num_symptoms + i, f"herb_{i:03d}", "herb"))
    for i in range(num_other):
        entities.append(Entity(num_symptoms + num_herbs + i, f"other_{i:03d}", "other"))
    if relations is None:
        relations = [Relation(0, "treats", False), Relation(1, "related", True)]
    if triples is None:
        V = len(entities)
        triples = [(i, 0, (i + 1) % V) for i in range(V)]
    return InteractionGraph(entities, relations, list(triples), num_symptoms, num_herbs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

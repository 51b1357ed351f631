"""Top-K ranking evaluation averaged over visits, then over patients.

Precision is the hit fraction of the K recommended herbs, recall the
coverage of the true set, F1 their harmonic mean (zero when both vanish).
Score ties break toward the lower herb id so reports are deterministic.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    k_values: list[int]
    precision: dict[int, float]
    recall: dict[int, float]
    f1: dict[int, float]
    num_patients: int = 0
    num_visits: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k_values,
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "f1": {str(k): v for k, v in self.f1.items()},
            "patients": self.num_patients,
            "visits": self.num_visits,
        })

    def as_table(self) -> str:
        """Aligned text table, one metric block per column group."""
        header = ["    "] + [f"P@{k}" for k in self.k_values] + \
                 [f"R@{k}" for k in self.k_values] + [f"F1@{k}" for k in self.k_values]
        row = ["eval"] + [f"{self.precision[k]:.4f}" for k in self.k_values] + \
          [f"{self.recall[k]:.4f}" for k in self.k_values] + \
          [f"{self.f1[k]:.4f}" for k in self.k_values]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(header, widths)),
            "  ".join(r.rjust(w) for r, w in zip(row, widths)),
        ]
        return "\n".join(lines)


def top_k_ids(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K best scores, descending, ties broken by lower id."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return order[:k]


def ranking_metrics(herbs_true: np.ndarray, scores: np.ndarray, k: int
                    ) -> tuple[float, float, float]:
    """Precision/recall/F1 of the top-k scored herbs against a multi-hot truth."""
    herbs_true = np.asarray(herbs_true)
    scores = np.asarray(scores, dtype=float)
    if herbs_true.shape != scores.shape:
        raise ValueError("truth and scores must have equal length")
    true_ids = set(np.flatnonzero(herbs_true).tolist())
    if not true_ids:
        raise ValueError("ranking_metrics needs at least one true herb")
    picked = set(top_k_ids(scores, k).tolist())
    hits = len(picked & true_ids)
    precision = hits / k
    recall = hits / len(true_ids)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def evaluate(model_outputs: list[list[np.ndarray]], truths: list[list[np.ndarray]],
             k_values: list[int] | tuple[int, ...] = (5, 10, 20)) -> EvalReport:
    """Average per-visit metrics within each patient, then across patients.

    ``model_outputs[i][t]`` scores patient i's visit t; ``truths`` is the
    aligned multi-hot ground truth. Visits with an empty truth set are
    skipped with a warning; patients with no evaluable visit are dropped.
    """
    if not model_outputs or len(model_outputs) != len(truths):
        raise ValueError("evaluate needs aligned, nonempty outputs and truths")
    k_values = list(k_values)
    per_patient: dict[int, list[np.ndarray]] = {k: [] for k in k_values}
    visits_seen = 0
    patients_seen = 0
    for scores_list, truth_list in zip(model_outputs, truths):
        if len(scores_list) != len(truth_list):
            raise ValueError("per-patient visit counts differ between outputs and truths")
        rows = {k: [] for k in k_values}
        for scores, truth in zip(scores_list, truth_list):
            if not np.any(truth):
                warnings.warn("visit with empty truth set excluded from evaluation")
                continue
            visits_seen += 1
            for k in k_values:
                rows[k].append(ranking_metrics(truth, scores, k))
        if not rows[k_values[0]]:
            continue
        patients_seen += 1
        for k in k_values:
            per_patient[k].append(np.mean(np.asarray(rows[k]), axis=0))
    if patients_seen == 0:
        raise ValueError("no evaluable visits in dataset")
    precision, recall, f1 = {}, {}, {}
    for k in k_values:
        stacked = np.stack(per_patient[k])
        means = stacked.mean(axis=0)
        precision[k], recall[k], f1[k] = float(means[0]), float(means[1]), float(means[2])
    return EvalReport(k_values, precision, recall, f1,
                      num_patients=patients_seen, num_visits=visits_seen)

import numpy as np
import pytest

from sceikg.metrics import EvalReport, evaluate, ranking_metrics, top_k_ids


def brute_force_metrics(truth, scores, k):
    """Sort, slice, set-intersect; ties by lower id via (score, -id) pairs."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    picked = set(order[:k])
    true_ids = {i for i, v in enumerate(truth) if v}
    hits = len(picked & true_ids)
    p = hits / k
    r = hits / len(true_ids)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def test_perfect_top2():
    truth = np.array([1, 0, 0, 1, 0])
    scores = np.array([0.9, 0.1, 0.2, 0.8, 0.0])
    assert ranking_metrics(truth, scores, 2) == (1.0, 1.0, 1.0)


def test_half_right_top2():
    truth = np.array([1, 0, 0, 1, 0])
    scores = np.array([0.9, 0.8, 0.2, 0.1, 0.0])
    p, r, f = ranking_metrics(truth, scores, 2)
    assert (p, r, f) == (0.5, 0.5, 0.5)


def test_recall_saturates_with_large_k():
    truth = np.zeros(30)
    truth[:8] = 1
    scores = np.linspace(1, 0, 30)
    p, r, f = ranking_metrics(truth, scores, 20)
    assert r == 1.0
    assert p == pytest.approx(0.4)


def test_ties_break_by_lower_id():
    scores = np.array([0.5, 0.5, 0.5, 0.5])
    assert top_k_ids(scores, 2).tolist() == [0, 1]
    truth = np.array([0, 1, 0, 1])
    p, r, f = ranking_metrics(truth, scores, 2)
    assert p == 0.5 and r == 0.5


def test_rejects_empty_truth():
    with pytest.raises(ValueError):
        ranking_metrics(np.zeros(4), np.ones(4), 2)


def test_matches_brute_force_oracle_1000_cases():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(3, 30))
        truth = (rng.random(n) < 0.3).astype(int)
        if truth.sum() == 0:
            truth[int(rng.integers(0, n))] = 1
        scores = np.round(rng.random(n), 2)  # rounding forces frequent ties
        k = int(rng.integers(1, n + 1))
        assert ranking_metrics(truth, scores, k) == brute_force_metrics(truth, scores, k)


def test_invariant_under_monotone_transform():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = 12
        truth = (rng.random(n) < 0.4).astype(int)
        if truth.sum() == 0:
            truth[0] = 1
        scores = rng.normal(size=n)
        for k in (1, 3, 6):
            base = ranking_metrics(truth, scores, k)
            squashed = ranking_metrics(truth, 1 / (1 + np.exp(-scores)), k)
            scaled = ranking_metrics(truth, 3 * scores + 10, k)
            assert base == squashed == scaled


def test_recall_and_hits_monotone_in_k():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = 15
        truth = (rng.random(n) < 0.4).astype(int)
        if truth.sum() == 0:
            truth[3] = 1
        scores = rng.random(n)
        prev_recall, prev_hits = -1.0, -1.0
        for k in range(1, n + 1):
            p, r, _ = ranking_metrics(truth, scores, k)
            hits = p * k
            assert r >= prev_recall - 1e-12
            assert hits >= prev_hits - 1e-12
            prev_recall, prev_hits = r, hits


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_single_visit_equals_ranking_metrics():
    truth = np.array([1, 0, 1, 0])
    scores = np.array([0.9, 0.1, 0.8, 0.3])
    report = evaluate([[scores]], [[truth]], k_values=[2])
    p, r, f = ranking_metrics(truth, scores, 2)
    assert report.precision[2] == p and report.recall[2] == r and report.f1[2] == f
    assert report.num_patients == 1 and report.num_visits == 1


def test_evaluate_weights_patients_equally():
    # patient A: one visit; patient B: two visits
    tA = [np.array([1, 0, 0, 0])]
    sA = [np.array([0.9, 0.5, 0.1, 0.0])]          # p@1 = 1
    tB = [np.array([0, 1, 0, 0]), np.array([0, 0, 1, 0])]
    sB = [np.array([0.9, 0.5, 0.1, 0.0]),          # p@1 = 0
          np.array([0.1, 0.2, 0.9, 0.0])]          # p@1 = 1
    report = evaluate([sA, sB], [tA, tB], k_values=[1])
    # hand arithmetic: patient A mean 1.0, patient B mean 0.5 -> 0.75
    assert report.precision[1] == pytest.approx(0.75)


def test_evaluate_excludes_empty_truth_visits():
    truths = [[np.zeros(3), np.array([1, 0, 0])]]
    scores = [[np.ones(3), np.array([0.9, 0.1, 0.2])]]
    with pytest.warns(UserWarning, match="empty truth"):
        report = evaluate(scores, truths, k_values=[1])
    assert report.num_visits == 1
    assert report.precision[1] == 1.0


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ValueError):
        evaluate([], [], k_values=[5])


def test_report_serialization_and_table():
    report = EvalReport([5, 10], {5: 0.5, 10: 0.4}, {5: 0.2, 10: 0.3},
                        {5: 0.28, 10: 0.34}, 3, 7)
    blob = report.to_json()
    assert '"precision"' in blob and '"10"' in blob
    table = report.as_table()
    assert "P@5" in table and "F1@10" in table and "0.5000" in table

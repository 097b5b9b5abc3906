import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psetlab.evaluate import best_per_class_rank, instance_accuracy, mean_class_accuracy, metrics, per_class_delta
from psetlab.scores import AlignmentError, ScoreMatrix, check_aligned, predictions, read_scores, write_scores


def test_accuracy_examples():
    labels = np.array([0, 0, 0, 1])
    pred = np.array([0, 1, 1, 0])
    assert instance_accuracy(pred, labels) == 0.25
    # class 0 recall 1/3, class 1 recall 0 -> 1/6
    assert mean_class_accuracy(pred, labels, 2)[0] == pytest.approx(1 / 6)
    assert instance_accuracy([1, 1], [1, 0]) == 0.5


def test_accuracy_errors():
    with pytest.raises(ValueError):
        instance_accuracy([], [])
    with pytest.raises(ValueError, match="no samples"):
        mean_class_accuracy([0, 0], [0, 0], 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10 ** 6))
def test_metrics_invariants(c, seed):
    r = np.random.default_rng(seed)
    labels = np.r_[np.arange(c), r.integers(0, c, 20)]
    pred = r.integers(0, c, labels.size)
    m = metrics(pred, labels, c)
    assert 0 <= m.instance_accuracy <= 1 and 0 <= m.mean_class_accuracy <= 1
    # instance accuracy is the count-weighted mean of per-class recall
    assert m.instance_accuracy == pytest.approx(np.sum(m.per_class_accuracy * m.class_counts) / m.n_samples)
    if np.all(m.class_counts == m.class_counts[0]):
        assert m.instance_accuracy == pytest.approx(m.mean_class_accuracy)


def test_per_class_delta_identity():
    labels = np.array([0, 0, 1, 1, 2, 2])
    single = metrics(np.array([0, 1, 1, 1, 0, 0]), labels, 3)
    ens = metrics(labels, labels, 3)
    d = per_class_delta(single, ens)
    assert np.allclose(d, [0.5, 0.0, 1.0])
    assert np.allclose(single.per_class_accuracy + d, ens.per_class_accuracy)


def test_best_per_class_rank():
    labels = np.repeat(np.arange(4), 2)
    a = metrics(labels, labels, 4)
    b = metrics(labels, labels, 4)
    assert best_per_class_rank([a, b]) == [2.0, 2.0]
    worse = metrics(np.zeros(8, dtype=int), labels, 4)
    r = best_per_class_rank([a, b, worse])
    # class 0 is a three-way tie
    assert r == pytest.approx([1 / 3 + 3 / 2, 1 / 3 + 3 / 2, 1 / 3])
    assert sum(r) == pytest.approx(4)


def test_score_matrix_validation():
    with pytest.raises(ValueError):
        ScoreMatrix(np.zeros((2, 1)), [0, 0], [0, 1])
    with pytest.raises(ValueError):
        ScoreMatrix(np.array([[0.0, np.inf]]), [0], [0])
    with pytest.raises(ValueError):
        ScoreMatrix(np.zeros((1, 2)), [2], [0])


def test_alignment_checks():
    a = ScoreMatrix(np.zeros((2, 3)), [0, 1], [5, 6], "a")
    check_aligned([a, a])
    with pytest.raises(AlignmentError):
        check_aligned([a, ScoreMatrix(np.zeros((2, 3)), [0, 1], [6, 5], "b")])
    with pytest.raises(AlignmentError):
        check_aligned([a, ScoreMatrix(np.zeros((2, 3)), [1, 1], [5, 6], "b")])


def test_predictions_tie_lowest():
    assert predictions(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])).tolist() == [0, 1]


def test_scores_round_trip(tmp_path, rng):
    m = ScoreMatrix(rng.standard_normal((5, 3)), [0, 1, 2, 0, 1], [9, 3, 4, 7, 1], "x")
    p = tmp_path / "s.csv"
    write_scores(m, p)
    back = read_scores(p)
    assert back.scores.tobytes() == m.scores.tobytes()
    assert np.array_equal(back.sample_ids, m.sample_ids) and np.array_equal(back.labels, m.labels)
    p.write_text("sample_id,label,s_0,s_1\n0,1,0.5\n")
    with pytest.raises(ValueError, match=":2"):
        read_scores(p)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from psetlab.numerics import (MLPLayout, argmax_rows, central_differences, cross_entropy, dropout_masks,
                              finite_diff_check, init_params, mlp_backward, mlp_forward, relative_error,
                              screened_gradient_check, seeded_rng, smoothness_gap, softmax)


def test_seeded_rng_repeats():
    assert np.array_equal(seeded_rng(0).random(100), seeded_rng(0).random(100))


def test_seeded_rng_seeds_differ():
    assert not np.array_equal(seeded_rng(0).random(100), seeded_rng(1).random(100))


def test_seeded_rng_range_and_stream_frozen():
    v = seeded_rng(42).random()
    assert 0.0 <= v < 1.0
    # PCG64 stream is fixed by algorithm and constants; freeze the first draws
    assert np.allclose(seeded_rng(0).random(3), [0.63696169, 0.26978671, 0.04097352], atol=1e-8)


@pytest.mark.parametrize("seed", [-1, 2 ** 64])
def test_seeded_rng_rejects_out_of_range(seed):
    with pytest.raises(ValueError):
        seeded_rng(seed)


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(4)), 0.25)
    big = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    # e^x / sum e^x evaluated independently
    assert np.allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_errors():
    with pytest.raises(ValueError):
        softmax(np.array([]))
    with pytest.raises(ValueError):
        softmax(np.array([1.0, np.nan]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_softmax_properties(v):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0)
    assert np.argmax(p) == np.argmax(v) or p[np.argmax(v)] == p.max()


def test_argmax_rows_lowest_index_on_tie():
    assert argmax_rows(np.array([[0.2, 0.2], [0.1, 0.3]])).tolist() == [0, 1]


def test_layout_counts():
    lay = MLPLayout((3, 4, 2))
    assert lay.n_params == 3 * 4 + 4 + 4 * 2 + 2
    with pytest.raises(ValueError):
        lay.unpack(np.zeros(5))


def test_identity_linear_net():
    lay = MLPLayout((3, 3))
    params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    x = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(mlp_forward(params, lay, x)[-1], x)


def test_zero_net_gives_zero():
    lay = MLPLayout((3, 5, 2))
    assert np.all(mlp_forward(np.zeros(lay.n_params), lay, np.ones((4, 3)))[-1] == 0)


def test_hand_computed_2x2():
    # W = [[1, 2], [3, 4]] (rows = inputs), b = [0.5, -1]; x = [1, -1]
    # x @ W + b = [1 - 3 + 0.5, 2 - 4 - 1] = [-1.5, -3]
    lay = MLPLayout((2, 2))
    params = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -1.0])
    assert np.allclose(mlp_forward(params, lay, np.array([1.0, -1.0]))[-1], [[-1.5, -3.0]])
    # with ReLU on the only layer everything negative is clipped
    relu = MLPLayout((2, 2), activate_last=True)
    assert np.array_equal(mlp_forward(params, relu, np.array([1.0, -1.0]))[-1], [[0.0, 0.0]])


def test_shape_mismatch():
    lay = MLPLayout((3, 2))
    with pytest.raises(ValueError):
        mlp_forward(np.zeros(lay.n_params), lay, np.ones((2, 4)))
    with pytest.raises(ValueError):
        mlp_backward(np.zeros(lay.n_params), lay, np.ones((2, 3)), np.ones((2, 5)))


def test_zero_upstream_gradient():
    lay = MLPLayout((3, 6, 2))
    p = init_params(lay, seeded_rng(0))
    g, gi = mlp_backward(p, lay, np.ones((4, 3)), np.zeros((4, 2)))
    assert g.shape == p.shape and np.all(g == 0) and np.all(gi == 0)


def test_linear_squared_loss_closed_form(rng):
    # loss = 0.5 * ||x W + b - y||^2  ->  dW = x^T r, db = sum r
    lay = MLPLayout((3, 2))
    p = rng.standard_normal(lay.n_params)
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    r = mlp_forward(p, lay, x)[-1] - y
    g, _ = mlp_backward(p, lay, x, r)
    assert np.allclose(g[:6], (x.T @ r).ravel(), atol=1e-12)
    assert np.allclose(g[6:], r.sum(axis=0), atol=1e-12)


def test_finite_diff_quadratic_exact():
    a = np.array([1.0, -2.0, 0.5])
    loss = lambda p: float(np.sum(a * p ** 2))  # noqa: E731
    p = np.array([0.3, 0.7, -1.1])
    assert finite_diff_check(loss, p, 2 * a * p) < 1e-7


def test_finite_diff_detects_doubled_gradient():
    # |2g - g| / (|2g| + |g|) = 1/3
    a = np.array([1.0, -2.0, 0.5])
    loss = lambda p: float(np.sum(a * p ** 2))  # noqa: E731
    p = np.array([0.3, 0.7, -1.1])
    assert finite_diff_check(loss, p, 4 * a * p) == pytest.approx(1 / 3, abs=1e-6)


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: float("nan"), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: 0.0, np.zeros(2), np.zeros(2), epsilon=0)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(0.1)


def test_smoothness_gap_flags_kink():
    # |x| has a kink at 0; evaluating next to it breaks central differences
    assert smoothness_gap(lambda p: float(abs(p[0])), np.array([1e-6])) > 0.1
    assert smoothness_gap(lambda p: float(p[0] ** 2), np.array([0.3])) < 1e-8


def test_screened_check_rejects_kink_and_passes_smooth():
    assert screened_gradient_check(lambda p: float(abs(p[0])), np.array([1e-6]), np.array([1.0])) is None
    f = lambda p: float(np.sum(np.sin(p)))  # noqa: E731
    p = np.array([0.1, 0.2])
    assert screened_gradient_check(f, p, np.cos(p)) < 1e-8
    # a wrong gradient is not hidden by the screen
    assert screened_gradient_check(f, p, 2 * np.cos(p)) == pytest.approx(1 / 3, abs=1e-6)


def test_central_differences_linear():
    c = np.array([2.0, -3.0])
    assert np.allclose(central_differences(lambda p: float(c @ p), np.zeros(2)), c)


@pytest.mark.parametrize("widths", [(3, 8, 4), (6, 5, 7, 3)])
def test_mlp_gradient_matches_fd(widths):
    lay = MLPLayout(widths)
    r = seeded_rng(7)
    p = init_params(lay, r) + 0.1 * r.standard_normal(lay.n_params)
    x = r.standard_normal((6, widths[0]))
    labels = r.integers(0, widths[-1], 6)
    masks = dropout_masks(lay, 6, 0.3, r)

    def loss(q):
        return cross_entropy(mlp_forward(q, lay, x, masks)[-1], labels)[0]

    acts = mlp_forward(p, lay, x, masks)
    _, d = cross_entropy(acts[-1], labels)
    g, _ = mlp_backward(p, lay, x, d, masks, acts=acts)
    assert screened_gradient_check(loss, p, g) < 1e-4


def test_dropout_masks_inverted_and_last_layer_free():
    lay = MLPLayout((4, 50, 3))
    m = dropout_masks(lay, 200, 0.3, seeded_rng(0))
    assert m[-1] is None
    vals = np.unique(m[0])
    assert np.allclose(sorted(vals), [0.0, 1 / 0.7])
    assert abs((m[0] > 0).mean() - 0.7) < 0.02
    assert dropout_masks(lay, 5, 0.0, seeded_rng(0)) == [None, None]


def test_cross_entropy_uniform():
    loss, d = cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))
    assert np.allclose(d.sum(axis=1), 0)

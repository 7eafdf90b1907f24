import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphrec import diffmath as dm
from graphrec.diffmath import Tape, Tensor


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grad(build, *values, tol=1e-4):
    """``build(*tensors) -> scalar Tensor``; compare tape gradients with central differences."""
    tape = Tape()
    leaves = [tape.leaf(v.copy(), f"x{k}") for k, v in enumerate(values)]
    grads = tape.backward(build(*leaves))
    for k, v in enumerate(values):
        arr = v.copy()

        def f(x, k=k):
            args = [Tensor(x if j == k else values[j]) for j in range(len(values))]
            return build(*args).item()

        assert rel_err(grads[f"x{k}"], numeric_grad(f, arr)) < tol


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dm.matmul(Tensor(np.eye(2)), a).value, a.value)
    assert dm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).value.tolist() == [[11.0]]
    assert not dm.matmul(a, Tensor(np.zeros((2, 3)))).value.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_concat():
    out = dm.concat(dm.column([1, 2]), dm.column([3]))
    assert out.value[:, 0].tolist() == [1, 2, 3]
    x = dm.column([4.0, 5.0])
    assert np.array_equal(dm.concat(x, dm.column([])).value, x.value)
    with pytest.raises(dm.ShapeError):
        dm.concat(Tensor(np.ones((2, 2))), x)


def test_concat_gradient_is_ones_for_sum():
    tape = Tape()
    a, b = tape.leaf(np.array([[0.3], [-1.2]]), "a"), tape.leaf(np.array([[2.0]]), "b")
    g = tape.backward(dm.total(dm.concat(a, b)))
    assert np.array_equal(g["a"], np.ones((2, 1)))
    check_grad(lambda a, b: dm.total(dm.mul(dm.concat(a, b), dm.concat(a, b))), a.value, b.value)


def test_relu_values_and_gradient():
    assert dm.relu(dm.column([-1, 0, 2])).value[:, 0].tolist() == [0, 0, 2]
    assert not dm.relu(dm.column([-3, -0.5])).value.any()
    tape = Tape()
    x = tape.leaf(np.array([[3.0], [-3.0]]), "x")
    assert tape.backward(dm.total(dm.relu(x)))["x"][:, 0].tolist() == [1.0, 0.0]
    # subgradient at the kink is zero
    tape = Tape()
    x = tape.leaf(np.zeros((1, 1)), "x")
    assert tape.backward(dm.total(dm.relu(x)))["x"][0, 0] == 0.0


def test_softmax_examples():
    np.testing.assert_allclose(dm.softmax(dm.column([2.5] * 3)).value[:, 0], [1 / 3] * 3, atol=1e-15)
    assert dm.softmax(dm.column([-7.0])).value[0, 0] == 1.0
    np.testing.assert_allclose(dm.softmax(dm.column([0.0, math.log(3)])).value[:, 0], [0.25, 0.75], atol=1e-15)
    with pytest.raises(dm.EmptySetError):
        dm.softmax(dm.column([]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(scores, shift):
    y = dm.softmax(dm.column(scores)).value[:, 0]
    assert (y > 0).all()
    assert abs(y.sum() - 1.0) < 1e-9
    shifted = dm.softmax(dm.column(scores + shift)).value[:, 0]
    np.testing.assert_allclose(shifted, y, atol=1e-9)


def test_weighted_sum_examples():
    v = dm.column([1.5, -2.0])
    assert np.array_equal(dm.weighted_sum(dm.column([1.0]), [v]).value, v.value)
    out = dm.weighted_sum(dm.column([0.5, 0.5]), [dm.column([2, 0]), dm.column([0, 2])])
    assert out.value[:, 0].tolist() == [1.0, 1.0]
    assert not dm.weighted_sum(dm.column([0, 0]), [v, v]).value.any()
    with pytest.raises(dm.ShapeError):
        dm.weighted_sum(dm.column([1, 2, 3]), [v, v])


def test_dropout_modes():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 3)))
    assert dm.dropout(x, 0.0, True, rng) is x
    assert dm.dropout(x, 0.7, False, rng) is x
    with pytest.raises(dm.ContractError):
        dm.dropout(x, 1.0, True, rng)


def test_dropout_preserves_mean():
    # inverted dropout: E[out] = x; 1e5 draws of a constant input
    x = Tensor(np.full((100_000, 1), 2.0))
    out = dm.dropout(x, 0.5, True, np.random.default_rng(123)).value
    assert abs(out.mean() - 2.0) / 2.0 < 0.05
    assert set(np.unique(out)) <= {0.0, 4.0}


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)))
def test_dropout_eval_is_bitwise_identity(values):
    x = Tensor(values)
    assert dm.dropout(x, 0.4, False, None).value.tobytes() == values.tobytes()


def test_backward_examples():
    tape = Tape()
    x = tape.leaf(np.array([[1.0], [-2.0]]), "x")
    assert np.array_equal(tape.backward(dm.total(x))["x"], np.ones((2, 1)))
    tape = Tape()
    x = tape.leaf(np.array([[1.0], [-2.0]]), "x")
    g = tape.backward(dm.scale(dm.total(dm.mul(x, x)), 0.5))
    assert g["x"][:, 0].tolist() == [1.0, -2.0]


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones((2, 1)), "x")
    with pytest.raises(dm.ContractError):
        tape.backward(dm.relu(x))


def test_tapes_do_not_mix():
    a, b = Tape().leaf(np.ones((1, 1))), Tape().leaf(np.ones((1, 1)))
    with pytest.raises(dm.ContractError):
        dm.add(a, b)


def test_unused_leaf_gets_zero_gradient_of_its_shape():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), "x")
    tape.leaf(np.ones((3, 1)), "unused")
    g = tape.backward(dm.total(x))
    assert g["unused"].shape == (3, 1) and not g["unused"].any()


RNG = np.random.default_rng(7)


@pytest.mark.parametrize(
    "build, shapes",
    [
        (lambda a, b: dm.total(dm.relu(dm.matmul(a, b))), [(3, 4), (4, 2)]),
        (lambda a: dm.total(dm.mul(dm.transpose(a), dm.transpose(a))), [(2, 3)]),
        (lambda a, b: dm.total(dm.mul(dm.add(a, b), dm.sub(a, b))), [(2, 2), (2, 2)]),
        (lambda x, r: dm.total(dm.mul(dm.add_rowvec(x, r), dm.add_rowvec(x, r))), [(4, 3), (1, 3)]),
        (lambda a, b: dm.total(dm.mul(dm.hstack(a, b), dm.hstack(a, b))), [(3, 2), (3, 1)]),
        (lambda s, t: dm.total(dm.mul(dm.softmax(s), t)), [(5, 1), (5, 1)]),
        (lambda w, u, v: dm.total(dm.mul(dm.weighted_sum(w, [u, v]), u)), [(2, 1), (3, 1), (3, 1)]),
    ],
)
def test_op_gradients_match_finite_differences(build, shapes):
    values = [RNG.normal(size=s) + 0.05 for s in shapes]
    check_grad(build, *values)


def test_segment_ops_gradients():
    seg = np.array([0, 0, 1, 2, 2, 2])
    rows = RNG.normal(size=(6, 3))
    target = RNG.normal(size=(3, 3))
    scores = RNG.normal(size=(6, 1))

    def build(s, x):
        w = dm.segment_softmax(s, seg, 3)
        return dm.total(dm.mul(dm.segment_weighted_sum(w, x, seg, 3), Tensor(target)))

    check_grad(build, scores, rows)

    idx = np.array([2, 0, 2, 1])
    check_grad(lambda t: dm.total(dm.mul(dm.gather_rows(t, idx), dm.gather_rows(t, idx))), RNG.normal(size=(3, 2)))


def test_segment_softmax_matches_per_segment_softmax():
    seg = np.array([1, 1, 1, 0, 3, 3])
    s = RNG.normal(size=(6, 1))
    y = dm.segment_softmax(Tensor(s), seg, 4).value[:, 0]
    np.testing.assert_allclose(y[:3], dm.softmax(Tensor(s[:3])).value[:, 0], atol=1e-15)
    assert y[3] == 1.0
    np.testing.assert_allclose(y[4:], dm.softmax(Tensor(s[4:])).value[:, 0], atol=1e-15)


def test_empty_segment_gives_zero_row():
    out = dm.segment_weighted_sum(dm.column([0.5, 0.5]), Tensor(np.ones((2, 3))), np.array([0, 0]), 2)
    assert out.value[0].tolist() == [1.0, 1.0, 1.0]
    assert not out.value[1].any()


def test_half_mse():
    tape = Tape()
    p = tape.leaf(np.array([[3.0], [5.0]]), "p")
    loss = dm.half_mse(p, [3, 3])
    assert loss.item() == 1.0
    assert tape.backward(loss)["p"][:, 0].tolist() == [0.0, 1.0]


def test_replay_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        tape = Tape()
        w = tape.leaf(np.linspace(-1, 1, 12).reshape(4, 3), "w")
        x = dm.dropout(dm.relu(dm.matmul(Tensor(np.ones((2, 4))), w)), 0.3, True, rng)
        loss = dm.total(dm.mul(x, x))
        return loss.item(), tape.backward(loss)["w"]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)

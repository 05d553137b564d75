"""Unit and property tests for the tape engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from setmatch import autodiff as ad
from setmatch.autodiff import Tape, backward, constant, finite_diff_gradient


def scalar_leaf(value):
    tape = Tape()
    return tape.leaf(value)


class TestForwardExamples:
    def test_sum(self):
        t = ad.tensor_sum(constant([1.0, 2.0, 3.0]))
        assert float(t) == 6.0

    def test_sum_gradient_is_ones(self):
        tape = Tape()
        v = tape.leaf([1.0, 2.0, 3.0])
        grads = backward(ad.tensor_sum(v))
        np.testing.assert_array_equal(grads.array(v), [1.0, 1.0, 1.0])

    def test_log_identity(self):
        tape = Tape()
        x = tape.leaf(1.0)
        y = ad.log(x)
        assert float(y) == 0.0
        assert backward(y).array(x) == 1.0

    def test_gather_permutation(self):
        tape = Tape()
        v = tape.leaf([10.0, 20.0, 30.0])
        g = ad.gather(v, [2, 0])
        np.testing.assert_array_equal(g.values, [30.0, 10.0])
        grads = backward(ad.tensor_sum(g * constant([1.0, 2.0])))
        np.testing.assert_array_equal(grads.array(v), [2.0, 0.0, 1.0])

    def test_square_gradient(self):
        w = scalar_leaf(3.0)
        assert float(backward(w * w).array(w)) == 6.0

    def test_log_sigmoid_gradient(self):
        w = scalar_leaf(0.0)
        y = ad.log(ad.sigmoid(w))
        assert float(backward(y).array(w)) == pytest.approx(0.5, abs=1e-12)

    def test_gather_fanout_accumulates(self):
        tape = Tape()
        v = tape.leaf([5.0, 7.0])
        y = ad.tensor_sum(ad.gather(v, [0, 0]))
        np.testing.assert_array_equal(backward(y).array(v), [2.0, 0.0])

    def test_sigmoid_scalar(self):
        assert float(ad.sigmoid(constant(0.0))) == 0.5

    def test_relu_subgradient_zero_at_kink(self):
        x = scalar_leaf(0.0)
        assert float(backward(ad.relu(x)).array(x)) == 0.0


class TestLogSoftmax:
    def test_symmetric_pair(self):
        out = ad.log_softmax(constant([0.0, 0.0]))
        np.testing.assert_allclose(out.values, [-np.log(2), -np.log(2)], rtol=0, atol=1e-15)

    def test_extreme_logits_no_overflow(self):
        out = ad.log_softmax(constant([1000.0, 0.0])).values
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(-1000.0, abs=1e-9)

    def test_matches_naive_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        naive = np.log(np.exp(x) / np.exp(x).sum())
        np.testing.assert_allclose(ad.log_softmax(constant(x)).values, naive, atol=1e-12)

    @given(
        hnp.arrays(
            np.float64,
            st.integers(2, 6),
            elements=st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False),
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_exp_rows_sum_to_one(self, x):
        out = ad.log_softmax(constant(x)).values
        assert abs(np.exp(out).sum() - 1.0) <= 1e-12

    def test_rowwise_on_matrix(self):
        x = np.array([[1.0, 2.0], [5.0, -1.0]])
        out = ad.log_softmax(constant(x)).values
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


# Each entry: (name, builder producing a scalar from leaf tensors, input shapes,
# sampler keeping inputs inside the op's smooth region).
def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)

PRIMITIVES = {
    "add": (lambda a, b: ad.tensor_sum((a + b) * constant(np.arange(1.0, 5.0))), [(4,), (4,)], None),
    "sub": (lambda a, b: ad.tensor_sum((a - b) * constant(np.arange(1.0, 5.0))), [(4,), (4,)], None),
    "mul": (lambda a, b: ad.tensor_sum(a * b), [(4,), (4,)], None),
    "div": (lambda a, b: ad.tensor_sum(a / b), [(4,), (4,)], "nonzero"),
    "neg": (lambda a: ad.tensor_sum(-a * constant(np.arange(1.0, 5.0))), [(4,)], None),
    "abs": (lambda a: ad.tensor_sum(ad.absolute(a)), [(4,)], "kink"),
    "exp": (lambda a: ad.tensor_sum(ad.exp(a)), [(4,)], None),
    "log": (lambda a: ad.tensor_sum(ad.log(a)), [(4,)], "positive"),
    "tanh": (lambda a: ad.tensor_sum(ad.tanh(a)), [(4,)], None),
    "sigmoid": (lambda a: ad.tensor_sum(ad.sigmoid(a)), [(4,)], None),
    "relu": (lambda a: ad.tensor_sum(ad.relu(a)), [(4,)], "kink"),
    "maximum": (lambda a, b: ad.tensor_sum(ad.maximum(a, b)), [(4,), (4,)], "separated"),
    "minimum": (lambda a, b: ad.tensor_sum(ad.minimum(a, b)), [(4,), (4,)], "separated"),
    "sum": (lambda a: ad.tensor_sum(a) * ad.tensor_sum(a), [(5,)], None),
    "gather": (lambda a: ad.tensor_sum(ad.gather(a, [0, 2, 2, 1])), [(4,)], None),
    "matvec": (lambda w, x: ad.tensor_sum(ad.matvec(w, x)), [(3, 4), (4,)], None),
    "stack": (lambda a, b: ad.tensor_sum(ad.stack([a, b]) * ad.stack([b, a])), [(3,), (3,)], None),
    "reshape": (lambda a: ad.tensor_sum(ad.reshape(a, (2, 2)) * constant(np.arange(4.0).reshape(2, 2))), [(4,)], None),
    "log_softmax": (lambda a: ad.tensor_sum(ad.log_softmax(a) * constant(np.arange(1.0, 5.0))), [(4,)], None),
    "scalar_broadcast": (lambda a, s: ad.tensor_sum(a * s + s), [(4,), ()], None),
}


def _sample(rng, shape, mode):
    if mode == "positive":
        return rng.uniform(0.2, 3.0, size=shape)
    if mode in ("kink", "nonzero"):
        return _away_from_zero(rng, shape)
    return rng.uniform(-2.0, 2.0, size=shape)


def _sample_inputs(rng, shapes, mode):
    values = [_sample(rng, s, mode) for s in shapes]
    if mode == "separated":
        # keep the two operands apart so finite differences never cross a tie
        values[1] = values[0] + _away_from_zero(rng, shapes[1])
    return values


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, shapes, mode = PRIMITIVES[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        values = _sample_inputs(rng, shapes, mode)
        tape = Tape()
        leaves = [tape.leaf(v) for v in values]
        grads = backward(build(*leaves))
        for i, leaf in enumerate(leaves):
            def f(x, i=i):
                args = [constant(x if j == i else values[j]) for j in range(len(values))]
                return float(build(*args))

            numeric = finite_diff_gradient(f, values[i]).values
            analytic = grads.array(leaf)
            diff = np.abs(analytic - numeric)
            tol = np.maximum(1e-6, 1e-5 * np.maximum(np.abs(analytic), np.abs(numeric)))
            assert np.all(diff <= tol), f"{name} seed {seed}: {diff.max()}"


class TestBackwardSemantics:
    def test_detached_leaf_receives_nothing(self):
        tape = Tape()
        a = tape.leaf([1.0, 2.0])
        c = constant([3.0, 4.0])
        grads = backward(ad.tensor_sum(a * c))
        assert c not in grads
        with pytest.raises(ValueError):
            grads.array(c)

    def test_detached_graph_stays_detached(self):
        out = ad.exp(constant([0.0, 1.0])) * 2.0
        assert out.tape is None and out.tape_id is None

    def test_backward_deterministic_on_same_tape(self):
        tape = Tape()
        v = tape.leaf(np.linspace(-1, 1, 7))
        y = ad.tensor_sum(ad.tanh(v) * v + ad.sigmoid(v))
        g1 = backward(y).array(v)
        g2 = backward(y).array(v)
        assert np.array_equal(g1, g2)

    def test_unused_leaf_gets_zeros(self):
        tape = Tape()
        a = tape.leaf(2.0)
        b = tape.leaf(5.0)
        grads = backward(a * a)
        assert b not in grads
        assert grads.array(b) == 0.0

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        v = tape.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(v * 2.0)

    def test_detached_root_rejected(self):
        with pytest.raises(ValueError):
            backward(constant(1.0))

    def test_mixed_tapes_rejected(self):
        a = Tape().leaf(1.0)
        b = Tape().leaf(2.0)
        with pytest.raises(ValueError):
            _ = a + b


def test_distinct_tapes_run_in_parallel_threads():
    import concurrent.futures

    def work(seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=8)
        tape = Tape()
        leaf = tape.leaf(v)
        y = ad.tensor_sum(ad.tanh(leaf) * ad.sigmoid(leaf))
        return backward(y).array(leaf)

    sequential = [work(s) for s in range(8)]
    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        parallel = list(pool.map(work, range(8)))
    for a, b in zip(sequential, parallel):
        np.testing.assert_array_equal(a, b)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            _ = constant([1.0, 2.0]) + constant([1.0, 2.0, 3.0])

    def test_log_non_positive(self):
        with pytest.raises(ValueError):
            ad.log(constant([1.0, 0.0]))
        with pytest.raises(ValueError):
            ad.log(constant(-1.0))

    def test_division_by_zero(self):
        with pytest.raises(ValueError):
            _ = constant(1.0) / constant(0.0)


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]))
        assert g.values[0] == pytest.approx(6.0, abs=1e-7)

    def test_constant_function(self):
        g = finite_diff_gradient(lambda x: 1.5, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g.values, np.zeros(3))

    def test_non_finite_value_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda x: float("nan"), np.array([1.0]))

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda x: 0.0, np.array([1.0]), step=0.0)

"""Tape primitives: forward examples, FD gradient oracles, accumulation."""

import numpy as np
import pytest

from gotalign import numerics as nm
from gotalign.numerics import (
    DimensionError,
    PreconditionError,
    Tape,
    fd_gradient,
    rel_error,
)

RNG = np.random.default_rng(20240901)

FD_SHAPES = {
    "matmul": [((3, 4), (4, 2)), ((1, 5), (5, 1)), ((2, 2), (2, 6))],
    "unary": [(3, 4), (1, 6), (5, 1)],
}


def check_fd(build, arrays, tol=1e-6, h=1e-5):
    """Compare tape gradients of scalar build(tape, vars) against central FD."""
    tape = Tape()
    vars_ = [tape.var(a) for a in arrays]
    out = build(tape, vars_)
    assert out.value.shape == (1, 1)
    tape.backward(out)
    analytic = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vars_]

    def f(xs):
        t = Tape()
        vs = [t.var(x) for x in xs]
        return build(t, vs).item()

    numeric = fd_gradient(f, arrays, h=h)
    for ga, gn in zip(analytic, numeric):
        assert rel_error(ga, gn) < tol


def scalarize(build_inner):
    """Wrap a matrix-valued op with a weighted sum so FD sees a scalar.

    The weight matrix is drawn once and reused across FD evaluations.
    """
    weight = {}

    def build(tape, vars_):
        out = build_inner(tape, vars_)
        if "w" not in weight:
            weight["w"] = RNG.standard_normal(out.value.shape)
        w = tape.constant(weight["w"])
        return nm.reduce_sum(nm.mul(out, w), "all")

    return build


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        m = RNG.standard_normal((2, 2))
        out = nm.matmul(tape.var(np.eye(2)), tape.var(m))
        np.testing.assert_array_equal(out.value, m)

    def test_hand_product(self):
        tape = Tape()
        out = nm.matmul(tape.var([[1.0, 2.0], [3.0, 4.0]]), tape.var([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.value, [[2.0], [4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        tape = Tape()
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(tape.var(np.ones((2, 3))), tape.var(np.ones((2, 3))))

    @pytest.mark.parametrize("sa,sb", FD_SHAPES["matmul"])
    def test_fd(self, sa, sb):
        a, b = RNG.standard_normal(sa), RNG.standard_normal(sb)
        check_fd(scalarize(lambda t, vs: nm.matmul(vs[0], vs[1])), [a, b])


class TestRowSoftmax:
    def test_uniform_row(self):
        tape = Tape()
        out = nm.row_softmax(tape.var([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[1 / 3] * 3], atol=1e-15)

    def test_no_overflow(self):
        tape = Tape()
        out = nm.row_softmax(tape.var([[1000.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one(self):
        tape = Tape()
        out = nm.row_softmax(tape.var(RNG.standard_normal((6, 5)) * 10))
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.value >= 0)

    @pytest.mark.parametrize("shape", [(2, 3), (1, 4), (5, 2)])
    def test_fd(self, shape):
        a = RNG.standard_normal(shape)
        check_fd(scalarize(lambda t, vs: nm.row_softmax(vs[0])), [a])


class TestBatchStandardize:
    def test_constant_column_maps_to_zero(self):
        tape = Tape()
        out = nm.batch_standardize(tape.var([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.value, [[0.0], [0.0]])

    def test_two_point_column(self):
        tape = Tape()
        out = nm.batch_standardize(tape.var([[0.0], [2.0]]))
        np.testing.assert_allclose(out.value, [[-1.0], [1.0]], atol=1e-11)

    def test_random_batch_moments(self):
        tape = Tape()
        out = nm.batch_standardize(tape.var(RNG.standard_normal((8, 4)) * 3 + 1))
        assert np.all(np.abs(out.value.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(out.value.std(axis=0) - 1.0) < 1e-10)

    def test_single_row_rejected(self):
        tape = Tape()
        with pytest.raises(PreconditionError):
            nm.batch_standardize(tape.var(np.ones((1, 3))))

    @pytest.mark.parametrize("shape", [(4, 3), (8, 2), (3, 5)])
    def test_fd(self, shape):
        a = RNG.standard_normal(shape)
        check_fd(scalarize(lambda t, vs: nm.batch_standardize(vs[0])), [a], tol=1e-5)


class TestReduce:
    def test_sum_all(self):
        tape = Tape()
        assert nm.reduce(tape.var(np.ones((2, 2))), "sum", "all").item() == 4.0

    def test_mean_all(self):
        tape = Tape()
        assert nm.reduce(tape.var([[2.0, 4.0]]), "mean", "all").item() == 3.0

    @pytest.mark.parametrize("kind", ["sum", "mean"])
    @pytest.mark.parametrize("axis", ["rows", "cols", "all"])
    def test_fd(self, kind, axis):
        a = RNG.standard_normal((5, 3))
        check_fd(scalarize(lambda t, vs: nm.reduce(vs[0], kind, axis)), [a])


UNARY_OPS = {
    "relu": (nm.relu, lambda s: RNG.standard_normal(s) + 0.05),
    "exp": (nm.exp, lambda s: RNG.standard_normal(s)),
    "log": (nm.log, lambda s: RNG.uniform(0.5, 3.0, s)),
    "sqrt": (nm.sqrt, lambda s: RNG.uniform(0.5, 3.0, s)),
    "recip": (nm.recip, lambda s: RNG.uniform(0.5, 3.0, s)),
    "transpose": (nm.transpose, lambda s: RNG.standard_normal(s)),
    "absolute": (nm.absolute, lambda s: RNG.standard_normal(s) + 0.05),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("shape", FD_SHAPES["unary"])
def test_unary_fd(name, shape):
    op, sample = UNARY_OPS[name]
    check_fd(scalarize(lambda t, vs: op(vs[0])), [sample(shape)])


BINARY_OPS = {"add": nm.add, "sub": nm.sub, "mul": nm.mul}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("shape", FD_SHAPES["unary"])
def test_binary_fd(name, shape):
    op = BINARY_OPS[name]
    a, b = RNG.standard_normal(shape), RNG.standard_normal(shape)
    check_fd(scalarize(lambda t, vs: op(vs[0], vs[1])), [a, b])


@pytest.mark.parametrize("shape", FD_SHAPES["unary"])
def test_scale_fd(shape):
    a = RNG.standard_normal(shape)
    check_fd(scalarize(lambda t, vs: nm.scale(vs[0], -2.5)), [a])


class TestRowGather:
    def test_forward_and_repeat_fd(self):
        a = RNG.standard_normal((5, 3))
        tape = Tape()
        out = nm.row_gather(tape.var(a), [4, 0, 4])
        np.testing.assert_array_equal(out.value, a[[4, 0, 4]])
        # Repeated index: backward must accumulate both contributions.
        check_fd(scalarize(lambda t, vs: nm.row_gather(vs[0], [4, 0, 4])), [a])

    def test_out_of_range(self):
        tape = Tape()
        with pytest.raises(PreconditionError):
            nm.row_gather(tape.var(np.ones((2, 2))), [2])


class TestReshapeVstack:
    def test_reshape_fd(self):
        a = RNG.standard_normal((3, 4))
        check_fd(scalarize(lambda t, vs: nm.reshape(vs[0], 12, 1)), [a])

    def test_vstack_fd(self):
        a, b = RNG.standard_normal((2, 3)), RNG.standard_normal((4, 3))
        check_fd(scalarize(lambda t, vs: nm.vstack([vs[0], vs[1]])), [a, b])

    def test_vstack_shape_check(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            nm.vstack([tape.var(np.ones((2, 3))), tape.var(np.ones((2, 4)))])


class TestCrossEntropy:
    def test_perfect_prediction(self):
        tape = Tape()
        logits = np.full((2, 4), -40.0)
        logits[0, 1] = 40.0
        logits[1, 3] = 40.0
        out = nm.cross_entropy_rows(tape.var(logits), [1, 3])
        assert np.all(out.value < 1e-10)

    def test_uniform_logits(self):
        tape = Tape()
        out = nm.cross_entropy_rows(tape.var(np.zeros((3, 7))), [0, 4, 6])
        np.testing.assert_allclose(out.value, np.log(7.0), atol=1e-12)

    def test_large_logits_stable(self):
        tape = Tape()
        out = nm.cross_entropy_rows(tape.var([[5000.0, 0.0]]), [0])
        assert np.isfinite(out.value).all()
        assert out.value[0, 0] < 1e-10

    @pytest.mark.parametrize("shape", [(3, 5), (1, 2), (6, 4)])
    def test_fd(self, shape):
        logits = RNG.standard_normal(shape) * 2
        targets = RNG.integers(0, shape[1], size=shape[0])
        check_fd(
            scalarize(lambda t, vs: nm.cross_entropy_rows(vs[0], targets)),
            [logits],
        )


class TestTapeSemantics:
    def test_gradient_accumulation_matches_duplicated_input(self):
        a = RNG.standard_normal((3, 3))
        # Shared operand: f(x) = sum(x * x) + sum(x).
        tape = Tape()
        x = tape.var(a)
        out = nm.add(nm.reduce_sum(nm.mul(x, x), "all"), nm.reduce_sum(x, "all"))
        tape.backward(out)
        shared = x.grad
        # Duplicated-input construction: each use gets its own leaf.
        tape2 = Tape()
        x1, x2, x3 = tape2.var(a), tape2.var(a), tape2.var(a)
        out2 = nm.add(nm.reduce_sum(nm.mul(x1, x2), "all"), nm.reduce_sum(x3, "all"))
        tape2.backward(out2)
        # Same sums in a different association order, so compare numerically.
        np.testing.assert_allclose(shared, x1.grad + x2.grad + x3.grad, rtol=1e-15)

    def test_backward_runs_once(self):
        tape = Tape()
        out = nm.reduce_sum(tape.var(np.ones((2, 2))), "all")
        tape.backward(out)
        with pytest.raises(RuntimeError):
            tape.backward(out)

    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            tape = Tape()
            a = tape.var(rng.standard_normal((4, 4)))
            b = tape.var(rng.standard_normal((4, 4)))
            return nm.reduce_sum(nm.row_softmax(nm.matmul(a, b)), "all").item()

        assert run() == run()

    def test_constant_gets_no_grad(self):
        tape = Tape()
        x = tape.var(np.ones((2, 2)))
        c = tape.constant(np.full((2, 2), 3.0))
        tape.backward(nm.reduce_sum(nm.mul(x, c), "all"))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))


def test_child_rng_is_deterministic_and_keyed():
    a = nm.child_rng(5, "mask", 3).standard_normal(4)
    b = nm.child_rng(5, "mask", 3).standard_normal(4)
    c = nm.child_rng(5, "mask", 4).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)

import math

import numpy as np
import pytest

from purple.autodiff import ShapeError, Tape, finite_diff_check


def leaf_grads(leaves):
    return [l.grad if l.grad is not None else np.zeros_like(l.value) for l in leaves]


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        tape = Tape()
        out = tape.sigmoid(tape.leaf([[0.0]]))
        assert out.value[0, 0] == 0.5

    def test_mean_rows(self):
        tape = Tape()
        out = tape.mean_rows(tape.leaf([[1.0, 3.0], [3.0, 5.0]]))
        assert np.array_equal(out.value, [[2.0, 4.0]])

    def test_row_softmax_hand_case(self):
        # e^0/(e^0 + 3) = 0.25 and 3/(1 + 3) = 0.75
        tape = Tape()
        out = tape.row_softmax(tape.leaf([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.value, [[0.25, 0.75]], rtol=1e-15)

    def test_matmul_shape_mismatch_names_shapes(self):
        tape = Tape()
        a = tape.leaf(np.zeros((2, 3)))
        b = tape.leaf(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            tape.matmul(a, b)

    def test_add_bias_broadcast(self):
        tape = Tape()
        out = tape.add(tape.leaf(np.ones((3, 2))), tape.leaf([[1.0, 2.0]]))
        assert np.array_equal(out.value, [[2.0, 3.0]] * 3)


class TestBackward:
    def test_x_squared(self):
        tape = Tape()
        x = tape.leaf([[3.0]])
        tape.backward(tape.matmul(x, x))
        assert x.grad[0, 0] == 6.0

    def test_sigmoid_grad_at_zero(self):
        tape = Tape()
        x = tape.leaf([[0.0]])
        tape.backward(tape.sigmoid(x))
        assert abs(x.grad[0, 0] - 0.25) < 1e-15

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            tape.backward(x)

    def test_repeated_backward_accumulates(self):
        tape = Tape()
        x = tape.leaf([[2.0]])
        y = tape.matmul(x, x)
        tape.backward(y)
        tape.backward(y)
        assert x.grad[0, 0] == 8.0  # 2 * d(x^2)/dx at x=2

    def test_backward_linearity(self):
        # backward on a sum of scalars equals the sum of individual passes
        rng = np.random.default_rng(0)
        v = rng.standard_normal((1, 3))
        w = rng.standard_normal((3, 1))

        tape = Tape()
        a, b = tape.leaf(v), tape.leaf(w)
        s1 = tape.matmul(a, b)
        s2 = tape.matmul(tape.relu(a), b)
        tape.backward(tape.add(s1, s2))
        combined = (a.grad.copy(), b.grad.copy())

        tape = Tape()
        a, b = tape.leaf(v), tape.leaf(w)
        tape.backward(tape.matmul(a, b))
        tape.backward(tape.matmul(tape.relu(a), b))
        np.testing.assert_allclose(combined[0], a.grad, rtol=1e-15)
        np.testing.assert_allclose(combined[1], b.grad, rtol=1e-15)

    def test_two_layer_mlp_matches_finite_differences(self, rng):
        w1 = rng.standard_normal((3, 4))
        b1 = rng.standard_normal((1, 4))
        w2 = rng.standard_normal((4, 1))
        x = rng.standard_normal((2, 3))

        def f(params):
            tape = Tape()
            leaves = [tape.leaf(p) for p in params]
            hidden = tape.relu(tape.add(tape.matmul(tape.leaf(x), leaves[0]), leaves[1]))
            out = tape.mean_rows(tape.sigmoid(tape.matmul(hidden, leaves[2])))
            tape.backward(out)
            return float(out.value[0, 0]), leaf_grads(leaves)

        assert finite_diff_check(f, [w1, b1, w2], h=1e-5) < 1e-6

    def test_replay_determinism(self, rng):
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((3, 1))

        def run():
            tape = Tape()
            xs, ws = tape.leaf(x), tape.leaf(w)
            out = tape.mean_rows(tape.sigmoid(tape.matmul(xs, ws)))
            tape.backward(out)
            return out.value.copy(), xs.grad.copy(), ws.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


# (op name, builder(tape, leaves) -> node, parameter shapes)
PRIMITIVE_CASES = [
    ("matmul", lambda t, l: t.matmul(l[0], l[1]), [(2, 3), (3, 2)]),
    ("add", lambda t, l: t.add(l[0], l[1]), [(2, 3), (2, 3)]),
    ("add_bias", lambda t, l: t.add(l[0], l[1]), [(3, 2), (1, 2)]),
    ("scale", lambda t, l: t.scale(l[0], 1.7), [(2, 3)]),
    ("transpose", lambda t, l: t.transpose(l[0]), [(2, 3)]),
    ("row_softmax", lambda t, l: t.row_softmax(l[0]), [(2, 3)]),
    ("sigmoid", lambda t, l: t.sigmoid(l[0]), [(2, 3)]),
    ("relu", lambda t, l: t.relu(l[0]), [(2, 3)]),
    ("mean_rows", lambda t, l: t.mean_rows(l[0]), [(3, 2)]),
    ("concat_rows", lambda t, l: t.concat_rows([l[0], l[1]]), [(2, 3), (1, 3)]),
    ("concat_cols", lambda t, l: t.concat_cols([l[0], l[1]]), [(2, 2), (2, 3)]),
]


@pytest.mark.parametrize("op,builder,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(op, builder, shapes):
    rng = np.random.default_rng(abs(hash(op)) % (2**32))
    for trial in range(10):  # 10 random draws x 11 primitives: >100 randomized checks
        values = [rng.standard_normal(shape) for shape in shapes]
        readout = {}

        def f(params):
            tape = Tape()
            leaves = [tape.leaf(p) for p in params]
            node = builder(tape, leaves)
            if "w" not in readout:
                readout["w"] = np.random.default_rng(7).standard_normal(node.value.shape)
            # fixed random readout makes the root scalar without trivializing gradients
            weighted = tape.mean_rows(tape.add(node, tape.leaf(readout["w"])))
            total = tape.matmul(weighted, tape.transpose(tape.sigmoid(weighted)))
            tape.backward(total)
            return float(total.value[0, 0]), leaf_grads(leaves)

        err = finite_diff_check(f, values, h=1e-5)
        assert err < 1e-6, f"{op} trial {trial}: {err}"


class TestFiniteDiffCheck:
    def test_linear_map_is_exact(self):
        w = np.array([[2.0, -1.0, 0.5]])

        def f(params):
            return float((w @ params[0].reshape(-1, 1))[0, 0]), [w.T.copy()]

        assert finite_diff_check(f, [np.array([[1.0], [2.0], [3.0]])], h=1e-5) <= 1e-10

    def test_quadratic(self):
        def f(params):
            x = params[0]
            return float(np.sum(x * x)), [2 * x]

        assert finite_diff_check(f, [np.array([[1.5, -0.5]])], h=1e-5) <= 1e-8

    def test_sigmoid_chain(self):
        def f(params):
            x = params[0]
            s = 1 / (1 + np.exp(-x))
            y = 1 / (1 + np.exp(-s.sum()))
            grad = y * (1 - y) * s * (1 - s)
            return float(y), [grad]

        assert finite_diff_check(f, [np.array([[0.3, -0.7, 1.1]])], h=1e-5) <= 1e-6

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: (0.0, [np.zeros(1)]), [np.zeros((1, 1))], h=0.0)

    def test_nonfinite_evaluation_raises(self):
        def f(params):
            return float("nan"), [np.zeros_like(params[0])]

        with pytest.raises(FloatingPointError):
            finite_diff_check(f, [np.ones((1, 1))], h=1e-5)

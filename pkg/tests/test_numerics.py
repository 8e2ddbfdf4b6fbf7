import unittest

import numpy as np

from braingraph_bench.errors import ContractError, DimensionError, NonFiniteError, TrainingError
from braingraph_bench.numerics import (
    ComputationTape,
    OptimizerState,
    Tensor,
    adam_step,
    add,
    backward,
    bce_with_logits,
    broadcast_to,
    concat,
    conv1d,
    conv_output_length,
    derive_seed,
    dropout,
    elementwise,
    init_params,
    leaky_relu,
    make_rng,
    masked_softmax,
    matmul,
    mul,
    numerical_gradient,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relative_error,
    relu,
    reshape,
    sigmoid,
    softmax,
    sparsemax,
    sub,
    tanh,
    transpose,
)


def _param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _assert_gradients(case: unittest.TestCase, build, params: dict[str, Tensor], tol: float = 1e-6) -> None:
    with ComputationTape() as tape:
        loss = build()
        grads = tape.backward(loss, params)
    for name, tensor in params.items():
        numeric = numerical_gradient(build, tensor)
        case.assertLess(relative_error(grads[name], numeric), tol, name)


class TensorOpTests(unittest.TestCase):
    def test_matmul_rejects_mismatched_inner_dimensions(self) -> None:
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_elementwise_ops_allow_only_equal_shapes_or_scalars(self) -> None:
        a = Tensor(np.ones((2, 3)))
        self.assertEqual(add(a, 2.0).shape, (2, 3))
        np.testing.assert_allclose(mul(3.0, a).value, np.full((2, 3), 3.0))
        with self.assertRaises(DimensionError):
            add(a, Tensor(np.ones(3)))

    def test_relu_subgradient_at_zero_is_zero(self) -> None:
        x = _param([-1.0, 0.0, 2.0])
        with ComputationTape() as tape:
            loss = reduce_sum(relu(x))
            grads = tape.backward(loss, {"x": x})
        np.testing.assert_array_equal(grads["x"], [0.0, 0.0, 1.0])

    def test_elementwise_dispatch_matches_direct_calls(self) -> None:
        x = Tensor([-2.0, 0.5])
        np.testing.assert_allclose(elementwise("leaky_relu", x, slope=0.2).value, [-0.4, 0.5])
        np.testing.assert_allclose(elementwise("tanh", x).value, np.tanh([-2.0, 0.5]))
        with self.assertRaises(ContractError):
            elementwise("softplus", x)

    def test_reduce_max_routes_gradient_to_first_maximum(self) -> None:
        x = _param([3.0, 3.0, 1.0])
        with ComputationTape() as tape:
            loss = reduce_max(x)
            grads = tape.backward(loss, {"x": x})
        np.testing.assert_array_equal(grads["x"], [1.0, 0.0, 0.0])

    def test_reduce_rejects_invalid_axis(self) -> None:
        with self.assertRaises(DimensionError):
            reduce("sum", Tensor(np.ones((2, 2))), axis=2)

    def test_non_finite_results_raise(self) -> None:
        with np.errstate(over="ignore"):
            with self.assertRaises(NonFiniteError):
                mul(Tensor([1e308]), 1e10)


class GradientTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(3)

    def test_arithmetic_and_shape_ops(self) -> None:
        a = _param(self.rng.normal(size=(3, 4)))
        b = _param(self.rng.normal(size=(4, 2)))
        c = _param(self.rng.normal(size=(2,)))

        def build():
            h = matmul(a, b)
            h = add(h, broadcast_to(reshape(c, (1, 2)), (3, 2)))
            h = sub(tanh(h), mul(sigmoid(h), 0.5))
            h = concat([transpose(h), leaky_relu(transpose(h))], axis=1)
            return reduce_mean(mul(h, h))

        _assert_gradients(self, build, {"a": a, "b": b, "c": c})

    def test_single_element_operand_of_higher_rank(self) -> None:
        x = _param([1.0, 2.0, 3.0])
        w = _param([[2.0]])
        with ComputationTape() as tape:
            grads = tape.backward(reduce_sum(mul(x, w)), {"x": x, "w": w})
        np.testing.assert_allclose(grads["x"], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(grads["w"], [[6.0]])
        _assert_gradients(self, lambda: reduce_sum(mul(sub(x, w), add(w, x))), {"x": x, "w": w})

    def test_masked_softmax_and_sparsemax(self) -> None:
        scores = _param(self.rng.normal(size=(3, 4)))
        weights = Tensor(self.rng.normal(size=(3, 4)))
        mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)

        _assert_gradients(self, lambda: reduce_sum(mul(masked_softmax(scores, mask), weights)), {"s": scores})
        _assert_gradients(self, lambda: reduce_sum(mul(sparsemax(scores), weights)), {"s": scores})

    def test_conv1d_with_stride_dilation_and_padding(self) -> None:
        x = _param(self.rng.normal(size=(2, 3, 11)))
        kernels = _param(self.rng.normal(size=(4, 3, 3)))
        cotangent = Tensor(self.rng.normal(size=(2, 4, conv_output_length(11, 3, 2, 2, 1))))

        def build():
            return reduce_sum(mul(conv1d(x, kernels, stride=2, dilation=2, padding=1), cotangent))

        _assert_gradients(self, build, {"x": x, "k": kernels})

    def test_bce_with_logits(self) -> None:
        z = _param([0.3])
        _assert_gradients(self, lambda: bce_with_logits(z, 1.0), {"z": z})


class NormaliserTests(unittest.TestCase):
    def test_softmax_rows_sum_to_one(self) -> None:
        out = softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7))), axis=1)
        np.testing.assert_allclose(out.value.sum(axis=1), np.ones(5), atol=1e-12)

    def test_fully_masked_row_is_zero(self) -> None:
        mask = np.array([[True, False], [False, False]])
        out = masked_softmax(Tensor([[1.0, 5.0], [2.0, 3.0]]), mask, axis=1)
        np.testing.assert_allclose(out.value, [[1.0, 0.0], [0.0, 0.0]])

    def test_sparsemax_examples(self) -> None:
        np.testing.assert_allclose(sparsemax(Tensor([0.5, 0.5])).value, [0.5, 0.5])
        np.testing.assert_allclose(sparsemax(Tensor([2.0, 0.0])).value, [1.0, 0.0])
        np.testing.assert_allclose(sparsemax(Tensor([1.0, 1.0, 1.0])).value, [1 / 3] * 3)

    def test_sparsemax_rows_lie_on_simplex(self) -> None:
        out = sparsemax(Tensor(np.random.default_rng(1).normal(size=(6, 5)) * 3)).value
        np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)
        self.assertTrue(np.all(out >= 0))


class ConvolutionTests(unittest.TestCase):
    def test_conv1d_hand_example(self) -> None:
        out = conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 0.0, -1.0]]]))
        np.testing.assert_allclose(out.value, [[-2.0, -2.0]])

    def test_output_length_formula(self) -> None:
        first = conv_output_length(490, 7, stride=2)
        self.assertEqual(first, 242)
        self.assertEqual(conv_output_length(first, 7, stride=2), 118)
        out = conv1d(Tensor(np.zeros((116, 490))), Tensor(np.zeros((8, 116, 7))), stride=2)
        self.assertEqual(out.shape, (8, 242))

    def test_kernel_longer_than_input_raises(self) -> None:
        with self.assertRaises(DimensionError):
            conv1d(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 5))))


class TapeTests(unittest.TestCase):
    def test_untouched_parameters_get_zero_gradients(self) -> None:
        used, unused = _param([1.0, 2.0]), _param([[5.0]])
        with ComputationTape() as tape:
            loss = reduce_sum(mul(used, used))
            grads = tape.backward(loss, {"used": used, "unused": unused})
        np.testing.assert_allclose(grads["used"], [2.0, 4.0])
        np.testing.assert_array_equal(grads["unused"], [[0.0]])

    def test_backward_needs_scalar_loss_from_a_tape(self) -> None:
        x = _param([1.0, 2.0])
        with self.assertRaises(ContractError):
            backward(reduce_sum(x), {"x": x})
        with ComputationTape() as tape:
            doubled = mul(x, 2.0)
            with self.assertRaises(ContractError):
                tape.backward(doubled, {"x": x})

    def test_constants_are_not_recorded(self) -> None:
        with ComputationTape() as tape:
            add(Tensor([1.0]), Tensor([2.0]))
        self.assertEqual(len(tape), 0)


class OptimizerTests(unittest.TestCase):
    def test_first_adam_step_moves_by_learning_rate(self) -> None:
        p = _param([1.0])
        state = adam_step({"p": p}, {"p": np.array([0.5])}, OptimizerState(0.1))
        self.assertEqual(state.step, 1)
        self.assertAlmostEqual(p.value[0], 0.9, places=7)

    def test_decoupled_weight_decay(self) -> None:
        p = _param([1.0])
        adam_step({"p": p}, {"p": np.array([0.5])}, OptimizerState(0.1, weight_decay=0.1))
        self.assertAlmostEqual(p.value[0], 0.89, places=7)

    def test_rejects_missing_and_non_finite_gradients(self) -> None:
        p = _param([1.0])
        with self.assertRaises(DimensionError):
            adam_step({"p": p}, {}, OptimizerState(0.1))
        with self.assertRaises(TrainingError):
            adam_step({"p": p}, {"p": np.array([np.nan])}, OptimizerState(0.1))


class RandomStreamTests(unittest.TestCase):
    def test_streams_depend_on_seed_and_tags(self) -> None:
        first = make_rng(7, "fold", 1).random(4)
        np.testing.assert_array_equal(first, make_rng(7, "fold", 1).random(4))
        self.assertFalse(np.array_equal(first, make_rng(7, "fold", 2).random(4)))
        self.assertEqual(derive_seed(7, "x"), derive_seed(7, "x"))

    def test_init_schemes(self) -> None:
        rng = make_rng(0)
        weights = init_params((20, 30), "glorot_uniform", rng)
        self.assertTrue(weights.requires_grad)
        self.assertLessEqual(np.abs(weights.value).max(), np.sqrt(6.0 / 50))
        np.testing.assert_array_equal(init_params((3,), "zeros", rng).value, np.zeros(3))
        with self.assertRaises(ContractError):
            init_params((2,), "orthogonal", rng)

    def test_dropout_is_identity_without_rng(self) -> None:
        x = Tensor(np.ones((4, 4)))
        self.assertIs(dropout(x, 0.5, None), x)
        dropped = dropout(x, 0.5, make_rng(0)).value
        self.assertTrue(set(np.unique(dropped)) <= {0.0, 2.0})


if __name__ == "__main__":
    unittest.main()

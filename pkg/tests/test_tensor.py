import numpy as np
import pytest

from odcs.errors import ContractError, DimensionError, NonFiniteError
from odcs.gradcheck import check_gradients, relative_error
from odcs.tensor import Graph, Tensor, backward, debug_mode, square


class TestTensor:

    def test_shape_and_dtype(self):
        """Tensors default to 32-bit and keep their shape"""
        t = Tensor(np.zeros((2, 3, 4, 5)))
        assert t.shape == (2, 3, 4, 5)
        assert t.dtype == np.float32
        assert t.size == 120
        assert t.grad is None

    def test_float64_allowed(self):
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_rejects_other_dtypes(self):
        with pytest.raises(ContractError):
            Tensor([1], dtype=np.int32)

    def test_rejects_empty_dimension(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 0)))

    def test_broadcast_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


class TestGraph:

    def test_backward_square_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Graph() as graph:
            loss = (x * x).sum()
        backward(loss, graph)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])
        assert x.grad.dtype == np.float32

    def test_multiple_consumers_accumulate(self):
        """A tensor used twice receives the sum of both gradient paths"""
        x = Tensor([3.0], requires_grad=True)
        with Graph() as graph:
            loss = (x * 2.0 + x * x).sum()
        backward(loss, graph)
        np.testing.assert_allclose(x.grad, [2.0 + 6.0])

    def test_leaf_gradients_accumulate_across_backward_calls(self):
        x = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            with Graph() as graph:
                loss = (x * 5.0).sum()
            backward(loss, graph)
        np.testing.assert_allclose(x.grad, [10.0])

    def test_nodes_recorded_in_execution_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            y = x * 2.0
            z = y + 1.0
            z.sum()
        assert [n.op for n in graph.nodes] == ["mul", "add", "sum"]

    def test_nothing_recorded_outside_graph(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert y.is_leaf
        assert not y.requires_grad

    def test_constants_are_not_recorded(self):
        with Graph() as graph:
            Tensor([1.0]) * 2.0
        assert len(graph) == 0

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y, graph)

    def test_backward_requires_recorded_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor([1.0]), Graph())

    def test_debug_graph_flags_non_finite(self):
        x = Tensor([0.0], requires_grad=True)
        with pytest.raises(NonFiniteError) as exc:
            with Graph(debug=True):
                Tensor([1.0]) / x
        assert exc.value.op == "div"

    def test_debug_mode_outside_graph(self):
        with debug_mode():
            with pytest.raises(NonFiniteError):
                Tensor([np.inf]) * 1.0


class TestElementwiseGradients:

    @pytest.mark.parametrize("seed", range(20))
    def test_arithmetic_and_reductions(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True, dtype=np.float64)

        def fn():
            c = (a * b - a / b + square(a)).sum(axis=0)
            return (c * c).mean() - (a - 1.0).sum()

        assert check_gradients(fn, [a, b]) < 1e-3

    def test_relative_error_metric(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
        assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
        assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)

import numpy as np
import pytest

from convformer import ops
from convformer.errors import DimensionError, NumericError, StateError
from convformer.tensor import ParameterStore, Tensor, grad_enabled, no_grad


def test_backward_accumulates_over_shared_subgraph():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = x * x + x  # x appears three times
    ops.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_scalar_or_explicit_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()
    with pytest.raises(StateError):
        Tensor(np.ones(1)).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        y = x * 3.0
    assert grad_enabled()
    assert not y.requires_grad and y._parents == ()


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        ops.log(Tensor(np.array([0.0, 1.0])))


def test_operator_sugar_matches_ops():
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([4.0, 8.0]))
    np.testing.assert_array_equal((a - b).data, [-3.0, -6.0])
    np.testing.assert_array_equal((1.0 - a).data, [0.0, -1.0])
    np.testing.assert_array_equal((a / b).data, [0.25, 0.25])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


class TestParameterStore:
    def test_names_order_and_counts(self):
        store = ParameterStore(seed=0)
        store.add("a.weight", np.zeros((2, 3)))
        store.add_buffer("a.running_mean", np.zeros(3))
        store.add("b.bias", np.zeros(4))
        assert list(store) == ["a.weight", "b.bias"]
        assert store.num_parameters() == 10
        assert [n for n, _ in store.state_items()] == ["a.weight", "b.bias", "a.running_mean"]
        assert store["a.weight"].dtype == np.float32

    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(StateError):
            store.add("w", np.zeros(1))
        with pytest.raises(StateError):
            store.add_buffer("w", np.zeros(1))

    def test_glorot_bounds(self):
        store = ParameterStore(seed=3)
        w = store.glorot((200, 50), 200, 50)
        bound = np.sqrt(6 / 250)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound

    def test_load_state_validates(self):
        store = ParameterStore()
        store.add("w", np.zeros((2, 2)))
        store.add_buffer("rm", np.zeros(2))
        store.load_state({"w": np.ones((2, 2)), "rm": np.full(2, 5.0)})
        assert store["w"].data.sum() == 4 and store.buffers["rm"][0] == 5
        with pytest.raises(StateError):
            store.load_state({"w": np.ones((2, 2))})
        with pytest.raises(DimensionError):
            store.load_state({"w": np.ones(3), "rm": np.zeros(2)})

    def test_same_seed_same_init(self):
        a, b = ParameterStore(seed=9), ParameterStore(seed=9)
        np.testing.assert_array_equal(a.glorot((4, 4), 4, 4), b.glorot((4, 4), 4, 4))

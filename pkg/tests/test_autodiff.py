import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabt import autodiff as ad
from metabt.autodiff import ContractError, GradVector, ShapeError, Tensor

from oracles import central_differences, max_rel_err
from primitive_cases import BUILDERS, random_graph


def leaves(arrays):
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def grad_of(f, arrays):
    return ad.value_and_grad(f, leaves(arrays))[1]


def numeric(f, arrays):
    return central_differences(lambda a: f({k: Tensor(v) for k, v in a.items()}).item(), arrays)


# --- forward values ---------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_softmax_of_equal_logits_is_uniform():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)


def test_log_softmax_single_class_is_zero():
    assert ad.log_softmax(Tensor([[5.0], [-2.0]])).data.tolist() == [[0.0], [0.0]]


def test_log_softmax_is_stable_for_huge_logits():
    out = ad.log_softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0


def test_masked_mean_ignores_masked_entries():
    x = Tensor([[1.0, 100.0], [3.0, -50.0]])
    assert ad.masked_mean(x, [[1, 0], [1, 0]]).item() == 2.0


@pytest.mark.parametrize("spec", ["bth,vh->btv", "bh,hk->bk", "b,b->"])
def test_einsum_matches_numpy(spec):
    rng = np.random.default_rng(0)
    dims = {"b": 2, "t": 3, "h": 4, "v": 5, "k": 3}
    lhs = spec.split("->")[0].split(",")
    a = rng.normal(size=tuple(dims[c] for c in lhs[0]))
    b = rng.normal(size=tuple(dims[c] for c in lhs[1]))
    assert np.allclose(ad.einsum(spec, Tensor(a), Tensor(b)).data, np.einsum(spec, a, b), atol=1e-14)


# --- errors -------------------------------------------------------------------

def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_gather_out_of_range_is_index_error():
    with pytest.raises(IndexError):
        ad.gather(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_einsum_rejects_traces():
    with pytest.raises(ShapeError):
        ad.einsum("ii,i->", Tensor(np.eye(2)), Tensor(np.ones(2)))


def test_backward_contract_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractError, match="scalar"):
        ad.backward(tape, y, {"x": x})
    with pytest.raises(ContractError, match="empty"):
        ad.backward(ad.Tape(), ad.total(Tensor([1.0])), {"x": x})


def test_backward_consumes_the_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.total(ad.mul(x, x))
    ad.backward(tape, loss, {"x": x})
    with pytest.raises(ContractError, match="consumed"):
        ad.backward(tape, loss, {"x": x})


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_source_array_is_copied():
    a = np.array([1.0, 2.0])
    t = Tensor(a)
    a[0] = 9.0
    assert t.data[0] == 1.0


# --- backward -----------------------------------------------------------------

def test_gradient_of_self_dot():
    g = grad_of(lambda t: ad.total(ad.mul(t["x"], t["x"])), {"x": np.array([1.0, 2.0])})
    assert g["x"].tolist() == [2.0, 4.0]


def test_gradient_of_linear_map_is_all_ones():
    rng = np.random.default_rng(3)
    v = Tensor(np.ones(4))
    g = grad_of(lambda t: ad.total(ad.matmul(t["W"], v)), {"W": rng.normal(size=(3, 4))})
    assert np.array_equal(g["W"], np.ones((3, 4)))


def test_reused_operand_accumulates():
    g = grad_of(lambda t: ad.total(ad.add(t["x"], ad.add(t["x"], t["x"]))), {"x": np.zeros(3)})
    assert g["x"].tolist() == [3.0, 3.0, 3.0]


def test_untouched_parameter_gets_zero_gradient():
    f = lambda t: ad.total(ad.tanh(t["a"]))
    g = grad_of(f, {"a": np.ones(2), "unused": np.ones((2, 2))})
    assert np.array_equal(g["unused"], np.zeros((2, 2)))


def test_random_three_op_graph_matches_finite_differences():
    rng = np.random.default_rng(11)
    arrays = {"W": rng.normal(size=(3, 4)), "x": rng.normal(size=4), "b": rng.normal(size=3)}
    f = lambda t: ad.total(ad.tanh(ad.add(ad.matmul(t["W"], t["x"]), t["b"])))
    assert max_rel_err(grad_of(f, arrays), numeric(f, arrays)) < 1e-6


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_each_primitive_matches_finite_differences(name):
    for seed in range(10):
        arrays, f = random_graph(name, seed)
        assert max_rel_err(grad_of(f, arrays), numeric(f, arrays)) < 1e-5, (name, seed)


def test_taped_graph_is_deterministic():
    arrays, f = random_graph("einsum", 4)
    v1, g1 = ad.value_and_grad(f, leaves(arrays))
    v2, g2 = ad.value_and_grad(f, leaves(arrays))
    assert v1 == v2
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_ops_without_tape_record_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = ad.tanh(x)
    assert not y.requires_grad
    with ad.Tape() as tape:
        ad.tanh(Tensor([1.0]))
    assert len(tape) == 0


# --- grad_dot -----------------------------------------------------------------

def test_grad_dot_self_is_squared_norm():
    g = GradVector({"a": np.array([3.0, 4.0]), "b": np.array([[1.0]])})
    assert ad.grad_dot(g, g) == 26.0
    assert g.norm() == math.sqrt(26.0)


def test_grad_dot_orthogonal():
    g = GradVector({"a": np.array([1.0, 0.0, 0.0])})
    h = GradVector({"a": np.array([0.0, 1.0, 0.0])})
    assert ad.grad_dot(g, h) == 0.0


def test_grad_dot_matches_flat_loop():
    rng = np.random.default_rng(5)
    shapes = {"w": (4, 3), "b": (3,), "e": (2, 2)}
    g = {k: rng.normal(size=s) for k, s in shapes.items()}
    h = {k: rng.normal(size=s) for k, s in shapes.items()}
    loop = 0.0
    for k in shapes:
        for x, y in zip(g[k].ravel(), h[k].ravel()):
            loop += x * y
    assert abs(ad.grad_dot(g, h) - loop) < 1e-12


def test_grad_dot_key_mismatch():
    with pytest.raises(ContractError):
        ad.grad_dot({"a": np.ones(2)}, {"b": np.ones(2)})
    with pytest.raises(ContractError):
        ad.grad_dot({"a": np.ones(2)}, {"a": np.ones(3)})


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 6))
def test_grad_dot_is_exactly_symmetric(seed, n_keys, size):
    rng = np.random.default_rng(seed)
    g = {f"k{i}": rng.normal(size=size) * 10.0 ** rng.integers(-5, 5) for i in range(n_keys)}
    h = {f"k{i}": rng.normal(size=size) for i in range(n_keys)}
    assert ad.grad_dot(g, h) == ad.grad_dot(h, g)


# --- fd_check -----------------------------------------------------------------

def test_fd_check_quadratic_form():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(4, 4))
    Q = ad.constant(A @ A.T + np.eye(4))
    f = lambda t: ad.total(ad.mul(t["x"], ad.matmul(Q, t["x"])))
    assert ad.fd_check(f, {"x": Tensor(rng.normal(size=4))}, 1e-5) < 1e-6


def test_fd_check_constant_function_is_exact():
    f = lambda t: ad.constant(3.0)
    assert ad.fd_check(f, {"x": Tensor(np.ones(3))}) == 0.0


def test_fd_check_sum_is_exact():
    f = lambda t: ad.total(t["x"])
    assert ad.fd_check(f, {"x": Tensor(np.arange(5.0))}) < 1e-10


def test_fd_check_propagates_non_finite():
    f = lambda t: ad.scale(ad.total(t["x"]), math.inf)
    with pytest.raises(ad.NumericError):
        ad.fd_check(f, {"x": Tensor(np.ones(2))})


def test_fd_check_rejects_bad_step():
    with pytest.raises(ContractError):
        ad.fd_check(lambda t: ad.total(t["x"]), {"x": Tensor(np.ones(2))}, step=0.0)

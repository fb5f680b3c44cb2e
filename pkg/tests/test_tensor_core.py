import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gear.tensor_core import (
    ContractionSpec,
    ShapeError,
    SingularMatrixError,
    SpecError,
    contract,
    elementwise,
    invert_matrix,
    namespace,
    tensor,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_example():
    out = contract("ik,kj->ij", tensor([[1, 2], [3, 4]]), tensor([[5, 6], [7, 8]]))
    assert out.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_trace_and_outer():
    a = tensor([[1, 2], [3, 4]])
    assert contract("ii->", a) == 5.0
    assert contract("i,j->ij", tensor([1, 2]), tensor([3, 4, 5])).shape == (2, 3)


@pytest.mark.parametrize("spec", ["ab,bc", "ab,bb->a", "ab,bc->ad", "a,b,c->abc", "a1,b->a", "ab->aa"])
def test_bad_specs(spec):
    with pytest.raises(SpecError):
        ContractionSpec.parse(spec)


def test_extent_mismatch():
    with pytest.raises(ShapeError):
        contract("ij,jk->ik", np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        contract("ijk,jk->i", np.ones((2, 3)), np.ones((3, 3)))


def test_operand_count():
    with pytest.raises(SpecError):
        contract("ij,jk->ik", np.ones((2, 2)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_contract_matches_matmul(a, b):
    np.testing.assert_allclose(contract("ij,jk->ik", a, b), a @ b, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(contract("ij->ji", a), a.T)


def test_tensor_literal_checks():
    assert tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(SpecError):
        tensor([1, 2, 3], (2, 2))
    with pytest.raises(SpecError):
        tensor([1.0, np.nan])
    with pytest.raises(SpecError):
        tensor([1.0], (0,))


def test_elementwise():
    a = tensor([1, 2, 3])
    assert elementwise(a, 2.0, "pow").tolist() == [1.0, 4.0, 9.0]
    assert elementwise(a, a, "sub").tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ShapeError):
        elementwise(a, tensor([1, 2]), "add")
    with pytest.raises(SpecError):
        elementwise(a, a, "div")


def test_invert_matrix():
    g = tensor([[2, 1], [1, 3]])
    inv = invert_matrix(g)
    np.testing.assert_allclose(inv @ g, np.eye(2), atol=1e-15)
    np.testing.assert_array_equal(inv, inv.T)
    with pytest.raises(SingularMatrixError) as err:
        invert_matrix(tensor([[1, 1], [1, 1]]))
    assert err.value.condition > 1e13
    # ridge makes the singular matrix invertible
    np.testing.assert_allclose(invert_matrix(tensor([[1, 1], [1, 1]]), ridge=1.0) @ tensor([[2, 1], [1, 2]]), np.eye(2), atol=1e-12)
    with pytest.raises(ShapeError):
        invert_matrix(np.ones((2, 3)))


def test_namespace_dispatch():
    import jax.numpy as jnp

    assert namespace(np.ones(2)) is np
    assert namespace(np.ones(2), jnp.ones(2)) is jnp
    out = contract("i,i->", jnp.ones(3), jnp.ones(3))
    assert float(out) == 3.0

import numpy as np
import pytest

from cavlab.analysis.theory import TOLERANCE, relu_witness, verify_relu, verify_sigmoid, verify_theory_cases


@pytest.mark.parametrize("dims", [1, 4, 16])
def test_linear_map_is_consistent(dims):
    verdict = verify_theory_cases("linear", dims, np.random.default_rng(dims))
    assert verdict.consistent
    assert verdict.max_error <= TOLERANCE


def test_relu_has_sign_pattern_witnesses():
    verdict = verify_relu(3, np.random.default_rng(0), u=np.array([1.0, -2.0, 0.0]))
    assert not verdict.consistent
    # the zero coordinate cannot contradict anything
    assert len(verdict.witnesses) == 2
    for w in verdict.witnesses:
        assert w["v_linear"] != w["v_flip"]


def test_relu_witness_values():
    w = relu_witness(0.0, 2.0)
    assert w["v_linear"] == 2.0
    assert w["a_flip"] == -1.0
    assert w["v_flip"] == 1.0
    assert w["sign_pattern"] == "(a+u>0, a<=0)"
    assert relu_witness(0.0, -2.0)["sign_pattern"] == "(a+u<=0, a>0)"


def test_relu_witness_at_fixed_points():
    # a=1 stays on the linear piece, a=-2 stays clipped
    assert relu_witness(1.0, 1.0)["v"] == 1.0
    assert relu_witness(-2.0, 1.0)["v"] == 0.0
    assert relu_witness(-2.0, 3.0)["v"] == 1.0
    for a in (1.0, -2.0):
        w = relu_witness(a, 1.0)
        assert w["v_linear"] == 1.0
        assert w["a_flip"] == -0.5 and w["v_flip"] == 0.5


def test_sigmoid_is_inconsistent():
    verdict = verify_sigmoid(4, np.random.default_rng(1))
    assert not verdict.consistent
    v0, v2 = (np.array(w["v"]) for w in verdict.witnesses)
    assert not np.allclose(v0, v2)


def test_sigmoid_zero_direction_is_trivially_consistent():
    assert verify_sigmoid(3, np.random.default_rng(1), u=np.zeros(3)).consistent


def test_unknown_case():
    with pytest.raises(ValueError, match="unknown theory case"):
        verify_theory_cases("tanh")

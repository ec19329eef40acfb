"""Numeric checks of when layer-consistent direction pairs can exist for linear, ReLU and sigmoid maps.

For f and an l1 direction u, a consistent l2 direction must satisfy
f(a + u) = f(a) + v for every a, i.e. v(a) = f(a + u) - f(a) must not depend on a.
Perturbations here are unscaled.
"""
import numpy as np
from scipy.special import expit

from cavlab.schemas import TheoryVerdict

TOLERANCE = 1e-5
N_PROBES = 256


def required_direction(f, a: np.ndarray, u: np.ndarray) -> np.ndarray:
    return f(a + u) - f(a)


def _spread(f, u: np.ndarray, samples: np.ndarray) -> tuple[np.ndarray, float]:
    """Required v at the first sample and the largest error that fixed v makes at the others."""
    v_ref = required_direction(f, samples[0], u)
    errors = [np.linalg.norm(required_direction(f, a, u) - v_ref) for a in samples]
    return v_ref, float(max(errors))


def verify_linear(dims: int, rng: np.random.Generator) -> TheoryVerdict:
    M = rng.normal(size=(dims, dims))
    b = rng.normal(size=dims)
    u = rng.normal(size=dims)

    def f(a):
        return a @ M.T + b

    v = M @ u
    samples = rng.normal(scale=3.0, size=(N_PROBES, dims))
    residual = float(np.max(np.linalg.norm(f(samples + u) - (f(samples) + v), axis=1)))
    return TheoryVerdict(
        case="linear",
        consistent=residual <= TOLERANCE,
        max_error=residual,
        witnesses=[{"u": u.tolist(), "v": v.tolist()}],
        detail="v = M u is consistent for every a",
    )


def relu_witness(a_i: float, u_i: float) -> dict[str, float | str]:
    """For one coordinate, a second input whose required v differs from the one at a_i."""
    v_here = max(a_i + u_i, 0.0) - max(a_i, 0.0)
    # both pre-activations positive: the unit is linear, v = u
    a_linear = abs(u_i) + 1.0 + max(a_i, 0.0)
    # sign flip: a <= 0 < a + u for u > 0, a > 0 >= a + u for u < 0
    a_flip = -u_i / 2
    v_flip = max(a_flip + u_i, 0.0) - max(a_flip, 0.0)
    pattern = "(a+u>0, a<=0)" if u_i > 0 else "(a+u<=0, a>0)"
    return {
        "a": a_i,
        "u": u_i,
        "v": v_here,
        "a_linear": a_linear,
        "v_linear": u_i,
        "a_flip": a_flip,
        "v_flip": v_flip,
        "sign_pattern": pattern,
    }


def verify_relu(dims: int, rng: np.random.Generator, u: np.ndarray | None = None) -> TheoryVerdict:
    u = rng.normal(size=dims) if u is None else np.asarray(u, dtype=np.float64)

    def f(a):
        return np.maximum(a, 0.0)

    samples = rng.normal(scale=3.0, size=(N_PROBES, dims))
    _, spread = _spread(f, u, samples)
    witnesses = [relu_witness(0.0, float(u_i)) | {"coordinate": float(i)} for i, u_i in enumerate(u) if u_i != 0.0]
    contradictions = [w for w in witnesses if w["v_linear"] != w["v_flip"]]
    consistent = not contradictions and spread <= TOLERANCE
    return TheoryVerdict(
        case="relu",
        consistent=consistent,
        max_error=spread,
        witnesses=contradictions,
        detail=f"{len(contradictions)} of {dims} coordinates need different v on either side of the kink",
    )


def verify_sigmoid(dims: int, rng: np.random.Generator, u: np.ndarray | None = None) -> TheoryVerdict:
    u = rng.normal(size=dims) if u is None else np.asarray(u, dtype=np.float64)
    samples = rng.normal(scale=3.0, size=(N_PROBES, dims))
    samples[0] = 0.0
    v_ref, spread = _spread(expit, u, samples)
    v_two = required_direction(expit, np.full(dims, 2.0), u)
    return TheoryVerdict(
        case="sigmoid",
        consistent=spread <= TOLERANCE,
        max_error=spread,
        witnesses=[{"a": 0.0, "v": v_ref.tolist()}, {"a": 2.0, "v": v_two.tolist()}],
        detail="required v depends on a wherever u is nonzero",
    )


def verify_theory_cases(case: str, dims: int = 4, rng: np.random.Generator | None = None) -> TheoryVerdict:
    rng = rng if rng is not None else np.random.default_rng(0)
    checks = {"linear": verify_linear, "relu": verify_relu, "sigmoid": verify_sigmoid}
    if case not in checks:
        raise ValueError(f"unknown theory case {case!r}; expected linear, relu or sigmoid")
    return checks[case](dims, rng)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rotlab.orthonum import (
    OrthogonalityError,
    cayley_retract,
    check_orthogonal,
    check_skew,
    fht,
    fht_macs,
    hadamard,
    orth_error,
    polar_orthogonal,
    random_orthogonal,
    riemannian_grad,
)

pow2 = st.sampled_from([1, 2, 4, 8, 16, 32, 64])


def skew(rng, D, scale=1.0):
    A = rng.standard_normal((D, D))
    return scale * (A - A.T)


# ---------------------------------------------------------------- hadamard


def test_hadamard_small_cases():
    np.testing.assert_array_equal(hadamard(1), [[1.0]])
    np.testing.assert_allclose(hadamard(2), np.array([[1, 1], [1, -1]]) / math.sqrt(2))
    H4 = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]]) / 2
    np.testing.assert_allclose(hadamard(4), H4)


@pytest.mark.parametrize("D", [0, 3, 6, 12, -4])
def test_hadamard_rejects_non_power_of_two(D):
    with pytest.raises(ValueError):
        hadamard(D)


def test_hadamard_is_read_only():
    with pytest.raises(ValueError):
        hadamard(4)[0, 0] = 2.0


@given(pow2)
def test_hadamard_symmetric_involutory(D):
    H = hadamard(D)
    np.testing.assert_array_equal(H, H.T)
    np.testing.assert_allclose(H @ H, np.eye(D), atol=1e-12)
    assert np.all(np.abs(np.abs(H) - 1 / math.sqrt(D)) < 1e-15)


# ---------------------------------------------------------------- fht


@given(pow2, st.integers(0, 2**31 - 1))
def test_fht_matches_dense(D, seed):
    x = np.random.default_rng(seed).standard_normal((3, D))
    np.testing.assert_allclose(fht(x), x @ hadamard(D), atol=1e-12)


@given(pow2, st.integers(0, 2**31 - 1))
def test_fht_involution_and_norm(D, seed):
    x = np.random.default_rng(seed).standard_normal(D)
    np.testing.assert_allclose(fht(fht(x)), x, atol=1e-12)
    assert np.linalg.norm(fht(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_fht_keeps_leading_axes():
    x = np.arange(2 * 3 * 8, dtype=float).reshape(2, 3, 8)
    assert fht(x).shape == (2, 3, 8)


def test_fht_rejects_bad_length():
    with pytest.raises(ValueError):
        fht(np.ones(6))


def test_fht_macs():
    assert fht_macs(1) == 0
    assert fht_macs(8) == 24
    assert fht_macs(4096) == 4096 * 12


# ---------------------------------------------------------------- orthogonal helpers


@given(st.integers(1, 40), st.integers(0, 10_000))
def test_random_orthogonal(D, seed):
    R = random_orthogonal(D, seed)
    assert orth_error(R) < 1e-12
    np.testing.assert_array_equal(R, random_orthogonal(D, seed))


def test_check_orthogonal_rejects():
    with pytest.raises(OrthogonalityError):
        check_orthogonal(np.diag([1.0, 1.1]))
    with pytest.raises(ValueError):
        check_orthogonal(np.ones((2, 3)))


def test_check_skew_rejects_symmetric():
    with pytest.raises(ValueError):
        check_skew(np.eye(3))
    check_skew(np.zeros((3, 3)))


@given(st.integers(2, 12), st.integers(0, 10_000))
def test_riemannian_grad_is_skew_and_tangent(D, seed):
    rng = np.random.default_rng(seed)
    R = random_orthogonal(D, seed)
    G = rng.standard_normal((D, D))
    W = riemannian_grad(R, G)
    np.testing.assert_allclose(W, -W.T, atol=1e-12)
    # the tangent direction W R has the Euclidean inner product <G, W R> >= 0
    assert np.sum(G * (W @ R)) >= -1e-12


# ---------------------------------------------------------------- cayley


@given(st.floats(-3, 3), st.floats(0.01, 2.0))
def test_cayley_2x2_closed_form(w, alpha):
    # (I - aW/2)^-1 (I + aW/2) is a plane rotation by 2*atan(a w / 2)
    W = np.array([[0.0, w], [-w, 0.0]])
    theta = 2 * math.atan(alpha * w / 2)
    c, s = math.cos(theta), math.sin(theta)
    np.testing.assert_allclose(cayley_retract(np.eye(2), W, alpha), [[c, s], [-s, c]], atol=1e-13)


@given(st.integers(2, 24), st.integers(0, 10_000), st.floats(0.0, 5.0))
def test_cayley_stays_orthogonal(D, seed, alpha):
    rng = np.random.default_rng(seed)
    R = random_orthogonal(D, seed)
    out = cayley_retract(R, skew(rng, D), alpha)
    assert orth_error(out) < 1e-10 * D


def test_cayley_zero_step_is_identity_map():
    R = random_orthogonal(6, 0)
    np.testing.assert_allclose(cayley_retract(R, skew(np.random.default_rng(0), 6), 0.0), R, atol=1e-15)


def test_cayley_first_order_direction():
    rng = np.random.default_rng(3)
    R = random_orthogonal(8, 3)
    W = skew(rng, 8)
    h = 1e-6
    d = (np.array(cayley_retract(R, W, h)) - np.array(cayley_retract(R, W, -h))) / (2 * h)
    np.testing.assert_allclose(d, W @ R, atol=1e-7)


def test_cayley_1000_steps_bounded_drift():
    rng = np.random.default_rng(7)
    D = 32
    R = np.array(random_orthogonal(D, 7))
    for _ in range(1000):
        R = np.array(cayley_retract(R, skew(rng, D, 0.05), 0.5))
    assert orth_error(R) <= 1e-8 * D


def test_cayley_rejects_non_skew():
    with pytest.raises(ValueError):
        cayley_retract(np.eye(3), np.eye(3), 0.1)


# ---------------------------------------------------------------- polar


def test_polar_of_orthogonal_is_itself():
    R = random_orthogonal(7, 1)
    np.testing.assert_allclose(polar_orthogonal(R), R, atol=1e-12)


@given(st.integers(2, 5), st.integers(0, 1000))
def test_polar_beats_sampled_orthogonals(D, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((D, D))
    P = polar_orthogonal(A)
    best = np.linalg.norm(A - P)
    for k in range(200):
        O = random_orthogonal(D, seed * 1000 + k)
        assert np.linalg.norm(A - O) >= best - 1e-12
        # a local perturbation around the optimum never does better either
        near = cayley_retract(P, skew(rng, D, 1e-3), 1.0)
        assert np.linalg.norm(A - near) >= best - 1e-12


def test_polar_brute_force_10k():
    rng = np.random.default_rng(99)
    A = rng.standard_normal((3, 3))
    best = np.linalg.norm(A - polar_orthogonal(A))
    errs = [np.linalg.norm(A - random_orthogonal(3, s)) for s in range(10_000)]
    assert min(errs) >= best - 1e-12


def test_polar_rank_deficient_raises():
    with pytest.raises(np.linalg.LinAlgError, match="singular value 2"):
        polar_orthogonal(np.diag([2.0, 1.0, 0.0]))
    with pytest.raises(np.linalg.LinAlgError):
        polar_orthogonal(np.zeros((3, 3)))

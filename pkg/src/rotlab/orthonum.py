"""Orthogonal-matrix numerics.

Rotations are plain ``float64`` ndarrays. Construction routines return
read-only arrays and the ``check_*`` helpers enforce the manifold invariants
at module boundaries, so callers never need a wrapper type.
"""

from __future__ import annotations

import math

import numpy as np

ORTHO_TOL = 1e-8  # per-dimension bound on ||R R^T - I||_F
SKEW_TOL = 1e-10


class OrthogonalityError(ValueError):
    """A matrix that must be orthogonal is not, within tolerance."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def orth_error(R: np.ndarray) -> float:
    """Frobenius distance of ``R R^T`` from the identity."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.linalg.norm(R @ R.T - np.eye(R.shape[0])))


def check_orthogonal(R: np.ndarray, tol: float = ORTHO_TOL, name: str = "matrix") -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {R.shape}")
    err = orth_error(R)
    if err > tol * R.shape[0]:
        raise OrthogonalityError(f"{name} is not orthogonal: ||RR^T - I||_F = {err:.3e}")
    return R


def check_skew(W: np.ndarray, tol: float = SKEW_TOL) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"skew matrix must be square, got shape {W.shape}")
    sym = np.linalg.norm(W + W.T)
    if sym > tol * max(np.linalg.norm(W), 1e-300) and sym > 0:
        raise ValueError(f"matrix is not skew-symmetric: ||W + W^T||_F = {sym:.3e}")
    return W


def hadamard(D: int) -> np.ndarray:
    """Normalized Sylvester-Hadamard matrix of order ``D`` (a power of two).

    The result is symmetric and involutory.
    """
    if not isinstance(D, (int, np.integer)) or not is_power_of_two(int(D)):
        raise ValueError(f"Hadamard order must be a power of two, got {D!r}")
    H = np.ones((1, 1))
    while H.shape[0] < D:
        H = np.block([[H, H], [H, -H]])
    return _frozen(H / math.sqrt(D))


def fht(x: np.ndarray) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform along the last axis.

    Equal to ``x @ hadamard(D)`` (the matrix is symmetric, so also
    ``hadamard(D) @ x`` for a vector).
    """
    x = np.asarray(x, dtype=np.float64)
    D = x.shape[-1]
    if not is_power_of_two(D):
        raise ValueError(f"FHT length must be a power of two, got {D}")
    lead = x.shape[:-1]
    y = x.reshape(-1, D).copy()
    h = 1
    while h < D:
        y = y.reshape(-1, D // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        h *= 2
    return (y.reshape(*lead, D)) / math.sqrt(D)


def fht_macs(D: int) -> int:
    """Butterfly outputs of one length-``D`` transform, D*ceil(log2 D), i.e. MACs per tap."""
    return D * max(0, math.ceil(math.log2(D)))


def random_orthogonal(D: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    if D < 1:
        raise ValueError(f"dimension must be >= 1, got {D}")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((D, D))
    Q, R = np.linalg.qr(Z)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return _frozen(Q * d)


def riemannian_grad(R: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Skew representative ``G R^T - R G^T`` of the ambient gradient ``G`` at ``R``."""
    R = np.asarray(R, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if R.shape != G.shape or R.ndim != 2:
        raise ValueError(f"shape mismatch: R {R.shape} vs G {G.shape}")
    A = G @ R.T
    return A - A.T


def cayley_retract(R: np.ndarray, W: np.ndarray, alpha: float) -> np.ndarray:
    """Cayley step ``(I - a/2 W)^{-1} (I + a/2 W) R``.

    Moves along ``+W``; a descent step passes the negated skew gradient.
    """
    R = np.asarray(R, dtype=np.float64)
    W = check_skew(W)
    if R.shape != W.shape:
        raise ValueError(f"shape mismatch: R {R.shape} vs W {W.shape}")
    D = R.shape[0]
    I = np.eye(D)
    half = 0.5 * alpha * W
    try:
        out = np.linalg.solve(I - half, (I + half) @ R)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Cayley solve is singular at alpha={alpha}") from exc
    return _frozen(out)


def polar_orthogonal(A: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Frobenius-nearest orthogonal matrix ``U V^T`` from ``A = U S V^T``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"polar factor needs a square matrix, got shape {A.shape}")
    U, s, Vt = np.linalg.svd(A)
    if s.size and s[0] == 0.0:
        raise np.linalg.LinAlgError("matrix is zero; singular value 0 vanishes")
    small = np.nonzero(s <= rtol * s[0])[0]
    if small.size:
        raise np.linalg.LinAlgError(
            f"matrix is rank-deficient: singular value {small[0]} is {s[small[0]]:.3e}"
        )
    return _frozen(U @ Vt)

"""Low-rank approximation of residual transition rotations.

A transition ``T`` close to the identity is replaced by
``T_hat = I + Q M Q^T`` where ``Q`` holds the top-``r`` left singular vectors
of ``T - I`` and ``I_r + M`` is the nearest orthogonal matrix to ``Q^T T Q``.
Applying ``T_hat`` costs ``2 r D + r^2`` multiply-accumulates per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .orthonum import ORTHO_TOL, OrthogonalityError, check_orthogonal, orth_error, polar_orthogonal


@dataclass(frozen=True)
class TransitionApprox:
    Q: np.ndarray  # D x r, orthonormal columns
    M: np.ndarray  # r x r, (orthogonal - I_r)
    S: np.ndarray  # all singular values of T - I, descending

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    @property
    def det_sign(self) -> float:
        """Determinant sign of the subspace rotation (``+1`` inside SO(r))."""
        if self.rank == 0:
            return 1.0
        return float(np.sign(np.linalg.det(np.eye(self.rank) + self.M)))


def _fix_signs(U: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def build(T: np.ndarray, r: int) -> TransitionApprox:
    T = check_orthogonal(T, name="transition")
    D = T.shape[0]
    if not 0 <= r <= D:
        raise ValueError(f"rank must lie in [0, {D}], got {r}")
    delta = T - np.eye(D)
    U, S, _ = np.linalg.svd(delta)
    Q = np.ascontiguousarray(_fix_signs(U)[:, :r])
    if r == 0 or not np.any(delta):
        M = np.zeros((r, r))
    else:
        M = polar_orthogonal(Q.T @ T @ Q) - np.eye(r)
    return TransitionApprox(Q, np.ascontiguousarray(M), S)


def apply(a: TransitionApprox, x: np.ndarray) -> np.ndarray:
    """``T_hat x`` for a length-D vector, or row-wise for a (..., D) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != a.dim:
        raise ValueError(f"input has trailing dim {x.shape[-1]}, transition has dim {a.dim}")
    if a.rank == 0:
        return x.copy()
    y = x @ a.Q
    z = y @ a.M.T
    return x + z @ a.Q.T


def apply_torch(a: TransitionApprox, x: torch.Tensor) -> torch.Tensor:
    if a.rank == 0:
        return x
    Q = torch.from_numpy(a.Q)
    M = torch.from_numpy(a.M)
    return x + (x @ Q) @ M.T @ Q.T


def apply_macs(D: int, r: int) -> int:
    """Per-token multiply-accumulates of :func:`apply`: project, rotate, re-project."""
    return 2 * r * D + r * r


def dense_from(a: TransitionApprox) -> np.ndarray:
    T_hat = np.eye(a.dim) + a.Q @ a.M @ a.Q.T
    if orth_error(T_hat) > ORTHO_TOL:
        raise OrthogonalityError(
            f"approximate transition drifted off the orthogonal group ({orth_error(T_hat):.3e})"
        )
    return T_hat


def approx_error_curve(T: np.ndarray, ranks) -> list[tuple[int, float]]:
    """Frobenius error ``||T_hat_r - T||_F`` for each rank (ascending)."""
    ranks = list(ranks)
    if ranks != sorted(ranks):
        raise ValueError("ranks must be sorted ascending")
    T = np.asarray(T, dtype=np.float64)
    return [(r, float(np.linalg.norm(dense_from(build(T, r)) - T))) for r in ranks]

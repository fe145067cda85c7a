"""Hessian-guided weight quantization with column-wise error feedback."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantizer import QuantizedTensor, QuantSpec, quantize

DEFAULT_DAMPING = 0.01


@dataclass(frozen=True)
class CalibHessian:
    H: np.ndarray
    n_samples: int
    damping: float

    @property
    def dim(self) -> int:
        return self.H.shape[0]


def accumulate_hessian(X: np.ndarray, damping: float = DEFAULT_DAMPING) -> CalibHessian:
    """``(2/N) X^T X`` over the ``N`` rows of ``X`` plus ``damping * mean(diag) * I``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"need an N x D activation matrix with N >= 1, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("calibration activations contain non-finite values")
    N = X.shape[0]
    H = (2.0 / N) * (X.T @ X)
    H = 0.5 * (H + H.T)
    if damping:
        H = H + damping * np.mean(np.diag(H)) * np.eye(H.shape[0])
    return CalibHessian(H, N, damping)


def proxy_loss(W: np.ndarray, W_hat: np.ndarray, H: np.ndarray) -> float:
    """``tr(E H E^T)`` with ``E = W - W_hat``; equals ``(2/N)||E X^T||_F^2`` for undamped H."""
    E = np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)
    return float(np.einsum("ij,jk,ik->", E, H, E))


def _inverse_cholesky(H: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(H)
    Linv = np.linalg.solve(L, np.eye(H.shape[0]))
    Hinv = Linv.T @ Linv
    # upper factor U with Hinv = U^T U
    return np.linalg.cholesky(Hinv).T


def gptq_quantize(W: np.ndarray, hessian: CalibHessian, spec: QuantSpec) -> QuantizedTensor:
    """Quantize ``W`` (D_out x D) column by column, pushing each column's
    rounding error onto the remaining columns through the inverse Hessian.

    Scales are fixed per output channel from ``W`` (with ``spec.clip_ratio``)
    before the sweep, so an identity Hessian reproduces plain rounding.
    """
    if not (spec.symmetric and spec.granularity == "per-channel"):
        raise ValueError("GPTQ expects a per-channel symmetric weight spec")
    W = np.array(W, dtype=np.float64)
    H = np.array(hessian.H, dtype=np.float64)
    if H.shape != (W.shape[1], W.shape[1]):
        raise ValueError(f"Hessian {H.shape} does not match weight columns {W.shape[1]}")

    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    W[:, dead] = 0.0

    ref = quantize(W, spec, channel_axis=0)
    scale = ref.scale[:, 0]
    lo, hi = spec.qmin, spec.qmax

    try:
        U = _inverse_cholesky(H)
    except np.linalg.LinAlgError:
        bump = 10 * max(hessian.damping, DEFAULT_DAMPING) * np.mean(np.diag(H))
        try:
            U = _inverse_cholesky(H + bump * np.eye(H.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("Hessian not positive definite after extra damping") from exc

    codes = np.zeros(W.shape, dtype=np.int64)
    for j in range(W.shape[1]):
        w = W[:, j]
        c = np.clip(np.round(w / scale), lo, hi)
        codes[:, j] = c.astype(np.int64)
        err = (w - scale * c) / U[j, j]
        W[:, j + 1 :] -= np.outer(err, U[j, j + 1 :])
    return QuantizedTensor(codes, ref.scale, ref.zero_point, spec)

"""Simulated uniform integer quantizers.

Conventions: weights per output channel, symmetric; activations and K/V per
token, asymmetric. Rounding is half-to-even (``np.round``/``torch.round``).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch

Granularity = Literal["per-tensor", "per-channel", "per-token"]
CLIP_GRID = (1.00, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70)


class DegenerateGroupWarning(UserWarning):
    """A quantization group was identically zero; its scale was set to 1."""


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    symmetric: bool
    granularity: Granularity
    clip_ratio: float = 1.0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must lie in [2, 8], got {self.bits}")
        if not 0.0 < self.clip_ratio <= 1.0:
            raise ValueError(f"clip_ratio must lie in (0, 1], got {self.clip_ratio}")
        if self.granularity not in ("per-tensor", "per-channel", "per-token"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    def with_clip(self, clip_ratio: float) -> "QuantSpec":
        return QuantSpec(self.bits, self.symmetric, self.granularity, clip_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(int(d["bits"]), bool(d["symmetric"]), d["granularity"], float(d.get("clip_ratio", 1.0)))


def weight_spec(bits: int, clip_ratio: float = 1.0) -> QuantSpec:
    return QuantSpec(bits, True, "per-channel", clip_ratio)


def act_spec(bits: int) -> QuantSpec:
    return QuantSpec(bits, False, "per-token")


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    spec: QuantSpec


def _reduce_axes(ndim: int, spec: QuantSpec, channel_axis: int) -> tuple[int, ...]:
    if spec.granularity == "per-tensor":
        return tuple(range(ndim))
    if spec.granularity == "per-token":
        return (ndim - 1,)
    ax = channel_axis % ndim
    return tuple(i for i in range(ndim) if i != ax)


def _params(x: np.ndarray, spec: QuantSpec, axes: tuple[int, ...]):
    if spec.symmetric:
        amax = np.max(np.abs(x), axis=axes, keepdims=True) * spec.clip_ratio
        degenerate = amax == 0
        scale = np.where(degenerate, 1.0, amax / spec.qmax)
        zero = np.zeros_like(scale, dtype=np.int64)
    else:
        # the range always contains 0 so one-signed groups stay representable
        lo = np.minimum(np.min(x, axis=axes, keepdims=True), 0.0) * spec.clip_ratio
        hi = np.maximum(np.max(x, axis=axes, keepdims=True), 0.0) * spec.clip_ratio
        degenerate = hi == lo
        scale = np.where(degenerate, 1.0, (hi - lo) / spec.qmax)
        zero = np.clip(np.round(-lo / scale), spec.qmin, spec.qmax).astype(np.int64)
    if np.any(degenerate):
        warnings.warn(
            f"{int(np.sum(degenerate))} all-zero quantization group(s); scale set to 1",
            DegenerateGroupWarning,
            stacklevel=3,
        )
    return scale, zero


def quantize(x: np.ndarray, spec: QuantSpec, channel_axis: int = 0) -> QuantizedTensor:
    """Quantize ``x`` to integer codes.

    ``channel_axis`` names the kept axis for per-channel specs. Per-token
    groups are the rows of the last axis.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    axes = _reduce_axes(x.ndim, spec, channel_axis)
    scale, zero = _params(x, spec, axes)
    codes = np.clip(np.round(x / scale) + zero, spec.qmin, spec.qmax).astype(np.int64)
    return QuantizedTensor(codes, scale, zero, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.scale * (q.codes - q.zero_point).astype(np.float64)


def fake_quant(x: np.ndarray, spec: QuantSpec, channel_axis: int = 0) -> np.ndarray:
    return dequantize(quantize(x, spec, channel_axis))


def clip_range(x: np.ndarray, spec: QuantSpec, channel_axis: int = 0) -> np.ndarray:
    """``x`` clamped to the representable range of its group."""
    q = quantize(x, spec, channel_axis)
    lo = q.scale * (spec.qmin - q.zero_point)
    hi = q.scale * (spec.qmax - q.zero_point)
    return np.clip(np.asarray(x, dtype=np.float64), lo, hi)


def clip_search(W: np.ndarray, bits: int, grid=CLIP_GRID) -> float:
    """Fixed clip ratio for per-channel symmetric weight quantization.

    Grid search for the ratio with the smallest reconstruction MSE; ties go
    to the larger ratio.
    """
    W = np.asarray(W, dtype=np.float64)
    best, best_err = grid[0], np.inf
    for c in grid:
        err = float(np.mean((fake_quant(W, weight_spec(bits, c)) - W) ** 2))
        if err < best_err:
            best, best_err = c, err
    return best


def fake_quant_torch(x: torch.Tensor, spec: QuantSpec | None, channel_axis: int = 0) -> torch.Tensor:
    """Differentiable quantize-dequantize with a straight-through gradient.

    The backward pass is the identity inside the clip range and zero
    outside. Group statistics are treated as constants.
    """
    if spec is None:
        return x
    nd = x.dim()
    axes = _reduce_axes(nd, spec, channel_axis)
    with torch.no_grad():
        if spec.symmetric:
            amax = x.abs().amax(dim=axes, keepdim=True) * spec.clip_ratio
            scale = torch.where(amax == 0, torch.ones_like(amax), amax / spec.qmax)
            zero = torch.zeros_like(scale)
        else:
            lo = x.amin(dim=axes, keepdim=True).clamp(max=0.0) * spec.clip_ratio
            hi = x.amax(dim=axes, keepdim=True).clamp(min=0.0) * spec.clip_ratio
            scale = torch.where(hi == lo, torch.ones_like(hi), (hi - lo) / spec.qmax)
            zero = torch.round(-lo / scale).clamp(spec.qmin, spec.qmax)
        codes = torch.round(x / scale) + zero
        inside = (codes >= spec.qmin) & (codes <= spec.qmax)
        deq = scale * (codes.clamp(spec.qmin, spec.qmax) - zero)
    if not x.requires_grad:
        return deq
    return deq + inside.to(x.dtype) * (x - x.detach())

"""Rotation assignment, offline weight fusion and residual transitions.

Convention: a rotation ``R`` maps an activation column vector into its
rotated basis as ``x_rot = R @ x`` (rows: ``X @ R.T``). A weight consuming a
rotated input therefore absorbs ``R.T`` on its input side, a weight producing
a rotated output absorbs ``R`` on its output side, and a residual stream
moving from basis ``R_in`` to ``R_out`` is carried by ``T = R_out @ R_in.T``.

Per layer ``i`` the stream entering attention is in basis ``R1[i]``, the
stream entering the FFN in ``R2[i]``, and the stream leaving layer ``i`` in
``R1[i+1]`` (``R_final`` after the last layer, absorbed by the unembedding).
``R3[i]`` rotates every head of the value path. The online Hadamard sites are
the FFN hidden activation (before ``w_down``) and every head of the attention
output, i.e. the value path after the attention-weighted sum (before ``wo``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .orthonum import check_orthogonal, hadamard
from .subspace import TransitionApprox, apply_torch, build
from .toymodel import ModelConfig, ToyTransformer, fold_norm_gains, layer_key


class Scheme(str, enum.Enum):
    IDENTITY = "Identity"
    GLOBAL_HADAMARD = "GlobalHadamard"
    GLOBAL_LEARNED = "GlobalLearned"
    LAYERWISE = "LayerWise"

    @property
    def is_global(self) -> bool:
        return self in (Scheme.GLOBAL_HADAMARD, Scheme.GLOBAL_LEARNED)

    @property
    def learnable(self) -> bool:
        return self in (Scheme.GLOBAL_LEARNED, Scheme.LAYERWISE)


@dataclass
class RotationSet:
    scheme: Scheme
    R1: list[np.ndarray]
    R2: list[np.ndarray]
    R3: list[np.ndarray]
    R_final: np.ndarray
    online_r4: bool = True
    online_r5: bool = True

    @property
    def L(self) -> int:
        return len(self.R1)

    def out_basis(self, i: int) -> np.ndarray:
        return self.R1[i + 1] if i + 1 < self.L else self.R_final

    def named(self) -> dict[str, np.ndarray]:
        """Distinct learnable matrices by name (a global rotation appears once)."""
        out: dict[str, np.ndarray] = {}
        if self.scheme.is_global:
            out["R"] = self.R_final
        else:
            for i in range(self.L):
                out[f"R1.{i}"] = self.R1[i]
                out[f"R2.{i}"] = self.R2[i]
            out["R_final"] = self.R_final
        for i in range(self.L):
            out[f"R3.{i}"] = self.R3[i]
        return out

    @classmethod
    def from_named(cls, scheme: Scheme, L: int, mats: dict[str, np.ndarray],
                   online_r4: bool = True, online_r5: bool = True) -> "RotationSet":
        R3 = [mats[f"R3.{i}"] for i in range(L)]
        if scheme.is_global:
            R = mats["R"]
            return cls(scheme, [R] * L, [R] * L, R3, R, online_r4, online_r5)
        return cls(scheme, [mats[f"R1.{i}"] for i in range(L)], [mats[f"R2.{i}"] for i in range(L)],
                   R3, mats["R_final"], online_r4, online_r5)

    def check(self) -> None:
        for name, R in self.named().items():
            check_orthogonal(R, name=name)


def init_rotations(cfg: ModelConfig, scheme: Scheme | str, seed: int = 0) -> RotationSet:
    scheme = Scheme(scheme)
    L, D, Dh = cfg.L, cfg.D, cfg.D_head
    if scheme == Scheme.IDENTITY:
        I, Ih = np.eye(D), np.eye(Dh)
        return RotationSet(scheme, [I] * L, [I] * L, [Ih] * L, I, online_r4=False, online_r5=False)
    H, Hh = hadamard(D), hadamard(Dh)
    if scheme == Scheme.GLOBAL_HADAMARD:
        rng = np.random.default_rng(seed)
        signs = rng.choice([-1.0, 1.0], size=D)
        R = H * signs[None, :]
        R.flags.writeable = False
        return RotationSet(scheme, [R] * L, [R] * L, [Hh] * L, R)
    if scheme == Scheme.GLOBAL_LEARNED:
        return RotationSet(scheme, [H] * L, [H] * L, [Hh.copy() for _ in range(L)], H)
    return RotationSet(scheme, [H.copy() for _ in range(L)], [H.copy() for _ in range(L)],
                       [Hh.copy() for _ in range(L)], H.copy())


def transition(R_in: np.ndarray, R_out: np.ndarray) -> np.ndarray:
    """``R_out @ R_in.T``; exactly the identity when both bases are equal."""
    R_in = np.asarray(R_in, dtype=np.float64)
    R_out = np.asarray(R_out, dtype=np.float64)
    if R_in.shape != R_out.shape:
        raise ValueError(f"basis dimension mismatch: {R_in.shape} vs {R_out.shape}")
    if np.array_equal(R_in, R_out):
        return np.eye(R_in.shape[0])
    return R_out @ R_in.T


def transitions(rots: RotationSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(T_attn, T_ffn)``."""
    return [(transition(rots.R1[i], rots.R2[i]), transition(rots.R2[i], rots.out_basis(i)))
            for i in range(rots.L)]


def deviation_stats(R: np.ndarray, R_init: np.ndarray) -> dict[str, float]:
    R = np.asarray(R, dtype=np.float64)
    R_init = np.asarray(R_init, dtype=np.float64)
    if R.shape != R_init.shape:
        raise ValueError(f"shape mismatch: {R.shape} vs {R_init.shape}")
    denom = np.linalg.norm(R) * np.linalg.norm(R_init)
    return {
        "frob": float(np.linalg.norm(R - R_init)),
        "cos": float(np.sum(R * R_init) / denom),
    }


def dominance_ratio(T: np.ndarray) -> float:
    """Mean |diagonal| over mean |off-diagonal|; ``inf`` for a diagonal matrix."""
    T = np.asarray(T)
    diag = np.abs(np.diag(T)).mean()
    off = np.abs(T - np.diag(np.diag(T))).sum() / (T.size - T.shape[0])
    return float("inf") if off == 0 else float(diag / off)


# ---------------------------------------------------------------- fusion


def _block_diag(R: torch.Tensor, n: int) -> torch.Tensor:
    return torch.kron(torch.eye(n, dtype=R.dtype), R)


def fuse_tensors(
    params: dict[str, torch.Tensor],
    cfg: ModelConfig,
    R1: list[torch.Tensor],
    R2: list[torch.Tensor],
    R3: list[torch.Tensor],
    R_final: torch.Tensor,
    online_r4: bool,
    online_r5: bool,
) -> dict[str, torch.Tensor]:
    """Absorb rotations into gain-folded weights (differentiable in the rotations)."""
    p = dict(params)
    L, H = cfg.L, cfg.n_heads
    H4 = torch.from_numpy(np.array(hadamard(cfg.D_ffn))) if online_r4 else None
    H5 = _block_diag(torch.from_numpy(np.array(hadamard(cfg.D_head))), H) if online_r5 else None

    p["tok_emb"] = params["tok_emb"] @ R1[0].T if L else params["tok_emb"] @ R_final.T
    p["pos_emb"] = params["pos_emb"] @ R1[0].T if L else params["pos_emb"] @ R_final.T
    for i in range(L):
        k = lambda n: layer_key(i, n)  # noqa: E731
        r_out = R1[i + 1] if i + 1 < L else R_final
        r3 = _block_diag(R3[i], H)
        p[k("wq")] = params[k("wq")] @ R1[i].T
        p[k("wk")] = params[k("wk")] @ R1[i].T
        p[k("wv")] = r3 @ params[k("wv")] @ R1[i].T
        wo = R2[i] @ params[k("wo")] @ r3.T
        p[k("wo")] = wo @ H5 if H5 is not None else wo
        p[k("w_gate")] = params[k("w_gate")] @ R2[i].T
        p[k("w_up")] = params[k("w_up")] @ R2[i].T
        wd = r_out @ params[k("w_down")]
        p[k("w_down")] = wd @ H4 if H4 is not None else wd
    p["unembed"] = R_final @ params["unembed"]
    return p


@dataclass
class FusedModel:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    scheme: Scheme
    online_r4: bool
    online_r5: bool
    T: list[tuple[np.ndarray, np.ndarray]]
    approx: list[tuple[TransitionApprox, TransitionApprox]] | None = None
    rank: int | None = None
    meta: dict = field(default_factory=dict)

    def residual_ops(self):
        if self.approx is not None:
            return [tuple((lambda x, a=a: apply_torch(a, x)) for a in pair) for pair in self.approx]
        ops = []
        for pair in self.T:
            ops.append(tuple(
                None if np.array_equal(T, np.eye(T.shape[0]))
                else (lambda x, Tt=torch.from_numpy(T): x @ Tt.T)
                for T in pair
            ))
        return ops

    def with_rank(self, r: int | None) -> "FusedModel":
        """Same weights with each transition replaced by its rank-``r`` approximation.

        ``None`` restores the exact dense transitions.
        """
        approx = None if r is None else [(build(a, r), build(f, r)) for a, f in self.T]
        return FusedModel(self.cfg, self.params, self.scheme, self.online_r4, self.online_r5,
                          self.T, approx, r, dict(self.meta))

    def with_params(self, params: dict[str, np.ndarray]) -> "FusedModel":
        return FusedModel(self.cfg, params, self.scheme, self.online_r4, self.online_r5,
                          self.T, self.approx, self.rank, dict(self.meta))


def fuse(model: ToyTransformer, rots: RotationSet) -> FusedModel:
    cfg = model.cfg
    if rots.L != cfg.L:
        raise ValueError(f"rotation set has {rots.L} layers, model has {cfg.L}")
    for name, R in rots.named().items():
        want = cfg.D_head if name.startswith("R3") else cfg.D
        if R.shape != (want, want):
            raise ValueError(f"{name} has shape {R.shape}, expected {(want, want)}")
    rots.check()
    if rots.scheme == Scheme.IDENTITY:
        I = np.eye(cfg.D)
        return FusedModel(cfg, {k: v.copy() for k, v in model.params.items()}, rots.scheme,
                          False, False, [(I, I) for _ in range(cfg.L)])
    folded = {k: torch.from_numpy(v) for k, v in fold_norm_gains(model.params, cfg).items()}
    t = lambda mats: [torch.from_numpy(np.array(m)) for m in mats]  # noqa: E731
    fused = fuse_tensors(folded, cfg, t(rots.R1), t(rots.R2), t(rots.R3),
                         torch.from_numpy(np.array(rots.R_final)), rots.online_r4, rots.online_r5)
    params = {k: v.numpy().copy() for k, v in fused.items()}
    return FusedModel(cfg, params, rots.scheme, rots.online_r4, rots.online_r5, transitions(rots))

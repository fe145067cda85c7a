"""Rotation calibration on the orthogonal manifold, then weight quantization.

Only rotations train; model weights stay frozen. Each step re-fuses the
current rotations into the gain-folded weights, runs a fake-quantized
forward with straight-through rounding, and moves every rotation with a
Cayley step along its momentum-averaged skew gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .gptqsolver import accumulate_hessian, gptq_quantize, proxy_loss
from .orthonum import cayley_retract, orth_error, polar_orthogonal, riemannian_grad
from .quantizer import clip_search, dequantize, fake_quant, weight_spec
from .rotscheme import FusedModel, RotationSet, Scheme, deviation_stats, fuse_tensors
from .toymodel import (
    FP,
    LINEAR_NAMES,
    DivergenceError,
    QuantMode,
    SyntheticCorpus,
    ToyTransformer,
    cross_entropy,
    fold_norm_gains,
    layer_key,
    run,
)

log = logging.getLogger(__name__)

DRIFT_TOL = 1e-6
# Large-model reference rates are 1.5 (global) and 15 (layer-wise). The toy's
# rotation gradients are about ten times smaller relative to its weights, so
# both are scaled by 0.1 and the 10x layer-wise ratio is kept.
REFERENCE_LR = {Scheme.GLOBAL_LEARNED: 1.5, Scheme.LAYERWISE: 15.0}
DEFAULT_LR = {Scheme.GLOBAL_LEARNED: 0.15, Scheme.LAYERWISE: 1.5}


@dataclass
class CalibConfig:
    steps: int = 100
    lr: float | None = None  # None: per-scheme default
    momentum: float = 0.9
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    w_bits: int | None = None
    a_bits: int | None = 4
    kv_bits: int | None = 4
    step_clamp: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be non-negative")

    def lr_for(self, scheme: Scheme) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[scheme]

    @property
    def qmode(self) -> QuantMode:
        return QuantMode.bits(self.w_bits, self.a_bits, self.kv_bits)

    def to_dict(self) -> dict:
        return asdict(self)


def _expand(scheme: Scheme, L: int, leaves: dict[str, torch.Tensor]):
    R3 = [leaves[f"R3.{i}"] for i in range(L)]
    if scheme.is_global:
        R = leaves["R"]
        return [R] * L, [R] * L, R3, R
    return ([leaves[f"R1.{i}"] for i in range(L)], [leaves[f"R2.{i}"] for i in range(L)],
            R3, leaves["R_final"])


def _dense_residual_ops(scheme, R1, R2, R_final, L):
    if scheme.is_global:
        return None
    ops = []
    for i in range(L):
        r_out = R1[i + 1] if i + 1 < L else R_final
        t_attn = R2[i] @ R1[i].T
        t_ffn = r_out @ R2[i].T
        ops.append(((lambda x, T=t_attn: x @ T.T), (lambda x, T=t_ffn: x @ T.T)))
    return ops


def rotation_loss(model: ToyTransformer, rots: RotationSet, mats: dict[str, np.ndarray],
                  tokens: np.ndarray, qmode: QuantMode = FP, residual: str = "dense",
                  grad: bool = False):
    """Cross-entropy of the fused model as a function of the named rotations.

    ``residual`` is ``"dense"`` (exact transitions) or ``"identity"`` (dropped).
    Returns the loss, plus Euclidean gradients per rotation when ``grad``.
    """
    cfg = model.cfg
    folded = {k: torch.from_numpy(v) for k, v in fold_norm_gains(model.params, cfg).items()}
    leaves = {k: torch.tensor(np.array(v), requires_grad=grad) for k, v in mats.items()}
    R1, R2, R3, Rf = _expand(rots.scheme, cfg.L, leaves)
    fused = fuse_tensors(folded, cfg, R1, R2, R3, Rf, rots.online_r4, rots.online_r5)
    ops = _dense_residual_ops(rots.scheme, R1, R2, Rf, cfg.L) if residual == "dense" else None
    toks = torch.from_numpy(np.asarray(tokens, dtype=np.int64))
    loss = cross_entropy(run(fused, cfg, toks, qmode, rots.online_r4, rots.online_r5, ops), toks)
    if not grad:
        return loss.item()
    loss.backward()
    return loss.item(), {k: v.grad.numpy().copy() for k, v in leaves.items()}


def calibrate(model: ToyTransformer, rots: RotationSet, corpus: SyntheticCorpus,
              cfg: CalibConfig) -> tuple[RotationSet, list[dict]]:
    """Optimize the learnable rotations of ``rots``; returns them with a per-step log."""
    if not rots.scheme.learnable:
        raise ValueError(f"scheme {rots.scheme.value} has no learnable rotations")
    lr = cfg.lr_for(rots.scheme)
    rng = np.random.default_rng(cfg.seed)
    mats = {k: np.array(v) for k, v in rots.named().items()}
    init = {k: v.copy() for k, v in mats.items()}
    buf = {k: np.zeros_like(v) for k, v in mats.items()}
    rows: list[dict] = []
    for t in range(cfg.steps):
        toks = corpus.batch(rng, cfg.batch_size, cfg.seq_len)
        loss, grads = rotation_loss(model, rots, mats, toks, cfg.qmode, grad=True)
        if not math.isfinite(loss):
            raise DivergenceError(t)
        alpha = lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.steps))
        row = {"step": t, "loss": loss, "lr": alpha}
        for k in mats:
            buf[k] = cfg.momentum * buf[k] + riemannian_grad(mats[k], grads[k])
            step = alpha
            if cfg.step_clamp:
                step = min(alpha, 1.0 / (np.abs(buf[k]).sum(axis=0).max() + 1e-8))
            # descent: retract along the negated skew gradient
            R = np.array(cayley_retract(mats[k], -buf[k], step))
            drift = orth_error(R)
            if drift > DRIFT_TOL * R.shape[0]:
                log.warning("rotation %s drifted (%.2e) at step %d; re-orthogonalizing", k, drift, t)
                R = np.array(polar_orthogonal(R))
            mats[k] = R
        for k in mats:
            st = deviation_stats(mats[k], init[k])
            row[f"{k}.frob"] = st["frob"]
            row[f"{k}.cos"] = st["cos"]
        rows.append(row)
        log.debug("calib step %d loss %.5f lr %.4f", t, loss, alpha)
    out = RotationSet.from_named(rots.scheme, rots.L, mats, rots.online_r4, rots.online_r5)
    return out, rows


def grad_check(model: ToyTransformer, rots: RotationSet, tokens: np.ndarray,
               seed: int = 0, h: float = 1e-5) -> list[dict]:
    """Directional derivative of the float loss along random skew directions.

    Compares ``<G, Omega R>`` with central differences of the loss at
    ``cayley_retract(R, Omega, +-h)``. Transitions are dropped from the
    residual path so the float loss actually depends on the rotations;
    fake-quant mode is excluded (rounding is not differentiable).
    """
    rng = np.random.default_rng(seed)
    mats = {k: np.array(v) for k, v in rots.named().items()}
    _, grads = rotation_loss(model, rots, mats, tokens, FP, residual="identity", grad=True)
    report = []
    for k, R in mats.items():
        A = rng.standard_normal(R.shape)
        omega = (A - A.T) / np.linalg.norm(A - A.T)
        analytic = float(np.sum(grads[k] * (omega @ R)))
        f = {}
        for s in (+1, -1):
            trial = dict(mats)
            trial[k] = np.array(cayley_retract(R, omega, s * h))
            f[s] = rotation_loss(model, rots, trial, tokens, FP, residual="identity")
        fd = (f[1] - f[-1]) / (2 * h)
        scale = max(abs(analytic), abs(fd))
        rel = abs(analytic - fd) / scale if scale > 1e-9 else 0.0
        report.append({"rotation": k, "analytic": analytic, "finite_diff": fd, "rel_err": rel})
    return report


# ---------------------------------------------------------------- weights


def _calib_tokens(corpus: SyntheticCorpus, n_seqs: int, seq_len: int, seed: int) -> np.ndarray:
    return corpus.batch(np.random.default_rng(seed), n_seqs, seq_len)


def _layer_inputs(fused, tokens: np.ndarray, layer: int) -> dict[str, np.ndarray]:
    from .toymodel import to_torch

    rec: dict = {}
    with torch.no_grad():
        run(to_torch(fused.params), fused.cfg, torch.from_numpy(tokens), FP,
            fused.online_r4, fused.online_r5, fused.residual_ops(), rec)
    pre = layer_key(layer, "")
    return {k[len(pre):]: torch.cat(v).numpy() for k, v in rec.items() if k.startswith(pre)}


_INPUT_SITE = {"wq": "qkv_in", "wk": "qkv_in", "wv": "qkv_in", "wo": "o_in",
               "w_gate": "ffn_in", "w_up": "ffn_in", "w_down": "down_in"}


def quantize_weights_gptq(fused, corpus: SyntheticCorpus, w_bits: int, n_seqs: int = 32,
                          seed: int = 0, report: list | None = None):
    """Layer-by-layer GPTQ of every block linear weight.

    Hessians come from float activations of the partially quantized model
    (earlier layers already quantized). Each matrix gets its clip ratio from
    :func:`clip_search` first. ``report`` collects per-matrix proxy losses
    for GPTQ and plain rounding.
    """
    cfg = fused.cfg
    tokens = _calib_tokens(corpus, n_seqs, cfg.T_ctx, seed)
    params = {k: v.copy() for k, v in fused.params.items()}
    cur = fused.with_params(params) if isinstance(fused, FusedModel) else ToyTransformer(cfg, params)
    for i in range(cfg.L):
        inputs = _layer_inputs(cur, tokens, i)
        for name in LINEAR_NAMES:
            key = layer_key(i, name)
            W = params[key]
            hess = accumulate_hessian(inputs[_INPUT_SITE[name]])
            spec = weight_spec(w_bits, clip_search(W, w_bits))
            W_q = dequantize(gptq_quantize(W, hess, spec))
            if report is not None:
                W_rtn = fake_quant(W, spec)
                report.append({"weight": key, "clip_ratio": spec.clip_ratio,
                               "gptq_loss": proxy_loss(W, W_q, hess.H),
                               "rtn_loss": proxy_loss(W, W_rtn, hess.H)})
            params[key] = W_q
    return cur


def quantize_weights_rtn(fused, w_bits: int):
    """Round-to-nearest per-channel weights with a searched fixed clip ratio."""
    params = {k: v.copy() for k, v in fused.params.items()}
    for i in range(fused.cfg.L):
        for name in LINEAR_NAMES:
            key = layer_key(i, name)
            spec = weight_spec(w_bits, clip_search(params[key], w_bits))
            params[key] = fake_quant(params[key], spec)
    if isinstance(fused, FusedModel):
        return fused.with_params(params)
    return ToyTransformer(fused.cfg, params)

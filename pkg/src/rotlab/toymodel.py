"""A small pre-norm transformer with rotation-ready weights and a synthetic corpus.

Weights live as float64 numpy arrays; the forward pass runs in float64 torch
so that calibration can differentiate through fused rotations. Linear layers
follow the ``y = x @ W.T`` convention with ``W`` shaped (out, in).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .orthonum import is_power_of_two
from .quantizer import QuantSpec, act_spec, fake_quant_torch, weight_spec

log = logging.getLogger(__name__)

OUT_PROJ_SCALE = 0.1
LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    D: int = 128
    n_heads: int = 4
    D_ffn: int = 256
    vocab: int = 64
    T_ctx: int = 64
    seed: int = 0
    outlier_gain: float = 50.0

    def __post_init__(self):
        if self.L < 0 or self.D < 1 or self.n_heads < 1 or self.vocab < 2 or self.T_ctx < 2:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.D % self.n_heads:
            raise ValueError(f"D={self.D} is not divisible by n_heads={self.n_heads}")
        for name, n in (("D", self.D), ("D_head", self.D_head), ("D_ffn", self.D_ffn)):
            if not is_power_of_two(n):
                raise ValueError(f"{name}={n} must be a power of two")

    @property
    def D_head(self) -> int:
        return self.D // self.n_heads

    @property
    def n_outlier(self) -> int:
        return max(2, self.D // 64)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QuantMode:
    """Which tensors a forward pass fake-quantizes; ``None`` leaves them in float."""

    w: QuantSpec | None = None
    a: QuantSpec | None = None
    kv: QuantSpec | None = None

    @classmethod
    def bits(cls, w: int | None, a: int | None, kv: int | None = None) -> "QuantMode":
        kv = a if kv is None else kv
        return cls(
            weight_spec(w) if w else None,
            act_spec(a) if a else None,
            act_spec(kv) if kv else None,
        )

    @property
    def is_fp(self) -> bool:
        return self.w is None and self.a is None and self.kv is None


FP = QuantMode()


# ---------------------------------------------------------------- corpus


@dataclass
class SyntheticCorpus:
    vocab: int
    seed: int
    train: np.ndarray
    eval: np.ndarray
    transition: np.ndarray = field(repr=False)

    @classmethod
    def generate(cls, vocab: int = 64, seed: int = 0, n_train: int = 131072, n_eval: int = 8192,
                 concentration: float = 0.3) -> "SyntheticCorpus":
        rng = np.random.default_rng(seed)
        P = rng.dirichlet(np.full(vocab, concentration), size=vocab)
        cdf = np.cumsum(P, axis=1)
        cdf[:, -1] = 1.0
        n = n_train + n_eval
        u = rng.random(n)
        stream = np.empty(n, dtype=np.int64)
        s = int(rng.integers(vocab))
        for t in range(n):
            s = int(np.searchsorted(cdf[s], u[t], side="right"))
            stream[t] = s
        return cls(vocab, seed, stream[:n_train], stream[n_train:], P)

    def entropy_rate(self) -> float:
        """Nats per token of the generating chain under its empirical state frequencies."""
        freq = np.bincount(self.train, minlength=self.vocab) / len(self.train)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.nansum(self.transition * np.log(self.transition), axis=1)
        return float(freq @ h)

    def batch(self, rng: np.random.Generator, batch_size: int, seq_len: int) -> np.ndarray:
        starts = rng.integers(0, len(self.train) - seq_len, size=batch_size)
        return np.stack([self.train[s : s + seq_len] for s in starts])

    def eval_batches(self, seq_len: int) -> np.ndarray:
        n = len(self.eval) // seq_len
        if n == 0:
            raise ValueError("eval split is shorter than one sequence")
        return self.eval[: n * seq_len].reshape(n, seq_len)


# ---------------------------------------------------------------- model


@dataclass
class ToyTransformer:
    cfg: ModelConfig
    params: dict[str, np.ndarray]

    online_r4 = False
    online_r5 = False

    def residual_ops(self):
        return None

    def copy(self) -> "ToyTransformer":
        return ToyTransformer(self.cfg, {k: v.copy() for k, v in self.params.items()})


def layer_key(i: int, name: str) -> str:
    return f"layers.{i}.{name}"


def build_model(cfg: ModelConfig) -> ToyTransformer:
    rng = np.random.default_rng(cfg.seed)
    D, F, V = cfg.D, cfg.D_ffn, cfg.vocab

    def gauss(*shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    p: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((V, D)),
        "pos_emb": 0.1 * rng.standard_normal((cfg.T_ctx, D)),
    }
    for i in range(cfg.L):
        for norm in ("attn_norm", "ffn_norm"):
            g = np.ones(D)
            g[rng.choice(D, size=cfg.n_outlier, replace=False)] = cfg.outlier_gain
            p[layer_key(i, norm)] = g
        for name in ("wq", "wk", "wv"):
            p[layer_key(i, name)] = gauss(D, D, fan_in=D)
        p[layer_key(i, "w_gate")] = gauss(F, D, fan_in=D)
        p[layer_key(i, "w_up")] = gauss(F, D, fan_in=D)
        # residual writers start small: their inputs carry the amplified channels
        p[layer_key(i, "wo")] = OUT_PROJ_SCALE * gauss(D, D, fan_in=D)
        p[layer_key(i, "w_down")] = OUT_PROJ_SCALE * gauss(D, F, fan_in=F)
    p["final_norm"] = np.ones(D)
    # near-zero readout so the untrained loss starts at ln(V)
    p["unembed"] = rng.standard_normal((D, V)) / D
    # amplified channels meet correspondingly shrunk weight columns: the
    # activations carry the outliers, the network function does not
    return ToyTransformer(cfg, unfold_norm_gains(p, cfg, gains_from=p))


NORM_CONSUMERS = {"attn_norm": ("wq", "wk", "wv"), "ffn_norm": ("w_gate", "w_up")}


def fold_norm_gains(params: dict, cfg: ModelConfig) -> dict:
    """Move every RMSNorm gain into the columns of the weights it feeds.

    The result has unit gains and computes the same function.
    """
    p = dict(params)
    for i in range(cfg.L):
        for norm, consumers in NORM_CONSUMERS.items():
            g = params[layer_key(i, norm)]
            for name in consumers:
                p[layer_key(i, name)] = params[layer_key(i, name)] * g[None, :]
            p[layer_key(i, norm)] = np.ones_like(g)
    p["unembed"] = params["unembed"] * params["final_norm"][:, None]
    p["final_norm"] = np.ones_like(params["final_norm"])
    return p


def unfold_norm_gains(params: dict, cfg: ModelConfig, gains_from: dict) -> dict:
    """Inverse of :func:`fold_norm_gains`, restoring the gains in ``gains_from``."""
    p = dict(params)
    for i in range(cfg.L):
        for norm, consumers in NORM_CONSUMERS.items():
            g = gains_from[layer_key(i, norm)]
            for name in consumers:
                p[layer_key(i, name)] = params[layer_key(i, name)] / g[None, :]
            p[layer_key(i, norm)] = g.copy()
    p["unembed"] = params["unembed"] / gains_from["final_norm"][:, None]
    p["final_norm"] = gains_from["final_norm"].copy()
    return p


# ---------------------------------------------------------------- primitives


def rmsnorm(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def fht_torch(x: torch.Tensor) -> torch.Tensor:
    """Normalized Walsh-Hadamard transform over the last axis (autograd-friendly)."""
    D = x.shape[-1]
    lead = x.shape[:-1]
    y = x.reshape(-1, D)
    h = 1
    while h < D:
        y = y.reshape(-1, D // (2 * h), 2, h)
        a, b = y[:, :, 0, :], y[:, :, 1, :]
        y = torch.stack((a + b, a - b), dim=2)
        h *= 2
    return y.reshape(*lead, D) / math.sqrt(D)


def causal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """q, k, v: (B, H, T, Dh)."""
    T = q.shape[-2]
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    mask = torch.ones(T, T, dtype=torch.bool).triu(1)
    scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def cross_entropy(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy (teacher forced)."""
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])
    tgt = tokens[:, 1:].reshape(-1)
    return torch.nn.functional.cross_entropy(pred, tgt)


def to_torch(params: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}


def run(
    w: dict[str, torch.Tensor],
    cfg: ModelConfig,
    tokens: torch.Tensor,
    qmode: QuantMode = FP,
    online_r4: bool = False,
    online_r5: bool = False,
    residual_ops=None,
    record: dict | None = None,
) -> torch.Tensor:
    """Forward pass over torch weights; returns logits (B, T, V).

    ``residual_ops`` is a per-layer list of ``(attn_op, ffn_op)`` callables
    applied to the residual stream before each add, or ``None`` for identity.
    ``record`` collects the inputs of every linear layer when given.
    """
    B, T = tokens.shape
    H, Dh = cfg.n_heads, cfg.D_head

    def lin(x, name):
        W = w[name]
        if qmode.w is not None:
            W = fake_quant_torch(W, qmode.w, channel_axis=0)
        return x @ W.T

    def act(x, site):
        if record is not None:
            record.setdefault(site, []).append(x.detach().reshape(-1, x.shape[-1]))
        return fake_quant_torch(x, qmode.a)

    h = w["tok_emb"][tokens] + w["pos_emb"][:T]
    for i in range(cfg.L):
        k_ = lambda n: layer_key(i, n)  # noqa: E731
        ops = residual_ops[i] if residual_ops is not None else (None, None)

        u = act(rmsnorm(h) * w[k_("attn_norm")], k_("qkv_in"))
        q = lin(u, k_("wq")).view(B, T, H, Dh).transpose(1, 2)
        kk = fake_quant_torch(lin(u, k_("wk")), qmode.kv)
        v = fake_quant_torch(lin(u, k_("wv")), qmode.kv)
        kk = kk.view(B, T, H, Dh).transpose(1, 2)
        v = v.view(B, T, H, Dh).transpose(1, 2)
        o = causal_attention(q, kk, v).transpose(1, 2)
        if online_r5:
            # per-head transform of the value path; attention is linear in V,
            # so applying it after the weighted sum leaves the cache in the R3 basis
            o = fht_torch(o)
        o = o.reshape(B, T, H * Dh)
        o = lin(act(o, k_("o_in")), k_("wo"))
        h = (ops[0](h) if ops[0] is not None else h) + o

        u = act(rmsnorm(h) * w[k_("ffn_norm")], k_("ffn_in"))
        a = silu(lin(u, k_("w_gate"))) * lin(u, k_("w_up"))
        if online_r4:
            a = fht_torch(a)
        f = lin(act(a, k_("down_in")), k_("w_down"))
        h = (ops[1](h) if ops[1] is not None else h) + f

    return (rmsnorm(h) * w["final_norm"]) @ w["unembed"]


@dataclass
class ForwardResult:
    logits: np.ndarray
    activations: dict[str, np.ndarray]


def forward(model, tokens, mode: QuantMode = FP, record: bool = False) -> ForwardResult:
    """Forward a :class:`ToyTransformer` or fused model over integer tokens (B, T)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.min() < 0 or tokens.max() >= model.cfg.vocab:
        raise ValueError(f"token ids must lie in [0, {model.cfg.vocab})")
    if tokens.shape[1] > model.cfg.T_ctx:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds context {model.cfg.T_ctx}")
    rec: dict | None = {} if record else None
    with torch.no_grad():
        logits = run(
            to_torch(model.params), model.cfg, torch.from_numpy(tokens), mode,
            model.online_r4, model.online_r5, model.residual_ops(), rec,
        )
    acts = {k: torch.cat(v).numpy() for k, v in rec.items()} if rec else {}
    return ForwardResult(logits.numpy(), acts)


def perplexity(model, corpus: SyntheticCorpus, mode: QuantMode = FP, batch_size: int = 64) -> float:
    seqs = corpus.eval_batches(model.cfg.T_ctx)
    total, count = 0.0, 0
    w = to_torch(model.params)
    with torch.no_grad():
        for s in range(0, len(seqs), batch_size):
            toks = torch.from_numpy(seqs[s : s + batch_size])
            logits = run(w, model.cfg, toks, mode, model.online_r4, model.online_r5, model.residual_ops())
            n = toks.shape[0] * (toks.shape[1] - 1)
            total += float(cross_entropy(logits, toks)) * n
            count += n
    return math.exp(total / count)


def pretrain(
    model: ToyTransformer,
    corpus: SyntheticCorpus,
    steps: int = 600,
    lr: float = 0.3,
    momentum: float = 0.9,
    batch_size: int = 16,
    seed: int | None = None,
    target_ratio: float = 0.8,
    eval_every: int = 100,
    log_rows: list | None = None,
    clip: float = 1.0,
) -> ToyTransformer:
    """SGD with momentum on next-token cross-entropy.

    Descent runs on the gain-folded weights (unit norm gains) and the gains
    are unfolded again at the end, so the amplified channels do not receive
    gain-squared step sizes. Gains themselves are never trained. Returns a
    new model; the input is not modified.
    """
    out = model.copy()
    if steps <= 0:
        return out
    cfg = out.cfg
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w = {k: torch.from_numpy(v.copy()) for k, v in fold_norm_gains(out.params, cfg).items()}
    trainable = [k for k in w if not k.endswith("norm")]
    for k in trainable:
        w[k].requires_grad_(True)
    opt = torch.optim.SGD([w[k] for k in trainable], lr=lr, momentum=momentum)
    for step in range(steps):
        toks = torch.from_numpy(corpus.batch(rng, batch_size, cfg.T_ctx))
        loss = cross_entropy(run(w, cfg, toks), toks)
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_([w[k] for k in trainable], clip)
        # cosine decay keeps the late iterates stable
        for g in opt.param_groups:
            g["lr"] = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.step()
        if log_rows is not None:
            log_rows.append({"step": step, "loss": loss.item()})
        if (step + 1) % eval_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, loss.item())
    trained = {k: v.detach().numpy().copy() for k, v in w.items()}
    out.params = unfold_norm_gains(trained, cfg, gains_from=model.params)
    ppl = perplexity(out, corpus)
    if ppl >= target_ratio * cfg.vocab:
        log.warning("pretraining ended at eval PPL %.2f (target < %.2f)", ppl, target_ratio * cfg.vocab)
    return out

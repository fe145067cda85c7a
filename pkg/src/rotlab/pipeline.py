"""Experiment orchestration: pretrain, calibrate, evaluate, compare, analyze.

Every function here is deterministic given the config seeds. Wall time is
reported only where a row is meant for humans (``eval``), never in the
comparison table, so reruns of ``compare`` are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .calibrate import calibrate, quantize_weights_gptq, quantize_weights_rtn
from .config import ExperimentConfig
from .costmodel import GeometrySpec, cost
from .rotscheme import (
    FusedModel,
    RotationSet,
    Scheme,
    deviation_stats,
    dominance_ratio,
    fuse,
    init_rotations,
    transitions,
)
from .subspace import TransitionApprox, dense_from
from .toymodel import ModelConfig, QuantMode, SyntheticCorpus, ToyTransformer, build_model, perplexity, pretrain

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ("step", "loss")
RESULT_COLUMNS = (
    "scheme", "weight_method", "w_bits", "a_bits", "kv_bits", "rank", "ppl_fp", "ppl_quant",
    "transition_dev", "approx_err", "approx_err_max", "online_extra_macs", "online_params",
    "trainable_params", "wall_time_s",
)
COMPARE_COLUMNS = ("method", "scheme", "weight_method", "w_bits", "a_bits", "kv_bits", "rank", "ppl", "ppl_over_fp")
DEV_COLUMNS = ("kind", "name", "layer", "frob_dev", "cos_init", "dominance_ratio", "delta_frob")
GPTQ_COLUMNS = ("weight", "clip_ratio", "gptq_loss", "rtn_loss")


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(v):
    # repr keeps every float bit, so equal runs give equal bytes
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return "" if v is None else v


def make_corpus(cfg: ExperimentConfig) -> SyntheticCorpus:
    c = cfg.corpus
    return SyntheticCorpus.generate(cfg.model_config.vocab, cfg.seeds.corpus, c.n_train, c.n_eval, c.concentration)


# ---------------------------------------------------------------- persistence


def _corpus_meta(cfg: ExperimentConfig) -> dict:
    return {**cfg.corpus.__dict__, "vocab": cfg.model_config.vocab, "seed": cfg.seeds.corpus}


def corpus_from_meta(meta: dict) -> SyntheticCorpus:
    return SyntheticCorpus.generate(meta["vocab"], meta["seed"], meta["n_train"], meta["n_eval"], meta["concentration"])


def resolve(path: str | Path, sub: str) -> Path:
    """Accept either a checkpoint directory or a run directory holding ``sub``."""
    path = Path(path)
    if (path / ck.MANIFEST).exists():
        return path
    if (path / sub / ck.MANIFEST).exists():
        return path / sub
    raise FileNotFoundError(f"no checkpoint at {path} (looked for {ck.MANIFEST} and {sub}/{ck.MANIFEST})")


def save_model(path, model: ToyTransformer, meta: dict) -> str:
    return ck.save_checkpoint(path, "toy_transformer", {"model": model.cfg.to_dict(), **meta}, model.params)


def load_model(path) -> tuple[ToyTransformer, dict]:
    manifest, t = ck.load_checkpoint(resolve(path, "model"), "toy_transformer")
    meta = manifest["meta"]
    return ToyTransformer(ModelConfig(**meta["model"]), t), meta


def save_rotations(path, rots: RotationSet, meta: dict) -> str:
    m = {"scheme": rots.scheme.value, "L": rots.L, "online_r4": rots.online_r4, "online_r5": rots.online_r5, **meta}
    return ck.save_checkpoint(path, "rotation_set", m, rots.named())


def load_rotations(path) -> tuple[RotationSet, dict]:
    manifest, t = ck.load_checkpoint(resolve(path, "rotations"), "rotation_set")
    m = manifest["meta"]
    return RotationSet.from_named(Scheme(m["scheme"]), m["L"], t, m["online_r4"], m["online_r5"]), m


def save_fused(path, fused: FusedModel, meta: dict) -> str:
    tensors = {f"param.{k}": v for k, v in fused.params.items()}
    for i, (ta, tf) in enumerate(fused.T):
        tensors[f"T.{i}.attn"] = ta
        tensors[f"T.{i}.ffn"] = tf
    m = {"model": fused.cfg.to_dict(), "scheme": fused.scheme.value,
         "online_r4": fused.online_r4, "online_r5": fused.online_r5, **meta}
    return ck.save_checkpoint(path, "fused_model", m, tensors)


def load_fused(path) -> tuple[FusedModel, dict]:
    manifest, t = ck.load_checkpoint(resolve(path, "quantized"), "fused_model")
    m = manifest["meta"]
    cfg = ModelConfig(**m["model"])
    params = {k[len("param."):]: v for k, v in t.items() if k.startswith("param.")}
    T = [(t[f"T.{i}.attn"], t[f"T.{i}.ffn"]) for i in range(cfg.L)]
    return FusedModel(cfg, params, Scheme(m["scheme"]), m["online_r4"], m["online_r5"], T, meta=m), m


def save_approx(path, a: TransitionApprox, meta: dict | None = None) -> str:
    return ck.save_checkpoint(path, "transition_approx", {"rank": a.rank, **(meta or {})},
                              {"Q": a.Q, "M": a.M, "S": a.S})


def load_approx(path) -> TransitionApprox:
    _, t = ck.load_checkpoint(path, "transition_approx")
    return TransitionApprox(t["Q"], t["M"], t["S"])


# ---------------------------------------------------------------- stages


def run_pretrain(cfg: ExperimentConfig, corpus: SyntheticCorpus | None = None):
    """Returns ``(model, corpus, log_rows, eval_ppl)``."""
    corpus = corpus or make_corpus(cfg)
    p = cfg.pretrain
    rows: list[dict] = []
    model = pretrain(build_model(cfg.model_config), corpus, steps=p.steps, lr=p.lr, momentum=p.momentum,
                     batch_size=p.batch_size, seed=cfg.seeds.model, log_rows=rows)
    return model, corpus, rows, perplexity(model, corpus)


@dataclass
class CalibResult:
    rotations: RotationSet
    init: RotationSet
    fused: FusedModel  # weights quantized
    calib_rows: list[dict]
    gptq_rows: list[dict]


def calibrate_and_quantize(cfg: ExperimentConfig, model: ToyTransformer, corpus: SyntheticCorpus,
                           scheme: str | Scheme | None = None, bits: tuple | None = None,
                           weight_method: str | None = None) -> CalibResult:
    """Rotation training (learnable schemes only), fusion, then weight quantization."""
    scheme = Scheme(scheme or cfg.scheme)
    w_bits, a_bits, kv_bits = bits or (cfg.quant.w_bits, cfg.quant.a_bits, cfg.quant.kv_bits)
    method = weight_method or cfg.quant.weight_method
    init = init_rotations(model.cfg, scheme, cfg.seeds.rotation)
    rows: list[dict] = []
    rots = init
    if scheme.learnable:
        rots, rows = calibrate(model, init, corpus, cfg.calib_config(a_bits=a_bits, kv_bits=kv_bits))
    fused = fuse(model, rots)
    gptq_rows: list[dict] = []
    if w_bits:
        if method == "gptq":
            fused = quantize_weights_gptq(fused, corpus, w_bits, cfg.quant.gptq_samples, cfg.seeds.gptq, gptq_rows)
        else:
            fused = quantize_weights_rtn(fused, w_bits)
    fused.meta.update(w_bits=w_bits, a_bits=a_bits, kv_bits=kv_bits, weight_method=method)
    return CalibResult(rots, init, fused, rows, gptq_rows)


def parse_ranks(spec: str | list | int | None, D: int) -> list:
    """``"0,8,full"`` -> ``[0, 8, D]``; ``"dense"`` (or ``None``) keeps exact transitions."""
    if spec is None:
        return ["dense"]
    items = spec.split(",") if isinstance(spec, str) else (spec if isinstance(spec, list) else [spec])
    out = []
    for it in items:
        it = str(it).strip()
        if it == "full":
            out.append(D)
        elif it == "dense":
            out.append("dense")
        else:
            try:
                r = int(it)
            except ValueError as e:
                raise ValueError(f"rank {it!r} is not an integer, 'full' or 'dense'") from e
            if not 0 <= r <= D:
                raise ValueError(f"rank {r} outside [0, {D}]")
            out.append(r)
    return out


def _geometry(cfg: ModelConfig, scheme: Scheme, rank) -> GeometrySpec:
    name = ("Global" if scheme != Scheme.LAYERWISE
            else "LayerWise-dense" if rank == "dense" else "LayerWise-subspace")
    return GeometrySpec(cfg.L, cfg.D, cfg.D_ffn, cfg.n_heads, cfg.D_head, r=0 if rank == "dense" else rank,
                        scheme=name, vocab=cfg.vocab)


def result_row(fused: FusedModel, corpus: SyntheticCorpus, rank, ppl_fp: float) -> dict:
    """Quantized PPL plus transition and cost figures for one rank."""
    t0 = time.perf_counter()
    meta = fused.meta
    qmode = QuantMode.bits(None, meta.get("a_bits"), meta.get("kv_bits"))
    model = fused.with_rank(None if rank == "dense" else rank)
    ppl = perplexity(model, corpus, qmode)
    if not math.isfinite(ppl):
        raise FloatingPointError(f"non-finite perplexity at rank {rank}")
    devs, errs = [], []
    for j, pair in enumerate(fused.T):
        for k, T in enumerate(pair):
            devs.append(float(np.linalg.norm(T - np.eye(T.shape[0]))))
            That = T if model.approx is None else dense_from(model.approx[j][k])
            errs.append(float(np.linalg.norm(That - T)))
    rep = cost(_geometry(fused.cfg, fused.scheme, rank))
    online = 0 if fused.scheme == Scheme.IDENTITY else rep.online_extra_macs
    return {
        "scheme": fused.scheme.value, "weight_method": meta.get("weight_method", ""),
        "w_bits": meta.get("w_bits"), "a_bits": meta.get("a_bits"), "kv_bits": meta.get("kv_bits"),
        "rank": rank, "ppl_fp": ppl_fp, "ppl_quant": ppl,
        "transition_dev": ";".join(f"{d:.6g}" for d in devs),
        "approx_err": ";".join(f"{e:.6g}" for e in errs), "approx_err_max": max(errs),
        "online_extra_macs": online, "online_params": rep.online_params,
        "trainable_params": rep.trainable_params if fused.scheme.learnable else 0,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }


def evaluate(fused: FusedModel, corpus: SyntheticCorpus, ranks: list, ppl_fp: float) -> list[dict]:
    return [result_row(fused, corpus, r, ppl_fp) for r in ranks]


# ---------------------------------------------------------------- compare


COMPARE_METHODS = (
    # (label, scheme, weight method, use subspace rank)
    ("RTN", Scheme.IDENTITY, "rtn", False),
    ("GPTQ", Scheme.IDENTITY, "gptq", False),
    ("GlobalHadamard", Scheme.GLOBAL_HADAMARD, "gptq", False),
    ("GlobalLearned", Scheme.GLOBAL_LEARNED, "gptq", False),
    ("LayerWise", Scheme.LAYERWISE, "gptq", True),
)


def compare(cfg: ExperimentConfig, artifacts: Path | None = None, model=None, corpus=None) -> list[dict]:
    """Every baseline and the layer-wise scheme at each ``compare_bits`` setting.

    ``artifacts``: directory for the pretrained checkpoint and per-run
    rotation sets; their hashes land in ``artifacts/hashes.json``.
    """
    hashes: dict[str, str] = {}
    if model is None:
        model, corpus, _, ppl_fp = run_pretrain(cfg)
    else:
        ppl_fp = perplexity(model, corpus)
    if artifacts is not None:
        hashes["pretrained"] = save_model(Path(artifacts) / "pretrained", model,
                                          {"corpus": _corpus_meta(cfg), "ppl_fp": ppl_fp})
    rows = [{"method": "fp", "scheme": "", "weight_method": "", "rank": "", "ppl": ppl_fp, "ppl_over_fp": 1.0}]
    for w, a, kv in cfg.compare_bits:
        for label, scheme, method, sub in COMPARE_METHODS:
            log.info("compare: %s W%dA%dKV%d", label, w, a, kv)
            res = calibrate_and_quantize(cfg, model, corpus, scheme, (w, a, kv), method)
            rank = cfg.compare_rank if sub else "dense"
            fm = res.fused.with_rank(None if rank == "dense" else rank)
            ppl = perplexity(fm, corpus, QuantMode.bits(None, a, kv))
            if not math.isfinite(ppl):
                raise FloatingPointError(f"{label} W{w}A{a}: non-finite perplexity")
            rows.append({"method": label + (f"+r{rank}" if sub else ""), "scheme": scheme.value,
                         "weight_method": method, "w_bits": w, "a_bits": a, "kv_bits": kv,
                         "rank": rank, "ppl": ppl, "ppl_over_fp": ppl / ppl_fp})
            if artifacts is not None and scheme.learnable:
                key = f"{label}_w{w}a{a}kv{kv}"
                hashes[key] = save_rotations(Path(artifacts) / "rotations" / key, res.rotations,
                                             {"seed": cfg.seeds.rotation, "model": model.cfg.to_dict()})
    if artifacts is not None:
        ck.write_atomic(Path(artifacts) / "hashes.json", json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    return rows


# ---------------------------------------------------------------- analysis


def analyze_rotations(rots: RotationSet, init: RotationSet) -> tuple[list[dict], list[dict]]:
    """Deviation rows and the singular-value spectrum of every ``T - I``.

    The spectrum table has one row per singular index (``D`` rows) and one
    column per transition.
    """
    rows = []
    init_named = init.named()
    for name, R in rots.named().items():
        st = deviation_stats(R, init_named[name])
        layer = name.split(".")[1] if "." in name else ""
        rows.append({"kind": "rotation", "name": name, "layer": layer,
                     "frob_dev": st["frob"], "cos_init": st["cos"]})
    spectra = {}
    for i, pair in enumerate(transitions(rots)):
        for tag, T in zip(("attn", "ffn"), pair):
            delta = T - np.eye(T.shape[0])
            name = f"T.{i}.{tag}"
            rows.append({"kind": "transition", "name": name, "layer": i,
                         "dominance_ratio": dominance_ratio(T), "delta_frob": float(np.linalg.norm(delta))})
            spectra[name] = np.linalg.svd(delta, compute_uv=False)
    D = rots.R_final.shape[0]
    spec_rows = [{"index": j, **{k: float(s[j]) for k, s in spectra.items()}} for j in range(D)]
    return rows, spec_rows


def spectrum_columns(L: int) -> list[str]:
    return ["index"] + [f"T.{i}.{t}" for i in range(L) for t in ("attn", "ffn")]

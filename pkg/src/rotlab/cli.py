"""Command-line entry point: ``rotlab <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ck
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig
from .costmodel import COST_COLUMNS, PRESETS, SCHEMES, GeometrySpec, cost_table
from .orthonum import OrthogonalityError
from .rotscheme import init_rotations
from .toymodel import DivergenceError, ModelConfig

log = logging.getLogger("rotlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _cols(cols) -> str:
    return ",".join(cols)


def _write_csv(path, rows, columns) -> None:
    digest = ck.write_atomic(path, pl.to_csv(rows, columns))
    log.info("wrote %s (sha256 %s)", path, digest[:12])


def _summary(out: Path, data: dict) -> None:
    ck.write_atomic(out / "summary.json", json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    model, corpus, rows, ppl = pl.run_pretrain(cfg)
    h = pl.save_model(out / "model", model, {"corpus": pl._corpus_meta(cfg), "ppl_fp": ppl})
    _write_csv(out / "pretrain_log.csv", rows, pl.PRETRAIN_COLUMNS)
    _summary(out, {"eval_ppl": ppl, "entropy_rate_ppl": float(np.exp(corpus.entropy_rate())),
                   "checkpoint_sha256": h, "config": cfg.to_dict()})
    print(f"pretrained: eval PPL {ppl:.4f}; checkpoint {out / 'model'} ({h[:12]})")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    model, meta = pl.load_model(args.checkpoint)
    if model.cfg != cfg.model_config:
        raise ConfigError(f"config model {cfg.model_config} does not match checkpoint model {model.cfg}")
    corpus = pl.corpus_from_meta(meta["corpus"])
    out = Path(args.out)
    res = pl.calibrate_and_quantize(cfg, model, corpus)
    run_meta = {"corpus": meta["corpus"], "ppl_fp": meta["ppl_fp"], "rotation_seed": cfg.seeds.rotation,
                **{k: res.fused.meta[k] for k in ("w_bits", "a_bits", "kv_bits", "weight_method")}}
    hr = pl.save_rotations(out / "rotations", res.rotations,
                           {"seed": cfg.seeds.rotation, "model": model.cfg.to_dict()})
    hq = pl.save_fused(out / "quantized", res.fused, run_meta)
    calib_cols = ["step", "loss", "lr"] + [f"{k}.{s}" for k in res.rotations.named() for s in ("frob", "cos")]
    _write_csv(out / "calib_log.csv", res.calib_rows, calib_cols)
    _write_csv(out / "gptq_report.csv", res.gptq_rows, pl.GPTQ_COLUMNS)
    row = pl.result_row(res.fused, corpus, "dense", meta["ppl_fp"])
    _summary(out, {"scheme": cfg.scheme, "ppl_fp": meta["ppl_fp"], "ppl_quant": row["ppl_quant"],
                   "rotations_sha256": hr, "quantized_sha256": hq, "config": cfg.to_dict()})
    print(f"calibrated {cfg.scheme}: quantized PPL {row['ppl_quant']:.4f} (fp {meta['ppl_fp']:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    fused, meta = pl.load_fused(args.checkpoint)
    try:
        ranks = pl.parse_ranks(args.rank, fused.cfg.D)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    corpus = pl.corpus_from_meta(meta["corpus"])
    rows = pl.evaluate(fused, corpus, ranks, meta["ppl_fp"])
    _write_csv(args.out, rows, pl.RESULT_COLUMNS)
    for r in rows:
        print(f"rank {r['rank']}: PPL {r['ppl_quant']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    artifacts = Path(args.artifacts) if args.artifacts else out.with_name(out.stem + "_artifacts")
    rows = pl.compare(cfg, artifacts)
    _write_csv(out, rows, pl.COMPARE_COLUMNS)
    for r in rows:
        bits = f"W{r['w_bits']}A{r['a_bits']}" if r.get("w_bits") else "fp"
        print(f"{r['method']:<18} {bits:<6} PPL {r['ppl']:.4f}")
    return EXIT_OK


def _geometry(spec: str) -> tuple[str, GeometrySpec]:
    if spec in PRESETS:
        return spec, PRESETS[spec]
    p = Path(spec)
    if p.suffix == ".json" or p.exists():
        try:
            return p.stem, GeometrySpec(**json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"bad geometry file {spec}: {e}") from e
    raise ConfigError(f"unknown geometry preset {spec!r}; presets: {', '.join(PRESETS)}")


def cmd_cost(args) -> int:
    name, g = _geometry(args.geometry)
    if args.rank is not None:
        if not 0 <= args.rank <= g.D:
            raise ConfigError(f"rank {args.rank} outside [0, {g.D}]")
        g = g.replace(r=args.rank)
    text = cost_table({name: g}, tuple(args.scheme) if args.scheme else SCHEMES)
    digest = ck.write_atomic(args.out, text)
    log.info("wrote %s (sha256 %s)", args.out, digest[:12])
    print(text, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rots, meta = pl.load_rotations(args.checkpoint)
    init = init_rotations(ModelConfig(**meta["model"]), rots.scheme, meta["seed"])
    rows, spec_rows = pl.analyze_rotations(rots, init)
    out = Path(args.out)
    _write_csv(out, rows, pl.DEV_COLUMNS)
    spec_path = Path(args.spectrum) if args.spectrum else out.with_name(out.stem + "_spectrum.csv")
    _write_csv(spec_path, spec_rows, pl.spectrum_columns(rots.L))
    for r in rows:
        if r["kind"] == "transition":
            print(f"{r['name']}: dominance {r['dominance_ratio']:.3g}, |T-I|_F {r['delta_frob']:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotlab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser("pretrain", formatter_class=raw, help="train the toy transformer in float",
                       epilog="outputs: OUT/model/ (checkpoint), OUT/pretrain_log.csv, OUT/summary.json\n"
                              f"pretrain_log.csv columns: {_cols(pl.PRETRAIN_COLUMNS)}")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("calibrate", formatter_class=raw, help="train rotations, fuse, quantize weights",
                       epilog="outputs: OUT/rotations/, OUT/quantized/ (checkpoints), OUT/calib_log.csv, "
                              "OUT/gptq_report.csv, OUT/summary.json\n"
                              "calib_log.csv columns: step,loss,lr, then <rotation>.frob,<rotation>.cos per rotation\n"
                              f"gptq_report.csv columns: {_cols(pl.GPTQ_COLUMNS)}")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True, help="pretrain output directory or model checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", formatter_class=raw, help="quantized PPL at one or more subspace ranks",
                       epilog=f"CSV columns: {_cols(pl.RESULT_COLUMNS)}")
    s.add_argument("--checkpoint", required=True, help="calibrate output directory or quantized checkpoint")
    s.add_argument("--rank", default=None,
                   help="rank, comma list, 'full' (r=D) or 'dense' (exact transitions, the default)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", formatter_class=raw, help="all schemes at every compare_bits setting",
                       epilog=f"CSV columns: {_cols(pl.COMPARE_COLUMNS)}. Checkpoints and their hashes go "
                              "to --artifacts (default: <out stem>_artifacts/).")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--artifacts", default=None)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("cost", formatter_class=raw, help="online MACs and parameter counts",
                       epilog=f"presets: {', '.join(PRESETS)}. CSV columns: {_cols(COST_COLUMNS)}")
    s.add_argument("--geometry", required=True, help="preset name or geometry JSON file")
    s.add_argument("--rank", type=int, default=None, help="subspace rank r")
    s.add_argument("--scheme", action="append", choices=SCHEMES, help="restrict to these schemes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("analyze-rotations", formatter_class=raw, help="deviation and transition statistics",
                       epilog=f"dev CSV columns: {_cols(pl.DEV_COLUMNS)}; spectrum CSV: index,T.<layer>.attn,"
                              "T.<layer>.ffn,... with one row per singular value (D rows)")
    s.add_argument("--checkpoint", required=True, help="calibrate output directory or rotation checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--spectrum", default=None, help="spectrum CSV path (default: <out stem>_spectrum.csv)")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, OrthogonalityError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

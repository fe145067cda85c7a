"""W3A3 scheme comparison and LayerWise rank sweep over several seeds.

    python scripts/trend_mirror.py --config configs/default.json --seeds 0 1 2 --out runs/trend.csv

Each row is one (seed, method, rank) result with the columns of ``rotlab eval``
plus ``seed`` and ``method``.
"""

import argparse
from pathlib import Path

import torch

from rotlab import pipeline as pl
from rotlab.checkpoint import write_atomic
from rotlab.config import ExperimentConfig

METHODS = (("RTN", "Identity", "rtn"), ("GlobalHadamard", "GlobalHadamard", None),
           ("GlobalLearned", "GlobalLearned", None), ("LayerWise", "LayerWise", None))


def run_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    d = cfg.to_dict()
    d["seeds"] = {k: seed for k in d["seeds"]}
    cfg = ExperimentConfig.from_dict(d, env={})
    model, corpus, _, ppl_fp = pl.run_pretrain(cfg)
    rows = []
    for label, scheme, method in METHODS:
        res = pl.calibrate_and_quantize(cfg, model, corpus, scheme, weight_method=method)
        ranks = pl.parse_ranks(cfg.ranks, cfg.model_config.D) if label == "LayerWise" else ["dense"]
        for row in pl.evaluate(res.fused, corpus, ranks, ppl_fp):
            rows.append({"seed": seed, "method": label, **row})
            print(f"seed {seed} {label:<15} rank {row['rank']!s:>5}  ppl {row['ppl_quant']:.3f}  (fp {ppl_fp:.3f})")
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/trend.csv"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = ExperimentConfig.load(args.config)
    rows = [r for s in args.seeds for r in run_seed(cfg, s)]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(args.out, pl.to_csv(rows, ("seed", "method") + pl.RESULT_COLUMNS))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

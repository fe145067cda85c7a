"""Online cost of every scheme on the built-in geometries across a range of ranks.

    python scripts/cost_table.py --ranks 0 16 32 64 128 --out runs/cost_sweep.csv
"""

import argparse
from pathlib import Path

from rotlab.checkpoint import write_atomic
from rotlab.costmodel import COST_COLUMNS, PRESETS, cost_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ranks", type=int, nargs="+", default=[0, 16, 32, 64, 128])
    ap.add_argument("--out", type=Path, default=Path("runs/cost_sweep.csv"))
    args = ap.parse_args()
    lines = [",".join(COST_COLUMNS)]
    for r in args.ranks:
        geoms = {name: g.replace(r=min(r, g.D)) for name, g in PRESETS.items()}
        for row in cost_rows(geoms):
            lines.append(",".join(str(row[c]) for c in COST_COLUMNS))
            if row["scheme"] == "LayerWise-subspace":
                print(f"r={row['r']:>4} {row['geometry']:<12} online {row['online_extra_macs'] / 1e6:9.2f}M MACs "
                      f"{row['online_params'] / 1e6:8.2f}M params")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

"""Per-token compute and parameter accounting for rotation schemes.

Counting conventions
--------------------
* One MAC is one multiply-accumulate pair.
* A length-``n`` Hadamard transform is a cascade of ``ceil(log2 n)`` sparse
  stages, each output of which is a two-tap MAC (``a + b`` or ``a - b``), so
  it costs ``FHT_TAPS * n * ceil(log2 n)``.
* Online transforms: one over the FFN hidden activation per layer and one per
  attention head on the value path per layer.
* Subspace residual: two transitions per layer, each ``2 r D + r^2``.
* Layer-wise training parameters: ``R1, R2`` (``D x D``) and the shared head
  rotation (``D_head x D_head``) per layer, plus the output-basis rotation
  absorbed by the unembedding. Global: one ``D x D`` plus a head rotation per
  layer.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

from .orthonum import fht_macs
from .subspace import apply_macs

FHT_TAPS = 2
SCHEMES = ("Global", "LayerWise-dense", "LayerWise-subspace")


@dataclass(frozen=True)
class GeometrySpec:
    L: int
    D: int
    D_ffn: int
    n_heads: int
    D_head: int
    r: int = 0
    scheme: str = "LayerWise-subspace"
    n_kv_heads: int | None = None
    vocab: int = 0

    def __post_init__(self):
        for name in ("L", "D", "D_ffn", "n_heads", "D_head"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.r <= self.D:
            raise ValueError(f"rank r={self.r} outside [0, {self.D}]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    def replace(self, **kw) -> "GeometrySpec":
        return GeometrySpec(**{**asdict(self), **kw})


PRESETS: dict[str, GeometrySpec] = {
    "llama2-7b": GeometrySpec(L=32, D=4096, D_ffn=11008, n_heads=32, D_head=128, n_kv_heads=32, vocab=32000),
    "llama2-13b": GeometrySpec(L=40, D=5120, D_ffn=13824, n_heads=40, D_head=128, n_kv_heads=40, vocab=32000),
    "llama3-8b": GeometrySpec(L=32, D=4096, D_ffn=14336, n_heads=32, D_head=128, n_kv_heads=8, vocab=128256),
    "llama3.2-1b": GeometrySpec(L=16, D=2048, D_ffn=8192, n_heads=32, D_head=64, n_kv_heads=8, vocab=128256),
    "llama3.2-3b": GeometrySpec(L=28, D=3072, D_ffn=8192, n_heads=24, D_head=128, n_kv_heads=8, vocab=128256),
    "toy": GeometrySpec(L=4, D=128, D_ffn=256, n_heads=4, D_head=32, n_kv_heads=4, vocab=64),
}


@dataclass(frozen=True)
class CostReport:
    base_macs: int
    fht_r4: int
    fht_r5: int
    residual_subspace: int
    trainable_params: int
    online_params: int

    @property
    def online_extra_macs(self) -> int:
        return self.fht_r4 + self.fht_r5 + self.residual_subspace


def _log2c(n: int) -> int:
    return max(0, math.ceil(math.log2(n)))


def fht_cost(n: int) -> int:
    return FHT_TAPS * fht_macs(n)


def base_macs(g: GeometrySpec) -> int:
    """Linear-layer MACs per token, unembedding included."""
    kv = g.n_kv_heads or g.n_heads
    attn = 2 * g.D * g.n_heads * g.D_head + 2 * g.D * kv * g.D_head
    ffn = 3 * g.D * g.D_ffn
    return g.L * (attn + ffn) + g.D * g.vocab


def cost(g: GeometrySpec) -> CostReport:
    fht_r4 = g.L * fht_cost(g.D_ffn)
    fht_r5 = g.L * g.n_heads * fht_cost(g.D_head)
    if g.scheme == "Global":
        residual, online = 0, 0
        trainable = g.D**2 + g.L * g.D_head**2
    elif g.scheme == "LayerWise-dense":
        residual = 2 * g.L * g.D**2
        online = 2 * g.L * g.D**2
        trainable = g.L * (2 * g.D**2 + g.D_head**2) + g.D**2
    else:
        residual = 2 * g.L * apply_macs(g.D, g.r)
        online = 2 * g.L * (g.r * g.D + g.r**2)
        trainable = g.L * (2 * g.D**2 + g.D_head**2) + g.D**2
    return CostReport(base_macs(g), fht_r4, fht_r5, residual, trainable, online)


COST_COLUMNS = (
    "geometry", "scheme", "L", "D", "D_ffn", "n_heads", "D_head", "r",
    "base_macs", "fht_r4", "fht_r5", "residual_subspace", "online_extra_macs",
    "trainable_params", "online_params",
)


def cost_rows(geoms: dict[str, GeometrySpec], schemes=SCHEMES) -> list[dict]:
    rows = []
    for name, g in geoms.items():
        for scheme in schemes:
            gs = g.replace(scheme=scheme)
            rep = cost(gs)
            row = {"geometry": name, "scheme": scheme}
            row.update({f.name: getattr(gs, f.name) for f in fields(gs) if f.name in COST_COLUMNS})
            row.update(asdict(rep))
            row["online_extra_macs"] = rep.online_extra_macs
            rows.append({k: row[k] for k in COST_COLUMNS})
    return rows


def cost_table(geoms: dict[str, GeometrySpec], schemes=SCHEMES) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COST_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(cost_rows(geoms, schemes))
    return buf.getvalue()

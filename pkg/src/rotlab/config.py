"""Versioned experiment configuration with JSON-schema validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .calibrate import CalibConfig
from .rotscheme import Scheme
from .toymodel import ModelConfig

CONFIG_VERSION = 1
SEED_ENV = "RESPIN_SEED"


class ConfigError(ValueError):
    pass


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_BITS = {"type": ["integer", "null"], "minimum": 2, "maximum": 8}
_RANK = {"oneOf": [{"type": "integer", "minimum": 0}, {"enum": ["full", "dense"]}]}

SCHEMA = _obj(
    {
        "version": {"const": CONFIG_VERSION},
        "model": _obj({
            "L": _POS, "D": _POS, "n_heads": _POS, "D_ffn": _POS, "vocab": {"type": "integer", "minimum": 2},
            "T_ctx": {"type": "integer", "minimum": 2}, "outlier_gain": {"type": "number", "exclusiveMinimum": 0},
        }),
        "corpus": _obj({
            "n_train": _POS, "n_eval": _POS, "concentration": {"type": "number", "exclusiveMinimum": 0},
        }),
        "pretrain": _obj({
            "steps": {"type": "integer", "minimum": 0}, "lr": {"type": "number", "minimum": 0},
            "momentum": {"type": "number", "minimum": 0, "maximum": 1}, "batch_size": _POS,
        }),
        "scheme": {"enum": [s.value for s in Scheme]},
        "quant": _obj({
            "w_bits": _BITS, "a_bits": _BITS, "kv_bits": _BITS,
            "weight_method": {"enum": ["gptq", "rtn"]}, "gptq_samples": _POS,
        }),
        "calib": _obj({
            "steps": _POS, "lr": {"type": ["number", "null"], "minimum": 0},
            "momentum": {"type": "number", "minimum": 0, "maximum": 1},
            "batch_size": _POS, "seq_len": {"type": "integer", "minimum": 2}, "step_clamp": {"type": "boolean"},
        }),
        "rank": {"oneOf": [_RANK, {"type": "null"}]},
        "ranks": {"type": "array", "items": _RANK, "minItems": 1},
        "compare_bits": {"type": "array", "minItems": 1,
                         "items": {"type": "array", "items": {"type": "integer", "minimum": 2, "maximum": 8},
                                   "minItems": 3, "maxItems": 3}},
        "compare_rank": {"type": "integer", "minimum": 0},
        "seeds": _obj({k: {"type": "integer", "minimum": 0} for k in ("model", "corpus", "rotation", "calib", "gptq")},
                      required=("model", "corpus", "rotation", "calib", "gptq")),
        "output_dir": {"type": "string"},
    },
    required=("version", "seeds"),
)


@dataclass
class CorpusConfig:
    n_train: int = 131072
    n_eval: int = 8192
    concentration: float = 0.3


@dataclass
class PretrainConfig:
    steps: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16


@dataclass
class QuantConfig:
    w_bits: int | None = 3
    a_bits: int | None = 3
    kv_bits: int | None = 3
    weight_method: str = "gptq"
    gptq_samples: int = 32


@dataclass
class CalibSection:
    steps: int = 100
    lr: float | None = None
    momentum: float = 0.9
    batch_size: int = 8
    seq_len: int = 64
    step_clamp: bool = True


@dataclass
class Seeds:
    model: int = 0
    corpus: int = 0
    rotation: int = 0
    calib: int = 0
    gptq: int = 0


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    scheme: str = Scheme.LAYERWISE.value
    quant: QuantConfig = field(default_factory=QuantConfig)
    calib: CalibSection = field(default_factory=CalibSection)
    rank: int | str | None = 32
    ranks: list = field(default_factory=lambda: [0, 8, 16, 32, 64, "full"])
    compare_bits: list = field(default_factory=lambda: [[4, 4, 4], [3, 3, 3]])
    compare_rank: int = 32
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def __post_init__(self):
        try:
            self.model_config
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from e
        D = self.model_config.D
        for r in [self.rank, self.compare_rank, *self.ranks]:
            if isinstance(r, int) and r > D:
                raise ConfigError(f"rank {r} exceeds D={D}")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**self.model, "seed": self.seeds.model})

    def calib_config(self, w_bits=None, a_bits=None, kv_bits=None) -> CalibConfig:
        """Calibration settings; bits default to the run's activation/KV bits."""
        q = self.quant
        return CalibConfig(**asdict(self.calib), seed=self.seeds.calib, w_bits=w_bits,
                           a_bits=q.a_bits if a_bits is None else a_bits,
                           kv_bits=q.kv_bits if kv_bits is None else kv_bits)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict, env: dict | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {e.message}") from e
        d = dict(data)
        seeds = dict(d.pop("seeds"))
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                s = int(env[SEED_ENV])
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from e
            seeds = {k: s for k in seeds}
        sections = {"corpus": CorpusConfig, "pretrain": PretrainConfig, "quant": QuantConfig, "calib": CalibSection}
        kw = {k: sections[k](**d.pop(k)) for k in list(d) if k in sections}
        return cls(**d, **kw, seeds=Seeds(**seeds))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(data)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()

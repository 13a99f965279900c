"""TOML run configuration covering data, model, trainer and run settings."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .sdmm.train import DistillConfig
from .tokenizer import TokenizerConfig
from .transformer import TransformerConfig

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class DataConfig:
    train_manifest: str | None = None
    test_manifest: str | None = None
    n_points: int = 1024
    train_rotation: str = "Nr"

    def validate(self):
        if int(self.n_points) != self.n_points or self.n_points < 1:
            raise ConfigError("data.n_points", f"must be a positive integer, got {self.n_points}")
        if self.train_rotation not in ("Nr", "Rr"):
            raise ConfigError("data.train_rotation", "must be 'Nr' or 'Rr'")
        return self


@dataclass
class RunSettings:
    seed: int = 0
    out_dir: str = "run"
    checkpoint_every: int = 10
    dtype: str = "float64"
    workers: int = 1
    invariance_threshold: float = 1.0 - 1e-3

    def validate(self):
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("run.seed", f"must be a non-negative integer, got {self.seed}")
        if int(self.checkpoint_every) != self.checkpoint_every or self.checkpoint_every < 1:
            raise ConfigError("run.checkpoint_every", "must be a positive integer")
        if self.dtype not in DTYPES:
            raise ConfigError("run.dtype", f"must be one of {sorted(DTYPES)}")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ConfigError("run.workers", "must be a positive integer")
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    sdmm: DistillConfig = field(default_factory=DistillConfig)
    run: RunSettings = field(default_factory=RunSettings)
    base_dir: Path = field(default_factory=Path.cwd)

    def validate(self):
        self.data.validate()
        self.tokenizer.validate()
        self.transformer.validate(self.tokenizer.token_count)
        self.sdmm.validate(self.tokenizer.token_count)
        self.run.validate()
        if self.data.n_points < self.tokenizer.token_count:
            raise ConfigError(
                "data.n_points", f"{self.data.n_points} points cannot provide {self.tokenizer.token_count} tokens"
            )
        return self

    def resolve(self, p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {
    "data": DataConfig,
    "tokenizer": TokenizerConfig,
    "transformer": TransformerConfig,
    "sdmm": DistillConfig,
    "run": RunSettings,
}

_SEQUENCE_FIELDS = {"block_k", "projector_hidden", "global_crop", "local_crop", "scale_range"}


def _coerce(section, name, default, value):
    where = f"{section}.{name}"
    if name in _SEQUENCE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, f"expected a list, got {type(value).__name__}")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(where, f"list entries must be numbers, got {v!r}")
        return list(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if default is None or isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(where, f"expected a string, got {value!r}")
        return value
    return value


def _section(name, cls, table):
    if not isinstance(table, dict):
        raise ConfigError(name, "expected a table")
    obj = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown setting")
        setattr(obj, key, _coerce(name, key, getattr(obj, key), value))
    return obj


def from_dict(doc, base_dir=None) -> RunConfig:
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    cfg = RunConfig(**{name: _section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()})
    if base_dir is not None:
        cfg.base_dir = Path(base_dir)
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    return from_dict(doc, path.parent)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None]
        lines.append("")
    return "\n".join(lines)

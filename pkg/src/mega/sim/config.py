"""Hardware and run configuration for the accelerator model."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from ..codec import check_lengths
from ..errors import ConfigError

DEFAULTS_ENV = "MEGA_DEFAULTS"
_BUILTIN = Path(__file__).with_name("defaults.json")

FORMATS = ("dense32", "bitmap8", "adaptive")
SCHEDULES = ("naive", "partitioned", "condense")
AGGREGATIONS = ("add", "mean", "max")
BUFFER_NAMES = ("aggregation", "combination", "input", "edge", "sparse", "weight")


def defaults_path() -> Path:
    alt = os.environ.get(DEFAULTS_ENV)
    return Path(alt) if alt else _BUILTIN


def load_defaults() -> dict:
    path = defaults_path()
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read hardware defaults {path}: {exc}") from None


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown hardware field {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"hardware field {where}{key} must be an object")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class DramConfig:
    bandwidth_gbps: float
    access_granularity: int
    latency_cycles: int


@dataclass(frozen=True)
class EnergyConstants:
    pj_per_bit_dram: float
    pj_per_bit_sram: float
    pj_per_bitop: float
    leakage_mw: float


@dataclass(frozen=True)
class HwConfig:
    tiles: int
    cpes_per_tile: int
    bses_per_cpe: int
    feature_slice: int
    agg_units: int
    buffer_bytes: dict
    dram: DramConfig
    energy_constants: EnergyConstants
    clock_ghz: float

    def __post_init__(self):
        for name in ("tiles", "cpes_per_tile", "bses_per_cpe", "feature_slice", "agg_units"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        missing = set(BUFFER_NAMES) - set(self.buffer_bytes)
        if missing:
            raise ConfigError(f"missing buffer sizes: {sorted(missing)}")
        for name, v in self.buffer_bytes.items():
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"buffer {name} must be a positive byte count, got {v!r}")
        d = self.dram
        if not d.bandwidth_gbps > 0:
            raise ConfigError("DRAM bandwidth must be positive")
        if not isinstance(d.access_granularity, int) or d.access_granularity <= 0:
            raise ConfigError("DRAM access granularity must be a positive integer")
        if d.latency_cycles < 0:
            raise ConfigError("DRAM latency must be non-negative")
        e = self.energy_constants
        if min(e.pj_per_bit_dram, e.pj_per_bit_sram, e.pj_per_bitop, e.leakage_mw) < 0:
            raise ConfigError("energy constants must be non-negative")
        if not self.clock_ghz > 0:
            raise ConfigError("clock must be positive")

    @property
    def bytes_per_cycle(self) -> float:
        return self.dram.bandwidth_gbps / self.clock_ghz

    @classmethod
    def from_dict(cls, overrides: Optional[dict] = None, base: Optional[dict] = None) -> "HwConfig":
        d = _merge(load_defaults() if base is None else base, overrides or {})
        try:
            return cls(
                tiles=d["tiles"],
                cpes_per_tile=d["cpes_per_tile"],
                bses_per_cpe=d["bses_per_cpe"],
                feature_slice=d["feature_slice"],
                agg_units=d["agg_units"],
                buffer_bytes=dict(d["buffer_bytes"]),
                dram=DramConfig(**d["dram"]),
                energy_constants=EnergyConstants(**d["energy_constants"]),
                clock_ghz=d["clock_ghz"],
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed hardware config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "HwConfig":
        return HwConfig.from_dict(overrides, base=self.to_dict())

    def ideal_dram(self) -> "HwConfig":
        """Same machine with zero-latency, unbounded-bandwidth DRAM."""
        return self.replace(dram={"bandwidth_gbps": math.inf, "latency_cycles": 0})


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    aggregation: str = "add"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("layer dimensions must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass(frozen=True)
class RunConfig:
    format: str = "adaptive"
    schedule: str = "condense"
    quantized: bool = True
    layers: tuple = field(default_factory=tuple)
    lengths: tuple = (64, 128, 192)

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}; expected one of {FORMATS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.format in ("adaptive", "bitmap8") and not self.quantized:
            raise ConfigError(f"format {self.format} requires quantized features")
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "lengths", check_lengths(self.lengths))

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "schedule": self.schedule,
            "quantized": self.quantized,
            "layers": [[l.in_dim, l.out_dim, l.aggregation] for l in self.layers],
            "lengths": list(self.lengths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"format", "schedule", "quantized", "layers", "lengths"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown run fields {sorted(extra)}")
        return cls(
            format=d.get("format", "adaptive"),
            schedule=d.get("schedule", "condense"),
            quantized=bool(d.get("quantized", True)),
            layers=tuple(tuple(l) for l in d.get("layers", ())),
            lengths=tuple(d.get("lengths", (64, 128, 192))),
        )


def load_config(path) -> tuple:
    """Read ``{"hw": {...}, "run": {...}}`` and return (HwConfig, RunConfig)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return HwConfig.from_dict(doc.get("hw", {})), RunConfig.from_dict(doc.get("run", {}))


def dump_config(hw: HwConfig, run: RunConfig) -> str:
    return json.dumps({"hw": hw.to_dict(), "run": run.to_dict()}, indent=2, sort_keys=True)

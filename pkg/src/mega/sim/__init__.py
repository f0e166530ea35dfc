from .config import (
    AGGREGATIONS,
    FORMATS,
    SCHEDULES,
    HwConfig,
    LayerSpec,
    RunConfig,
    dump_config,
    load_config,
    load_defaults,
)
from .energy import ActivityCounters, EnergyBreakdown, energy_report
from .engine import CAUSES, LayerInput, SimReport, simulate
from .timing import aggregation_cycles, column_passes, combination_cycles, run_pipeline

__all__ = [
    "AGGREGATIONS", "FORMATS", "SCHEDULES", "HwConfig", "LayerSpec", "RunConfig",
    "dump_config", "load_config", "load_defaults", "ActivityCounters", "EnergyBreakdown",
    "energy_report", "CAUSES", "LayerInput", "SimReport", "simulate", "aggregation_cycles",
    "column_passes", "combination_cycles", "run_pipeline",
]

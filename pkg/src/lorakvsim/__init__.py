"""Discrete-event simulator for multi-adapter LLM serving memory policies.

Models a two-tier (HBM / main memory) block pool shared by low-rank
adapters and KV-cache blocks, a usage-dependency tree that keeps KV
residency consistent with its adapter, a cost-model-driven swapper, and
two reference baselines for comparison.
"""

from .blockpool import BlockPool, CapacityError, PoolConfig, Tier
from .config import ConfigError, ScenarioConfig, sweep_peak_throughput
from .costmodel import CostParams, UsageStats
from .deptree import DependencyTree
from .engine import Engine, LatencyModel
from .metrics import MetricsReport
from .swapper import Swapper, SwapperConfig
from .workload import ScenarioSpec, build_queries, generate, load_trace

__all__ = [
    "BlockPool", "CapacityError", "PoolConfig", "Tier",
    "ConfigError", "ScenarioConfig", "sweep_peak_throughput",
    "CostParams", "UsageStats", "DependencyTree",
    "Engine", "LatencyModel", "MetricsReport",
    "Swapper", "SwapperConfig",
    "ScenarioSpec", "build_queries", "generate", "load_trace",
]

__version__ = "0.1.0"

"""Scenario configuration: YAML schema, overrides, validation, runners.

A scenario file bundles the pool geometry, cost/swapper/latency
parameters, the policy, the adapter shape, and either a synthetic
workload spec or a trace path. Dotted `--set key=value` overrides are
applied before validation. All randomness derives from the single
top-level seed.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import yaml

from .blockpool import PoolConfig
from .costmodel import CostParams
from .engine import Engine, LatencyModel
from .swapper import SwapperConfig
from .workload import ScenarioSpec, build_queries, generate, load_trace


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the field."""


_DEFAULTS: dict = {
    "pool": {
        "hbm_blocks": 256,
        "main_blocks": 100000,
        "block_tokens": 32,
        "block_bytes": 16 * 1024 * 1024,
        "pcie_bandwidth": 16e9,
    },
    "cost": {
        "bs_window": 5.0,
        "freq_window": 60.0,
        "sigmoid_midpoint": 60.0,
        "sigmoid_scale": 15.0,
        "smoothing": 1.0,
        "prob_source": "node",
        "lora_reward_scope": "lora_only",
    },
    "swapper": {
        "monitor_interval": 0.1,
        "upper_threshold": 0.95,
        "lower_threshold": 0.70,
        "plan_during_transfer": True,
    },
    "latency": {
        "prefill_per_token": 0.0005,
        "decode_per_token": 0.002,
        "base_step": 0.02,
    },
    "lora": {
        "rank": 32,
        "bytes_per_rank": 4 * 1024 * 1024,
    },
    "policy": "fastlibra",
    "static_lru": {
        "lora_ratio": 0.2,
    },
    "workload": {
        "n_lora": 8,
        "distribution": "uniform",
        "sigma": 0.1,
        "drift": 0.0,
        "rate": 1.0,
        "duration": 60.0,
        "mean_turns": 3.0,
        "mean_new_tokens": 96.0,
        "min_new_tokens": 16,
        "mean_output_tokens": 64.0,
        "min_output_tokens": 1,
        "max_queries": None,
        "trace": None,
    },
    "seed": 0,
    "output_dir": "out",
}


@dataclass
class ScenarioConfig:
    raw: dict
    pool: PoolConfig = None
    cost: CostParams = None
    swapper: SwapperConfig = None
    latency: LatencyModel = None
    policy: str = "fastlibra"
    lora_ratio: float = 0.2
    lora_rank: int = 32
    lora_bytes_per_rank: int = 4 * 1024 * 1024
    workload: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "out"

    @classmethod
    def from_file(cls, path, overrides=()) -> "ScenarioConfig":
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config: invalid YAML: {e}") from e
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a mapping")
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides=()) -> "ScenarioConfig":
        merged = _merge(copy.deepcopy(_DEFAULTS), data)
        # Only reject lora_ratio for other policies when the user set it.
        explicit_ratio = "static_lru" in data or any(
            o.startswith("static_lru.") for o in overrides
        )
        for item in overrides:
            _apply_override(merged, item)
        cfg = cls(raw=merged)
        cfg._build(explicit_ratio)
        return cfg

    def _build(self, explicit_ratio: bool) -> None:
        m = self.raw
        try:
            self.pool = PoolConfig(
                hbm_blocks=int(m["pool"]["hbm_blocks"]),
                main_blocks=int(m["pool"]["main_blocks"]),
                block_tokens=int(m["pool"]["block_tokens"]),
                block_bytes=int(m["pool"]["block_bytes"]),
                pcie_bandwidth=float(m["pool"]["pcie_bandwidth"]),
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"pool: {e}") from e
        try:
            c = m["cost"]
            self.cost = CostParams(
                bs_window=float(c["bs_window"]),
                freq_window=float(c["freq_window"]),
                sigmoid_midpoint=float(c["sigmoid_midpoint"]),
                sigmoid_scale=float(c["sigmoid_scale"]),
                smoothing=float(c["smoothing"]),
                prob_source=str(c["prob_source"]),
                lora_reward_scope=str(c["lora_reward_scope"]),
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"cost: {e}") from e
        try:
            s = m["swapper"]
            self.swapper = SwapperConfig(
                monitor_interval=float(s["monitor_interval"]),
                upper_threshold=float(s["upper_threshold"]),
                lower_threshold=float(s["lower_threshold"]),
                plan_during_transfer=bool(s["plan_during_transfer"]),
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"swapper: {e}") from e
        try:
            lt = m["latency"]
            self.latency = LatencyModel(
                prefill_per_token=float(lt["prefill_per_token"]),
                decode_per_token=float(lt["decode_per_token"]),
                base_step=float(lt["base_step"]),
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"latency: {e}") from e

        self.policy = str(m["policy"])
        from .policies import POLICIES
        if self.policy not in POLICIES:
            raise ConfigError(
                f"policy: unknown policy {self.policy!r}; "
                f"choose from {sorted(POLICIES)}"
            )
        self.lora_ratio = float(m["static_lru"]["lora_ratio"])
        if not 0 < self.lora_ratio < 1:
            raise ConfigError(
                f"static_lru.lora_ratio: must be in (0,1), got {self.lora_ratio}"
            )
        if explicit_ratio and self.policy != "static_lru":
            raise ConfigError(
                "static_lru.lora_ratio: only valid with policy static_lru"
            )
        self.lora_rank = int(m["lora"]["rank"])
        self.lora_bytes_per_rank = int(m["lora"]["bytes_per_rank"])
        if self.lora_rank <= 0:
            raise ConfigError("lora.rank: must be > 0")
        if self.lora_bytes_per_rank <= 0:
            raise ConfigError("lora.bytes_per_rank: must be > 0")
        self.workload = dict(m["workload"])
        self.seed = int(m["seed"])
        self.output_dir = str(m["output_dir"])

    # ------------------------------------------------------------------

    def workload_spec(self) -> ScenarioSpec:
        w = self.workload
        try:
            return ScenarioSpec(
                n_lora=int(w["n_lora"]),
                distribution=str(w["distribution"]),
                sigma=float(w["sigma"]),
                drift=float(w["drift"]),
                rate=float(w["rate"]),
                duration=float(w["duration"]),
                mean_turns=float(w["mean_turns"]),
                mean_new_tokens=float(w["mean_new_tokens"]),
                min_new_tokens=int(w["min_new_tokens"]),
                mean_output_tokens=float(w["mean_output_tokens"]),
                min_output_tokens=int(w["min_output_tokens"]),
                max_queries=(None if w.get("max_queries") is None
                             else int(w["max_queries"])),
                seed=self.seed,
            )
        except (ValueError, TypeError) as e:
            raise ConfigError(f"workload: {e}") from e

    def build_queries(self):
        if self.workload.get("trace"):
            records = load_trace(self.workload["trace"])
        else:
            records = generate(self.workload_spec())
        return build_queries(records, self.pool.block_tokens)

    def make_engine(self, queries, policy: str | None = None) -> Engine:
        return Engine(
            pool_config=self.pool,
            cost_params=self.cost,
            swapper_config=self.swapper,
            latency=self.latency,
            policy=policy or self.policy,
            queries=queries,
            lora_rank=self.lora_rank,
            lora_bytes_per_rank=self.lora_bytes_per_rank,
            lora_ratio=self.lora_ratio,
        )

    def run(self, policy: str | None = None, queries=None):
        if queries is None:
            queries = self.build_queries()
        report = self.make_engine(queries, policy).run()
        report.seed = self.seed
        return report


def _merge(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if k in base and isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _apply_override(merged: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, value = item.split("=", 1)
    parts = key.split(".")
    node = merged
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: unknown section {p!r}")
        node = nxt
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown field {parts[-1]!r}")
    node[parts[-1]] = _coerce(value)


def sweep_peak_throughput(cfg: ScenarioConfig, rates, policy=None,
                          ttft_limit: float = 0.5):
    """Run fresh simulations across ascending rates; peak = highest rate
    with mean TTFT under the limit. Returns (peak_rate_or_None, rows)."""
    if list(rates) != sorted(rates):
        raise ConfigError("rates: must be ascending")
    rows = []
    peak = None
    for rate in rates:
        sub = copy.deepcopy(cfg)
        sub.workload = dict(cfg.workload)
        sub.workload["rate"] = rate
        report = sub.run(policy=policy)
        mean = report.mean_ttft()
        rows.append((rate, mean))
        if mean < ttft_limit:
            peak = rate
    return peak, rows

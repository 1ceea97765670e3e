"""Swap-value scoring for adapter and KV-cache nodes.

A node's score combines its transfer cost, its recent visit probability, a
logistic recency decay ("forget gate"), and — for adapter nodes — a reward
that scales with how many distinct adapters the current batch is expected
to need versus how many are loaded. Higher score = more valuable to keep
in (or bring into) HBM.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass


class DomainError(ValueError):
    """An input outside its mathematical domain (e.g. probability > 1)."""


@dataclass(frozen=True)
class CostParams:
    bs_window: float = 5.0        # seconds of running-query history for BS
    freq_window: float = 60.0     # seconds of visit history for probabilities
    sigmoid_midpoint: float = 60.0
    sigmoid_scale: float = 15.0
    smoothing: float = 1.0        # Laplace pseudo-count
    # prob for a KV node: its own visit share ("node") or its adapter's ("lora")
    prob_source: str = "node"
    # adapter-count reward applied to adapter nodes only, or to every node
    lora_reward_scope: str = "lora_only"

    def __post_init__(self):
        for name in ("bs_window", "freq_window", "sigmoid_midpoint",
                     "sigmoid_scale", "smoothing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.prob_source not in ("node", "lora"):
            raise ValueError(f"prob_source must be node|lora, got {self.prob_source!r}")
        if self.lora_reward_scope not in ("lora_only", "all_nodes"):
            raise ValueError(
                f"lora_reward_scope must be lora_only|all_nodes, "
                f"got {self.lora_reward_scope!r}"
            )


@dataclass
class NodeView:
    is_lora: bool
    size_bytes: float
    prob: float
    t_since_visit: float
    transfer_cost: float


@dataclass
class LoraDemand:
    low_lora: float
    now_lora: int


def expected_lora_count(probs, bs: float) -> float:
    """Expected number of distinct adapters needed by a batch of size bs.

    Each adapter i is needed unless all bs draws miss it:
    sum_i 1 - (1 - p_i)^bs. Real-valued bs is fine.
    """
    if bs < 0:
        raise DomainError(f"bs must be >= 0, got {bs}")
    total = 0.0
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probability {p} outside [0, 1]")
        total += 1.0 - (1.0 - p) ** bs
    return total


def lora_reward(low_lora: float, now_lora: int) -> float:
    """Multiplier >= 1 that boosts adapters when fewer are loaded than needed."""
    if low_lora < 0:
        raise DomainError(f"low_lora must be >= 0, got {low_lora}")
    return max(1.0, low_lora / max(now_lora, 1))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def retain_eval(view: NodeView, params: CostParams) -> float:
    """Expected cold-start saving from keeping the node resident.

    transfer_cost * prob * (1 - sigmoid((t - midpoint) / scale)): decays
    smoothly with time since last visit, vanishing for stale nodes.
    """
    decay = 1.0 - _sigmoid(
        (view.t_since_visit - params.sigmoid_midpoint) / params.sigmoid_scale
    )
    return view.transfer_cost * view.prob * decay


def node_eval(view: NodeView, demand: LoraDemand, params: CostParams) -> float:
    """Combined score used to order swap candidates."""
    score = retain_eval(view, params)
    if view.is_lora or params.lora_reward_scope == "all_nodes":
        score *= lora_reward(demand.low_lora, demand.now_lora)
    return score


class UsageStats:
    """Sliding-window visit counters and running-query load tracker.

    Feeds prob_i (per-adapter and per-node visit shares over freq_window,
    Laplace-smoothed) and BS (time-weighted mean of in-flight queries over
    bs_window) into the scoring functions.
    """

    def __init__(self, params: CostParams):
        self.params = params
        self._lora_events: deque = deque()   # (time, lora_id)
        self._node_events: deque = deque()   # (time, node_id)
        self._lora_counts: dict = {}
        self._node_counts: dict = {}
        self._total = 0
        # Piecewise-constant in-flight count: (time, level) change points.
        self._bs_changes: deque = deque()
        self._inflight = 0
        self._last_now = 0.0

    def observe_query(self, lora_id, matched_node_ids, now: float) -> None:
        self._check_now(now)
        self._lora_events.append((now, lora_id))
        self._lora_counts[lora_id] = self._lora_counts.get(lora_id, 0) + 1
        self._total += 1
        for nid in matched_node_ids:
            self._node_events.append((now, nid))
            self._node_counts[nid] = self._node_counts.get(nid, 0) + 1
        self._expire(now)

    def query_started(self, now: float) -> None:
        self._check_now(now)
        self._inflight += 1
        self._bs_changes.append((now, self._inflight))

    def query_finished(self, now: float) -> None:
        self._check_now(now)
        self._inflight -= 1
        self._bs_changes.append((now, self._inflight))

    def current_bs(self, now: float) -> float:
        """Time-weighted mean in-flight query count over the last bs_window."""
        self._check_now(now)
        window = self.params.bs_window
        start = now - window
        # Drop change points older than the window, keeping the level that
        # was in effect at `start`.
        while len(self._bs_changes) >= 2 and self._bs_changes[1][0] <= start:
            self._bs_changes.popleft()
        if not self._bs_changes:
            return float(self._inflight)
        total = 0.0
        points = list(self._bs_changes)
        for i, (t, level) in enumerate(points):
            seg_start = max(t, start)
            seg_end = points[i + 1][0] if i + 1 < len(points) else now
            if seg_end > seg_start:
                total += level * (seg_end - seg_start)
        # Before the first recorded change the level was 0.
        return total / window

    def lora_prob(self, lora_id, n_lora: int, now: float) -> float:
        self._expire(now)
        s = self.params.smoothing
        count = self._lora_counts.get(lora_id, 0)
        return (count + s) / (self._total + s * max(n_lora, 1))

    def node_prob(self, node_id, n_lora: int, now: float) -> float:
        """Visit share of a single KV node, smoothed like adapters are."""
        self._expire(now)
        s = self.params.smoothing
        count = self._node_counts.get(node_id, 0)
        return min(1.0, (count + s) / (self._total + s * max(n_lora, 1)))

    def all_lora_probs(self, lora_ids, now: float) -> list:
        n = len(lora_ids)
        return [self.lora_prob(lid, n, now) for lid in lora_ids]

    def _expire(self, now: float) -> None:
        cutoff = now - self.params.freq_window
        while self._lora_events and self._lora_events[0][0] <= cutoff:
            _, lid = self._lora_events.popleft()
            self._lora_counts[lid] -= 1
            if self._lora_counts[lid] == 0:
                del self._lora_counts[lid]
            self._total -= 1
        while self._node_events and self._node_events[0][0] <= cutoff:
            _, nid = self._node_events.popleft()
            self._node_counts[nid] -= 1
            if self._node_counts[nid] == 0:
                del self._node_counts[nid]

    def _check_now(self, now: float) -> None:
        if now < self._last_now:
            raise ValueError(f"time went backwards: {now} < {self._last_now}")
        self._last_now = now

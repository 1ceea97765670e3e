"""Threshold-driven swap planner.

Every monitor tick the planner reads HBM usage (including blocks reserved
by in-flight transfers), classifies it against an upper/lower threshold
pair, and greedily builds an ordered move list: cheapest-first eviction
when busy, most-valuable-first loading when idle, recomputing the eligible
set after each pop so multi-level progress happens within one tick. The
threshold gap is the hysteresis band that prevents ping-pong swapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blockpool import Tier
from .costmodel import LoraDemand, NodeView, node_eval


@dataclass(frozen=True)
class SwapperConfig:
    monitor_interval: float = 0.1
    upper_threshold: float = 0.95
    lower_threshold: float = 0.70
    plan_during_transfer: bool = True

    def __post_init__(self):
        if not 0 < self.lower_threshold < self.upper_threshold < 1:
            raise ValueError(
                f"need 0 < lower ({self.lower_threshold}) < "
                f"upper ({self.upper_threshold}) < 1"
            )
        if self.monitor_interval <= 0:
            raise ValueError("monitor_interval must be > 0")


@dataclass
class Move:
    node_id: int
    from_tier: object   # Tier or None
    to_tier: object     # Tier or None
    eval_score: float
    kind: str           # "lora" | "kv"


@dataclass
class SwapPlan:
    direction: object           # "out" | "in" | None
    moves: list = field(default_factory=list)
    usage_before: float = 0.0
    projected_usage: float = 0.0
    all_pinned_warning: bool = False


class Swapper:
    """Builds one SwapPlan per tick from the tree's candidate sets."""

    def __init__(self, config: SwapperConfig, cost_params, stats):
        self.config = config
        self.cost_params = cost_params
        self.stats = stats
        # Node ids evicted during the current quiet period; loading them
        # back before new demand arrives would be ping-pong, so they are
        # suppressed from swap-in until the next arrival.
        self.recent_out: set = set()

    def notify_arrival(self) -> None:
        self.recent_out.clear()

    # ------------------------------------------------------------------

    def _demand(self, tree, now: float) -> LoraDemand:
        lora_ids = list(tree.loras)
        probs = self.stats.all_lora_probs(lora_ids, now)
        bs = self.stats.current_bs(now)
        from .costmodel import expected_lora_count
        low = expected_lora_count(probs, bs)
        now_lora = sum(
            1 for n in tree.loras.values()
            if n.tier is Tier.HBM and n.inflight != "out"
        )
        return LoraDemand(low_lora=low, now_lora=now_lora)

    def _score(self, tree, node, demand, now: float, pool) -> float:
        n_lora = max(len(tree.loras), 1)
        if node.kind == "lora":
            prob = self.stats.lora_prob(node.lora_id, n_lora, now)
        elif self.cost_params.prob_source == "lora":
            prob = self.stats.lora_prob(node.lora_id, n_lora, now)
        else:
            prob = self.stats.node_prob(node.id, n_lora, now)
        size_bytes = node.size_blocks * pool.config.block_bytes
        view = NodeView(
            is_lora=(node.kind == "lora"),
            size_bytes=size_bytes,
            prob=prob,
            t_since_visit=max(0.0, now - node.last_visit),
            transfer_cost=size_bytes / pool.config.pcie_bandwidth,
        )
        return node_eval(view, demand, self.cost_params)

    def plan_tick(self, tree, pool, now: float,
                  projected_used: int | None = None) -> SwapPlan:
        """Produce this tick's plan against projected HBM accounting.

        `projected_used` may override the pool's used-block count to fold
        in reservations the engine tracks outside the pool; by default the
        pool count (which already includes transfer reservations) is used.
        """
        cap = pool.capacity(Tier.HBM)
        used = pool.used_blocks(Tier.HBM) if projected_used is None else projected_used
        usage = used / cap
        plan = SwapPlan(direction=None, usage_before=usage, projected_usage=usage)
        demand = self._demand(tree, now)

        if usage > self.config.upper_threshold:
            plan.direction = "out"
            self._plan_out(plan, tree, pool, demand, now, used, cap)
        elif usage < self.config.lower_threshold:
            moves_found = self._plan_in(plan, tree, pool, demand, now, used, cap)
            # An idle tick with nothing loadable is a steady state, not an
            # "in" phase; reporting None keeps the hysteresis property.
            plan.direction = "in" if moves_found else None
        return plan

    def _plan_out(self, plan, tree, pool, demand, now, used, cap) -> None:
        # Working set of (score, node_id); re-sorted lazily as leaves are
        # exposed. Ties broken by ascending node id.
        candidates = set(tree.out_candidate_ids())
        evicted: set = set()
        fake_no_hbm_children: dict = {}

        def eligible(nid):
            node = tree.nodes[nid]
            remaining = node.future_hbm_children - fake_no_hbm_children.get(nid, 0)
            return node.pins == 0 and node.inflight is None and remaining == 0

        while used / cap > self.config.upper_threshold:
            pool_items = [
                (self._score(tree, tree.nodes[nid], demand, now, pool), nid)
                for nid in candidates if nid not in evicted and eligible(nid)
            ]
            if not pool_items:
                plan.all_pinned_warning = True
                break
            score, nid = min(pool_items)
            node = tree.nodes[nid]
            plan.moves.append(Move(nid, Tier.HBM, Tier.MAIN, score, node.kind))
            evicted.add(nid)
            used -= node.size_blocks
            self.recent_out.add(nid)
            parent = node.parent
            if not parent.is_root:
                fake_no_hbm_children[parent.id] = \
                    fake_no_hbm_children.get(parent.id, 0) + 1
                if eligible(parent.id):
                    candidates.add(parent.id)
        plan.projected_usage = used / cap

    def _plan_in(self, plan, tree, pool, demand, now, used, cap) -> bool:
        candidates = set(tree.in_candidate_ids()) - self.recent_out
        loaded: set = set()
        fake_parent_hbm: set = set()

        def eligible(nid):
            node = tree.nodes[nid]
            if node.inflight is not None:
                return False
            return (node.parent.is_root or node.parent.future_hbm()
                    or node.parent.id in fake_parent_hbm)

        found = False
        while used / cap < self.config.lower_threshold:
            pool_items = [
                (-self._score(tree, tree.nodes[nid], demand, now, pool), nid)
                for nid in candidates
                if nid not in loaded and nid not in self.recent_out
                and eligible(nid)
            ]
            if not pool_items:
                break
            neg_score, nid = min(pool_items)
            node = tree.nodes[nid]
            # Loading never crosses the upper threshold; stop rather than
            # trigger the eviction path next tick.
            if (used + node.size_blocks) / cap > self.config.upper_threshold:
                break
            plan.moves.append(Move(nid, Tier.MAIN, Tier.HBM, -neg_score, node.kind))
            loaded.add(nid)
            found = True
            used += node.size_blocks
            fake_parent_hbm.add(nid)
            for child in node.children.values():
                if child.tier is Tier.MAIN and child.id not in self.recent_out:
                    candidates.add(child.id)
        plan.projected_usage = used / cap
        return found

"""Memory-management policies behind one interface.

Three policies share the engine's query lifecycle and differ only in how
they find room for an incoming query and what they do between queries:

- ``fastlibra``: dependency-aware. The periodic swapper rebalances HBM
  with cost-ordered, closure-preserving moves; admission shortfalls are
  covered by evicting the cheapest eligible leaves.
- ``static_lru``: one physical pool logically split into an adapter
  sub-pool and a KV sub-pool that never trade blocks; each side evicts by
  pure LRU with no dependency awareness, so KV blocks can outlive their
  adapter in HBM ("invalid KV").
- ``no_history``: unified pool, but generated KV is dropped at query
  completion and never reused; only adapters are cached, evicted LRU on
  demand.
"""

from __future__ import annotations

import heapq

from .blockpool import Tier
from .deptree import Node


class BasePolicy:
    name = "base"
    match_enabled = True     # prefix matching / reuse of history KV
    keep_kv = True           # retain KV nodes after completion
    uses_swapper = False

    def __init__(self, engine):
        self.engine = engine
        # Set by the engine before try_reserve; a policy flips it when it
        # queued evictions (so stalls are distinguishable from deadlock).
        self.made_progress = False

    def try_reserve(self, q, lora_need: int, kv_need: int,
                    protected: set) -> bool:
        """Return True iff lora_need+kv_need HBM blocks are free right now
        and sub-pool quotas (if any) allow the split. May queue evictions
        and return False; the engine retries on later events."""
        raise NotImplementedError

    def on_tick(self, now: float) -> None:
        pass

    def on_complete(self, st) -> None:
        pass

    def note_kv_touch(self, node: Node) -> None:
        pass


class FastLibraPolicy(BasePolicy):
    name = "fastlibra"
    uses_swapper = True

    def try_reserve(self, q, lora_need, kv_need, protected):
        eng = self.engine
        total = lora_need + kv_need
        free = eng.pool.free_blocks(Tier.HBM)
        if free >= total:
            return True
        deficit = total - free - eng.pending_out_total
        if deficit > 0:
            self._demand_evict(deficit, protected)
        return False

    def _demand_evict(self, deficit: int, protected: set) -> None:
        """Evict cheapest eligible leaves until `deficit` blocks are on
        their way out; the candidate set refreshes itself after each move
        because enqueueing flips in-flight markers in the tree."""
        eng = self.engine
        tree = eng.tree
        demand = eng.swapper._demand(tree, eng.now)
        freed = 0
        skipped: set = set()
        while freed < deficit:
            best = None
            for nid in tree.out_candidate_ids():
                if nid in protected or nid in skipped:
                    continue
                node = tree.nodes[nid]
                score = eng.swapper._score(tree, node, demand, eng.now,
                                           eng.pool)
                key = (score, nid)
                if best is None or key < best:
                    best = key
            if best is None:
                break
            node = tree.nodes[best[1]]
            if not eng._evict(node, eng.now, best[0]):
                skipped.add(best[1])
                continue
            freed += node.size_blocks
            self.made_progress = True

    def on_tick(self, now):
        eng = self.engine
        plan = eng.swapper.plan_tick(eng.tree, eng.pool, now)
        if plan.all_pinned_warning:
            eng.all_pinned_warnings += 1
        if plan.direction is None:
            return
        if plan.direction == "in" and eng.queue_length() > 0:
            # Queries waiting for space take priority over prefetch.
            return
        for move in plan.moves:
            node = eng.tree.nodes.get(move.node_id)
            if node is None:
                eng.stale_moves_skipped += 1
                continue
            if move.to_tier is Tier.MAIN:
                ok = (node.tier is Tier.HBM and node.inflight is None
                      and node.pins == 0 and node.future_hbm_children == 0)
                if not ok or not eng._evict(node, now, move.eval_score):
                    eng.stale_moves_skipped += 1
            else:
                ok = (node.tier is Tier.MAIN and node.inflight is None
                      and (node.parent.is_root or node.parent.future_hbm()))
                if not ok:
                    eng.stale_moves_skipped += 1
                    continue
                if eng.pool.free_blocks(Tier.HBM) < node.size_blocks:
                    break
                eng._enqueue_in(node, now, move.eval_score)


class StaticLruPolicy(BasePolicy):
    """Fixed HBM split: adapters get lora_ratio, KV the rest; LRU each."""

    name = "static_lru"

    def __init__(self, engine, lora_ratio: float):
        super().__init__(engine)
        if not 0 < lora_ratio < 1:
            raise ValueError(f"lora_ratio must be in (0,1), got {lora_ratio}")
        cap = engine.pool.capacity(Tier.HBM)
        self.lora_quota = max(1, int(cap * lora_ratio))
        self.kv_quota = cap - self.lora_quota
        # Lazy LRU heap over KV nodes: (last_visit, node_id), revalidated
        # on pop. Nodes are re-pushed whenever they are touched.
        self._kv_heap: list = []

    def note_kv_touch(self, node: Node) -> None:
        heapq.heappush(self._kv_heap, (node.last_visit, node.id))

    def try_reserve(self, q, lora_need, kv_need, protected):
        eng = self.engine
        lora_used = eng.acct["lora"]
        kv_used = eng.acct["kv_run"] + eng.acct["kv_hist"]
        ok = True
        if lora_need > self.lora_quota - lora_used:
            ok = False
            shortfall = (lora_need - (self.lora_quota - lora_used)
                         - eng.pending_out["lora"])
            if shortfall > 0:
                self._evict_loras(shortfall, protected)
        if kv_need > self.kv_quota - kv_used:
            ok = False
            shortfall = (kv_need - (self.kv_quota - kv_used)
                         - eng.pending_out["kv"])
            if shortfall > 0:
                self._evict_kv(shortfall, protected)
        if kv_need > self.kv_quota:
            raise RuntimeError(
                f"query {q.id} needs {kv_need} KV blocks but the KV "
                f"sub-pool holds only {self.kv_quota}"
            )
        if lora_need > self.lora_quota:
            raise RuntimeError(
                f"query {q.id} needs {lora_need} adapter blocks but the "
                f"adapter sub-pool holds only {self.lora_quota}"
            )
        return ok and eng.pool.free_blocks(Tier.HBM) >= lora_need + kv_need

    def _evict_loras(self, shortfall: int, protected: set) -> None:
        eng = self.engine
        cands = [
            n for n in eng.tree.loras.values()
            if n.tier is Tier.HBM and n.inflight is None and n.pins == 0
            and n.id not in protected
        ]
        cands.sort(key=lambda n: (n.last_visit, n.id))
        freed = 0
        for node in cands:
            if freed >= shortfall:
                break
            # LRU ignores dependencies: the adapter leaves even if its KV
            # blocks stay behind in the KV sub-pool.
            if eng._evict(node, eng.now, 0.0):
                freed += node.size_blocks
                self.made_progress = True

    def _evict_kv(self, shortfall: int, protected: set) -> None:
        eng = self.engine
        freed = 0
        requeue = []
        while freed < shortfall and self._kv_heap:
            ts, nid = heapq.heappop(self._kv_heap)
            node = eng.tree.nodes.get(nid)
            if node is None or node.kind != "kv":
                continue
            if ts != node.last_visit:
                continue   # stale entry; a fresher one exists
            if (node.tier is not Tier.HBM or node.inflight is not None
                    or node.pins > 0):
                continue
            if nid in protected:
                requeue.append((ts, nid))
                continue
            if eng._evict(node, eng.now, 0.0):
                freed += node.size_blocks
                self.made_progress = True
            else:
                requeue.append((ts, nid))
                break
        for item in requeue:
            heapq.heappush(self._kv_heap, item)


class NoHistoryPolicy(BasePolicy):
    """No KV reuse: prompt KV is recomputed every time and dropped at
    completion; only adapters are cached (LRU, evicted on demand)."""

    name = "no_history"
    match_enabled = False
    keep_kv = False

    def try_reserve(self, q, lora_need, kv_need, protected):
        eng = self.engine
        total = lora_need + kv_need
        free = eng.pool.free_blocks(Tier.HBM)
        if free >= total:
            return True
        shortfall = total - free - eng.pending_out_total
        if shortfall > 0:
            cands = [
                n for n in eng.tree.loras.values()
                if n.tier is Tier.HBM and n.inflight is None and n.pins == 0
                and n.id not in protected
            ]
            cands.sort(key=lambda n: (n.last_visit, n.id))
            freed = 0
            for node in cands:
                if freed >= shortfall:
                    break
                if eng._evict(node, eng.now, 0.0):
                    freed += node.size_blocks
                    self.made_progress = True
        return False


POLICIES = {
    "fastlibra": FastLibraPolicy,
    "static_lru": StaticLruPolicy,
    "no_history": NoHistoryPolicy,
}


def make_policy(name: str, engine, lora_ratio: float = 0.2):
    if name not in POLICIES:
        raise ValueError(
            f"unknown policy {name!r}; choose from {sorted(POLICIES)}"
        )
    if name == "static_lru":
        return StaticLruPolicy(engine, lora_ratio)
    return POLICIES[name](engine)

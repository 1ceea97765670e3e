"""Deterministic discrete-event serving engine.

Query lifecycle: arrive -> wait in an FCFS queue -> admit (once the
adapter and the query's working-set blocks are securable) -> prefill
(first token) -> decode -> complete. Admission kicks off any needed
transfers on two bandwidth-limited FIFO channels (one per direction);
destination blocks are reserved at enqueue and residency flips at
transfer completion, so completion times are known analytically and the
whole run is reproducible bit-for-bit.

Event ordering is a total order on (time, priority, sequence) with
priorities milestone (first token / completion) < transfer < tick <
arrival.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

from .blockpool import BlockPool, CapacityError, PoolConfig, Tier
from .costmodel import CostParams, UsageStats
from .deptree import DependencyTree, Node
from .swapper import Swapper, SwapperConfig
from .workload import content_key

P_MILESTONE = 0
P_XFER = 1
P_TICK = 2
P_ARRIVAL = 3


@dataclass(frozen=True)
class LatencyModel:
    prefill_per_token: float = 0.0005   # seconds per uncached prompt token
    decode_per_token: float = 0.002     # seconds per generated token
    base_step: float = 0.02             # fixed per-query step overhead

    def __post_init__(self):
        for name in ("prefill_per_token", "decode_per_token", "base_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class Channel:
    """Single-direction FIFO transfer pipe with a fixed byte rate."""

    def __init__(self, bandwidth: float, block_bytes: int):
        self.seconds_per_block = block_bytes / bandwidth
        self.busy_until = 0.0

    def enqueue(self, ready: float, n_blocks: int) -> tuple[float, float]:
        start = max(self.busy_until, ready)
        end = start + n_blocks * self.seconds_per_block
        self.busy_until = end
        return start, end


class TransferRec:
    __slots__ = ("node_id", "direction", "alloc", "cat", "end", "eval_score",
                 "plan_time")

    def __init__(self, node_id, direction, alloc, cat, end, eval_score,
                 plan_time):
        self.node_id = node_id
        self.direction = direction
        self.alloc = alloc
        self.cat = cat
        self.end = end
        self.eval_score = eval_score
        self.plan_time = plan_time


class QueryState:
    __slots__ = ("query", "admit", "t_lora", "t_kv", "first_token",
                 "completion", "queue_time", "lora_cold", "kv_cold",
                 "compute", "hbm_hits", "main_hits", "miss_blocks",
                 "pinned", "resv", "resv2", "chain_parent", "tail",
                 "miss_keys", "out_keys", "out_blocks")

    def __init__(self, query):
        self.query = query
        self.pinned = []
        self.resv = None
        self.resv2 = None
        self.tail = None


@dataclass
class SwapRow:
    tick_time: float
    direction: str        # "out" | "in"
    node_id: int
    kind: str             # "lora" | "kv"
    eval_score: float
    usage_before: float
    usage_after: float


class Engine:
    def __init__(self, *, pool_config: PoolConfig, cost_params: CostParams,
                 swapper_config: SwapperConfig, latency: LatencyModel,
                 policy: str, queries, lora_rank: int,
                 lora_bytes_per_rank: int, lora_ratio: float = 0.2):
        self.pool = BlockPool(pool_config)
        self.tree = DependencyTree()
        self.stats = UsageStats(cost_params)
        self.latency = latency
        self.block_tokens = pool_config.block_tokens
        self.lora_rank = lora_rank
        self.lora_blocks = self.pool.blocks_for_lora(lora_rank,
                                                     lora_bytes_per_rank)
        self.queries = sorted(queries, key=lambda q: (q.arrival, q.id))

        self.chan_in = Channel(pool_config.pcie_bandwidth,
                               pool_config.block_bytes)
        self.chan_out = Channel(pool_config.pcie_bandwidth,
                                pool_config.block_bytes)

        from .policies import make_policy
        self.policy = make_policy(policy, self, lora_ratio)
        self.swapper = (Swapper(swapper_config, cost_params, self.stats)
                        if self.policy.uses_swapper else None)
        self.swapper_config = swapper_config

        # Event loop state.
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.wait_queue: list = []   # used as deque via index pointer
        self._wait_head = 0
        self.running = 0
        self.completed = 0
        self._arrivals_left = len(self.queries)
        self._tick_pending = False
        self._owner_seq = 0
        self.inflight_transfers = 0
        self.pending_out = {"lora": 0, "kv": 0}

        # HBM composition counters; always sum to pool.used_blocks(HBM).
        self.acct = {"lora": 0, "kv_run": 0, "kv_hist": 0}

        # Outputs and audit trails.
        self.timelines: dict[int, QueryState] = {}
        self.util_rows: list = []
        self.swap_rows: list[SwapRow] = []
        self.audit_out_violations = 0
        self.audit_in_violations = 0
        self.all_pinned_warnings = 0
        self.stale_moves_skipped = 0
        self.max_invalid = 0.0
        self._invalid_integral = 0.0
        self._cur_invalid = 0.0
        self._last_event_time = 0.0

    # ------------------------------------------------------------------
    # plumbing

    def _owner(self) -> str:
        self._owner_seq += 1
        return f"x{self._owner_seq}"

    def _schedule(self, time: float, prio: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, prio, self._seq, kind, payload))

    def _acct_add(self, cat: str, n: int) -> None:
        self.acct[cat] += n

    def _acct_sub(self, cat: str, n: int) -> None:
        self.acct[cat] -= n
        assert self.acct[cat] >= 0, f"{cat} went negative"

    def _acct_move(self, src: str, dst: str, n: int) -> None:
        self._acct_sub(src, n)
        self._acct_add(dst, n)

    def _node_cat(self, node: Node) -> str:
        if node.kind == "lora":
            return "lora"
        return "kv_run" if node.pins > 0 else "kv_hist"

    def _pin(self, node: Node, st: QueryState) -> None:
        first = node.pins == 0
        self.tree.pin(node)
        st.pinned.append(node)
        if (first and node.kind == "kv" and node.tier is Tier.HBM
                and node.inflight is None):
            self._acct_move("kv_hist", "kv_run", node.size_blocks)

    def _unpin(self, node: Node) -> None:
        self.tree.unpin(node)
        if node.pins == 0 and node.kind == "kv":
            if node.tier is Tier.HBM and node.inflight is None:
                self._acct_move("kv_run", "kv_hist", node.size_blocks)
            # Now evictable again; let LRU bookkeeping see it.
            self.policy.note_kv_touch(node)

    @property
    def pending_out_total(self) -> int:
        return self.pending_out["lora"] + self.pending_out["kv"]

    def queue_length(self) -> int:
        return len(self.wait_queue) - self._wait_head

    # ------------------------------------------------------------------
    # transfers

    def _enqueue_in(self, node: Node, plan_time: float,
                    score: float = 0.0) -> float:
        """Reserve HBM and queue a main->HBM copy; returns completion time."""
        size = node.size_blocks
        cat = self._node_cat(node)
        alloc = self.pool.allocate(Tier.HBM, size, owner=self._owner())
        if node.inflight == "out":
            # The outbound copy finishes first; the reload starts after it.
            start, end = self.chan_in.enqueue(node.inflight_done, size)
            rec = TransferRec(node.id, "in", alloc, cat, end, score, plan_time)
            node.next_in = rec
        else:
            start, end = self.chan_in.enqueue(self.now, size)
            rec = TransferRec(node.id, "in", alloc, cat, end, score, plan_time)
            self.tree.set_inflight(node, "in")
            node.inflight_done = end
        self._acct_add(cat, size)
        self.inflight_transfers += 1
        self._schedule(end, P_XFER, "xfer", rec)
        return end

    def _evict(self, node: Node, plan_time: float, score: float) -> bool:
        """Queue an HBM->main copy (or discard if main is full)."""
        size = node.size_blocks
        cat = self._node_cat(node)
        try:
            main_alloc = self.pool.allocate(Tier.MAIN, size,
                                            owner=self._owner())
        except CapacityError:
            if node.kind == "kv" and not node.children:
                before = self.pool.usage(Tier.HBM)
                self.tree.apply_move(node, None, self.pool,
                                     enforce_closure=False)
                self._acct_sub(cat, size)
                self.swap_rows.append(SwapRow(
                    plan_time, "out", node.id, node.kind, score,
                    before, self.pool.usage(Tier.HBM)))
                return True
            return False
        start, end = self.chan_out.enqueue(self.now, size)
        rec = TransferRec(node.id, "out", main_alloc, cat, end, score,
                          plan_time)
        self.tree.set_inflight(node, "out")
        node.inflight_done = end
        self.pending_out["lora" if node.kind == "lora" else "kv"] += size
        self.inflight_transfers += 1
        self._schedule(end, P_XFER, "xfer", rec)
        return True

    def _on_xfer(self, rec: TransferRec) -> None:
        self.inflight_transfers -= 1
        node = self.tree.nodes.get(rec.node_id)
        if node is None:
            # Node was discarded while a transfer was pending; give back
            # the reservation. Should not happen, but stay conservative.
            self.pool.free(rec.alloc)
            self._acct_sub(rec.cat, rec.alloc.n_blocks)
            return
        if rec.direction == "out":
            self._finish_out(node, rec)
        else:
            self._finish_in(node, rec)
        self._try_admits()

    def _finish_out(self, node: Node, rec: TransferRec) -> None:
        before = self.pool.usage(Tier.HBM)
        if any(c.tier is Tier.HBM for c in node.children.values()):
            self.audit_out_violations += 1
        self.pool.free(node.alloc)
        self._acct_sub(rec.cat, node.size_blocks)
        self.pending_out["lora" if node.kind == "lora" else "kv"] \
            -= node.size_blocks
        node.alloc = rec.alloc
        self.tree.set_inflight(node, None)
        self.tree.commit_tier(node, Tier.MAIN)
        if node.next_in is not None:
            nxt = node.next_in
            node.next_in = None
            self.tree.set_inflight(node, "in")
            node.inflight_done = nxt.end
        self.swap_rows.append(SwapRow(
            rec.plan_time, "out", node.id, node.kind, rec.eval_score,
            before, self.pool.usage(Tier.HBM)))

    def _finish_in(self, node: Node, rec: TransferRec) -> None:
        before = self.pool.usage(Tier.HBM)
        parent = node.parent
        if not (parent.is_root or parent.tier is Tier.HBM):
            self.audit_in_violations += 1
        self.pool.free(node.alloc)          # main-tier copy
        node.alloc = rec.alloc
        self.tree.set_inflight(node, None)
        self.tree.commit_tier(node, Tier.HBM)
        desired = self._node_cat(node)
        if desired != rec.cat:
            self._acct_move(rec.cat, desired, node.size_blocks)
        if node.kind == "kv":
            self.policy.note_kv_touch(node)
        self.swap_rows.append(SwapRow(
            rec.plan_time, "in", node.id, node.kind, rec.eval_score,
            before, self.pool.usage(Tier.HBM)))

    # ------------------------------------------------------------------
    # arrivals and admission

    def _on_arrival(self, q) -> None:
        self._arrivals_left -= 1
        lora = self.tree.ensure_lora(q.lora_id, self.lora_rank,
                                     self.lora_blocks)
        if lora.tier is None:
            # Adapters start main-resident; main memory is the master store.
            lora.alloc = self.pool.allocate(Tier.MAIN, lora.size_blocks,
                                            owner=f"lora{q.lora_id}")
            self.tree.commit_tier(lora, Tier.MAIN)
        if self.policy.match_enabled:
            m = self.tree.match_query(q.lora_id, q.prompt_blocks, self.now,
                                      update_stats=True)
            matched_ids = m.matched_kv
            for nid in matched_ids:
                self.policy.note_kv_touch(self.tree.nodes[nid])
        else:
            lora.visits += 1
            lora.last_visit = self.now
            matched_ids = []
        self.stats.observe_query(q.lora_id, matched_ids, self.now)
        if self.swapper is not None:
            self.swapper.notify_arrival()
        self.wait_queue.append(q)
        self._ensure_tick()
        self._try_admits()

    def _try_admits(self) -> None:
        while self._wait_head < len(self.wait_queue):
            q = self.wait_queue[self._wait_head]
            if not self._attempt_admit(q):
                if (self.running == 0 and self.inflight_transfers == 0
                        and not self.policy.made_progress):
                    raise RuntimeError(
                        f"query {q.id} cannot be admitted: working set "
                        f"exceeds what the policy can free"
                    )
                break
            self._wait_head += 1
        if self._wait_head > 256 and self._wait_head * 2 > len(self.wait_queue):
            del self.wait_queue[:self._wait_head]
            self._wait_head = 0

    def _attempt_admit(self, q) -> bool:
        now = self.now
        tree = self.tree
        lora = tree.loras[q.lora_id]
        if self.policy.match_enabled:
            m = tree.match_query(q.lora_id, q.prompt_blocks, now,
                                 update_stats=False)
            matched = [tree.nodes[nid] for nid in m.matched_kv]
        else:
            matched = []

        load_nodes = []
        hbm_hits = main_hits = 0
        for n in matched:
            if n.tier is Tier.HBM and n.inflight != "out":
                hbm_hits += 1
            else:
                main_hits += 1
                if n.inflight != "in" and n.next_in is None:
                    load_nodes.append(n)
        miss = len(q.prompt_blocks) - len(matched)
        n_total = max(1, math.ceil(
            (q.prompt_tokens + q.output_tokens) / self.block_tokens))
        out_blocks = max(0, n_total - len(q.prompt_blocks))
        resv_need = miss + out_blocks
        lora_resident = lora.future_hbm() or lora.next_in is not None
        lora_need = 0 if lora_resident else lora.size_blocks
        kv_need = len(load_nodes) + resv_need

        protected = {lora.id} | {n.id for n in matched}
        self.policy.made_progress = False
        if not self.policy.try_reserve(q, lora_need, kv_need, protected):
            return False

        # ---- admit ----
        self.stats.query_started(now)
        st = QueryState(q)
        st.admit = now
        self._pin(lora, st)
        for n in matched:
            self._pin(n, st)

        if lora.inflight == "in":
            t_l = lora.inflight_done
        elif lora.next_in is not None:
            t_l = lora.next_in.end
        elif lora.tier is Tier.HBM:
            t_l = now
        else:
            t_l = self._enqueue_in(lora, now)
        t_k = now
        for n in matched:
            if n.tier is Tier.HBM and n.inflight != "out" \
                    and n.inflight != "in":
                continue
            if n.inflight == "in":
                t = n.inflight_done
            elif n.next_in is not None:
                t = n.next_in.end
            elif n.tier is Tier.MAIN or n.inflight == "out":
                t = self._enqueue_in(n, now)
            else:
                continue
            t_k = max(t_k, t)

        if resv_need:
            st.resv = self.pool.allocate(Tier.HBM, resv_need,
                                         owner=self._owner())
            self._acct_add("kv_run", resv_need)

        missed_tokens = max(0.0,
                            q.prompt_tokens - len(matched) * self.block_tokens)
        compute = (self.latency.prefill_per_token * missed_tokens
                   + self.latency.base_step)
        start = max(now, t_l, t_k)
        first = start + compute
        completion = first + self.latency.decode_per_token \
            * max(0, q.output_tokens - 1)

        st.t_lora = t_l
        st.t_kv = t_k
        st.first_token = first
        st.completion = completion
        st.queue_time = now - q.arrival
        st.lora_cold = max(0.0, t_l - now)
        st.kv_cold = max(0.0, t_k - max(now, t_l))
        st.compute = compute
        st.hbm_hits = hbm_hits
        st.main_hits = main_hits
        st.miss_blocks = miss
        st.chain_parent = matched[-1] if matched else lora
        st.miss_keys = q.prompt_blocks[len(matched):]
        st.out_keys = [content_key(q.session_id, i)
                       for i in range(len(q.prompt_blocks), n_total)]
        st.out_blocks = out_blocks

        self.timelines[q.id] = st
        self.running += 1
        self._schedule(first, P_MILESTONE, "first_token", st)
        self._schedule(completion, P_MILESTONE, "complete", st)
        return True

    # ------------------------------------------------------------------
    # prefix materialization

    def _descend_or_insert(self, st: QueryState, keys, pin: bool) -> None:
        """Walk/extend the session's KV chain from st.tail with `keys`.

        Existing HBM children are shared (and pinned when `pin`); blocks
        for genuinely new keys come out of the just-released reservation.
        Stops early if the chain becomes unextendable (a mid-flight or
        main-resident node in the way) — the remaining blocks simply are
        not cached.
        """
        parent = st.tail
        for key in keys:
            existing = parent.children.get(key)
            if existing is not None:
                if existing.tier is Tier.HBM and existing.inflight != "out":
                    if pin:
                        self._pin(existing, st)
                    parent = existing
                    continue
                break
            if parent.tier is not Tier.HBM or parent.inflight == "out":
                break
            try:
                node = self.tree.insert_kv(parent, key, self.now, self.pool,
                                           pin=pin)
            except CapacityError:
                break
            self._acct_add("kv_run" if pin else "kv_hist", 1)
            if pin:
                st.pinned.append(node)
            self.policy.note_kv_touch(node)
            parent = node
        st.tail = parent

    def _on_first_token(self, st: QueryState) -> None:
        if not self.policy.keep_kv:
            return
        if st.resv is not None:
            self.pool.free(st.resv)
            self._acct_sub("kv_run", st.resv.n_blocks)
            st.resv = None
        st.tail = st.chain_parent
        self._descend_or_insert(st, st.miss_keys, pin=True)
        if st.out_blocks:
            st.resv2 = self.pool.allocate(Tier.HBM, st.out_blocks,
                                          owner=self._owner())
            self._acct_add("kv_run", st.out_blocks)

    def _on_complete(self, st: QueryState) -> None:
        if self.policy.keep_kv:
            if st.resv2 is not None:
                self.pool.free(st.resv2)
                self._acct_sub("kv_run", st.resv2.n_blocks)
                st.resv2 = None
            if st.tail is not None:
                self._descend_or_insert(st, st.out_keys, pin=False)
        else:
            if st.resv is not None:
                self.pool.free(st.resv)
                self._acct_sub("kv_run", st.resv.n_blocks)
                st.resv = None
        for node in st.pinned:
            self._unpin(node)
        st.pinned = []
        self.stats.query_finished(self.now)
        self.running -= 1
        self.completed += 1
        self.policy.on_complete(st)
        self._try_admits()

    # ------------------------------------------------------------------
    # ticks

    def _ensure_tick(self) -> None:
        if self._tick_pending:
            return
        iv = self.swapper_config.monitor_interval
        k = math.ceil(self.now / iv - 1e-12)
        if k * iv < self.now:
            k += 1
        self._tick_pending = True
        self._schedule(k * iv, P_TICK, "tick", k)

    def _work_remaining(self) -> bool:
        return (self._arrivals_left > 0 or self.running > 0
                or self.queue_length() > 0 or self.inflight_transfers > 0)

    def _on_tick(self, k: int) -> None:
        self._tick_pending = False
        self.util_rows.append((
            self.now, self.acct["lora"], self.acct["kv_hist"],
            self.acct["kv_run"],
        ))
        total = sum(self.acct.values())
        assert total == self.pool.used_blocks(Tier.HBM), (
            f"hbm split {self.acct} != used {self.pool.used_blocks(Tier.HBM)}"
        )
        self.policy.on_tick(self.now)
        if self._work_remaining():
            iv = self.swapper_config.monitor_interval
            self._tick_pending = True
            self._schedule((k + 1) * iv, P_TICK, "tick", k + 1)

    # ------------------------------------------------------------------
    # main loop

    def run(self):
        for q in self.queries:
            self._schedule(q.arrival, P_ARRIVAL, "arrival", q)
        if self.queries:
            self._tick_pending = True
            self._schedule(0.0, P_TICK, "tick", 0)
        handlers = {
            "arrival": self._on_arrival,
            "first_token": self._on_first_token,
            "complete": self._on_complete,
            "xfer": self._on_xfer,
            "tick": self._on_tick,
        }
        while self._heap:
            t, prio, seq, kind, payload = heapq.heappop(self._heap)
            self._invalid_integral += self._cur_invalid * (t - self._last_event_time)
            self._last_event_time = t
            self.now = t
            handlers[kind](payload)
            self._cur_invalid = self.tree.invalid_kv_fraction()
            if self._cur_invalid > self.max_invalid:
                self.max_invalid = self._cur_invalid

        if self.completed != len(self.queries):
            raise RuntimeError(
                f"run ended with {self.completed}/{len(self.queries)} "
                f"queries completed"
            )
        self.pool.check_conservation()
        from .metrics import build_report
        return build_report(self)

    def invalid_time_mean(self) -> float:
        if self._last_event_time <= 0:
            return 0.0
        return self._invalid_integral / self._last_event_time

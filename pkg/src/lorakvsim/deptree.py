"""Usage-dependency tree over LoRA adapters and their KV-cache blocks.

Layout: a virtual root, adapter nodes on layer two, and per-adapter prefix
subtrees of KV blocks below them. A KV block is usable only while its whole
ancestor chain (including the adapter) is HBM-resident, so eviction runs
leaf-first and loading runs root-first ("residency closure"). An HBM KV
block whose adapter is not HBM-resident is "invalid": it wastes HBM without
being matchable.

The tree keeps incremental candidate sets (HBM leaves eligible for
swap-out, main-memory frontier eligible for swap-in) and an O(1) invalid-KV
counter so the simulator can audit every event cheaply. Slow full-scan
oracles are provided for tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .blockpool import BlockPool, Tier

LORA = "lora"
KV = "kv"


class ClosureViolation(Exception):
    """A residency move would break the parent-before-child discipline."""


class PinUnderflowError(Exception):
    """unpin() on a node with zero pins."""


class Node:
    __slots__ = (
        "id", "kind", "lora_id", "rank", "content_key", "parent", "children",
        "tier", "size_blocks", "visits", "last_visit", "pins",
        "inflight", "inflight_done", "next_in", "alloc",
        "future_hbm_children",
    )

    def __init__(self, node_id, kind, parent, size_blocks, *, lora_id=None,
                 rank=None, content_key=None):
        self.id = node_id
        self.kind = kind
        self.lora_id = lora_id
        self.rank = rank
        self.content_key = content_key
        self.parent = parent
        self.children: dict = {}
        self.tier = None  # Tier.HBM, Tier.MAIN, or None (absent)
        self.size_blocks = size_blocks
        self.visits = 0
        self.last_visit = 0.0
        self.pins = 0
        # In-flight transfer bookkeeping (driven by the engine):
        # inflight is None, "in", or "out"; next_in queues a re-load that
        # starts once an outbound transfer lands.
        self.inflight = None
        self.inflight_done = 0.0
        self.next_in = None
        self.alloc = None
        # Children that are in HBM or headed there; a node may leave HBM
        # only when this is zero.
        self.future_hbm_children = 0

    @property
    def is_root(self) -> bool:
        return self.parent is None

    def future_hbm(self) -> bool:
        """True if this node is in HBM and staying, or headed into HBM."""
        if self.inflight == "in":
            return True
        return self.tier is Tier.HBM and self.inflight != "out"

    def __repr__(self):
        return f"<Node {self.id} {self.kind} tier={self.tier} pins={self.pins}>"


@dataclass
class MatchResult:
    lora_resident: bool
    lora_node: int
    matched_kv: list[int]
    hbm_hit_blocks: int
    main_hit_blocks: int
    miss_blocks: int


class DependencyTree:
    def __init__(self):
        self._ids = itertools.count(1)
        self.root = Node(0, "root", None, 0)
        self.root.tier = Tier.HBM  # virtual root is always "resident"
        self.nodes: dict[int, Node] = {0: self.root}
        self.loras: dict[object, Node] = {}
        # Incremental candidate sets (node ids).
        self._out_cands: set[int] = set()
        self._in_cands: set[int] = set()
        # Invalid-KV accounting.
        self._hbm_kv_per_lora: dict[object, int] = {}
        self._hbm_kv_total = 0
        self._invalid_kv = 0

    # ------------------------------------------------------------------
    # construction / matching

    def ensure_lora(self, lora_id, rank: int, size_blocks: int) -> Node:
        """Get or create the layer-2 adapter node. New nodes start absent."""
        node = self.loras.get(lora_id)
        if node is not None:
            return node
        node = Node(next(self._ids), LORA, self.root, size_blocks,
                    lora_id=lora_id, rank=rank)
        self.nodes[node.id] = node
        self.root.children[lora_id] = node
        self.loras[lora_id] = node
        self._hbm_kv_per_lora.setdefault(lora_id, 0)
        return node

    def match_query(self, lora_id, prompt_keys, now: float,
                    update_stats: bool = True) -> MatchResult:
        """Longest exact block-by-block descent from the adapter node.

        Nodes that are mid-flight out of HBM count as main-memory hits:
        their transfer completes and they are re-loaded.
        """
        lora = self.loras[lora_id]
        if update_stats:
            lora.visits += 1
            lora.last_visit = now
        matched: list[int] = []
        hbm = main = 0
        node = lora
        for key in prompt_keys:
            child = node.children.get(key)
            if child is None:
                break
            matched.append(child.id)
            if update_stats:
                child.visits += 1
                child.last_visit = now
            if child.tier is Tier.HBM and child.inflight != "out":
                hbm += 1
            else:
                main += 1
            node = child
        lora_resident = lora.tier is Tier.HBM and lora.inflight != "out"
        return MatchResult(
            lora_resident=lora_resident,
            lora_node=lora.id,
            matched_kv=matched,
            hbm_hit_blocks=hbm,
            main_hit_blocks=main,
            miss_blocks=len(prompt_keys) - len(matched),
        )

    def insert_kv(self, parent: Node, content_key, now: float,
                  pool: BlockPool, pin: bool = True) -> Node:
        """Insert a new HBM-resident KV block below `parent`.

        Raises CapacityError from the pool if HBM is full, ClosureViolation
        if the parent is not (stably) HBM-resident.
        """
        if parent.tier is not Tier.HBM or parent.inflight == "out":
            raise ClosureViolation(
                f"insert under non-HBM parent {parent.id} (tier={parent.tier})"
            )
        if content_key in parent.children:
            raise ValueError(f"child with key {content_key!r} already exists")
        node = Node(next(self._ids), KV, parent, 1, lora_id=parent.lora_id,
                    content_key=content_key)
        node.alloc = pool.allocate(Tier.HBM, 1, owner=f"node-{node.id}")
        node.visits = 1
        node.last_visit = now
        self.nodes[node.id] = node
        parent.children[content_key] = node
        self._set_tier(node, Tier.HBM)
        if pin:
            self.pin(node)
        return node

    # ------------------------------------------------------------------
    # pins

    def pin(self, node: Node) -> None:
        node.pins += 1
        self._refresh(node)

    def unpin(self, node: Node) -> None:
        if node.pins <= 0:
            raise PinUnderflowError(f"node {node.id} has no pins")
        node.pins -= 1
        self._refresh(node)

    def unpin_all(self, nodes) -> None:
        for n in nodes:
            self.unpin(n)

    # ------------------------------------------------------------------
    # residency

    def apply_move(self, node: Node, to, pool: BlockPool,
                   enforce_closure: bool = True) -> None:
        """Synchronous residency move (swap or discard) with accounting.

        `to` is a Tier or None (None = discard). The engine's asynchronous
        path reserves/frees around transfer events instead; this is the
        atomic primitive for direct manipulation and baselines.
        """
        if node.inflight is not None:
            raise ValueError(f"node {node.id} has an in-flight transfer")
        if to is node.tier:
            raise ValueError(f"node {node.id} already in {to}")
        leaving_hbm = node.tier is Tier.HBM
        if leaving_hbm:
            if node.pins > 0:
                raise ClosureViolation(f"node {node.id} is pinned")
            if enforce_closure and node.future_hbm_children > 0:
                raise ClosureViolation(
                    f"node {node.id} still has HBM-resident children"
                )
        if to is Tier.HBM and enforce_closure:
            if not (node.parent.is_root or node.parent.future_hbm()):
                raise ClosureViolation(
                    f"parent of node {node.id} is not HBM-resident"
                )
        if to is None:
            if node.children:
                raise ClosureViolation(f"cannot discard node {node.id} with children")
            if node.alloc is not None:
                pool.free(node.alloc)
                node.alloc = None
            self._set_tier(node, None)
            self._remove(node)
            return
        new_alloc = pool.allocate(to, node.size_blocks, owner=f"node-{node.id}")
        if node.alloc is not None:
            pool.free(node.alloc)
        node.alloc = new_alloc
        self._set_tier(node, to)

    def _set_tier(self, node: Node, tier) -> None:
        """Flip residency and update counters/candidates. Engine-internal."""
        old_future = node.future_hbm()
        was_hbm = node.tier is Tier.HBM
        node.tier = tier
        is_hbm = tier is Tier.HBM
        if node.kind == KV and was_hbm != is_hbm:
            delta = 1 if is_hbm else -1
            self._hbm_kv_total += delta
            self._hbm_kv_per_lora[node.lora_id] = (
                self._hbm_kv_per_lora.get(node.lora_id, 0) + delta
            )
            lora = self.loras[node.lora_id]
            if lora.tier is not Tier.HBM:
                self._invalid_kv += delta
        elif node.kind == LORA and was_hbm != is_hbm:
            kv_count = self._hbm_kv_per_lora.get(node.lora_id, 0)
            if is_hbm:
                self._invalid_kv -= kv_count
            else:
                self._invalid_kv += kv_count
        self._after_state_change(node, old_future)

    def commit_tier(self, node: Node, tier) -> None:
        """Flip residency without touching pool allocations.

        The asynchronous transfer path reserves and frees blocks around
        enqueue/completion events itself; it calls this at completion time
        to record the new tier and update counters/candidates.
        """
        self._set_tier(node, tier)

    def set_inflight(self, node: Node, value) -> None:
        """Mark or clear an in-flight transfer. Engine-internal."""
        old_future = node.future_hbm()
        node.inflight = value
        self._after_state_change(node, old_future)

    def _after_state_change(self, node: Node, old_future: bool) -> None:
        new_future = node.future_hbm()
        if new_future != old_future and not node.is_root:
            node.parent.future_hbm_children += 1 if new_future else -1
            self._refresh(node.parent)
        self._refresh(node)
        if new_future != old_future:
            # Children's frontier membership depends on this node's status.
            for child in node.children.values():
                self._refresh(child)

    def _remove(self, node: Node) -> None:
        if node.content_key is not None:
            del node.parent.children[node.content_key]
        else:
            del node.parent.children[node.lora_id]
            del self.loras[node.lora_id]
        self._out_cands.discard(node.id)
        self._in_cands.discard(node.id)
        del self.nodes[node.id]

    # ------------------------------------------------------------------
    # candidate sets

    def _refresh(self, node: Node) -> None:
        if node.is_root or node.id not in self.nodes:
            return
        is_out = (
            node.tier is Tier.HBM
            and node.inflight is None
            and node.pins == 0
            and node.future_hbm_children == 0
        )
        is_in = (
            node.tier is Tier.MAIN
            and node.inflight is None
            and (node.parent.is_root or node.parent.future_hbm())
        )
        if is_out:
            self._out_cands.add(node.id)
        else:
            self._out_cands.discard(node.id)
        if is_in:
            self._in_cands.add(node.id)
        else:
            self._in_cands.discard(node.id)

    def swap_out_candidates(self) -> list[int]:
        """HBM leaves: resident, unpinned, no child in or headed to HBM."""
        return sorted(self._out_cands)

    def swap_in_candidates(self) -> list[int]:
        """Main-memory frontier: parent already in HBM (or the root)."""
        return sorted(self._in_cands)

    def out_candidate_ids(self) -> set[int]:
        return self._out_cands

    def in_candidate_ids(self) -> set[int]:
        return self._in_cands

    # ------------------------------------------------------------------
    # auditing

    def invalid_kv_fraction(self) -> float:
        """Share of HBM KV blocks whose adapter is not HBM-resident."""
        if self._hbm_kv_total == 0:
            return 0.0
        return self._invalid_kv / self._hbm_kv_total

    def invalid_kv_fraction_scan(self) -> float:
        """Slow ancestor-walk oracle for invalid_kv_fraction."""
        total = invalid = 0
        for node in self.nodes.values():
            if node.kind != KV or node.tier is not Tier.HBM:
                continue
            total += 1
            if self.loras[node.lora_id].tier is not Tier.HBM:
                invalid += 1
        return invalid / total if total else 0.0

    def check_closure(self) -> bool:
        """True iff every HBM node's parent chain is fully HBM-resident."""
        for node in self.nodes.values():
            if node.is_root or node.tier is not Tier.HBM:
                continue
            if not node.parent.is_root and node.parent.tier is not Tier.HBM:
                return False
        return True

    def check_connectivity(self) -> None:
        seen = 0
        stack = [self.root]
        while stack:
            n = stack.pop()
            seen += 1
            stack.extend(n.children.values())
        assert seen == len(self.nodes), f"traversal {seen} != {len(self.nodes)} nodes"

    def scan_out_candidates(self) -> list[int]:
        """Full-scan oracle for swap_out_candidates."""
        out = []
        for node in self.nodes.values():
            if node.is_root:
                continue
            if (node.tier is Tier.HBM and node.inflight is None
                    and node.pins == 0
                    and not any(c.future_hbm() for c in node.children.values())):
                out.append(node.id)
        return sorted(out)

    def scan_in_candidates(self) -> list[int]:
        """Full-scan oracle for swap_in_candidates."""
        out = []
        for node in self.nodes.values():
            if node.is_root:
                continue
            if (node.tier is Tier.MAIN and node.inflight is None
                    and (node.parent.is_root or node.parent.future_hbm())):
                out.append(node.id)
        return sorted(out)

    def dump(self) -> str:
        """Line-oriented debug dump for golden-file tests."""
        lines = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            if n.is_root:
                continue
            tier = n.tier.value if n.tier else "absent"
            parent = n.parent.id
            lines.append(
                f"{n.id} {n.kind} parent={parent} tier={tier} "
                f"visits={n.visits} last_visit={n.last_visit:.6f}"
            )
        return "\n".join(lines)

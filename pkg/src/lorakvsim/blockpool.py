"""Two-tier fixed-size block accounting shared by LoRA weights and KV caches.

The pool is a pure counter plus an ownership map: blocks are opaque units,
there is no fragmentation or address modeling. HBM and main memory are
partitioned into blocks of the same size, so LoRA weights (split along the
rank dimension) and KV blocks are interchangeable units of allocation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class Tier(enum.Enum):
    HBM = "hbm"
    MAIN = "main"


class CapacityError(Exception):
    """Not enough free blocks in the requested tier."""


class DoubleFreeError(Exception):
    """An allocation was freed twice."""


@dataclass(frozen=True)
class PoolConfig:
    hbm_blocks: int
    main_blocks: int
    block_tokens: int = 32
    block_bytes: int = 16 * 1024 * 1024
    pcie_bandwidth: float = 16e9  # bytes/s, one channel per direction

    def __post_init__(self):
        if self.hbm_blocks <= 0:
            raise ValueError("hbm_blocks must be > 0")
        if self.main_blocks < 0:
            raise ValueError("main_blocks must be >= 0")
        if self.block_tokens <= 0:
            raise ValueError("block_tokens must be > 0")
        if self.block_bytes <= 0:
            raise ValueError("block_bytes must be > 0")
        if self.pcie_bandwidth <= 0:
            raise ValueError("pcie_bandwidth must be > 0")


@dataclass
class Allocation:
    tier: Tier
    n_blocks: int
    owner: object
    live: bool = True


class BlockPool:
    """Block accounting for the HBM tier and the main-memory tier."""

    def __init__(self, config: PoolConfig):
        self.config = config
        self._capacity = {Tier.HBM: config.hbm_blocks, Tier.MAIN: config.main_blocks}
        self._free = dict(self._capacity)
        # (owner, tier) -> Allocation; an owner holds at most one live
        # allocation per tier.
        self._live: dict[tuple[object, Tier], Allocation] = {}

    def capacity(self, tier: Tier) -> int:
        return self._capacity[tier]

    def free_blocks(self, tier: Tier) -> int:
        return self._free[tier]

    def used_blocks(self, tier: Tier) -> int:
        return self._capacity[tier] - self._free[tier]

    def usage(self, tier: Tier) -> float:
        cap = self._capacity[tier]
        if cap == 0:
            return 0.0
        return (cap - self._free[tier]) / cap

    def allocate(self, tier: Tier, n: int, owner: object) -> Allocation:
        if n < 1:
            raise ValueError(f"allocation size must be >= 1, got {n}")
        key = (owner, tier)
        if key in self._live:
            raise ValueError(f"owner {owner!r} already holds a live {tier.value} allocation")
        if self._free[tier] < n:
            raise CapacityError(
                f"{tier.value}: need {n} blocks, {self._free[tier]} free"
            )
        self._free[tier] -= n
        alloc = Allocation(tier=tier, n_blocks=n, owner=owner)
        self._live[key] = alloc
        return alloc

    def free(self, allocation: Allocation) -> None:
        if not allocation.live:
            raise DoubleFreeError(f"allocation for {allocation.owner!r} already freed")
        allocation.live = False
        del self._live[(allocation.owner, allocation.tier)]
        self._free[allocation.tier] += allocation.n_blocks

    def blocks_for_lora(self, rank: int, lora_bytes_per_rank: int) -> int:
        """Blocks needed for an adapter of the given rank.

        Adapters are split block-wise along the rank dimension; a partial
        trailing block occupies a full block.
        """
        if rank <= 0:
            raise ValueError("rank must be > 0")
        return math.ceil(rank * lora_bytes_per_rank / self.config.block_bytes)

    def check_conservation(self) -> None:
        """Assert allocated + free == capacity for both tiers (test hook)."""
        for tier in Tier:
            allocated = sum(
                a.n_blocks for (o, t), a in self._live.items() if t is tier
            )
            assert allocated + self._free[tier] == self._capacity[tier], (
                f"{tier}: {allocated} allocated + {self._free[tier]} free "
                f"!= {self._capacity[tier]}"
            )

"""
Buddy page allocator over a fixed arena.

Blocks are identified by their first page index and their order; an
order-k block spans 2**k contiguous pages and always starts on a 2**k page
boundary.  There is no compaction, so churn that interleaves large and small
allocations can leave plenty of free pages that no high-order request can
use.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .errors import AllocationFailure, DoubleFree, InvalidConfig, UnknownBlock

DEFAULT_PAGE_SIZE = 4096
DEFAULT_TOTAL_PAGES = 4096
DEFAULT_MAX_ORDER = 10


@dataclass(frozen=True, order=True)
class Block:
    start: int
    order: int

    @property
    def pages(self) -> int:
        return 1 << self.order


@dataclass(frozen=True)
class AllocProfile:
    """Per-VF payload: one ``big_order`` block plus ``small_blocks`` single pages."""

    big_order: int = 3
    small_blocks: int = 4

    def __post_init__(self):
        if self.big_order < 0 or self.small_blocks < 0:
            raise InvalidConfig("allocation profile values must be non-negative")

    @property
    def pages(self) -> int:
        return (1 << self.big_order) + self.small_blocks


@dataclass(frozen=True)
class OomReport:
    requested_order: int
    free_bytes_at_failure: int
    largest_free_order_at_failure: int
    step: int | None = None


@dataclass(frozen=True)
class AllocStats:
    free_bytes: int
    allocated_bytes: int
    largest_free_order: int
    fragmentation_index: float


class BuddyAllocator:
    def __init__(
        self,
        total_pages: int = DEFAULT_TOTAL_PAGES,
        page_size_bytes: int = DEFAULT_PAGE_SIZE,
        max_order: int = DEFAULT_MAX_ORDER,
    ):
        if total_pages <= 0 or total_pages & (total_pages - 1):
            raise InvalidConfig(f"total_pages must be a power of two, got {total_pages}")
        if page_size_bytes <= 0:
            raise InvalidConfig("page_size_bytes must be positive")
        if max_order < 0 or (1 << max_order) > total_pages:
            raise InvalidConfig(
                f"max_order {max_order} does not fit an arena of {total_pages} pages"
            )
        self.total_pages = total_pages
        self.page_size_bytes = page_size_bytes
        self.max_order = max_order

        # per-order set of free block starts, plus a lazily pruned min-heap so
        # the lowest address is always handed out first
        self._free: list[set[int]] = [set() for _ in range(max_order + 1)]
        self._heaps: list[list[int]] = [[] for _ in range(max_order + 1)]
        self.allocated: dict[int, int] = {}
        self._free_pages = 0

        for start in range(0, total_pages, 1 << max_order):
            self._push(max_order, start)

    # free-list plumbing

    def _push(self, order: int, start: int) -> None:
        self._free[order].add(start)
        heap = self._heaps[order]
        heapq.heappush(heap, start)
        if len(heap) > 4 * len(self._free[order]) + 64:
            self._heaps[order] = sorted(self._free[order])
        self._free_pages += 1 << order

    def _pop_lowest(self, order: int) -> int:
        free, heap = self._free[order], self._heaps[order]
        while True:
            start = heapq.heappop(heap)
            if start in free:
                free.remove(start)
                self._free_pages -= 1 << order
                return start

    def _take(self, order: int, start: int) -> None:
        self._free[order].remove(start)
        self._free_pages -= 1 << order

    # public interface

    @property
    def total_bytes(self) -> int:
        return self.total_pages * self.page_size_bytes

    @property
    def free_pages(self) -> int:
        return self._free_pages

    @property
    def free_bytes(self) -> int:
        return self._free_pages * self.page_size_bytes

    @property
    def allocated_bytes(self) -> int:
        return (self.total_pages - self._free_pages) * self.page_size_bytes

    @property
    def free_lists(self) -> dict[int, list[int]]:
        return {order: sorted(starts) for order, starts in enumerate(self._free)}

    def largest_free_order(self) -> int:
        """Highest order with a free block, or -1 when the arena is full."""
        for order in range(self.max_order, -1, -1):
            if self._free[order]:
                return order
        return -1

    def alloc(self, order: int) -> Block:
        if not 0 <= order <= self.max_order:
            raise InvalidConfig(f"order {order} outside [0, {self.max_order}]")
        source = next(
            (o for o in range(order, self.max_order + 1) if self._free[o]), None
        )
        if source is None:
            raise AllocationFailure(
                OomReport(
                    requested_order=order,
                    free_bytes_at_failure=self.free_bytes,
                    largest_free_order_at_failure=self.largest_free_order(),
                )
            )
        start = self._pop_lowest(source)
        while source > order:
            source -= 1
            self._push(source, start + (1 << source))
        self.allocated[start] = order
        return Block(start, order)

    def free(self, block: Block) -> None:
        if self.allocated.get(block.start) != block.order:
            if self._is_free(block):
                raise DoubleFree(f"{block} is already free")
            raise UnknownBlock(f"{block} was never allocated")
        del self.allocated[block.start]

        start, order = block.start, block.order
        while order < self.max_order:
            buddy = start ^ (1 << order)
            if buddy not in self._free[order]:
                break
            self._take(order, buddy)
            start = min(start, buddy)
            order += 1
        self._push(order, start)

    def _is_free(self, block: Block) -> bool:
        if block.start % (1 << block.order) or not 0 <= block.start < self.total_pages:
            return False
        for order in range(block.order, self.max_order + 1):
            if (block.start & ~((1 << order) - 1)) in self._free[order]:
                return True
        return False

    def snapshot_stats(self) -> AllocStats:
        largest = self.largest_free_order()
        if self._free_pages == 0:
            frag = 0.0
        else:
            # share of free memory that sits outside blocks of the largest
            # available order
            top_pages = len(self._free[largest]) << largest
            frag = 1.0 - top_pages / self._free_pages
        return AllocStats(
            free_bytes=self.free_bytes,
            allocated_bytes=self.allocated_bytes,
            largest_free_order=largest,
            fragmentation_index=frag,
        )

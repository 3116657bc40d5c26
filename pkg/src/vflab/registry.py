"""
VF registry: a bucketed, reference-counted hash table with logical deletion.

``hash(id) = id mod 2**bucket_order`` so ids that differ by a multiple of
the bucket count always share a chain.  Chains keep insertion order.

Deleted nodes stay linked for readers whose session started before the
removal; a reader sees a node when it is live, or when its removal epoch is
not older than the reader's entry epoch.  Nodes nobody can see any more are
pruned by the mutator.
"""

from __future__ import annotations

import enum
from collections.abc import Generator
from dataclasses import dataclass

from . import grace as _grace
from .allocmodel import AllocProfile, Block, BuddyAllocator
from .errors import (
    AllocationFailure,
    CapacityExceeded,
    DuplicateId,
    InvalidConfig,
    NotActive,
    OutOfRange,
)
from .grace import GraceClock, ReaderHandle, ReclaimQueue, ReclamationPolicy
from .timing import TimingSample

VF_ID_MAX = 0xFFFF
MAX_BUCKET_ORDER = 16
DEFAULT_BUCKET_ORDER = 6
DEFAULT_CAPACITY = 64


class VfId(int):
    """A 16-bit VF identifier; construction rejects anything wider."""

    def __new__(cls, value):
        v = int.__new__(cls, value)
        if not 0 <= v <= VF_ID_MAX:
            raise OutOfRange(value)
        return v


class EntryState(enum.Enum):
    LIVE = "live"
    LOGICALLY_DELETED = "logically_deleted"
    FREED = "freed"


@dataclass(eq=False)
class VfEntry:
    id: int
    refcount: int = 1
    state: EntryState = EntryState.LIVE
    removal_epoch: int | None = None
    payload: tuple[Block, ...] = ()
    size_bytes: int = 0

    @property
    def is_live(self) -> bool:
        return self.state is EntryState.LIVE

    def mark_deleted(self, epoch: int) -> None:
        self.state = EntryState.LOGICALLY_DELETED
        self.removal_epoch = epoch

    def mark_freed(self) -> None:
        # poison: the payload is gone, only the detector-visible shell remains
        self.state = EntryState.FREED
        self.payload = ()


class LookupKind(enum.Enum):
    HIT = "hit"
    MISS = "miss"


@dataclass(frozen=True)
class LookupOutcome:
    kind: LookupKind
    nodes_traversed: int
    entry: VfEntry | None = None
    # a matching node was found but its refcount was already zero
    matched_dead: bool = False
    uaf: bool = False

    @property
    def hit(self) -> bool:
        return self.kind is LookupKind.HIT


class VfTable:
    def __init__(self, bucket_order: int = DEFAULT_BUCKET_ORDER, capacity: int = DEFAULT_CAPACITY):
        if not 0 <= bucket_order <= MAX_BUCKET_ORDER:
            raise InvalidConfig(f"bucket_order must be in [0, {MAX_BUCKET_ORDER}]")
        if capacity < 0:
            raise InvalidConfig("capacity must be non-negative")
        self.bucket_order = bucket_order
        self.capacity = capacity
        self.buckets: list[list[VfEntry]] = [[] for _ in range(1 << bucket_order)]
        self._live: dict[int, VfEntry] = {}

    @property
    def live_count(self) -> int:
        return len(self._live)

    def bucket_index(self, vf_id: int) -> int:
        return vf_id & ((1 << self.bucket_order) - 1)

    def get(self, vf_id: int) -> VfEntry | None:
        return self._live.get(vf_id)

    def live_ids(self) -> list[int]:
        return sorted(self._live)

    def live_entries(self) -> list[VfEntry]:
        """Live entries in bucket order, chain order within a bucket."""
        return [e for chain in self.buckets for e in chain if e.is_live]

    def visible_chain(self, vf_id: int, reader: ReaderHandle) -> list[VfEntry]:
        return [
            node
            for node in self.buckets[self.bucket_index(vf_id)]
            if node.is_live or node.removal_epoch >= reader.entry_epoch
        ]

    def chain_position(self, vf_id: int) -> int | None:
        """1-based position of the live ``vf_id`` among live nodes of its chain."""
        depth = 0
        for node in self.buckets[self.bucket_index(vf_id)]:
            if node.is_live:
                depth += 1
                if node.id == vf_id:
                    return depth
        return None

    def prune(self, clock: GraceClock) -> int:
        oldest = clock.oldest_active_epoch()
        removed = 0
        for i, chain in enumerate(self.buckets):
            if all(node.is_live for node in chain):
                continue
            keep = [
                node
                for node in chain
                if node.is_live or (oldest is not None and node.removal_epoch >= oldest)
            ]
            removed += len(chain) - len(keep)
            self.buckets[i] = keep
        return removed


def table_new(bucket_order: int, capacity: int) -> VfTable:
    return VfTable(bucket_order, capacity)


def insert(
    table: VfTable,
    vf_id: int,
    alloc: BuddyAllocator,
    profile: AllocProfile = AllocProfile(),
) -> VfEntry:
    vf_id = VfId(vf_id)
    if vf_id in table._live:
        raise DuplicateId(f"VF {vf_id} is already live")
    if table.live_count >= table.capacity:
        raise CapacityExceeded(f"Failed to start VF {vf_id}: table capacity {table.capacity} reached")
    if profile.big_order > alloc.max_order:
        raise InvalidConfig("profile big_order exceeds allocator max_order")

    blocks: list[Block] = []
    try:
        blocks.append(alloc.alloc(profile.big_order))
        for _ in range(profile.small_blocks):
            blocks.append(alloc.alloc(0))
    except AllocationFailure:
        for block in reversed(blocks):
            alloc.free(block)
        raise

    entry = VfEntry(
        id=int(vf_id),
        payload=tuple(blocks),
        size_bytes=profile.pages * alloc.page_size_bytes,
    )
    table.buckets[table.bucket_index(vf_id)].append(entry)
    table._live[int(vf_id)] = entry
    return entry


def lookup_steps(
    table: VfTable,
    vf_id: int,
    reader: ReaderHandle,
    clock,
    cycle_index: int = 0,
    rep_index: int = 0,
) -> Generator[None, None, tuple[LookupOutcome, TimingSample]]:
    """Traverse ``vf_id``'s chain, yielding before each node touch."""
    vf_id = VfId(vf_id)
    if not reader.active:
        raise NotActive(f"reader {reader.reader_id} must be inside a read-side session")
    token = clock.begin()
    chain = table.visible_chain(vf_id, reader)

    outcome = None
    nodes = 0
    for node in chain:
        yield
        nodes += 1
        if node.state is EntryState.FREED:
            if reader.grace is not None:
                reader.grace.record_uaf(reader, node.id)
            outcome = LookupOutcome(LookupKind.MISS, nodes, uaf=True)
            break
        if node.id == vf_id:
            if node.refcount > 0:
                node.refcount += 1
                outcome = LookupOutcome(LookupKind.HIT, nodes, entry=node)
            else:
                outcome = LookupOutcome(LookupKind.MISS, nodes, matched_dead=True)
            break
    if outcome is None:
        outcome = LookupOutcome(LookupKind.MISS, nodes)

    # the conditional refcount get costs the same whether or not it succeeds
    kref = outcome.hit or outcome.matched_dead
    duration = clock.end(token, nodes, kref)
    sample = TimingSample(int(vf_id), outcome.hit, duration, cycle_index, rep_index)
    return outcome, sample


def lookup(
    table: VfTable,
    vf_id: int,
    reader: ReaderHandle,
    clock,
    cycle_index: int = 0,
    rep_index: int = 0,
) -> tuple[LookupOutcome, TimingSample]:
    steps = lookup_steps(table, vf_id, reader, clock, cycle_index, rep_index)
    try:
        while True:
            next(steps)
    except StopIteration as stop:
        return stop.value


def put_ref(entry: VfEntry) -> bool:
    """Drop a reference taken by a lookup hit.

    Returns True when this was the last reference to an already deleted
    entry, in which case the caller owns releasing it.
    """
    if entry.refcount <= 0:
        raise ValueError(f"VF {entry.id} refcount underflow")
    entry.refcount -= 1
    return entry.refcount == 0 and not entry.is_live


def delete_all_steps(
    table: VfTable,
    clock: GraceClock,
    policy: ReclamationPolicy,
    queue: ReclaimQueue,
    alloc: BuddyAllocator,
) -> Generator[None, None, int]:
    entries = table.live_entries()
    if not entries:
        return 0
    epoch = clock.current_epoch
    for entry in entries:
        entry.mark_deleted(epoch)
    table._live.clear()
    # publish the unlink: sessions that start from here on cannot see these nodes
    clock.advance()

    for entry in entries:
        entry.refcount -= 1
        if entry.refcount == 0:
            yield from _grace.release_steps(entry, policy, clock, queue, alloc)
    table.prune(clock)
    return len(entries)


def delete_all(
    table: VfTable,
    clock: GraceClock,
    policy: ReclamationPolicy,
    queue: ReclaimQueue,
    alloc: BuddyAllocator,
    timeout: float | None = None,
) -> int:
    return _grace.drive(delete_all_steps(table, clock, policy, queue, alloc), clock, timeout)

import threading
import time

import pytest

from vflab.allocmodel import BuddyAllocator
from vflab.errors import DeadlockDetected, GraceTimeout, NotActive, PreconditionViolated
from vflab.grace import (
    GraceClock,
    ReclaimQueue,
    ReclamationPolicy,
    reader_enter,
    reader_exit,
    reclaim_step,
    release,
    release_steps,
    synchronize,
    synchronize_steps,
)
from vflab.registry import EntryState, VfTable, insert, lookup_steps
from vflab.timing import DeterministicClock


def deleted_entry(vf_id=1, epoch=0):
    table = VfTable(3, 64)
    alloc = BuddyAllocator()
    entry = insert(table, vf_id, alloc)
    entry.mark_deleted(epoch)
    entry.refcount = 0
    return entry, alloc


def test_reader_enter_records_epoch():
    g = GraceClock(start_epoch=5)
    h = reader_enter(g, 1)
    assert h.entry_epoch == 5
    assert len(g.active_readers) == 1


def test_reentry_nests_with_same_epoch():
    g = GraceClock()
    h = reader_enter(g, 1)
    g.advance()
    h2 = reader_enter(g, 1)
    assert h2 is h
    assert h.nesting == 2 and h.entry_epoch == 0


def test_four_readers_active():
    g = GraceClock()
    for rid in range(4):
        reader_enter(g, rid)
    assert len(g.active_readers) == 4


def test_exit_paths():
    g = GraceClock()
    h = reader_enter(g, 1)
    reader_enter(g, 1)
    reader_exit(g, h)
    assert h.active and g.is_active(1)
    reader_exit(g, h)
    assert g.active_readers == {}
    with pytest.raises(NotActive):
        reader_exit(g, h)


def test_synchronize_without_readers_waits_zero_steps():
    g = GraceClock()
    steps = synchronize_steps(g)
    with pytest.raises(StopIteration) as stop:
        next(steps)
    assert stop.value.value == 0
    assert g.current_epoch == 1


def test_synchronize_waits_until_older_reader_exits():
    g = GraceClock()
    h = reader_enter(g, 1)
    steps = synchronize_steps(g)
    next(steps)
    assert g.gp_pending
    next(steps)
    # a reader that arrives after the call started does not extend the wait
    reader_enter(g, 2)
    next(steps)
    reader_exit(g, h)
    with pytest.raises(StopIteration) as stop:
        next(steps)
    assert stop.value.value == 3
    assert not g.gp_pending
    assert g.is_active(2)


def test_synchronize_inside_own_session_is_deadlock():
    g = GraceClock()
    reader_enter(g, 7)
    with pytest.raises(DeadlockDetected):
        next(synchronize_steps(g, caller=7))


def test_blocking_synchronize_returns_after_thread_exit():
    g = GraceClock()
    h = reader_enter(g, 1)
    threading.Timer(0.05, reader_exit, args=(g, h)).start()
    waited = synchronize(g, timeout=5)
    assert waited >= 0.04
    assert not g.gp_pending


def test_blocking_synchronize_times_out():
    g = GraceClock()
    reader_enter(g, 1)
    started = time.monotonic()
    with pytest.raises(GraceTimeout):
        synchronize(g, timeout=0.1)
    assert time.monotonic() - started < 2
    assert not g.gp_pending


def test_release_requires_zero_refcount_and_deletion():
    entry, alloc = deleted_entry()
    entry.refcount = 1
    with pytest.raises(PreconditionViolated):
        release(entry, ReclamationPolicy.UNSAFE_IMMEDIATE, GraceClock(), ReclaimQueue(), alloc)


def test_unsafe_release_mid_traversal_is_detected():
    g = GraceClock()
    table, alloc = VfTable(3, 64), BuddyAllocator()
    first = insert(table, 1, alloc)
    insert(table, 9, alloc)
    reader = reader_enter(g, 1)
    walk = lookup_steps(table, 9, reader, DeterministicClock())
    next(walk)  # paused just before touching node 1
    first.mark_deleted(g.current_epoch)
    first.refcount = 0
    release(first, ReclamationPolicy.UNSAFE_IMMEDIATE, g, ReclaimQueue(), alloc)
    assert first.state is EntryState.FREED
    with pytest.raises(StopIteration) as stop:
        next(walk)
    outcome, _ = stop.value.value
    assert outcome.uaf and not outcome.hit
    assert len(g.uaf_events) == 1
    assert g.uaf_events[0].vf_id == 1


def test_sync_release_waits_for_reader_and_never_uafs():
    g = GraceClock()
    entry, alloc = deleted_entry(epoch=0)
    reader_enter(g, 1)
    h = g._readers[1]
    steps = release_steps(entry, ReclamationPolicy.SYNCHRONOUS, g, ReclaimQueue(), alloc)
    next(steps)
    next(steps)
    assert entry.state is EntryState.LOGICALLY_DELETED
    reader_exit(g, h)
    with pytest.raises(StopIteration):
        next(steps)
    assert entry.state is EntryState.FREED
    assert g.uaf_events == []


def test_deferred_release_queues_bytes_then_frees():
    g = GraceClock()
    q = ReclaimQueue()
    entry, alloc = deleted_entry()
    release(entry, ReclamationPolicy.DEFERRED_CALLBACK, g, q, alloc)
    assert q.pending_bytes == entry.size_bytes == 12 * 4096
    assert reclaim_step(q, g, alloc) == 1
    assert q.pending_bytes == 0
    assert entry.state is EntryState.FREED


def test_reclaim_blocked_by_pinned_reader():
    g = GraceClock()
    q = ReclaimQueue()
    reader_enter(g, 1)
    entry, alloc = deleted_entry(epoch=0)
    release(entry, ReclamationPolicy.DEFERRED_CALLBACK, g, q, alloc)
    assert reclaim_step(q, g, alloc) == 0
    assert len(q) == 1 and q.pending_bytes == entry.size_bytes


def test_reclaim_empty_queue():
    assert reclaim_step(ReclaimQueue(), GraceClock(), BuddyAllocator()) == 0


def test_policy_parse():
    assert ReclamationPolicy.parse("sync") is ReclamationPolicy.SYNCHRONOUS
    assert ReclamationPolicy.parse("deferred") is ReclamationPolicy.DEFERRED_CALLBACK
    with pytest.raises(ValueError):
        ReclamationPolicy.parse("later")

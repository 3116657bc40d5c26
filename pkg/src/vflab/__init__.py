"""Desk-scale lab for VF registry lookups, grace-period reclamation and buddy fragmentation."""

__version__ = "0.1.0"

from .allocmodel import AllocProfile, BuddyAllocator  # noqa: E402
from .grace import GraceClock, ReclaimQueue, ReclamationPolicy  # noqa: E402
from .harness import ChurnConfig, Mode, run_churn, run_creation_spam  # noqa: E402
from .registry import VfTable, delete_all, insert, lookup  # noqa: E402

__all__ = [
    "AllocProfile",
    "BuddyAllocator",
    "ChurnConfig",
    "GraceClock",
    "Mode",
    "ReclaimQueue",
    "ReclamationPolicy",
    "VfTable",
    "delete_all",
    "insert",
    "lookup",
    "run_churn",
    "run_creation_spam",
]

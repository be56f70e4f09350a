"""Lockable ERC20 token ledger with a P2P energy-market session engine."""

from . import errors  # noqa: F401
from .gas import GasParams, orders_per_block, overhead_report, session_capacity
from .ledger import (
    Ledger,
    LockedEntity,
    LockEventRecord,
    LockStatus,
    events_to_csv,
    new_ledger,
)
from .market import (
    MarketEngine,
    MeterReading,
    Order,
    OrderStatus,
    Session,
    SessionState,
    Side,
    Trade,
)

__version__ = "0.1.0"

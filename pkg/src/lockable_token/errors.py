"""Exception hierarchy shared by the ledger, market and CLI layers."""


class LedgerError(Exception):
    """Base class for every rejected ledger operation."""


class InvalidAmount(LedgerError):
    """Amount is negative, not an integer, or outside the uint256 range."""


class InvalidAddress(LedgerError):
    pass


class ArithmeticOverflow(LedgerError):
    pass


class InsufficientUnlockedBalance(LedgerError):
    pass


class InsufficientAllowance(LedgerError):
    pass


class ZeroAmount(LedgerError):
    pass


class LockSlotOwnerMismatch(LedgerError):
    pass


class LockVerificationFailed(LedgerError):
    pass


class MarketError(Exception):
    """Base class for market session errors."""


class SessionAlreadyActive(MarketError):
    pass


class SessionNotOpen(MarketError):
    pass


class SessionNotEnded(MarketError):
    pass


class SessionNotInDelivery(MarketError):
    pass


class InvalidOrder(MarketError):
    pass


class TradeNotFound(MarketError):
    pass


class TradeAlreadySettled(MarketError):
    pass


class UnsettledTradesRemain(MarketError):
    pass


class UnknownOperation(KeyError):
    """Gas table has no entry for the requested operation."""

"""
Day-ahead peer-to-peer energy market driven by lockable tokens.

A session walks through Open -> Matching -> Delivery -> Closed.  Every order
placed while Open locks ``price * energy`` tokens of its account through the
account's locker delegate, with the market engine as escrow.  Matching is a
merit-order double auction cleared pay-as-offered; settlement releases the
locks against metered delivery.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from .errors import (
    InvalidOrder,
    InsufficientAllowance,
    LockVerificationFailed,
    SessionAlreadyActive,
    SessionNotEnded,
    SessionNotInDelivery,
    SessionNotOpen,
    TradeAlreadySettled,
    TradeNotFound,
    UnsettledTradesRemain,
)
from .ledger import Address, Ledger

DEFAULT_ENGINE_ADDRESS = "market"


class Side(str, Enum):
    SELL = "sell"
    BUY = "buy"


class OrderStatus(str, Enum):
    OPEN = "open"
    PARTIALLY_MATCHED = "partially_matched"
    MATCHED = "matched"
    SETTLED = "settled"
    EXPIRED = "expired"


class SessionState(str, Enum):
    OPEN = "open"
    MATCHING = "matching"
    DELIVERY = "delivery"
    CLOSED = "closed"


@dataclass
class Order:
    id: int
    side: Side
    account: Address
    energy: int
    price: int
    tokens_locked: int
    placed_at_block: int
    remaining_energy: int
    status: OrderStatus = OrderStatus.OPEN
    tokens_released: int = 0

    @property
    def matched_energy(self) -> int:
        return self.energy - self.remaining_energy

    @property
    def tokens_outstanding(self) -> int:
        return self.tokens_locked - self.tokens_released


@dataclass
class Trade:
    id: int
    sell_order_id: int
    buy_order_id: int
    energy: int
    price: int
    settled: bool = False
    delivered: Optional[int] = None


@dataclass(frozen=True)
class MeterReading:
    trade_id: int
    delivered: int


@dataclass(frozen=True)
class Transfer:
    """One token movement caused by settlement."""

    trade_id: int
    kind: str
    sender: Address
    recipient: Address
    amount: int


@dataclass
class SessionReport:
    session_id: str
    escrow: Address
    opened_at_block: int
    duration_blocks: int
    closed_at_block: int
    orders: List[dict]
    trades: List[dict]
    transfers: List[dict]
    net_flow: Dict[Address, int]
    lock_count_series: List[Tuple[int, int]]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lock_count_series"] = [list(p) for p in self.lock_count_series]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def locker_address(engine: Address, account: Address) -> Address:
    """Address of the delegate that locks ``account``'s tokens for the engine.

    A lock slot holds a single owner, so each participant gets its own locker.
    Participants approve this address for their session budget.
    """
    return f"{engine}/locker/{account}"


def lock_series_to_csv(series) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["block", "active_locks"])
    writer.writerows(series)
    return buf.getvalue()


class Session:
    """One market session bound to a ledger and an escrow address."""

    def __init__(
        self,
        engine: "MarketEngine",
        session_id,
        duration_blocks: int,
        escrow: Address,
    ):
        if isinstance(duration_blocks, bool) or not isinstance(duration_blocks, int):
            raise InvalidOrder(f"duration_blocks must be an integer, got {duration_blocks!r}")
        if duration_blocks < 0:
            raise InvalidOrder("duration_blocks must be non-negative")
        self.engine = engine
        self.ledger: Ledger = engine.ledger
        self.id = session_id
        self.duration_blocks = duration_blocks
        self.escrow = escrow
        self.opened_at_block = self.ledger.current_block
        self.state = SessionState.OPEN
        self.orders: List[Order] = []
        self.trades: List[Trade] = []
        self.transfers: List[Transfer] = []
        self._series: List[Tuple[int, int]] = [(self.opened_at_block, 0)]
        self._opening_balances: Dict[Address, int] = {
            a: self.ledger.balance_of(a) for a in self.ledger.accounts()
        }
        self.report: Optional[SessionReport] = None

    @property
    def end_block(self) -> int:
        return self.opened_at_block + self.duration_blocks

    def locker_for(self, account: Address) -> Address:
        return locker_address(self.engine.address, account)

    def active_locks(self) -> int:
        return sum(1 for o in self.orders if o.tokens_outstanding > 0)

    def lock_count_series(self) -> List[Tuple[int, int]]:
        return list(self._series)

    def _record_locks(self) -> None:
        self._series.append((self.ledger.current_block, self.active_locks()))

    def order(self, order_id: int) -> Order:
        return self.orders[order_id - 1]

    def trade(self, trade_id: int) -> Trade:
        if isinstance(trade_id, bool) or not isinstance(trade_id, int):
            raise TradeNotFound(f"trade id {trade_id!r}")
        if not 1 <= trade_id <= len(self.trades):
            raise TradeNotFound(f"trade {trade_id} does not exist")
        return self.trades[trade_id - 1]

    # ------------------------------------------------------------------
    # Open phase

    def place_order(self, account: Address, side, energy: int, price: int) -> Order:
        if self.state is not SessionState.OPEN:
            raise SessionNotOpen(f"session {self.id} is {self.state.value}")
        if self.ledger.current_block > self.end_block:
            raise SessionNotOpen(f"session {self.id} ended at block {self.end_block}")
        try:
            side = Side(side)
        except ValueError:
            raise InvalidOrder(f"unknown order side {side!r}") from None
        for what, value in (("energy", energy), ("price", price)):
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise InvalidOrder(f"{what} must be a positive integer, got {value!r}")
        tokens = price * energy
        self.ledger.lock_from(
            caller=self.locker_for(account),
            owner=account,
            amount=tokens,
            no_blocks=self.end_block - self.ledger.current_block,
            unlocking_address=self.escrow,
        )
        order = Order(
            id=len(self.orders) + 1,
            side=side,
            account=account,
            energy=energy,
            price=price,
            tokens_locked=tokens,
            placed_at_block=self.ledger.current_block,
            remaining_energy=energy,
        )
        self.orders.append(order)
        self._record_locks()
        return order

    # ------------------------------------------------------------------
    # Matching

    def run_matching(self) -> List[Trade]:
        if self.state is not SessionState.OPEN:
            raise SessionNotOpen(f"session {self.id} is {self.state.value}")
        if self.ledger.current_block < self.end_block:
            raise SessionNotEnded(
                f"session {self.id} ends at block {self.end_block}, "
                f"current block is {self.ledger.current_block}"
            )
        self.state = SessionState.MATCHING
        asks = sorted(
            (o for o in self.orders if o.side is Side.SELL), key=lambda o: (o.price, o.id)
        )
        bids = sorted(
            (o for o in self.orders if o.side is Side.BUY), key=lambda o: (-o.price, o.id)
        )
        i = j = 0
        while i < len(asks) and j < len(bids) and bids[j].price >= asks[i].price:
            ask, bid = asks[i], bids[j]
            qty = min(ask.remaining_energy, bid.remaining_energy)
            self.trades.append(
                Trade(
                    id=len(self.trades) + 1,
                    sell_order_id=ask.id,
                    buy_order_id=bid.id,
                    energy=qty,
                    price=ask.price,
                )
            )
            ask.remaining_energy -= qty
            bid.remaining_energy -= qty
            if ask.remaining_energy == 0:
                i += 1
            if bid.remaining_energy == 0:
                j += 1
        for o in self.orders:
            if o.remaining_energy == o.energy:
                o.status = OrderStatus.EXPIRED
            elif o.remaining_energy == 0:
                o.status = OrderStatus.MATCHED
            else:
                o.status = OrderStatus.PARTIALLY_MATCHED
        self.state = SessionState.DELIVERY
        return list(self.trades)

    # ------------------------------------------------------------------
    # Delivery

    def settle_trade(self, reading: MeterReading) -> List[Transfer]:
        """Settle one trade against its metered delivery.

        Buyer pays ``price * delivered`` and gets the rest of its lock for the
        trade back.  Seller's lock is collateral: returned for the delivered
        part, paid to the buyer for the shortfall.  Over-delivery is clamped.
        """
        if self.state is not SessionState.DELIVERY:
            raise SessionNotInDelivery(f"session {self.id} is {self.state.value}")
        trade = self.trade(reading.trade_id)
        if trade.settled:
            raise TradeAlreadySettled(f"trade {trade.id} is already settled")
        delivered = reading.delivered
        if isinstance(delivered, bool) or not isinstance(delivered, int) or delivered < 0:
            raise InvalidOrder(f"delivered energy must be a non-negative integer, got {delivered!r}")
        delivered = min(delivered, trade.energy)
        sell, buy = self.order(trade.sell_order_id), self.order(trade.buy_order_id)
        p = trade.price
        shortfall = trade.energy - delivered
        payment = p * delivered
        compensation = p * shortfall
        buyer_refund = buy.price * trade.energy - payment
        seller_return = p * delivered

        # (owner, amount, recipient or None, kind); transfers run first so a
        # saturating allowance decrement can never starve them
        steps = [
            (buy.account, payment, sell.account, "payment"),
            (sell.account, compensation, buy.account, "compensation"),
            (buy.account, buyer_refund, None, "buyer_refund"),
            (sell.account, seller_return, None, "collateral_return"),
        ]
        steps = [s for s in steps if s[1] > 0]
        self._precheck_release(steps)

        transfers = []
        for owner, amount, recipient, kind in steps:
            locker = self.locker_for(owner)
            if recipient is None:
                self.ledger.unlock_without_transfer(self.escrow, owner, amount, locker)
            else:
                self.ledger.unlock_transfer(self.escrow, owner, amount, recipient, locker)
                transfers.append(Transfer(trade.id, kind, owner, recipient, amount))
        buy.tokens_released += buy.price * trade.energy
        sell.tokens_released += p * trade.energy
        trade.settled = True
        trade.delivered = delivered
        for o in (sell, buy):
            if o.status is OrderStatus.MATCHED and all(
                t.settled for t in self.trades if o.id in (t.sell_order_id, t.buy_order_id)
            ):
                o.status = OrderStatus.SETTLED
        self.transfers.extend(transfers)
        self._record_locks()
        return transfers

    def _precheck_release(self, steps) -> None:
        needed: Dict[Address, int] = {}
        paid: Dict[Address, int] = {}
        for owner, amount, recipient, _ in steps:
            needed[owner] = needed.get(owner, 0) + amount
            if recipient is not None:
                paid[owner] = paid.get(owner, 0) + amount
        for owner, amount in sorted(needed.items()):
            if not self.ledger.verify_lock(
                owner, amount, self.escrow, self.locker_for(owner), self.ledger.current_block
            ):
                raise LockVerificationFailed(
                    f"lock of {owner} cannot release {amount} at block {self.ledger.current_block}"
                )
        for owner, amount in sorted(paid.items()):
            have = self.ledger.allowance(owner, self.escrow)
            if have < amount:
                raise InsufficientAllowance(
                    f"escrow allowance of {owner} is {have}, settlement needs {amount}"
                )

    # ------------------------------------------------------------------
    # Close

    def close_session(self) -> SessionReport:
        if self.state is not SessionState.DELIVERY:
            raise SessionNotInDelivery(f"session {self.id} is {self.state.value}")
        pending = [t.id for t in self.trades if not t.settled]
        if pending:
            raise UnsettledTradesRemain(f"trades {pending} are not settled")
        residual = [
            (o, o.price * o.remaining_energy) for o in self.orders if o.remaining_energy
        ]
        needed: Dict[Address, int] = {}
        for o, amount in residual:
            needed[o.account] = needed.get(o.account, 0) + amount
        for owner, amount in sorted(needed.items()):
            if not self.ledger.verify_lock(
                owner, amount, self.escrow, self.locker_for(owner), self.ledger.current_block
            ):
                raise LockVerificationFailed(f"lock of {owner} cannot release {amount}")
        for o, amount in residual:
            self.ledger.unlock_without_transfer(
                self.escrow, o.account, amount, self.locker_for(o.account)
            )
            o.tokens_released += amount
            self._record_locks()
        self.state = SessionState.CLOSED
        self.engine._session_closed(self)
        self.report = self._build_report()
        return self.report

    def _build_report(self) -> SessionReport:
        accounts = set(self._opening_balances) | {o.account for o in self.orders}
        net_flow = {
            a: self.ledger.balance_of(a) - self._opening_balances.get(a, 0)
            for a in sorted(accounts)
        }
        orders = [
            {
                "id": o.id,
                "side": o.side.value,
                "account": o.account,
                "energy": o.energy,
                "price": o.price,
                "tokens_locked": o.tokens_locked,
                "matched_energy": o.matched_energy,
                "placed_at_block": o.placed_at_block,
                "status": o.status.value,
            }
            for o in self.orders
        ]
        trades = [
            {
                "id": t.id,
                "sell_order_id": t.sell_order_id,
                "buy_order_id": t.buy_order_id,
                "seller": self.order(t.sell_order_id).account,
                "buyer": self.order(t.buy_order_id).account,
                "energy": t.energy,
                "price": t.price,
                "delivered": t.delivered,
                "settled": t.settled,
            }
            for t in self.trades
        ]
        transfers = [
            {
                "trade_id": x.trade_id,
                "kind": x.kind,
                "from": x.sender,
                "to": x.recipient,
                "amount": x.amount,
            }
            for x in self.transfers
        ]
        return SessionReport(
            session_id=str(self.id),
            escrow=self.escrow,
            opened_at_block=self.opened_at_block,
            duration_blocks=self.duration_blocks,
            closed_at_block=self.ledger.current_block,
            orders=orders,
            trades=trades,
            transfers=transfers,
            net_flow=net_flow,
            lock_count_series=self.lock_count_series(),
        )


class MarketEngine:
    """Runs at most one session at a time against a ledger.

    The engine's own address is the escrow of every lock it creates.
    """

    def __init__(self, ledger: Ledger, address: Address = DEFAULT_ENGINE_ADDRESS):
        self.ledger = ledger
        self.address = address
        self.active: Optional[Session] = None

    def locker_for(self, account: Address) -> Address:
        return locker_address(self.address, account)

    def open_session(
        self, session_id, duration_blocks: int, escrow: Optional[Address] = None
    ) -> Session:
        if self.active is not None:
            raise SessionAlreadyActive(f"session {self.active.id} is still {self.active.state.value}")
        session = Session(self, session_id, duration_blocks, escrow or self.address)
        self.active = session
        return session

    def _session_closed(self, session: Session) -> None:
        if self.active is session:
            self.active = None

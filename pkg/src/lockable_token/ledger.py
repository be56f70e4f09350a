"""
Lockable ERC20 ledger.

An in-memory state machine for an ERC20 token whose owners can lock part of
their balance until a block height, naming an escrow address that is the only
party able to release the lock (optionally transferring the released tokens).

Block height is simulated: ``advance_block`` moves the chain clock and every
event record derives its timestamp from ``genesis_time + block * block_time``.

Every mutating method validates all of its preconditions before touching any
state, so a raised ``LedgerError`` leaves the ledger exactly as it was.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import (
    ArithmeticOverflow,
    InsufficientAllowance,
    InsufficientUnlockedBalance,
    InvalidAddress,
    InvalidAmount,
    LockSlotOwnerMismatch,
    LockVerificationFailed,
    ZeroAmount,
)

TOKEN_NAME = "LockableERC20"
TOKEN_SYMBOL = "LERC20"
MAX_UINT256 = 2**256 - 1
DEFAULT_BLOCK_TIME_S = 15

EVENT_CSV_HEADER = (
    "seq",
    "owner",
    "locking_address",
    "amount",
    "no_blocks",
    "unlocking_address",
    "status",
    "timestamp",
    "hour",
    "min",
)

Address = str
LockKey = Tuple[Address, Address]  # (unlocking_address, locking_address)


class LockStatus(IntEnum):
    LOCK = 0
    UNLOCK_TRANSFER = 1
    UNLOCK_WITHOUT_TRANSFER = 2


@dataclass
class LockedEntity:
    owner: Address
    amount: int
    block_no: int
    is_active: bool = True


@dataclass(frozen=True)
class LockEventRecord:
    owner: Address
    locking_address: Address
    amount: int
    no_blocks: int
    unlocking_address: Address
    status: LockStatus
    timestamp: int
    hour: int
    min: int


def _check_amount(value: int, what: str = "amount") -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidAmount(f"{what} must be an integer, got {value!r}")
    if value < 0:
        raise InvalidAmount(f"{what} must be non-negative, got {value}")
    if value > MAX_UINT256:
        raise InvalidAmount(f"{what} exceeds uint256 range")
    return value


def _check_address(value: Address) -> Address:
    if not isinstance(value, str) or not value:
        raise InvalidAddress(f"address must be a non-empty string, got {value!r}")
    return value


def _add(a: int, b: int) -> int:
    total = a + b
    if total > MAX_UINT256:
        raise ArithmeticOverflow(f"{a} + {b} overflows uint256")
    return total


def _sub(a: int, b: int) -> int:
    if b > a:
        raise ArithmeticOverflow(f"{a} - {b} underflows")
    return a - b


class Ledger:
    """Balances, allowances and escrowed locks of one Lockable ERC20 token.

    Locks are keyed by ``(unlocking_address, locking_address)``; at most one
    entity lives at each key and repeated locks through the same key are
    aggregated into it.

    Not thread-safe: callers serialize mutations.
    """

    name = TOKEN_NAME
    symbol = TOKEN_SYMBOL

    def __init__(
        self,
        initial_owner: Address,
        amount: int,
        genesis_time: int = 0,
        block_time: int = DEFAULT_BLOCK_TIME_S,
    ):
        _check_address(initial_owner)
        _check_amount(amount)
        _check_amount(genesis_time, "genesis_time")
        if isinstance(block_time, bool) or not isinstance(block_time, int) or block_time <= 0:
            raise ValueError(f"block_time must be a positive integer, got {block_time!r}")
        self.tokens_owner = initial_owner
        self.genesis_time = genesis_time
        self.block_time = block_time
        self.current_block = 0
        self._total_supply = amount
        self._balances: Dict[Address, int] = {}
        self._allowances: Dict[Tuple[Address, Address], int] = {}
        self._locked: Dict[LockKey, LockedEntity] = {}
        self._locked_balances: Dict[Address, int] = {}
        self._events: List[LockEventRecord] = []
        if amount:
            self._balances[initial_owner] = amount

    # ------------------------------------------------------------------
    # clock

    def advance_block(self, n: int = 1) -> None:
        _check_amount(n, "block delta")
        self.current_block += n

    @property
    def timestamp(self) -> int:
        return self.genesis_time + self.current_block * self.block_time

    # ------------------------------------------------------------------
    # reads

    def total_supply(self) -> int:
        return self._total_supply

    def balance_of(self, account: Address) -> int:
        return self._balances.get(account, 0)

    def allowance(self, owner: Address, spender: Address) -> int:
        return self._allowances.get((owner, spender), 0)

    def locked_balance_of(self, account: Address) -> int:
        return self._locked_balances.get(account, 0)

    def unlocked_balance_of(self, account: Address) -> int:
        return self.balance_of(account) - self.locked_balance_of(account)

    def locked_entity(
        self, unlocking_address: Address, locking_address: Address
    ) -> Optional[LockedEntity]:
        """Copy of the entity stored at the key, or None if the slot was never used."""
        entity = self._locked.get((unlocking_address, locking_address))
        if entity is None:
            return None
        return LockedEntity(entity.owner, entity.amount, entity.block_no, entity.is_active)

    def locks(self) -> Dict[LockKey, LockedEntity]:
        return {key: self.locked_entity(*key) for key in sorted(self._locked)}

    def active_lock_count(self) -> int:
        return sum(1 for e in self._locked.values() if e.is_active)

    def accounts(self) -> List[Address]:
        """Every address holding a balance entry, sorted."""
        return sorted(self._balances)

    def events(self) -> List[LockEventRecord]:
        return list(self._events)

    def events_filtered(self, status: int) -> List[LockEventRecord]:
        status = LockStatus(status)
        return [e for e in self._events if e.status is status]

    def verify_lock(
        self,
        owner: Address,
        amount: int,
        unlocking_address: Address,
        locking_address: Address,
        at_block: int,
    ) -> bool:
        entity = self._locked.get((unlocking_address, locking_address))
        return (
            entity is not None
            and entity.is_active
            and entity.owner == owner
            and entity.amount >= amount
            and at_block >= entity.block_no
        )

    # ------------------------------------------------------------------
    # ERC20 surface

    def _set_allowance(self, owner: Address, spender: Address, amount: int) -> None:
        if amount:
            self._allowances[(owner, spender)] = amount
        else:
            self._allowances.pop((owner, spender), None)

    def _move(self, sender: Address, recipient: Address, amount: int) -> None:
        if sender == recipient or not amount:
            return
        self._balances[sender] = _sub(self.balance_of(sender), amount)
        self._balances[recipient] = _add(self.balance_of(recipient), amount)
        if not self._balances[sender]:
            del self._balances[sender]

    def _require_unlocked(self, account: Address, amount: int) -> None:
        free = self.unlocked_balance_of(account)
        if amount > free:
            raise InsufficientUnlockedBalance(
                f"{account} has {free} unlocked tokens, {amount} required"
            )

    def _require_allowance(self, owner: Address, spender: Address, amount: int) -> None:
        current = self.allowance(owner, spender)
        if current < amount:
            raise InsufficientAllowance(
                f"allowance({owner}, {spender}) is {current}, {amount} required"
            )

    def approve(self, caller: Address, spender: Address, amount: int) -> None:
        _check_address(caller)
        _check_address(spender)
        _check_amount(amount)
        self._set_allowance(caller, spender, amount)

    def increase_allowance(self, caller: Address, spender: Address, amount: int) -> None:
        _check_address(caller)
        _check_address(spender)
        _check_amount(amount)
        self._require_unlocked(caller, amount)
        self._set_allowance(caller, spender, _add(self.allowance(caller, spender), amount))

    def decrease_allowance(self, caller: Address, spender: Address, amount: int) -> None:
        _check_address(caller)
        _check_address(spender)
        _check_amount(amount)
        self._require_allowance(caller, spender, amount)
        self._set_allowance(caller, spender, self.allowance(caller, spender) - amount)

    def transfer(self, caller: Address, recipient: Address, amount: int) -> None:
        _check_address(caller)
        _check_address(recipient)
        _check_amount(amount)
        self._require_unlocked(caller, amount)
        self._move(caller, recipient, amount)

    def transfer_from(
        self, caller: Address, sender: Address, recipient: Address, amount: int
    ) -> None:
        # Funds leave ``sender``; the published pseudocode names msg.sender here.
        _check_address(caller)
        _check_address(sender)
        _check_address(recipient)
        _check_amount(amount)
        self._require_unlocked(sender, amount)
        self._require_allowance(sender, caller, amount)
        self._move(sender, recipient, amount)
        self._set_allowance(sender, caller, self.allowance(sender, caller) - amount)

    # ------------------------------------------------------------------
    # locking

    def lock(
        self, caller: Address, amount: int, no_blocks: int, unlocking_address: Address
    ) -> None:
        """Lock ``amount`` of the caller's own tokens for ``no_blocks`` blocks."""
        self._check_lock_args(caller, amount, no_blocks, unlocking_address)
        self._require_unlocked(caller, amount)
        self._precheck_lock(caller, caller, amount, unlocking_address)
        self._lock(caller, caller, amount, no_blocks, unlocking_address)

    def lock_from(
        self,
        caller: Address,
        owner: Address,
        amount: int,
        no_blocks: int,
        unlocking_address: Address,
    ) -> None:
        """Lock ``owner``'s tokens on their behalf, spending the caller's allowance."""
        self._check_lock_args(owner, amount, no_blocks, unlocking_address)
        _check_address(caller)
        self._require_unlocked(owner, amount)
        self._require_allowance(owner, caller, amount)
        consumed = amount if caller == unlocking_address else 0
        self._precheck_lock(owner, caller, amount, unlocking_address, consumed)
        self._set_allowance(owner, caller, self.allowance(owner, caller) - amount)
        self._lock(owner, caller, amount, no_blocks, unlocking_address)

    def _check_lock_args(
        self, owner: Address, amount: int, no_blocks: int, unlocking_address: Address
    ) -> None:
        _check_address(owner)
        _check_address(unlocking_address)
        _check_amount(amount)
        _check_amount(no_blocks, "no_blocks")
        if amount == 0:
            raise ZeroAmount("cannot lock zero tokens")

    def _precheck_lock(
        self,
        owner: Address,
        locker: Address,
        amount: int,
        unlocking_address: Address,
        consumed: int = 0,
    ) -> None:
        """Raise before any mutation if ``_lock`` could not complete.

        ``consumed`` is allowance(owner, unlocking_address) already spent by the
        caller when the locker is itself the escrow.
        """
        entity = self._locked.get((unlocking_address, locker))
        if entity is not None and entity.is_active:
            if entity.owner != owner:
                raise LockSlotOwnerMismatch(
                    f"slot ({unlocking_address}, {locker}) already holds a lock of {entity.owner}"
                )
            _add(entity.amount, amount)
        _add(self.allowance(owner, unlocking_address) - consumed, amount)
        _add(self.locked_balance_of(owner), amount)

    def _lock(
        self,
        owner: Address,
        locker: Address,
        amount: int,
        no_blocks: int,
        unlocking_address: Address,
    ) -> None:
        key = (unlocking_address, locker)
        unlock_at = self.current_block + no_blocks
        entity = self._locked.get(key)
        if entity is not None and entity.is_active:
            entity.amount += amount
            entity.block_no = max(entity.block_no, unlock_at)
        else:
            self._locked[key] = LockedEntity(owner, amount, unlock_at, True)
        self._emit(owner, locker, amount, no_blocks, unlocking_address, LockStatus.LOCK)
        self._set_allowance(
            owner, unlocking_address, self.allowance(owner, unlocking_address) + amount
        )
        self._locked_balances[owner] = self.locked_balance_of(owner) + amount

    def _verify_or_raise(
        self, owner: Address, amount: int, unlocking_address: Address, locking_address: Address
    ) -> LockedEntity:
        _check_address(owner)
        _check_address(unlocking_address)
        _check_address(locking_address)
        _check_amount(amount)
        if amount == 0:
            raise ZeroAmount("cannot unlock zero tokens")
        if not self.verify_lock(
            owner, amount, unlocking_address, locking_address, self.current_block
        ):
            raise LockVerificationFailed(
                f"no unlockable lock of {amount} for {owner} at "
                f"({unlocking_address}, {locking_address}), block {self.current_block}"
            )
        return self._locked[(unlocking_address, locking_address)]

    def _release(self, entity: LockedEntity, owner: Address, amount: int) -> None:
        if amount < entity.amount:
            entity.amount -= amount
        else:
            entity.amount = 0
            entity.is_active = False
        remaining = self.locked_balance_of(owner) - amount
        if remaining:
            self._locked_balances[owner] = remaining
        else:
            self._locked_balances.pop(owner, None)

    def unlock_transfer(
        self,
        caller: Address,
        owner: Address,
        amount: int,
        recipient: Address,
        locking_address: Address,
    ) -> None:
        """Release part of a matured lock and pay it from ``owner`` to ``recipient``.

        Only the escrow named at lock time (``caller``) can do this.
        """
        _check_address(recipient)
        entity = self._verify_or_raise(owner, amount, caller, locking_address)
        self._require_allowance(owner, caller, amount)
        self._release(entity, owner, amount)
        self.transfer_from(caller, owner, recipient, amount)
        self._emit(owner, locking_address, amount, 0, caller, LockStatus.UNLOCK_TRANSFER)

    def unlock_without_transfer(
        self, caller: Address, owner: Address, amount: int, locking_address: Address
    ) -> None:
        """Release part of a matured lock, leaving the tokens with ``owner``.

        The escrow's allowance is reduced by the released amount, saturating at
        zero if the owner already lowered it below that.
        """
        entity = self._verify_or_raise(owner, amount, caller, locking_address)
        self._release(entity, owner, amount)
        self._set_allowance(owner, caller, max(0, self.allowance(owner, caller) - amount))
        self._emit(
            owner, locking_address, amount, 0, caller, LockStatus.UNLOCK_WITHOUT_TRANSFER
        )

    def _emit(
        self,
        owner: Address,
        locking_address: Address,
        amount: int,
        no_blocks: int,
        unlocking_address: Address,
        status: LockStatus,
    ) -> None:
        ts = self.timestamp
        when = datetime.fromtimestamp(ts, tz=timezone.utc)
        self._events.append(
            LockEventRecord(
                owner=owner,
                locking_address=locking_address,
                amount=amount,
                no_blocks=no_blocks,
                unlocking_address=unlocking_address,
                status=status,
                timestamp=ts,
                hour=when.hour,
                min=when.minute,
            )
        )

    # ------------------------------------------------------------------
    # snapshots

    def to_dict(self) -> dict:
        """JSON-ready snapshot; amounts are decimal strings."""
        return {
            "name": self.name,
            "symbol": self.symbol,
            "tokens_owner": self.tokens_owner,
            "total_supply": str(self._total_supply),
            "current_block": self.current_block,
            "genesis_time": self.genesis_time,
            "block_time": self.block_time,
            "balances": {a: str(v) for a, v in sorted(self._balances.items())},
            "allowances": [
                {"owner": o, "spender": s, "amount": str(v)}
                for (o, s), v in sorted(self._allowances.items())
            ],
            "locks": [
                {
                    "unlocking_address": u,
                    "locking_address": l,
                    "owner": e.owner,
                    "amount": str(e.amount),
                    "block_no": e.block_no,
                    "is_active": e.is_active,
                }
                for (u, l), e in sorted(self._locked.items())
            ],
            "locked_balances": {a: str(v) for a, v in sorted(self._locked_balances.items())},
            "events": [_event_to_dict(e) for e in self._events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Ledger":
        ledger = cls(
            data["tokens_owner"],
            0,
            genesis_time=int(data["genesis_time"]),
            block_time=int(data["block_time"]),
        )
        ledger.current_block = int(data["current_block"])
        ledger._total_supply = int(data["total_supply"])
        ledger._balances = {a: int(v) for a, v in data["balances"].items() if int(v)}
        ledger._allowances = {
            (row["owner"], row["spender"]): int(row["amount"])
            for row in data["allowances"]
            if int(row["amount"])
        }
        ledger._locked = {
            (row["unlocking_address"], row["locking_address"]): LockedEntity(
                row["owner"], int(row["amount"]), int(row["block_no"]), bool(row["is_active"])
            )
            for row in data["locks"]
        }
        ledger._locked_balances = {
            a: int(v) for a, v in data["locked_balances"].items() if int(v)
        }
        ledger._events = [_event_from_dict(row) for row in data["events"]]
        problems = ledger.check_invariants()
        if problems:
            raise ValueError("inconsistent ledger snapshot: " + "; ".join(problems))
        return ledger

    @classmethod
    def from_json(cls, text: str) -> "Ledger":
        return cls.from_dict(json.loads(text))

    def check_invariants(self) -> List[str]:
        """Return a description of every violated structural invariant (empty if sound)."""
        problems = []
        if sum(self._balances.values()) != self._total_supply:
            problems.append("sum of balances differs from total supply")
        expected: Dict[Address, int] = {}
        for key, entity in self._locked.items():
            if entity.is_active:
                if entity.amount <= 0:
                    problems.append(f"active lock {key} has non-positive amount")
                expected[entity.owner] = expected.get(entity.owner, 0) + entity.amount
        for account in set(expected) | set(self._locked_balances):
            if expected.get(account, 0) != self.locked_balance_of(account):
                problems.append(f"locked balance of {account} does not match its active locks")
            if self.locked_balance_of(account) > self.balance_of(account):
                problems.append(f"locked balance of {account} exceeds its balance")
        return problems


def new_ledger(
    initial_owner: Address,
    amount: int,
    genesis_time: int = 0,
    block_time: int = DEFAULT_BLOCK_TIME_S,
) -> Ledger:
    return Ledger(initial_owner, amount, genesis_time=genesis_time, block_time=block_time)


def _event_to_dict(e: LockEventRecord) -> dict:
    return {
        "owner": e.owner,
        "locking_address": e.locking_address,
        "amount": str(e.amount),
        "no_blocks": e.no_blocks,
        "unlocking_address": e.unlocking_address,
        "status": int(e.status),
        "timestamp": e.timestamp,
        "hour": e.hour,
        "min": e.min,
    }


def _event_from_dict(row: dict) -> LockEventRecord:
    return LockEventRecord(
        owner=row["owner"],
        locking_address=row["locking_address"],
        amount=int(row["amount"]),
        no_blocks=int(row["no_blocks"]),
        unlocking_address=row["unlocking_address"],
        status=LockStatus(int(row["status"])),
        timestamp=int(row["timestamp"]),
        hour=int(row["hour"]),
        min=int(row["min"]),
    )


def events_to_csv(events: Iterable[LockEventRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVENT_CSV_HEADER)
    for seq, e in enumerate(events):
        writer.writerow(
            [
                seq,
                e.owner,
                e.locking_address,
                e.amount,
                e.no_blocks,
                e.unlocking_address,
                int(e.status),
                e.timestamp,
                e.hour,
                e.min,
            ]
        )
    return buf.getvalue()

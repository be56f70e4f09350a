"""
Block-gas throughput model.

How many order transactions fit into a block, and into a market session,
given a block gas limit and the gas each transaction consumes.  All capacity
figures use integer floor division: a block holds whole transactions only.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional

from .errors import UnknownOperation

PLACE_ORDER_PLAIN = "place_order_plain"
PLACE_ORDER_WITH_LOCK = "place_order_with_lock"

DEFAULT_BLOCK_GAS_LIMIT = 15_000_000
DEFAULT_BLOCK_TIME_S = 15
DEFAULT_GAS_TABLE = {
    PLACE_ORDER_PLAIN: 348_774,
    PLACE_ORDER_WITH_LOCK: 748_565,
}
FOUR_HOURS_S = 4 * 3600

THROUGHPUT_CSV_HEADER = ("t_seconds", "orders_plain", "orders_with_lock")


def _positive_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ValueError(f"{what} must be a positive integer, got {value!r}")
    return value


@dataclass(frozen=True)
class GasParams:
    block_gas_limit: int = DEFAULT_BLOCK_GAS_LIMIT
    block_time_s: int = DEFAULT_BLOCK_TIME_S
    gas_table: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_GAS_TABLE))

    def __post_init__(self):
        _positive_int(self.block_gas_limit, "block_gas_limit")
        _positive_int(self.block_time_s, "block_time_s")
        for name, gas in self.gas_table.items():
            _positive_int(gas, f"gas for {name}")
        object.__setattr__(self, "gas_table", dict(self.gas_table))

    def gas_for(self, op_name: str) -> int:
        try:
            return self.gas_table[op_name]
        except KeyError:
            raise UnknownOperation(op_name) from None


def orders_per_block(params: GasParams, op_name: str) -> int:
    return params.block_gas_limit // params.gas_for(op_name)


def blocks_in(params: GasParams, session_seconds: int) -> int:
    if isinstance(session_seconds, bool) or not isinstance(session_seconds, int):
        raise ValueError(f"session_seconds must be an integer, got {session_seconds!r}")
    if session_seconds < 0:
        raise ValueError("session_seconds must be non-negative")
    return session_seconds // params.block_time_s


def session_capacity(params: GasParams, op_name: str, session_seconds: int) -> int:
    per_block = orders_per_block(params, op_name)
    return blocks_in(params, session_seconds) * per_block


@dataclass(frozen=True)
class OverheadReport:
    block_gas_limit: int
    block_time_s: int
    gas_plain: int
    gas_with_lock: int
    gas_delta: int
    orders_per_block_plain: int
    orders_per_block_with_lock: int
    throughput_ratio: Fraction
    session_seconds: int
    rows: List[tuple]  # (t_seconds, orders_plain, orders_with_lock)

    def to_dict(self) -> dict:
        return {
            "block_gas_limit": self.block_gas_limit,
            "block_time_s": self.block_time_s,
            "gas_plain": self.gas_plain,
            "gas_with_lock": self.gas_with_lock,
            "gas_delta": self.gas_delta,
            "orders_per_block_plain": self.orders_per_block_plain,
            "orders_per_block_with_lock": self.orders_per_block_with_lock,
            "throughput_ratio": float(self.throughput_ratio),
            "throughput_ratio_exact": f"{self.throughput_ratio.numerator}/{self.throughput_ratio.denominator}",
            "session_seconds": self.session_seconds,
            "session_capacity_plain": self.rows[-1][1],
            "session_capacity_with_lock": self.rows[-1][2],
            "orders_over_time": [list(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(THROUGHPUT_CSV_HEADER)
        writer.writerows(self.rows)
        return buf.getvalue()


def overhead_report(
    params: Optional[GasParams] = None,
    session_seconds: int = FOUR_HOURS_S,
    resolution_s: Optional[int] = None,
) -> OverheadReport:
    """Compare order throughput with and without the lock step.

    ``rows`` samples cumulative capacity every ``resolution_s`` seconds
    (one block by default) from 0 up to ``session_seconds`` inclusive.
    """
    params = params or GasParams()
    gas_plain = params.gas_for(PLACE_ORDER_PLAIN)
    gas_lock = params.gas_for(PLACE_ORDER_WITH_LOCK)
    step = _positive_int(resolution_s or params.block_time_s, "resolution_s")
    blocks_in(params, session_seconds)

    plain = orders_per_block(params, PLACE_ORDER_PLAIN)
    locked = orders_per_block(params, PLACE_ORDER_WITH_LOCK)
    times = list(range(0, session_seconds + 1, step))
    if times[-1] != session_seconds:
        times.append(session_seconds)
    rows = [
        (
            t,
            session_capacity(params, PLACE_ORDER_PLAIN, t),
            session_capacity(params, PLACE_ORDER_WITH_LOCK, t),
        )
        for t in times
    ]
    return OverheadReport(
        block_gas_limit=params.block_gas_limit,
        block_time_s=params.block_time_s,
        gas_plain=gas_plain,
        gas_with_lock=gas_lock,
        gas_delta=gas_lock - gas_plain,
        orders_per_block_plain=plain,
        orders_per_block_with_lock=locked,
        throughput_ratio=Fraction(locked, plain) if plain else Fraction(0),
        session_seconds=session_seconds,
        rows=rows,
    )


def params_with_overrides(
    base: Optional[GasParams] = None,
    block_gas_limit: Optional[int] = None,
    block_time_s: Optional[int] = None,
    gas_table: Optional[Dict[str, int]] = None,
) -> GasParams:
    base = base or GasParams()
    table = dict(base.gas_table)
    table.update(gas_table or {})
    return GasParams(
        block_gas_limit=base.block_gas_limit if block_gas_limit is None else block_gas_limit,
        block_time_s=base.block_time_s if block_time_s is None else block_time_s,
        gas_table=table,
    )

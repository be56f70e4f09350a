"""Scenario files: schema, validation, and end-to-end execution of one session."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict

import jsonschema

from .errors import LedgerError, MarketError
from .gas import GasParams, overhead_report, params_with_overrides
from .ledger import Ledger, events_to_csv
from .market import DEFAULT_ENGINE_ADDRESS, MarketEngine, MeterReading, lock_series_to_csv

GENESIS_ADDRESS = "genesis"

_uint = {"type": "integer", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_address = {"type": "string", "minLength": 1}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "accounts": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["address", "initial_balance"],
                "properties": {
                    "address": _address,
                    "initial_balance": _uint,
                    "approve_market": _uint,
                },
            },
        },
        "session": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "id": {"type": ["string", "integer"]},
                "duration_blocks": _uint,
                "block_time_s": _posint,
                "genesis_time": _uint,
                "market_address": _address,
            },
        },
        "orders": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["account", "side", "energy_wh", "price"],
                "properties": {
                    "block_offset": _uint,
                    "account": _address,
                    "side": {"enum": ["sell", "buy"]},
                    "energy_wh": _posint,
                    "price": _posint,
                },
            },
        },
        "deliveries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["delivered_wh"],
                "properties": {
                    "trade_id": _posint,
                    "pair": {
                        "type": "array",
                        "items": _uint,
                        "minItems": 2,
                        "maxItems": 2,
                    },
                    "delivered_wh": _uint,
                },
                "oneOf": [{"required": ["trade_id"]}, {"required": ["pair"]}],
            },
        },
        "gas": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "block_gas_limit": _posint,
                "gas_table": {"type": "object", "additionalProperties": _posint},
                "session_seconds": _uint,
                "resolution_s": _posint,
            },
        },
    },
}


class SchemaError(ValueError):
    pass


class ScenarioDomainError(Exception):
    """A domain error raised while running a scenario, tagged with its origin."""

    def __init__(self, where: str, cause: Exception):
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.where = where
        self.cause = cause


@dataclass
class ScenarioResult:
    report: dict
    outputs: Dict[str, str]  # file name -> contents


def load_scenario(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    validate_scenario(data)
    return data


def validate_scenario(data) -> None:
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{where}: {exc.message}") from exc

    session = data.get("session", {})
    reserved = {GENESIS_ADDRESS, session.get("market_address", DEFAULT_ENGINE_ADDRESS)}
    seen = set()
    for acct in data.get("accounts", []):
        addr = acct["address"]
        if addr in seen:
            raise SchemaError(f"accounts: duplicate address {addr!r}")
        if addr in reserved or "/" in addr:
            raise SchemaError(f"accounts: address {addr!r} is reserved")
        seen.add(addr)
    duration = session.get("duration_blocks", 0)
    for i, order in enumerate(data.get("orders", [])):
        if order["account"] not in seen:
            raise SchemaError(f"orders/{i}: unknown account {order['account']!r}")
        if order.get("block_offset", 0) > duration:
            raise SchemaError(
                f"orders/{i}: block_offset {order['block_offset']} is after the session end"
            )
    n_orders = len(data.get("orders", []))
    for i, d in enumerate(data.get("deliveries", [])):
        for idx in d.get("pair", []):
            if idx >= n_orders:
                raise SchemaError(f"deliveries/{i}: order index {idx} out of range")


def gas_params_for(data: dict) -> GasParams:
    gas = data.get("gas", {})
    block_time = data.get("session", {}).get("block_time_s")
    try:
        return params_with_overrides(
            block_gas_limit=gas.get("block_gas_limit"),
            block_time_s=block_time,
            gas_table=gas.get("gas_table"),
        )
    except ValueError as exc:
        raise SchemaError(f"gas: {exc}") from exc


def run_scenario(data: dict) -> ScenarioResult:
    """Execute a validated scenario; return the report and every output file's text."""
    validate_scenario(data)
    session_cfg = data.get("session", {})
    accounts = data.get("accounts", [])
    orders = data.get("orders", [])
    duration = session_cfg.get("duration_blocks", 0)
    block_time = session_cfg.get("block_time_s", 15)
    params = gas_params_for(data)

    total = sum(a["initial_balance"] for a in accounts)
    ledger = Ledger(
        GENESIS_ADDRESS,
        total,
        genesis_time=session_cfg.get("genesis_time", 0),
        block_time=block_time,
    )
    engine = MarketEngine(ledger, session_cfg.get("market_address", DEFAULT_ENGINE_ADDRESS))
    for acct in accounts:
        ledger.transfer(GENESIS_ADDRESS, acct["address"], acct["initial_balance"])
        if acct.get("approve_market"):
            ledger.approve(acct["address"], engine.locker_for(acct["address"]), acct["approve_market"])

    session = engine.open_session(session_cfg.get("id", 1), duration)
    order_ids: Dict[int, int] = {}
    schedule = sorted(range(len(orders)), key=lambda i: orders[i].get("block_offset", 0))
    for i in schedule:
        spec = orders[i]
        target = session.opened_at_block + spec.get("block_offset", 0)
        ledger.advance_block(target - ledger.current_block)
        try:
            placed = session.place_order(spec["account"], spec["side"], spec["energy_wh"], spec["price"])
        except (LedgerError, MarketError) as exc:
            raise ScenarioDomainError(f"order {i} ({spec['account']} {spec['side']})", exc) from exc
        order_ids[i] = placed.id

    ledger.advance_block(session.end_block - ledger.current_block)
    trades = session.run_matching()

    delivered: Dict[int, int] = {t.id: t.energy for t in trades}
    by_pair = {(t.sell_order_id, t.buy_order_id): t.id for t in trades}
    for k, d in enumerate(data.get("deliveries", [])):
        if "trade_id" in d:
            trade_id = d["trade_id"]
        else:
            sell_i, buy_i = d["pair"]
            trade_id = by_pair.get((order_ids[sell_i], order_ids[buy_i]))
            if trade_id is None:
                raise ScenarioDomainError(
                    f"delivery {k}", LookupError(f"orders {sell_i} and {buy_i} were not matched")
                )
        if trade_id not in delivered:
            raise ScenarioDomainError(f"delivery {k}", LookupError(f"trade {trade_id} does not exist"))
        delivered[trade_id] = d["delivered_wh"]

    for trade in trades:
        try:
            session.settle_trade(MeterReading(trade.id, delivered[trade.id]))
        except (LedgerError, MarketError) as exc:
            raise ScenarioDomainError(f"trade {trade.id}", exc) from exc
    try:
        report = session.close_session()
    except (LedgerError, MarketError) as exc:
        raise ScenarioDomainError(f"session {session.id}", exc) from exc

    gas_cfg = data.get("gas", {})
    throughput = overhead_report(
        params,
        session_seconds=gas_cfg.get("session_seconds", duration * block_time),
        resolution_s=gas_cfg.get("resolution_s"),
    )
    full = report.to_dict()
    full["final_balances"] = {a["address"]: ledger.balance_of(a["address"]) for a in accounts}
    full["final_locked_balances"] = {
        a["address"]: ledger.locked_balance_of(a["address"]) for a in accounts
    }
    full["active_ledger_locks"] = ledger.active_lock_count()
    full["throughput"] = {
        k: v for k, v in throughput.to_dict().items() if k != "orders_over_time"
    }
    return ScenarioResult(
        report=full,
        outputs={
            "report.json": json.dumps(full, indent=2, sort_keys=True) + "\n",
            "locks.csv": lock_series_to_csv(report.lock_count_series),
            "events.csv": events_to_csv(ledger.events()),
            "throughput.csv": throughput.to_csv(),
        },
    )

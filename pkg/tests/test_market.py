import pytest

from lockable_token import errors
from lockable_token.ledger import Ledger
from lockable_token.market import (
    MarketEngine,
    MeterReading,
    OrderStatus,
    SessionState,
    Side,
    locker_address,
)

ACCOUNTS = ("s1", "s2", "b1", "b2")


@pytest.fixture
def engine():
    ledger = Ledger("genesis", 4000)
    eng = MarketEngine(ledger, "mkt")
    for a in ACCOUNTS:
        ledger.transfer("genesis", a, 1000)
        ledger.approve(a, eng.locker_for(a), 1000)
    return eng


def matched(engine, sells, buys, duration=10):
    session = engine.open_session(1, duration)
    for account, energy, price in sells:
        session.place_order(account, Side.SELL, energy, price)
    for account, energy, price in buys:
        session.place_order(account, "buy", energy, price)
    engine.ledger.advance_block(duration)
    return session, session.run_matching()


def trade_tuples(session, trades):
    return [
        (session.order(t.sell_order_id).account, session.order(t.buy_order_id).account, t.energy, t.price)
        for t in trades
    ]


# open_session


def test_open_session_four_hours(engine):
    session = engine.open_session(1, 960)
    assert session.state is SessionState.OPEN
    assert session.opened_at_block == 0
    session.place_order("s1", Side.SELL, 10, 5)
    events = engine.ledger.events()
    assert events[0].no_blocks == 960
    assert events[0].unlocking_address == "mkt"
    assert events[0].locking_address == locker_address("mkt", "s1")


def test_second_session_rejected(engine):
    engine.open_session(1, 10)
    with pytest.raises(errors.SessionAlreadyActive):
        engine.open_session(2, 10)


def test_zero_duration_session(engine):
    session = engine.open_session(1, 0)
    session.place_order("s1", Side.SELL, 10, 5)
    assert engine.ledger.verify_lock("s1", 50, "mkt", engine.locker_for("s1"), 0)
    session.run_matching()
    report = session.close_session()
    assert engine.ledger.locked_balance_of("s1") == 0
    assert report.lock_count_series[-1] == (0, 0)


def test_engine_is_free_after_close(engine):
    session = engine.open_session(1, 0)
    session.run_matching()
    session.close_session()
    assert engine.open_session(2, 5).id == 2


# place_order


def test_place_order_locks_price_times_energy(engine):
    session = engine.open_session(1, 10)
    order = session.place_order("s1", Side.SELL, 10, 5)
    assert order.tokens_locked == 50
    assert order.remaining_energy == 10
    assert engine.ledger.locked_balance_of("s1") == 50
    assert engine.ledger.balance_of("s1") == 1000


def test_underfunded_bid_rejected_atomically(engine):
    ledger = engine.ledger
    ledger.transfer("b1", "b2", 951)  # b1 keeps 49
    session = engine.open_session(1, 10)
    before = ledger.to_dict()
    with pytest.raises(errors.InsufficientUnlockedBalance):
        session.place_order("b1", Side.BUY, 10, 5)
    assert session.orders == []
    assert ledger.to_dict() == before
    assert session.lock_count_series() == [(0, 0)]


def test_missing_approval_rejected(engine):
    engine.ledger.approve("b1", engine.locker_for("b1"), 10)
    session = engine.open_session(1, 10)
    with pytest.raises(errors.InsufficientAllowance):
        session.place_order("b1", Side.BUY, 10, 5)


@pytest.mark.parametrize("energy,price", [(0, 5), (5, 0), (-1, 5), (2.5, 5)])
def test_invalid_orders_rejected_before_ledger(engine, energy, price):
    session = engine.open_session(1, 10)
    with pytest.raises(errors.InvalidOrder):
        session.place_order("s1", Side.SELL, energy, price)
    assert engine.ledger.events() == []


def test_orders_lock_until_session_end(engine):
    session = engine.open_session(1, 10)
    engine.ledger.advance_block(4)
    session.place_order("s1", Side.SELL, 1, 1)
    assert engine.ledger.locked_entity("mkt", engine.locker_for("s1")).block_no == 10


def test_no_orders_after_session_end(engine):
    session = engine.open_session(1, 10)
    engine.ledger.advance_block(11)
    with pytest.raises(errors.SessionNotOpen):
        session.place_order("s1", Side.SELL, 1, 1)


# run_matching


def test_single_crossing_trade(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    assert trade_tuples(session, trades) == [("s1", "b1", 10, 5)]
    assert session.state is SessionState.DELIVERY


def test_no_cross(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 4)])
    assert trades == []
    assert [o.status for o in session.orders] == [OrderStatus.EXPIRED, OrderStatus.EXPIRED]


def test_partial_fills(engine):
    session, trades = matched(engine, [("s1", 5, 5), ("s2", 5, 6)], [("b1", 8, 6)])
    assert trade_tuples(session, trades) == [("s1", "b1", 5, 5), ("s2", "b1", 3, 6)]
    s1, s2, b1 = session.orders
    assert b1.status is OrderStatus.MATCHED and b1.matched_energy == 8
    assert s2.status is OrderStatus.PARTIALLY_MATCHED and s2.remaining_energy == 2
    assert s1.status is OrderStatus.MATCHED


def test_price_then_id_priority(engine):
    session, trades = matched(
        engine, [("s1", 5, 6), ("s2", 5, 5)], [("b1", 5, 6), ("b2", 5, 9)]
    )
    assert trade_tuples(session, trades) == [("s2", "b2", 5, 5), ("s1", "b1", 5, 6)]


def test_matching_requires_session_end(engine):
    session = engine.open_session(1, 10)
    engine.ledger.advance_block(9)
    with pytest.raises(errors.SessionNotEnded):
        session.run_matching()


def test_phase_ordering(engine):
    session, _ = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    with pytest.raises(errors.SessionNotOpen):
        session.place_order("s2", Side.SELL, 1, 1)
    with pytest.raises(errors.SessionNotOpen):
        session.run_matching()

    fresh = MarketEngine(Ledger("x", 0), "m2").open_session(1, 0)
    with pytest.raises(errors.SessionNotInDelivery):
        fresh.settle_trade(MeterReading(1, 0))
    with pytest.raises(errors.SessionNotInDelivery):
        fresh.close_session()


# settle_trade


def balances(engine, *accounts):
    return {a: engine.ledger.balance_of(a) for a in accounts}


@pytest.mark.parametrize(
    "delivered,buyer_pays,seller_pays",
    [(10, 50, 0), (6, 30, 20), (0, 0, 50), (25, 50, 0)],
)
def test_settlement_arithmetic(engine, delivered, buyer_pays, seller_pays):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 5)])
    before = balances(engine, "s1", "b1")
    transfers = session.settle_trade(MeterReading(trades[0].id, delivered))
    after = balances(engine, "s1", "b1")
    assert after["b1"] - before["b1"] == seller_pays - buyer_pays
    assert after["s1"] - before["s1"] == buyer_pays - seller_pays
    paid = {(x.sender, x.recipient): x.amount for x in transfers}
    assert paid.get(("b1", "s1"), 0) == buyer_pays
    assert paid.get(("s1", "b1"), 0) == seller_pays
    assert engine.ledger.locked_balance_of("s1") == 0
    assert engine.ledger.locked_balance_of("b1") == 0
    assert trades[0].delivered == min(delivered, 10)


def test_buyer_premium_refunded_at_settlement(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    assert engine.ledger.locked_balance_of("b1") == 70
    session.settle_trade(MeterReading(trades[0].id, 6))
    assert engine.ledger.locked_balance_of("b1") == 0
    assert engine.ledger.balance_of("b1") == 1000 - 30 + 20
    assert engine.ledger.allowance("b1", "mkt") == 0


def test_settle_errors(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    with pytest.raises(errors.TradeNotFound):
        session.settle_trade(MeterReading(99, 1))
    session.settle_trade(MeterReading(1, 10))
    with pytest.raises(errors.TradeAlreadySettled):
        session.settle_trade(MeterReading(1, 10))


def test_settlement_blocked_by_reduced_escrow_allowance(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    engine.ledger.decrease_allowance("b1", "mkt", 70)
    before = engine.ledger.to_dict()
    with pytest.raises(errors.InsufficientAllowance):
        session.settle_trade(MeterReading(1, 10))
    assert engine.ledger.to_dict() == before
    assert not trades[0].settled


def test_self_trade_settles(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("s1", 10, 6)])
    session.settle_trade(MeterReading(1, 4))
    session.close_session()
    assert engine.ledger.balance_of("s1") == 1000
    assert engine.ledger.locked_balance_of("s1") == 0


# close_session and lock series


def test_close_releases_residuals(engine):
    session, trades = matched(
        engine, [("s1", 5, 5), ("s2", 5, 6)], [("b1", 8, 6), ("b2", 4, 1)]
    )
    for t in trades:
        session.settle_trade(MeterReading(t.id, t.energy))
    report = session.close_session()
    ledger = engine.ledger
    assert all(ledger.locked_balance_of(a) == 0 for a in ACCOUNTS)
    assert ledger.active_lock_count() == 0
    assert session.state is SessionState.CLOSED
    assert sum(report.net_flow.values()) == 0
    assert report.net_flow == {"b1": -43, "b2": 0, "s1": 25, "s2": 18}
    outcome = {o["id"]: o["status"] for o in report.orders}
    assert outcome == {1: "settled", 2: "partially_matched", 3: "settled", 4: "expired"}


def test_expired_sell_returned_at_close(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [])
    assert engine.ledger.locked_balance_of("s1") == 50
    session.close_session()
    assert engine.ledger.locked_balance_of("s1") == 0
    assert engine.ledger.balance_of("s1") == 1000
    assert engine.ledger.events()[-1].amount == 50


def test_close_with_unsettled_trade(engine):
    session, trades = matched(engine, [("s1", 10, 5)], [("b1", 10, 7)])
    with pytest.raises(errors.UnsettledTradesRemain):
        session.close_session()


def test_lock_series_rises_then_falls(engine):
    session, trades = matched(engine, [("s1", 10, 5), ("s2", 3, 9)], [("b1", 10, 7)])
    session.settle_trade(MeterReading(trades[0].id, 10))
    session.close_session()
    counts = [c for _, c in session.lock_count_series()]
    assert counts == [0, 1, 2, 3, 1, 0]


def test_empty_session_series(engine):
    session, _ = matched(engine, [], [])
    report = session.close_session()
    assert [c for _, c in report.lock_count_series] == [0]


def test_single_unmatched_order_series(engine):
    session, _ = matched(engine, [("s1", 1, 1)], [])
    session.close_session()
    assert [c for _, c in session.lock_count_series()] == [0, 1, 0]


def test_report_is_deterministic():
    def run():
        ledger = Ledger("g", 100)
        eng = MarketEngine(ledger)
        for a in ("x", "y"):
            ledger.transfer("g", a, 50)
            ledger.approve(a, eng.locker_for(a), 50)
        s = eng.open_session("d", 3)
        s.place_order("x", Side.SELL, 4, 2)
        s.place_order("y", Side.BUY, 5, 3)
        ledger.advance_block(3)
        s.run_matching()
        s.settle_trade(MeterReading(1, 3))
        return s.close_session().to_json(), ledger.to_json()

    assert run() == run()


def test_unknown_side_rejected(engine):
    session = engine.open_session(1, 10)
    with pytest.raises(errors.InvalidOrder):
        session.place_order("s1", "hold", 1, 1)

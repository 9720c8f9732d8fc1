"""
Tests for the shielded pool heuristics and the CoinJoin detector.
"""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.clustering import TagCategory, TagMap, multi_input_cluster
from app.core.evidence import LinkEvidence, LinkKind
from app.core.ledger import BUILTIN_CHAINS, Address, LedgerTx, TxIn, TxOut, to_units
from app.core.synth import LedgerBuilder
from app.core.zcash import (
    DASH_DENOMINATIONS,
    Attribution,
    Direction,
    anonymity_reduction,
    attribute_withdrawals,
    coinbase_recipients,
    detect_coinjoin,
    period_of,
    pool_events,
    round_trip_sweep,
    round_trip_unique,
    scan_coinjoins,
    tag_founders,
    tag_miners,
    tsb_filter,
)

ZEC = BUILTIN_CHAINS["ZEC"]
DASH = BUILTIN_CHAINS["DASH"]
START = 1_500_000_000
MAY_10_2017 = 1_494_374_400
MAY_20_2017 = 1_495_238_400


def zec(amount) -> int:
    return to_units(str(amount), 8)


def funded_pool(start: int = START, reserve: str = "1000000") -> LedgerBuilder:
    zb = LedgerBuilder(ZEC, start_ts=start)
    zb.shield(start, [zb.fund(start, "t1reserve", zec(reserve))], exact=True)
    return zb


def deposit(zb: LedgerBuilder, ts: int, addr: str, value: int):
    """A t-to-z putting exactly ``value`` into the pool from ``addr``."""
    return zb.shield(ts, [zb.fund(ts, addr, value + zb.fee)], exact=True)


# ============================================================================
# Founders
# ============================================================================

def test_founder_withdrawals_all_and_only():
    zb = funded_pool()
    rng = random.Random(11)
    expected = set()
    ts = START
    for k in range(1953):
        ts += rng.randint(10, 200)
        if k % 500 == 0:
            # split across two recipients; the total still matches
            tx = zb.deshield(ts, [(f"t1f{k}a", zec("125")), (f"t1f{k}b", zec("125.0001"))])
        else:
            tx = zb.deshield(ts, [(f"t1f{k}", zec("250.0001"))])
        expected.add(tx.txid)
        for _ in range(2):
            value = zb.unique(rng.randint(zec("0.5"), zec("20")))
            zb.deshield(ts, [(f"t1n{len(zb)}", value)])
    for near in ("250", "250.0002", "249.9999"):
        zb.deshield(ts, [("t1near", zec(near))])
    # two founder-value withdrawals in one block are both flagged
    same_block = [zb.deshield(ts + 1, [(f"t1tie{i}", zec("250.0001"))]) for i in range(2)]
    expected |= {tx.txid for tx in same_block}
    ledger = zb.build()

    result = tag_founders(ledger)
    assert {link.dst_txs[0] for link in result.links} == expected
    assert all(link.kind is LinkKind.FOUNDER_VALUE for link in result.links)
    assert result.tags.get(Address("ZEC", "t1f1")).category is TagCategory.FOUNDER
    assert result.tags.get(Address("ZEC", "t1f500b")) is not None
    assert Address("ZEC", "t1near") not in result.tags


def test_founder_deposit_pattern():
    zb = LedgerBuilder(ZEC, start_ts=START)
    for block in (0, 7, 14, 30):
        tx = zb.coinbase(START + block * 150, [("t1founder", zec("250"))])
        zb.shield(START + block * 150, [(tx.txid, 0)], fee=zec("0.0001"), exact=True)
    deposit(zb, START + 40 * 150, "t1user", zec("3"))
    ledger = zb.build()

    result = tag_founders(ledger)
    stats = result.addresses["t1founder"]
    assert list(result.addresses) == ["t1founder"]
    assert stats.deposits == stats.at_deposit_value == 4
    assert stats.total_deposited == 4 * zec("249.9999")
    assert stats.within_cap
    assert stats.spacing_share == pytest.approx(2 / 3)

    capped = tag_founders(ledger, cap=zec("500"), known=[Address("ZEC", "t1founder")])
    assert not capped.addresses["t1founder"].within_cap


# ============================================================================
# Miners
# ============================================================================

def test_miner_payouts_need_fanout_and_a_pool():
    zb = funded_pool()
    pools = TagMap()
    pools.add(Address("ZEC", "t1pool"), "Flypool", TagCategory.POOL)
    miners = [(f"t1m{i}", zec("0.01") + i) for i in range(101)]
    payout = zb.deshield(START + 100, [("t1pool", zec("0.5"))] + miners)
    zb.deshield(START + 200, [("t1pool", zec("0.5"))] + miners[:99])
    zb.deshield(START + 300, miners)
    ledger = zb.build()

    tags, links = tag_miners(ledger, pools)
    assert [link.dst_txs for link in links] == [(payout.txid,)]
    assert len(tags) == 101
    assert Address("ZEC", "t1pool") not in tags
    assert tags.get(Address("ZEC", "t1m0")).category is TagCategory.MINER


def test_pool_events_and_coinbase_recipients():
    zb = funded_pool()
    dep = deposit(zb, START + 10, "t1a", zec("3"))
    deposit(zb, START + 20, "t1a", zec("4"))
    out = zb.deshield(START + 30, [("t1b", zec("2"))])
    ledger = zb.build()

    events = pool_events(ledger)
    assert [e.direction for e in events] == [Direction.DEPOSIT] * 3 + [Direction.WITHDRAWAL]
    assert events[1].txid == dep.txid
    assert events[1].actors == ("t1a",)
    assert (events[-1].txid, events[-1].value) == (out.txid, out.pool_withdrawal)
    assert all(e.attribution is Attribution.UNKNOWN for e in events)

    assert coinbase_recipients(ledger) == {"t1reserve": 1, "t1a": 2}


# ============================================================================
# Unique-value round trips
# ============================================================================

def brute_force_round_trips(ledger, max_interval):
    deposits = [tx for tx in ledger if tx.pool_deposit and not tx.vout and not tx.coinbase]
    withdrawals = [tx for tx in ledger if tx.pool_withdrawal and not tx.vin]
    links = set()
    for d in deposits:
        for w in withdrawals:
            v = d.pool_deposit
            if w.pool_withdrawal != v:
                continue
            if sum(t.pool_deposit == v for t in deposits) != 1:
                continue
            if sum(t.pool_withdrawal == v for t in withdrawals) != 1:
                continue
            if w.position > d.position and w.height - d.height <= max_interval:
                links.add((d.txid, w.txid))
    return links


@settings(max_examples=40, deadline=None)
@given(st.lists(
    st.tuples(st.booleans(), st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=40)),
    max_size=60,
))
def test_round_trip_unique_matches_brute_force(events):
    zb = funded_pool(reserve="5000")
    ts = START
    for n, (is_deposit, coins, wait) in enumerate(events):
        ts += wait * 50
        value = zec(coins)
        if is_deposit:
            deposit(zb, ts, f"t1d{n}", value)
        else:
            zb.deshield(ts, [(f"t1w{n}", value)])
    ledger = zb.build()

    for interval in (1, 10, 30, 60, 100):
        links = round_trip_unique(ledger, max_interval=interval)
        assert {(l.src_txs[0], l.dst_txs[0]) for l in links} == brute_force_round_trips(ledger, interval)
    sweep = round_trip_sweep(ledger, intervals=range(1, 101))
    assert [row["links"] for row in sweep] == [len(round_trip_unique(ledger, i)) for i in range(1, 101)]


def test_round_trip_link_shape():
    zb = funded_pool()
    dep = deposit(zb, START + 150, "t1alice", zec("7.12345"))
    wd = zb.deshield(START + 5 * 150, [("t1bob", zec("7.12345"))])
    ledger = zb.build()

    [link] = round_trip_unique(ledger, max_interval=10)
    assert link.src_txs == (dep.txid,) and link.dst_txs == (wd.txid,)
    assert link.src_addrs == (Address("ZEC", "t1alice"),)
    assert link.dst_addrs == (Address("ZEC", "t1bob"),)
    assert link.meta["gap"] == wd.height - dep.height
    assert round_trip_unique(ledger, max_interval=wd.height - dep.height - 1) == []


# ============================================================================
# Attribution
# ============================================================================

def test_attribution_priority_and_shares():
    zb = funded_pool()
    founder = zb.deshield(START + 100, [("t1f", zec("250.0001"))])
    other = zb.deshield(START + 200, [("t1o", zec("149.9999"))])
    unknown = zb.deshield(START + 300, [("t1u", zec("100"))])
    ledger = zb.build()

    links = [
        LinkEvidence(kind=LinkKind.ROUND_TRIP_UNIQUE, dst_txs=(founder.txid,)),
        LinkEvidence(kind=LinkKind.FOUNDER_VALUE, dst_txs=(founder.txid,)),
        LinkEvidence(kind=LinkKind.ROUND_TRIP_UNIQUE, dst_txs=(other.txid,)),
    ]
    attribution = attribute_withdrawals(ledger, links)
    assert attribution == {
        founder.txid: Attribution.FOUNDER,
        other.txid: Attribution.OTHER,
        unknown.txid: Attribution.UNKNOWN,
    }

    report = anonymity_reduction(ledger, links)
    assert report.withdrawals == 3
    assert report.total_withdrawn == zec("500")
    assert report.classes["FOUNDER"].share == pytest.approx(0.5000002)
    assert report.other_share == pytest.approx(0.2999998)
    assert report.linked_share == pytest.approx(0.8)
    assert report.classes["UNKNOWN"].count_share == pytest.approx(1 / 3)


LINKING_KINDS = [LinkKind.FOUNDER_VALUE, LinkKind.MINER_PAYOUT, LinkKind.ROUND_TRIP_UNIQUE]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(min_value=1, max_value=50), min_size=1, max_size=12),
    st.lists(st.tuples(st.integers(min_value=0, max_value=11), st.sampled_from(LINKING_KINDS)), max_size=20),
    st.integers(min_value=0, max_value=20),
)
def test_anonymity_shares_are_bounded_and_grow_with_links(coins, picks, cut):
    zb = funded_pool()
    withdrawals = [zb.deshield(START + 150 * (i + 1), [(f"t1w{i}", zec(c))]) for i, c in enumerate(coins)]
    ledger = zb.build()
    links = [LinkEvidence(kind=kind, dst_txs=(withdrawals[i % len(withdrawals)].txid,)) for i, kind in picks]

    fewer = anonymity_reduction(ledger, links[:cut])
    more = anonymity_reduction(ledger, links)
    for report in (fewer, more):
        assert 0.0 <= report.linked_share <= 1.0
        assert all(0.0 <= c.share <= 1.0 and 0.0 <= c.count_share <= 1.0 for c in report.classes.values())
        assert sum(c.count for c in report.classes.values()) == report.withdrawals == len(coins)
        assert sum(c.share for c in report.classes.values()) == pytest.approx(1.0)
    assert more.linked_share >= fewer.linked_share
    assert more.classes["UNKNOWN"].count <= fewer.classes["UNKNOWN"].count


# ============================================================================
# Ransom deposit filter
# ============================================================================

def _suspect_deposits(i):
    amount = (100, 200, 400, 500)[i % 4]
    if i % 2:
        return [zec(amount) + zec("0.3"), zec("0.4")]
    return [zec(amount) + zec("0.1") * (i - 5)]


def test_tsb_filter_flags_injected_clusters_only():
    zb = funded_pool(start=MAY_20_2017, reserve="10000")
    ts = MAY_20_2017
    suspects = set()
    for i in range(10):
        for value in _suspect_deposits(i):
            deposit(zb, ts, f"t1s{i}", value)
        suspects.add(f"t1s{i}")
        ts += 150

    tags = TagMap()
    for i in range(2):
        # (a) no single deposit near a requested amount
        deposit(zb, ts, f"t1a{i}", zec("50"))
        deposit(zb, ts, f"t1a{i}", zec("50"))
        # (b) received a z-to-t output
        zb.deshield(ts, [(f"t1b{i}", zec("1"))])
        deposit(zb, ts, f"t1b{i}", zec("200"))
        # (c) too much history
        for _ in range(250):
            zb.coinbase(ts, [(f"t1c{i}", 1)])
        deposit(zb, ts, f"t1c{i}", zec("400"))
        # (d) cluster total off by more than the cluster tolerance
        deposit(zb, ts, f"t1d{i}", zec("100"))
        deposit(zb, ts, f"t1d{i}", zec("3"))
        # tagged founder address
        tags.add(Address("ZEC", f"t1e{i}"), "founders", TagCategory.FOUNDER)
        deposit(zb, ts, f"t1e{i}", zec("500"))
        ts += 150
    ledger = zb.build()
    clusters = multi_input_cluster(ledger)

    result = tsb_filter(ledger, clusters, tags=tags)
    flagged = {a.value for link in result.links for a in link.src_addrs}
    assert flagged == suspects
    assert list(result.flagged) == ["2017-05 (after)"]
    assert result.table["2017-05 (after)"] == {"100": 3, "200": 3, "400": 2, "500": 2}
    assert result.unclustered == 0

    tighter = tsb_filter(ledger, clusters, tags=tags, tx_tol=zec("0.2"), cluster_tol=zec("0.5"))
    tighter_flagged = {a.value for link in tighter.links for a in link.src_addrs}
    assert tighter_flagged <= flagged
    assert tighter_flagged < flagged

    previous = None
    for max_history in (1_000, 250, 10, 1):
        result = tsb_filter(ledger, clusters, tags=tags, max_history=max_history)
        current = {a.value for link in result.links for a in link.src_addrs}
        if previous is not None:
            assert current <= previous
        previous = current
    # every address has at least its funding and deposit transactions
    assert previous == set()


def test_tsb_table_splits_the_month():
    zb = funded_pool(start=MAY_10_2017, reserve="10000")
    deposit(zb, MAY_10_2017, "t1early", zec("100.5"))
    for i, amount in enumerate(("99.8", "100", "101", "200.2")):
        deposit(zb, MAY_20_2017 + i * 150, f"t1late{i}", zec(amount))
    ledger = zb.build()

    result = tsb_filter(ledger, multi_input_cluster(ledger))
    assert result.table == {
        "2017-05 (after)": {"100": 3, "200": 1, "400": 0, "500": 0},
        "2017-05 (before)": {"100": 1, "200": 0, "400": 0, "500": 0},
    }
    assert period_of(MAY_20_2017, {}) == "2017-05"


# ============================================================================
# CoinJoin
# ============================================================================

DENOMS = sorted(DASH_DENOMINATIONS)


def dash_tx(n: int, n_inputs: int, outputs) -> LedgerTx:
    return LedgerTx(
        txid=f"cj{n}", chain="DASH", height=n, timestamp=START + n,
        vin=tuple(TxIn(f"f{n}", i, f"X{n}in{i}", 10 ** 10) for i in range(n_inputs)),
        vout=tuple(TxOut(f"X{n}out{k}", v) for k, v in enumerate(outputs)),
    )


def coinjoin_suite():
    valid, near = [], []
    for i in range(25):
        d = DENOMS[i % 4]
        outs = [d] * (1 + i % 7)
        if i % 2 == 0:
            outs.append(12_345 + i)
        valid.append(dash_tx(i, 3 + i % 5, outs))
    for i in range(25):
        d, other = DENOMS[i % 4], DENOMS[(i + 1) % 4]
        n = 100 + i
        shape = i % 5
        if shape == 0:
            tx = dash_tx(n, 2, [d] * 4)
        elif shape == 1:
            tx = dash_tx(n, 3, [d, 777, 778])
        elif shape == 2:
            tx = dash_tx(n, 4, [d, d, other, other])
        elif shape == 3:
            tx = dash_tx(n, 5, [d, d, d, 1_001, 1_002])
        else:
            tx = dash_tx(n, 3, [d + 1] * 5)
        near.append(tx)
    return valid, near


def test_coinjoin_suite_is_classified_exactly():
    valid, near = coinjoin_suite()
    assert len(valid) == len(near) == 25
    assert all(detect_coinjoin(tx) for tx in valid)
    assert not any(detect_coinjoin(tx) for tx in near)


def test_single_denominated_output_with_change_is_a_coinjoin():
    db = LedgerBuilder(DASH, start_ts=START)
    inputs = [db.fund(START, f"Xp{i}", to_units("0.4", 8)) for i in range(3)]
    tx = db.spend(START, inputs, [("Xo", to_units("1", 8))], change="Xc")
    assert len(tx.vout) == 2
    assert detect_coinjoin(tx)
    assert detect_coinjoin(dash_tx(900, 3, [DENOMS[0]]))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_coinjoin_verdict_ignores_input_and_output_order(data):
    valid, near = coinjoin_suite()
    tx = data.draw(st.sampled_from(valid + near))
    vin = data.draw(st.permutations(tx.vin))
    vout = data.draw(st.permutations(tx.vout))
    shuffled = LedgerTx(txid=tx.txid, chain=tx.chain, height=tx.height, timestamp=tx.timestamp,
                        vin=tuple(vin), vout=tuple(vout))
    assert detect_coinjoin(shuffled) == detect_coinjoin(tx)


def test_scan_coinjoins_on_a_ledger():
    db = LedgerBuilder(DASH, start_ts=START)
    inputs = [db.fund(START, f"Xp{i}", to_units("0.4", 8)) for i in range(3)]
    payouts = [(f"Xo{k}", to_units("0.1", 8)) for k in range(10)]
    tx = db.spend(START, inputs, payouts, change="Xchange")
    db.spend(START, [db.fund(START, "Xq", to_units("2", 8))], [("Xr", to_units("1", 8))], change="Xq")
    ledger = db.build()

    [link] = scan_coinjoins(ledger)
    assert link.kind is LinkKind.COINJOIN
    assert link.src_txs == (tx.txid,)
    assert link.value == to_units("1", 8)
    assert link.meta["denomination"] == "0.1"
    assert len(link.src_addrs) == 3

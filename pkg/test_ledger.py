"""
Tests for the ledger model: amounts, JSONL ingestion, indices and Zcash views.
"""

import json
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.errors import (
    DoubleSpendError,
    DuplicateTxidError,
    InputError,
    MalformedRecordError,
    NegativePoolError,
    OutOfOrderError,
    UnknownChainError,
)
from app.core.ledger import (
    BUILTIN_CHAINS,
    UNASSIGNED,
    Accounting,
    Address,
    ChainId,
    ChainRegistry,
    JoinSplit,
    Ledger,
    LedgerTx,
    TxIn,
    TxOut,
    ZTxClass,
    classify_zcash_tx,
    format_units,
    joinsplit_activity,
    load_ledgers,
    parse_ledger,
    pool_balance_series,
    serialize_ledger,
    to_units,
    type_counts,
)
from app.core.synth import DEFAULT_START, AccountLedgerBuilder, LedgerBuilder

ZEC = BUILTIN_CHAINS["ZEC"]
BTC = BUILTIN_CHAINS["BTC"]
ETH = BUILTIN_CHAINS["ETH"]


def zec(amount: str) -> int:
    return to_units(amount, 8)


def at(block: int) -> int:
    """Timestamp of a ZEC block in the builders' clock."""
    return DEFAULT_START + block * 150


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def coinbase_record(txid, height, addr, value="1"):
    return {"txid": txid, "height": height, "ts": DEFAULT_START + height * 600, "coinbase": True,
            "vout": [{"addr": addr, "value": value}]}


def spend_record(txid, height, src, addr, value="1", pay="0.9"):
    return {"txid": txid, "height": height, "ts": DEFAULT_START + height * 600,
            "vin": [{"src_txid": src, "src_idx": 0, "addr": "a1", "value": value}],
            "vout": [{"addr": addr, "value": pay}]}


# ============================================================================
# Amounts
# ============================================================================

def test_amounts_are_exact():
    assert to_units("249.9999", 8) == 24_999_990_000
    assert to_units("250.0001", 8) == 25_000_010_000
    assert to_units(Decimal("0.025"), 18) == 25 * 10 ** 15
    assert to_units(3, 8) == 300_000_000
    assert format_units(24_999_990_000, 8) == "249.9999"
    assert format_units(300_000_000, 8) == "3"
    assert format_units(-5, 8) == "-0.00000005"


@pytest.mark.parametrize("bad", ["-1", "abc", "NaN", "Infinity", "0.000000001", 0.1, True])
def test_bad_amounts_are_rejected(bad):
    with pytest.raises(InputError):
        to_units(bad, 8)


@given(st.integers(min_value=0, max_value=10 ** 20), st.integers(min_value=0, max_value=18))
def test_formatted_units_parse_back(units, decimals):
    assert to_units(format_units(units, decimals), decimals) == units


# ============================================================================
# Chains
# ============================================================================

def test_chain_manifests(tmp_path):
    (tmp_path / "XMR.json").write_text(json.dumps({"symbol": "XMR", "accounting": "UTXO", "decimals": 12}))
    (tmp_path / "config.json").write_text("{}")
    registry = ChainRegistry.from_directory(tmp_path)

    assert registry.get("XMR") == ChainId("XMR", Accounting.UTXO, 12)
    assert "BTC" in registry
    with pytest.raises(UnknownChainError):
        registry.get("NOPE")
    with pytest.raises(InputError):
        registry.register(ChainId("XMR", Accounting.UTXO, 8))
    with pytest.raises(InputError):
        ChainId("ETHX", Accounting.ACCOUNT, 18, joinsplits=True)


def test_address_form():
    a = Address.parse("ZEC:zcabc")
    assert a.shielded
    assert a == Address("ZEC", "zcabc")
    assert str(a) == "ZEC:zcabc"
    with pytest.raises(InputError):
        Address.parse("no-chain")


# ============================================================================
# Ingestion
# ============================================================================

def test_parse_ledger_indexes(tmp_path):
    path = write_jsonl(tmp_path / "BTC.jsonl", [
        coinbase_record("c1", 1, "a1"),
        spend_record("s1", 1, "c1", "b1"),
        coinbase_record("c2", 3, "a2", "2"),
    ])
    ledger = parse_ledger(path, BTC)

    assert len(ledger) == 3
    assert ledger.heights == [1, 3]
    assert [tx.index for tx in ledger.at_height(1)] == [0, 1]
    assert ledger["s1"].fee == zec("0.1")
    assert ledger.spender("c1", 0).txid == "s1"
    assert ledger.spender("c2", 0) is None
    assert [tx.txid for tx in ledger.for_address("a1")] == ["c1", "s1"]
    assert [tx.txid for tx in ledger.between(2, 3)] == ["c2"]


@pytest.mark.parametrize("records, error, line", [
    ([coinbase_record("c1", 1, "a"), coinbase_record("c1", 2, "b")], DuplicateTxidError, 2),
    ([coinbase_record("c1", 1, "a"), spend_record("s1", 2, "c1", "b"), spend_record("s2", 2, "c1", "c")],
     DoubleSpendError, 3),
    ([coinbase_record("c1", 5, "a"), coinbase_record("c2", 4, "b")], OutOfOrderError, 2),
    ([coinbase_record("c1", 1, "a"), spend_record("s1", 1, "c1", "b", value="1", pay="2")],
     MalformedRecordError, 2),
    ([coinbase_record("c1", 1, "a"), {"txid": "x", "height": 1}], MalformedRecordError, 2),
])
def test_malformed_ledgers(tmp_path, records, error, line):
    path = write_jsonl(tmp_path / "BTC.jsonl", records)
    with pytest.raises(error) as info:
        parse_ledger(path, BTC)
    assert info.value.line == line


def test_unparseable_line(tmp_path):
    path = tmp_path / "BTC.jsonl"
    path.write_text(json.dumps(coinbase_record("c1", 1, "a")) + "\n\n{not json\n")
    with pytest.raises(MalformedRecordError) as info:
        parse_ledger(path, BTC)
    assert info.value.line == 3


def test_account_records_carry_only_transfers(tmp_path):
    path = write_jsonl(tmp_path / "ETH.jsonl", [
        {"txid": "0x1", "height": 1, "ts": 1, "xfer": {"from": "0xa", "to": "0xb", "value": "1.5", "fee": "0.00021"}},
        {"txid": "0x2", "height": 2, "ts": 2, "vout": [{"addr": "0xb", "value": "1"}]},
    ])
    with pytest.raises(MalformedRecordError) as info:
        parse_ledger(path, ETH)
    assert info.value.line == 2


def test_serialize_then_parse_is_identity(tmp_path):
    zb = LedgerBuilder(ZEC)
    op = zb.fund(at(0), "t1alice", zec("12.5"))
    zb.spend(at(1), [op], [("t1bob", zec("2"))], change="t1alice")
    zb.shield(at(2), zb.unspent_of("t1bob"), exact=True)
    zb.deshield(at(4), [("t1carol", zec("1.5")), ("t1dave", zec("0.25"))])
    zb.private(at(5), joinsplits=2)
    ledger = zb.build()

    serialize_ledger(ledger, tmp_path / "ZEC.jsonl")
    assert parse_ledger(tmp_path / "ZEC.jsonl", ZEC) == ledger

    eth = AccountLedgerBuilder(ETH)
    eth.transfer(DEFAULT_START, "0xa", "0xb", to_units("1.25", 18))
    serialize_ledger(eth.build(), tmp_path / "ETH.jsonl")
    (tmp_path / "notes.jsonl").write_text("ignored\n")
    ledgers = load_ledgers(tmp_path, ChainRegistry())
    assert sorted(ledgers) == ["ETH", "ZEC"]
    assert ledgers["ETH"] == eth.build()


def test_closest_height_prefers_lower_on_ties():
    btc = LedgerBuilder(BTC)
    for block in (0, 2, 4):
        btc.fund(DEFAULT_START + block * 600, f"a{block}", 1)
    ledger = btc.build()

    assert ledger.closest_height(DEFAULT_START + 600) == 0
    assert ledger.closest_height(DEFAULT_START + 3 * 600 + 1) == 4
    assert ledger.closest_height(0) == 0
    assert ledger.closest_height(DEFAULT_START + 10 ** 6) == 4
    assert Ledger(BTC).closest_height(0) is None


# ============================================================================
# Zcash views
# ============================================================================

def test_zcash_classification():
    zb = LedgerBuilder(ZEC)
    op = zb.fund(at(0), "t1a", zec("10"))
    spent = zb.spend(at(0), [op], [("t1b", zec("4"))], change="t1a")
    shielded = zb.shield(at(1), zb.unspent_of("t1b"))
    deshielded = zb.deshield(at(2), [("t1c", zec("1"))])
    private = zb.private(at(3))
    ledger = zb.build()

    assert classify_zcash_tx(ledger.txs[0]) is ZTxClass.COINGEN
    assert classify_zcash_tx(spent) is ZTxClass.TRANSPARENT
    assert classify_zcash_tx(shielded) is ZTxClass.SHIELDED
    assert classify_zcash_tx(deshielded) is ZTxClass.DESHIELDED
    assert classify_zcash_tx(private) is ZTxClass.PRIVATE
    assert deshielded.fee == zb.fee
    assert deshielded.zout_addresses == ("t1c",)

    mixed = LedgerTx(
        txid="m", chain="ZEC", height=9, timestamp=at(9),
        vin=(TxIn("x", 0, "t1a", zec("2")),), vout=(TxOut("t1d", zec("1")),),
        joinsplits=(JoinSplit(zin=(TxOut("t1a", zec("0.5")),)),),
    )
    assert classify_zcash_tx(mixed) is ZTxClass.MIXED
    counts = type_counts(ledger)
    assert sum(counts.values()) == len(ledger)
    assert counts[ZTxClass.MIXED] == 0


def test_pool_balance_and_activity():
    zb = LedgerBuilder(ZEC)
    zb.shield(at(0), [zb.fund(at(0), "t1a", zec("10"))], exact=True)
    zb.deshield(at(2), [("t1b", zec("3"))])
    zb.private(at(3), joinsplits=2)
    ledger = zb.build()

    series = pool_balance_series(ledger)
    assert [h for h, _ in series] == ledger.heights
    assert series[0][1] == zec("9.9999")
    assert series[-1][1] == zec("6.9997") == zb.pool

    activity = joinsplit_activity(ledger)
    assert activity["private_transactions"] == 1
    assert activity["single_joinsplit_share"] == 0.0


def test_pool_cannot_go_negative():
    fee = zec("0.0001")
    withdrawal = LedgerTx(
        txid="w", chain="ZEC", height=1, timestamp=at(1), vout=(TxOut("t1a", zec("1")),),
        joinsplits=(JoinSplit(zout=(TxOut("t1a", zec("1")), TxOut(UNASSIGNED, fee))),),
    )
    ledger = Ledger(ZEC, [withdrawal])
    assert withdrawal.fee == fee
    with pytest.raises(NegativePoolError):
        pool_balance_series(ledger)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(min_value=1, max_value=50)), max_size=40))
def test_pool_balance_matches_block_resum(ops):
    zb = LedgerBuilder(ZEC)
    for block, (deposit, coins) in enumerate(ops):
        value = zec(str(coins))
        if deposit:
            zb.shield(at(block), [zb.fund(at(block), f"t1u{block}", value)])
        elif zb.pool > value + zb.fee:
            zb.deshield(at(block), [(f"t1w{block}", value)])
    ledger = zb.build()

    series = pool_balance_series(ledger)
    for height, balance in series:
        resum = sum(tx.pool_deposit - tx.pool_release for tx in ledger if tx.height <= height)
        assert balance == resum >= 0
    assert (series[-1][1] if series else 0) == zb.pool

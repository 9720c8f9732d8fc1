"""
Patterns across resolved shifts: pass-throughs, U-turns, round trips,
trading bots, and how shifts interact with the Zcash pool and Dash CoinJoins.
"""

from __future__ import annotations

import logging
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from fractions import Fraction
from typing import Any, Collection, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx

from app.core.clustering import tx_input_addresses
from app.core.errors import NotApplicableError
from app.core.evidence import LinkEvidence, LinkKind
from app.core.ledger import BUILTIN_CHAINS, Address, Ledger, ZTxClass, classify_zcash_tx
from app.core.shifts import Resolution, ShiftRecord
from app.core.zcash import DASH_DENOMINATIONS, detect_coinjoin

logger = logging.getLogger(__name__)

UTURN_WINDOW = 1800
UTURN_TOL = Decimal("0.01")
XRT_TOL = Decimal("0.005")


class UturnTier(str, Enum):
    BASIC = "BASIC"
    ADDR = "ADDR"
    UTXO = "UTXO"


TIER_KIND = {
    UturnTier.BASIC: LinkKind.UTURN_BASIC,
    UturnTier.ADDR: LinkKind.UTURN_ADDR,
    UturnTier.UTXO: LinkKind.UTURN_UTXO,
}


def _deposit_inputs(r: Resolution) -> Tuple[Address, ...]:
    return tuple(Address(r.shift.cur_in, a) for a in tx_input_addresses(r.deposit))


def detect_pass_through(resolutions: Iterable[Resolution]) -> List[LinkEvidence]:
    """One link per resolved shift: deposit inputs on cur_in to the payout address on cur_out."""
    links = []
    for r in resolutions:
        links.append(LinkEvidence(
            kind=LinkKind.PASS_THROUGH, params={},
            src_txs=(r.deposit.txid,), src_addrs=_deposit_inputs(r),
            dst_txs=(r.payout_txid,), dst_addrs=(r.withdraw,),
            value=r.shift.amt, chain=r.shift.cur_in,
            meta={"shift_id": r.shift.id, "cur_out": r.shift.cur_out, "out_coin": r.status.out_coin},
        ))
    return links


def _within(value: int, target: int, tol: Fraction) -> bool:
    return abs(value - target) <= tol * target


def _clock(r: Resolution, clock: str) -> int:
    return r.shift.t if clock == "advertised" else r.deposit.timestamp


def _returns(
    resolutions: Sequence[Resolution],
    window: int,
    tol: Fraction,
    clock: str,
) -> Iterable[Tuple[Resolution, Resolution]]:
    """(first, second) pairs where second shifts first's output back within window and tol."""
    by_pair: Dict[Tuple[str, str], List[Tuple[int, Resolution]]] = defaultdict(list)
    for r in resolutions:
        by_pair[r.shift.pair].append((_clock(r, clock), r))
    for entries in by_pair.values():
        entries.sort(key=lambda e: (e[0], e[1].shift.id))
    for (x, y), firsts in sorted(by_pair.items()):
        backs = by_pair.get((y, x))
        if not backs:
            continue
        times = [t for t, _ in backs]
        for t1, s1 in firsts:
            lo = bisect_right(times, t1)
            hi = bisect_right(times, t1 + window)
            for _, s2 in backs[lo:hi]:
                if _within(s2.shift.amt, s1.status.out_coin, tol):
                    yield s1, s2


def _output_index(ledger: Ledger, txid: str, addr: str) -> Optional[int]:
    tx = ledger.get(txid)
    if tx is None:
        return None
    for i, o in enumerate(tx.vout):
        if o.addr == addr:
            return i
    return None


def detect_uturn(
    resolutions: Sequence[Resolution],
    ledgers: Mapping[str, Ledger],
    window: int = UTURN_WINDOW,
    tol: Union[str, Decimal] = UTURN_TOL,
    tiers: Optional[Collection[UturnTier]] = None,
    clock: str = "advertised",
) -> List[LinkEvidence]:
    """
    Shifts into a currency followed by a shift straight back out of it.

    BASIC: a Y->X shift starts within ``window`` seconds after an X->Y shift
    and deposits within ``tol`` of the first shift's payout. ADDR: the second
    deposit is funded by the first payout address. UTXO: it spends the exact
    payout output (UTXO chains only). Links run from the first payout
    transaction to the second deposit.

    Raises:
        NotApplicableError: if the UTXO tier is requested explicitly and a
            U-turn lands on an account chain
    """
    requested = set(tiers) if tiers is not None else set(UturnTier)
    explicit_utxo = tiers is not None and UturnTier.UTXO in requested
    ftol = Fraction(Decimal(tol))
    params = {"window": window, "tol": str(tol), "clock": clock}
    links: List[LinkEvidence] = []
    for s1, s2 in _returns(resolutions, window, ftol, clock):
        y = s1.shift.cur_out
        ledger = ledgers.get(y)
        chain = ledger.chain if ledger is not None else BUILTIN_CHAINS.get(y)
        utxo_chain = chain is not None and chain.is_utxo
        if explicit_utxo and not utxo_chain:
            raise NotApplicableError(f"UTXO-tier U-turns are undefined on account chain {y}")
        inputs = _deposit_inputs(s2)
        achieved = [UturnTier.BASIC]
        if s1.withdraw in inputs:
            achieved.append(UturnTier.ADDR)
            if utxo_chain and ledger is not None:
                index = _output_index(ledger, s1.payout_txid, s1.withdraw.value)
                if index is not None and (s1.payout_txid, index) in {i.outpoint for i in s2.deposit.vin}:
                    achieved.append(UturnTier.UTXO)
        for tier in achieved:
            if tier not in requested:
                continue
            links.append(LinkEvidence(
                kind=TIER_KIND[tier], params=params,
                src_txs=(s1.payout_txid,), src_addrs=(s1.withdraw,),
                dst_txs=(s2.deposit.txid,), dst_addrs=inputs,
                value=s2.shift.amt, chain=y,
                meta={"first": s1.shift.id, "second": s2.shift.id, "tier": tier.value},
            ))
    logger.info(f"Found {len(links)} U-turn links")
    return links


def detect_round_trip(
    resolutions: Sequence[Resolution],
    window: int = UTURN_WINDOW,
    tol: Union[str, Decimal] = XRT_TOL,
    clock: str = "advertised",
) -> List[LinkEvidence]:
    """
    X->Y->X round trips: links the first deposit's inputs to the final payout
    address. ``same_address`` marks trips that end where they started.
    """
    params = {"window": window, "tol": str(tol), "clock": clock}
    links = []
    for s1, s2 in _returns(resolutions, window, Fraction(Decimal(tol)), clock):
        inputs = _deposit_inputs(s1)
        links.append(LinkEvidence(
            kind=LinkKind.XRT, params=params,
            src_txs=(s1.deposit.txid,), src_addrs=inputs,
            dst_txs=(s2.payout_txid,), dst_addrs=(s2.withdraw,),
            value=s2.status.out_coin, chain=s1.shift.cur_in,
            meta={
                "same_address": s2.withdraw in inputs,
                "first": s1.shift.id,
                "second": s2.shift.id,
                "via": [s1.payout_txid, s2.deposit.txid],
            },
        ))
    logger.info(f"Found {len(links)} round trips")
    return links


# ============================================================================
# Trading bots
# ============================================================================

@dataclass(frozen=True)
class BotCluster:
    key: str
    shifts: Tuple[ShiftRecord, ...]

    @property
    def start(self) -> int:
        return self.shifts[0].t

    @property
    def end(self) -> int:
        return self.shifts[-1].t

    @property
    def pairs(self) -> Counter:
        return Counter(f"{s.cur_in}-{s.cur_out}" for s in self.shifts)


def _qualifying_sets(
    items: Sequence[Tuple[ShiftRecord, Fraction]],
    min_set: int,
    span: int,
    tol: Fraction,
) -> List[Set[str]]:
    """
    Every set of at least ``min_set`` shifts inside one box: a start time and
    ``span`` seconds after it, and a value ceiling v with the floor v * (1 - tol).
    Only starts and ceilings taken from the shifts themselves need checking.
    """
    items = sorted(items, key=lambda it: (it[0].t, it[0].id))
    times = [s.t for s, _ in items]
    sets: List[Set[str]] = []
    for i, (start, _) in enumerate(items):
        stop = bisect_right(times, start.t + span)
        if stop - i < min_set:
            continue
        window = items[i:stop]
        values = sorted(v for _, v in window)
        for ceiling in sorted(set(values)):
            floor = ceiling * (1 - tol)
            if bisect_right(values, ceiling) - bisect_left(values, floor) < min_set:
                continue
            sets.append({s.id for s, v in window if floor <= v <= ceiling})
    return sets


def _merge_sets(sets: Iterable[Set[str]]) -> List[Set[str]]:
    """Union of overlapping shift-id sets: connected components of an id graph."""
    graph = nx.Graph()
    for members in sets:
        ids = sorted(members)
        nx.add_star(graph, ids)
    return [set(c) for c in nx.connected_components(graph)]


def _odd_pair_filter(shifts: List[ShiftRecord], share: Fraction) -> List[ShiftRecord]:
    counts = Counter(s.pair for s in shifts)
    return [s for s in shifts if Fraction(counts[s.pair], len(shifts)) >= share]


def detect_trading_bots(
    shifts: Sequence[ShiftRecord],
    min_set: int = 15,
    span: int = 300,
    tol: Union[str, Decimal] = Decimal("0.01"),
    mode: str = "pair",
    rates: Optional[Mapping[str, Union[str, Decimal]]] = None,
    decimals: Optional[Mapping[str, int]] = None,
    odd_pair_share: Union[str, Decimal] = Decimal("0.2"),
) -> List[BotCluster]:
    """
    Bursts of near-identical shifts.

    ``pair`` mode groups shifts by currency pair and compares amounts in
    cur_in units. ``leg`` mode groups shifts sharing an input or output
    currency and compares amounts converted with ``rates`` (value of one
    coin in a common reference); pairs making up less than
    ``odd_pair_share`` of a cluster are then dropped as outliers.

    A qualifying set has at least ``min_set`` shifts within ``span`` seconds
    whose amounts satisfy max - min <= tol * max. Overlapping qualifying
    sets are merged into one cluster.
    """
    ftol = Fraction(Decimal(tol))
    by_id = {s.id: s for s in shifts}
    groups: Dict[str, List[Tuple[ShiftRecord, Fraction]]] = defaultdict(list)
    if mode == "pair":
        for s in shifts:
            groups[f"{s.cur_in}-{s.cur_out}"].append((s, Fraction(s.amt)))
    elif mode == "leg":
        if not rates:
            raise NotApplicableError("leg mode needs reference rates")
        scale = {c.symbol: c.decimals for c in BUILTIN_CHAINS.values()}
        scale.update(decimals or {})
        for s in shifts:
            if s.cur_in not in rates:
                continue
            value = Fraction(s.amt, 10 ** scale[s.cur_in]) * Fraction(Decimal(rates[s.cur_in]))
            for leg in {s.cur_in, s.cur_out}:
                groups[leg].append((s, value))
    else:
        raise NotApplicableError(f"unknown bot grouping mode '{mode}'")

    found: List[Set[str]] = []
    for key in sorted(groups):
        found.extend(_qualifying_sets(groups[key], min_set, span, ftol))

    clusters: List[BotCluster] = []
    for members in _merge_sets(found):
        ordered = sorted((by_id[i] for i in members), key=lambda s: (s.t, s.id))
        if mode == "leg":
            ordered = _odd_pair_filter(ordered, Fraction(Decimal(odd_pair_share)))
            if len(ordered) < min_set:
                continue
        pairs = sorted({f"{s.cur_in}-{s.cur_out}" for s in ordered})
        clusters.append(BotCluster("+".join(pairs), tuple(ordered)))
    clusters.sort(key=lambda c: (c.start, c.key))
    logger.info(f"Found {len(clusters)} trading-bot clusters")
    return clusters


# ============================================================================
# Pool and CoinJoin interactions
# ============================================================================

def pool_shift_interactions(resolutions: Iterable[Resolution], ledger: Ledger) -> Dict[str, Any]:
    """
    How shifts meet the shielded pool.

    Type 1: payout sent straight to a z-address. Type 2: payout to a
    t-address whose output is next spent by a t-to-z. Type 3: deposit
    funded directly by a z-to-t output. Types 1 and 2 are shares of the
    ZEC paid out by the service; type 3 is a share of the ZEC deposited.
    """
    chain = ledger.chain.symbol
    counts = Counter()
    values: Counter = Counter()
    received = deposited = 0
    for r in resolutions:
        if r.shift.cur_out == chain:
            received += r.status.out_coin
            if r.withdraw.shielded:
                counts["type1"] += 1
                values["type1"] += r.status.out_coin
            else:
                index = _output_index(ledger, r.payout_txid, r.withdraw.value)
                spender = ledger.spender(r.payout_txid, index) if index is not None else None
                if spender is not None and classify_zcash_tx(spender) is ZTxClass.SHIELDED:
                    counts["type2"] += 1
                    values["type2"] += r.status.out_coin
        if r.shift.cur_in == chain:
            deposited += r.shift.amt
            sources = (ledger.get(i.src_txid) for i in r.deposit.vin)
            if any(src is not None and classify_zcash_tx(src) is ZTxClass.DESHIELDED for src in sources):
                counts["type3"] += 1
                values["type3"] += r.shift.amt
    report: Dict[str, Any] = {"received": received, "deposited": deposited}
    for kind, base in (("type1", received), ("type2", received), ("type3", deposited)):
        report[kind] = {
            "count": counts[kind],
            "value": values[kind],
            "share": float(Fraction(values[kind], base)) if base else 0.0,
        }
    return report


def coinjoin_shift_usage(
    resolutions: Iterable[Resolution],
    ledger: Ledger,
    denominations: Collection[int] = DASH_DENOMINATIONS,
) -> Dict[str, Any]:
    """
    Shifts touching CoinJoins: deposits funded by a CoinJoin output, and
    payouts whose output is later spent in a CoinJoin.
    """
    chain = ledger.chain.symbol
    mixed_in = mixed_out = 0
    value_in = value_out = 0
    received = deposited = 0
    for r in resolutions:
        if r.shift.cur_in == chain:
            deposited += r.shift.amt
            sources = (ledger.get(i.src_txid) for i in r.deposit.vin)
            if any(src is not None and detect_coinjoin(src, denominations) for src in sources):
                mixed_in += 1
                value_in += r.shift.amt
        if r.shift.cur_out == chain:
            received += r.status.out_coin
            index = _output_index(ledger, r.payout_txid, r.withdraw.value)
            spender = ledger.spender(r.payout_txid, index) if index is not None else None
            if spender is not None and detect_coinjoin(spender, denominations):
                mixed_out += 1
                value_out += r.status.out_coin
    return {
        "deposits_from_coinjoin": {
            "count": mixed_in, "value": value_in,
            "share": float(Fraction(value_in, deposited)) if deposited else 0.0,
        },
        "payouts_into_coinjoin": {
            "count": mixed_out, "value": value_out,
            "share": float(Fraction(value_out, received)) if received else 0.0,
        },
    }

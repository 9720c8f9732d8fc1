"""
Shielded pool heuristics.

Links withdrawals to founders (exact value), mining pools (large fan-out
payouts) and other users (unique round-trip values), accounts for how much
of the withdrawn value those links explain, filters clusters matching a
ransom deposit pattern, and detects Dash-style CoinJoins.
"""

from __future__ import annotations

import logging
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from fractions import Fraction
from typing import Collection, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from app.core.clustering import ClusterSet, TagCategory, TagMap, tx_input_addresses
from app.core.evidence import LinkEvidence, LinkKind
from app.core.ledger import (
    Address,
    Ledger,
    LedgerTx,
    ZTxClass,
    classify_zcash_tx,
    format_units,
    month_of,
    to_units,
)
from app.models.schemas import AnonymityReport, ClassShare

logger = logging.getLogger(__name__)

ZEC_DECIMALS = 8
FOUNDER_WITHDRAWAL = to_units("250.0001", ZEC_DECIMALS)
FOUNDER_DEPOSIT = to_units("249.9999", ZEC_DECIMALS)
FOUNDER_CAP = to_units("44272.5", ZEC_DECIMALS)
FOUNDER_SPACING = (6, 10)

TSB_AMOUNTS = tuple(to_units(a, ZEC_DECIMALS) for a in ("100", "200", "400", "500"))
TSB_TX_TOL = to_units("5", ZEC_DECIMALS)
TSB_CLUSTER_TOL = to_units("1", ZEC_DECIMALS)
TSB_SPLIT_DATES = ("2017-05-16",)

DASH_DECIMALS = 8
DASH_DENOMINATIONS = frozenset(to_units(d, DASH_DECIMALS) for d in ("0.01", "0.1", "1", "10"))


class Direction(str, Enum):
    DEPOSIT = "DEPOSIT"
    WITHDRAWAL = "WITHDRAWAL"


class Attribution(str, Enum):
    FOUNDER = "FOUNDER"
    MINER = "MINER"
    OTHER = "OTHER"
    UNKNOWN = "UNKNOWN"


# Highest first; a withdrawal takes the first class that links it.
ATTRIBUTION_PRIORITY: Tuple[Tuple[LinkKind, Attribution], ...] = (
    (LinkKind.FOUNDER_VALUE, Attribution.FOUNDER),
    (LinkKind.MINER_PAYOUT, Attribution.MINER),
    (LinkKind.ROUND_TRIP_UNIQUE, Attribution.OTHER),
)


@dataclass(frozen=True)
class PoolEvent:
    txid: str
    height: int
    timestamp: int
    direction: Direction
    value: int
    actors: Tuple[str, ...]
    attribution: Attribution = Attribution.UNKNOWN


def pool_events(ledger: Ledger) -> List[PoolEvent]:
    """Every t-to-z deposit and z-to-t withdrawal, unattributed."""
    events: List[PoolEvent] = []
    for tx in ledger:
        cls = classify_zcash_tx(tx)
        if cls is ZTxClass.SHIELDED:
            events.append(PoolEvent(tx.txid, tx.height, tx.timestamp, Direction.DEPOSIT,
                                    tx.pool_deposit, tx_input_addresses(tx)))
        elif cls is ZTxClass.DESHIELDED:
            events.append(PoolEvent(tx.txid, tx.height, tx.timestamp, Direction.WITHDRAWAL,
                                    tx.pool_withdrawal, tx.zout_addresses))
    return events


def coinbase_recipients(ledger: Ledger) -> Counter:
    """Addresses paid by coin generation, with the number of coinbase payouts each received."""
    recipients: Counter = Counter()
    for tx in ledger:
        if tx.coinbase:
            recipients.update(tx.output_addresses)
    return recipients


def _withdrawals(ledger: Ledger) -> Iterable[LedgerTx]:
    return (tx for tx in ledger if classify_zcash_tx(tx) is ZTxClass.DESHIELDED)


def _addrs(chain: str, values: Iterable[str]) -> Tuple[Address, ...]:
    return tuple(Address(chain, v) for v in values)


# ============================================================================
# Founders
# ============================================================================

@dataclass
class FounderAddressStats:
    address: str
    deposits: int = 0
    at_deposit_value: int = 0
    total_deposited: int = 0
    within_cap: bool = True
    spacing_share: float = 0.0


@dataclass
class FounderResult:
    tags: TagMap
    links: List[LinkEvidence]
    addresses: Dict[str, FounderAddressStats] = field(default_factory=dict)
    spacing_share: float = 0.0


def tag_founders(
    ledger: Ledger,
    known: Collection[Address] = (),
    withdrawal_value: int = FOUNDER_WITHDRAWAL,
    deposit_value: int = FOUNDER_DEPOSIT,
    cap: int = FOUNDER_CAP,
    label: str = "founders",
) -> FounderResult:
    """
    Attribute every z-to-t withdrawing exactly ``withdrawal_value`` to the founders.

    Also reports the deposit-side pattern of the founder addresses: how many
    deposits each made at exactly ``deposit_value``, whether its cumulative
    deposits respect ``cap``, and how often consecutive deposits were spaced
    6 to 10 blocks apart. When ``known`` is empty, every address that deposited
    exactly ``deposit_value`` is reported.
    """
    chain = ledger.chain.symbol
    d = ledger.chain.decimals
    params = {"withdrawal_value": format_units(withdrawal_value, d)}
    tags = TagMap()
    links: List[LinkEvidence] = []
    for tx in _withdrawals(ledger):
        if tx.pool_withdrawal != withdrawal_value:
            continue
        outputs = tx.zout_addresses
        for addr in outputs:
            tags.add(Address(chain, addr), label, TagCategory.FOUNDER)
        links.append(LinkEvidence(
            kind=LinkKind.FOUNDER_VALUE, params=params, dst_txs=(tx.txid,),
            dst_addrs=_addrs(chain, outputs), value=tx.pool_withdrawal, chain=chain,
        ))

    known_values = {a.value for a in known if a.chain == chain}
    heights: Dict[str, List[int]] = defaultdict(list)
    stats: Dict[str, FounderAddressStats] = {}
    for event in pool_events(ledger):
        if event.direction is not Direction.DEPOSIT or len(event.actors) != 1:
            continue
        addr = event.actors[0]
        if known_values and addr not in known_values:
            continue
        s = stats.setdefault(addr, FounderAddressStats(addr))
        s.deposits += 1
        s.total_deposited += event.value
        if event.value == deposit_value:
            s.at_deposit_value += 1
            heights[addr].append(event.height)
    if not known_values:
        stats = {a: s for a, s in stats.items() if s.at_deposit_value}

    spaced = gaps = 0
    low, high = FOUNDER_SPACING
    for addr, s in stats.items():
        s.within_cap = s.total_deposited <= cap
        hs = heights[addr]
        within = sum(low <= b - a <= high for a, b in zip(hs, hs[1:]))
        s.spacing_share = within / (len(hs) - 1) if len(hs) > 1 else 0.0
        spaced += within
        gaps += max(len(hs) - 1, 0)
        if not s.within_cap:
            logger.warning(f"Founder address {addr} deposited past the rotation cap")

    logger.info(f"Founder heuristic linked {len(links)} withdrawals")
    return FounderResult(tags, links, dict(sorted(stats.items())), spaced / gaps if gaps else 0.0)


# ============================================================================
# Miners
# ============================================================================

def tag_miners(
    ledger: Ledger,
    pools: TagMap,
    min_outputs: int = 100,
    label: str = "miner",
) -> Tuple[TagMap, List[LinkEvidence]]:
    """
    Attribute mining pool payouts.

    A z-to-t with more than ``min_outputs`` distinct output addresses, at least
    one of them tagged POOL, is a payout; its non-pool outputs are tagged MINER.
    """
    chain = ledger.chain.symbol
    pool_addrs = pools.with_category(TagCategory.POOL)
    tags = TagMap()
    links: List[LinkEvidence] = []
    for tx in _withdrawals(ledger):
        outputs = tx.zout_addresses
        if len(outputs) <= min_outputs:
            continue
        addrs = _addrs(chain, outputs)
        if not any(a in pool_addrs for a in addrs):
            continue
        for a in addrs:
            if a not in pool_addrs:
                tags.add(a, label, TagCategory.MINER)
        links.append(LinkEvidence(
            kind=LinkKind.MINER_PAYOUT, params={"min_outputs": min_outputs},
            dst_txs=(tx.txid,), dst_addrs=addrs, value=tx.pool_withdrawal, chain=chain,
        ))
    logger.info(f"Miner heuristic linked {len(links)} payouts, tagged {len(tags)} addresses")
    return tags, links


# ============================================================================
# Unique-value round trips
# ============================================================================

def _unique_value_pairs(ledger: Ledger) -> List[Tuple[LedgerTx, LedgerTx, int]]:
    """(deposit, withdrawal, block gap) for values seen exactly once on each side."""
    deposits: Dict[int, List[LedgerTx]] = defaultdict(list)
    withdrawals: Dict[int, List[LedgerTx]] = defaultdict(list)
    for tx in ledger:
        cls = classify_zcash_tx(tx)
        if cls is ZTxClass.SHIELDED:
            deposits[tx.pool_deposit].append(tx)
        elif cls is ZTxClass.DESHIELDED:
            withdrawals[tx.pool_withdrawal].append(tx)
    pairs = []
    for value, deps in deposits.items():
        wds = withdrawals.get(value, ())
        if len(deps) == 1 and len(wds) == 1 and wds[0].position > deps[0].position:
            pairs.append((deps[0], wds[0], wds[0].height - deps[0].height))
    pairs.sort(key=lambda p: p[1].position)
    return pairs


def _round_trip_link(dep: LedgerTx, wd: LedgerTx, gap: int, max_interval: int) -> LinkEvidence:
    chain = dep.chain
    return LinkEvidence(
        kind=LinkKind.ROUND_TRIP_UNIQUE, params={"max_interval": max_interval},
        src_txs=(dep.txid,), src_addrs=_addrs(chain, tx_input_addresses(dep)),
        dst_txs=(wd.txid,), dst_addrs=_addrs(chain, wd.zout_addresses),
        value=wd.pool_withdrawal, chain=chain, meta={"gap": gap},
    )


def round_trip_unique(ledger: Ledger, max_interval: int = 10) -> List[LinkEvidence]:
    """
    Link a deposit and a withdrawal of the same value v when v occurs exactly
    once on each side and the withdrawal follows within ``max_interval`` blocks.
    """
    links = [_round_trip_link(d, w, gap, max_interval)
             for d, w, gap in _unique_value_pairs(ledger) if gap <= max_interval]
    logger.info(f"Round-trip heuristic linked {len(links)} withdrawals at interval {max_interval}")
    return links


def round_trip_sweep(ledger: Ledger, intervals: Iterable[int] = range(1, 101)) -> List[Dict[str, int]]:
    """Linked count and value for each interval: the value-vs-interval curve."""
    pairs = _unique_value_pairs(ledger)
    gaps = sorted(gap for _, _, gap in pairs)
    by_gap = sorted((gap, w.pool_withdrawal) for _, w, gap in pairs)
    cumulative = [0]
    for _, value in by_gap:
        cumulative.append(cumulative[-1] + value)
    curve = []
    for interval in intervals:
        n = bisect_right(gaps, interval)
        curve.append({"interval": interval, "links": n, "value": cumulative[n]})
    return curve


# ============================================================================
# Attribution and anonymity accounting
# ============================================================================

def attribute_withdrawals(ledger: Ledger, links: Iterable[LinkEvidence]) -> Dict[str, Attribution]:
    """One attribution class per z-to-t, FOUNDER > MINER > OTHER > UNKNOWN."""
    linked: Dict[LinkKind, Set[str]] = defaultdict(set)
    for link in links:
        linked[link.kind].update(link.dst_txs)
    result: Dict[str, Attribution] = {}
    for tx in _withdrawals(ledger):
        result[tx.txid] = next(
            (cls for kind, cls in ATTRIBUTION_PRIORITY if tx.txid in linked[kind]),
            Attribution.UNKNOWN,
        )
    return result


def anonymity_reduction(ledger: Ledger, links: Iterable[LinkEvidence]) -> AnonymityReport:
    """
    How much of the withdrawn value the links attribute, per class.

    Shares are fractions of total withdrawn value; ``count_share`` is the
    fraction of withdrawals. OTHER is the unique-value heuristic's share.
    """
    attribution = attribute_withdrawals(ledger, links)
    values = {tx.txid: tx.pool_withdrawal for tx in _withdrawals(ledger)}
    total = sum(values.values())
    n = len(values)
    classes: Dict[str, ClassShare] = {}
    for cls in Attribution:
        members = [t for t, c in attribution.items() if c is cls]
        value = sum(values[t] for t in members)
        classes[cls.value] = ClassShare(
            count=len(members), value=value,
            share=float(Fraction(value, total)) if total else 0.0,
            count_share=len(members) / n if n else 0.0,
        )
    linked_value = sum(classes[c.value].value for c in Attribution if c is not Attribution.UNKNOWN)
    return AnonymityReport(
        withdrawals=n, total_withdrawn=total, classes=classes,
        linked_share=float(Fraction(linked_value, total)) if total else 0.0,
        other_share=classes[Attribution.OTHER.value].share,
    )


# ============================================================================
# Ransom deposit filter
# ============================================================================

def _split_points(split_dates: Sequence[str]) -> Dict[str, int]:
    points = {}
    for d in split_dates:
        dt = datetime.strptime(d, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        points[dt.strftime("%Y-%m")] = int(dt.timestamp())
    return points


def period_of(ts: int, splits: Dict[str, int]) -> str:
    """UTC calendar month; months holding a split date divide into (before)/(after)."""
    month = month_of(ts)
    if month in splits:
        return f"{month} ({'before' if ts < splits[month] else 'after'})"
    return month


def _closest(value: int, amounts: Sequence[int]) -> Tuple[int, int]:
    """(amount, distance) for the amount closest to value; ties to the smaller amount."""
    best = min(amounts, key=lambda a: (abs(value - a), a))
    return best, abs(value - best)


@dataclass
class TsbResult:
    flagged: Dict[str, List[int]]
    table: Dict[str, Dict[str, int]]
    links: List[LinkEvidence]
    unclustered: int = 0


def tsb_filter(
    ledger: Ledger,
    clusters: ClusterSet,
    amounts: Sequence[int] = TSB_AMOUNTS,
    tx_tol: int = TSB_TX_TOL,
    cluster_tol: int = TSB_CLUSTER_TOL,
    max_history: int = 250,
    split_dates: Sequence[str] = TSB_SPLIT_DATES,
    tags: Optional[TagMap] = None,
) -> TsbResult:
    """
    Flag clusters whose pool deposits match a requested-payment pattern.

    A cluster is flagged in a period when (a) one of its deposits is within
    ``tx_tol`` of a requested amount, (b) none of its addresses ever received
    a z-to-t output, (c) none of its addresses took part in more than
    ``max_history`` transactions, and (d) its total deposits in the period are
    within ``cluster_tol`` of a requested amount. Clusters holding an address
    tagged FOUNDER or MINER are never flagged.

    Returns:
        TsbResult with flagged cluster ids per period, the period x amount
        count table, and TSB_FLAG evidence (one per flagged cluster-period)
    """
    chain = ledger.chain.symbol
    d = ledger.chain.decimals
    amounts = sorted(amounts)
    splits = _split_points(split_dates)
    params = {
        "amounts": [format_units(a, d) for a in amounts],
        "tx_tol": format_units(tx_tol, d),
        "cluster_tol": format_units(cluster_tol, d),
        "max_history": max_history,
    }

    withdrawn_to: Set[str] = set()
    for tx in ledger:
        withdrawn_to.update(tx.zout_addresses)
    excluded: Set[Address] = set()
    if tags is not None:
        excluded = tags.with_category(TagCategory.FOUNDER) | tags.with_category(TagCategory.MINER)

    deposits: Dict[Tuple[int, str], List[LedgerTx]] = defaultdict(list)
    unclustered = 0
    for tx in ledger:
        if classify_zcash_tx(tx) is not ZTxClass.SHIELDED:
            continue
        first = Address(chain, tx_input_addresses(tx)[0])
        if first not in clusters:
            unclustered += 1
            continue
        deposits[(clusters.cluster_id(first), period_of(tx.timestamp, splits))].append(tx)
    if unclustered:
        logger.warning(f"{unclustered} deposits come from addresses outside the cluster set")

    members = clusters.clusters()
    eligible: Dict[int, bool] = {}

    def cluster_ok(cid: int) -> bool:
        if cid not in eligible:
            addrs = members[cid]
            eligible[cid] = (
                all(a.value not in withdrawn_to for a in addrs)
                and all(ledger.address_tx_count(a.value) <= max_history for a in addrs)
                and not any(a in excluded for a in addrs)
            )
        return eligible[cid]

    flagged: Dict[str, List[int]] = defaultdict(list)
    table: Dict[str, Dict[str, int]] = defaultdict(lambda: {format_units(a, d): 0 for a in amounts})
    links: List[LinkEvidence] = []
    for (cid, period), txs in sorted(deposits.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if not any(_closest(tx.pool_deposit, amounts)[1] <= tx_tol for tx in txs):
            continue
        total = sum(tx.pool_deposit for tx in txs)
        amount, distance = _closest(total, amounts)
        if distance > cluster_tol or not cluster_ok(cid):
            continue
        flagged[period].append(cid)
        table[period][format_units(amount, d)] += 1
        src = tuple(dict.fromkeys(a for tx in txs for a in tx_input_addresses(tx)))
        links.append(LinkEvidence(
            kind=LinkKind.TSB_FLAG, params=params,
            src_txs=tuple(tx.txid for tx in txs), src_addrs=_addrs(chain, src),
            value=total, chain=chain,
            meta={"period": period, "amount": format_units(amount, d), "cluster_id": cid},
        ))
    logger.info(f"Ransom filter flagged {len(links)} cluster-periods")
    return TsbResult(
        flagged={p: sorted(c) for p, c in sorted(flagged.items())},
        table=dict(sorted(table.items())),
        links=links,
        unclustered=unclustered,
    )


# ============================================================================
# CoinJoin
# ============================================================================

def detect_coinjoin(tx: LedgerTx, denominations: Collection[int] = DASH_DENOMINATIONS) -> bool:
    """
    True for a mixing transaction: at least three inputs, every output but at
    most one carrying the same denomination. The odd output absorbs fees.
    """
    if len(tx.vin) < 3 or tx.xfer is not None:
        return False
    denominated = Counter(o.value for o in tx.vout if o.value in denominations)
    if len(denominated) != 1:
        return False
    count = next(iter(denominated.values()))
    return len(tx.vout) - count <= 1


def scan_coinjoins(ledger: Ledger, denominations: Collection[int] = DASH_DENOMINATIONS) -> List[LinkEvidence]:
    chain = ledger.chain.symbol
    params = {"denominations": sorted(format_units(v, ledger.chain.decimals) for v in denominations)}
    links = []
    for tx in ledger:
        if not detect_coinjoin(tx, denominations):
            continue
        denomination, count = Counter(o.value for o in tx.vout if o.value in denominations).most_common(1)[0]
        links.append(LinkEvidence(
            kind=LinkKind.COINJOIN, params=params,
            src_txs=(tx.txid,), src_addrs=_addrs(chain, tx.input_addresses),
            dst_addrs=_addrs(chain, tx.output_addresses),
            value=denomination * count, chain=chain,
            meta={"denomination": format_units(denomination, ledger.chain.decimals)},
        ))
    logger.info(f"Found {len(links)} CoinJoin transactions on {chain}")
    return links

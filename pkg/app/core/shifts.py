"""
Cross-chain shift identification.

Phase 1 finds the on-chain deposit of an advertised shift: a block window
around the advertised time, narrowed by exact amount, then confirmed by
asking the service about each candidate's recipient address. The answer
names the Phase 2 (payout) transaction on the output chain.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from app.core.errors import AmbiguousShiftError, ChainMissingError, InputError, MalformedRecordError
from app.core.ledger import Address, ChainRegistry, Ledger, LedgerTx, format_units, to_units
from app.models.schemas import DEFAULT_WINDOWS

logger = logging.getLogger(__name__)

MAX_WINDOW = 30


@dataclass(frozen=True)
class ShiftRecord:
    """An advertised trade: ``amt`` units of ``cur_in`` shifted into ``cur_out`` at ``t``."""
    id: str
    cur_in: str
    cur_out: str
    amt: int
    t: int

    def __post_init__(self) -> None:
        if self.cur_in == self.cur_out:
            raise InputError(f"shift {self.id}: input and output currency are both {self.cur_in}")
        if self.amt <= 0:
            raise InputError(f"shift {self.id}: amount must be positive")

    @property
    def pair(self) -> Tuple[str, str]:
        return (self.cur_in, self.cur_out)


class ShiftStatusCode(str, Enum):
    COMPLETE = "complete"
    ERROR = "error"
    NO_DEPOSITS = "no_deposits"


@dataclass(frozen=True)
class ShiftStatus:
    """What the service reports for one deposit address."""
    address: Address
    status: ShiftStatusCode
    withdraw: Optional[Address] = None
    in_coin: int = 0
    in_type: str = ""
    out_coin: int = 0
    out_type: str = ""
    tx: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status is ShiftStatusCode.COMPLETE and (self.tx is None or self.withdraw is None):
            raise InputError(f"complete status for {self.address} lacks a payout tx or withdraw address")


class ShiftOracle(Protocol):
    def lookup(self, address: Address) -> Optional[ShiftStatus]:
        ...


class FixtureOracle:
    """Answers status queries from a fixed table, one row per deposit address."""

    def __init__(self, statuses: Iterable[ShiftStatus] = ()):
        self._rows: Dict[Address, ShiftStatus] = {}
        self.queries = 0
        for status in statuses:
            self._rows[status.address] = status

    def lookup(self, address: Address) -> Optional[ShiftStatus]:
        self.queries += 1
        return self._rows.get(address)

    def __len__(self) -> int:
        return len(self._rows)

    def statuses(self) -> List[ShiftStatus]:
        return [self._rows[a] for a in sorted(self._rows)]


# ============================================================================
# CSV interfaces
# ============================================================================

SHIFT_FIELDS = ["id", "cur_in", "cur_out", "amt", "ts"]
ORACLE_FIELDS = ["addr_s", "status", "withdraw", "in_coin", "in_type", "out_coin", "out_type", "out_txid"]


def load_shifts(path: Union[str, Path], registry: ChainRegistry) -> List[ShiftRecord]:
    """Read the shift stream CSV; amounts are decimal strings in cur_in units."""
    shifts: List[ShiftRecord] = []
    with Path(path).open(newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                chain = registry.get(row["cur_in"])
                registry.get(row["cur_out"])
                shifts.append(ShiftRecord(row["id"], row["cur_in"], row["cur_out"],
                                          to_units(row["amt"], chain.decimals), int(row["ts"])))
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedRecordError(f"bad shift row: {e}", line=line_no) from e
    shifts.sort(key=lambda s: (s.t, s.id))
    logger.info(f"Loaded {len(shifts)} shifts from {path}")
    return shifts


def write_shifts(shifts: Iterable[ShiftRecord], path: Union[str, Path], registry: ChainRegistry) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SHIFT_FIELDS)
        for s in shifts:
            writer.writerow([s.id, s.cur_in, s.cur_out,
                             format_units(s.amt, registry.get(s.cur_in).decimals), s.t])


def load_oracle(path: Union[str, Path], registry: ChainRegistry) -> FixtureOracle:
    statuses: List[ShiftStatus] = []
    with Path(path).open(newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                in_chain = registry.get(row["in_type"])
                status = ShiftStatusCode(row["status"].lower())
                out_type = row.get("out_type") or ""
                out_dec = registry.get(out_type).decimals if out_type else 0
                statuses.append(ShiftStatus(
                    address=Address.of(in_chain.symbol, row["addr_s"]),
                    status=status,
                    withdraw=Address.of(out_type, row["withdraw"]) if row.get("withdraw") else None,
                    in_coin=to_units(row["in_coin"] or "0", in_chain.decimals),
                    in_type=in_chain.symbol,
                    out_coin=to_units(row.get("out_coin") or "0", out_dec),
                    out_type=out_type,
                    tx=row.get("out_txid") or None,
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedRecordError(f"bad oracle row: {e}", line=line_no) from e
    logger.info(f"Loaded {len(statuses)} oracle rows from {path}")
    return FixtureOracle(statuses)


def write_oracle(statuses: Iterable[ShiftStatus], path: Union[str, Path], registry: ChainRegistry) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ORACLE_FIELDS)
        for s in statuses:
            out_dec = registry.get(s.out_type).decimals if s.out_type else 0
            writer.writerow([
                s.address.value, s.status.value, s.withdraw.value if s.withdraw else "",
                format_units(s.in_coin, registry.get(s.in_type).decimals), s.in_type,
                format_units(s.out_coin, out_dec) if s.out_type else "", s.out_type, s.tx or "",
            ])


# ============================================================================
# Phase 1
# ============================================================================

@dataclass(frozen=True)
class WindowParams:
    """Blocks searched before and after the anchor block, per chain."""
    windows: Mapping[str, Tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))
    default: Tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        for chain, (before, after) in list(self.windows.items()) + [("default", self.default)]:
            if not (0 <= before <= MAX_WINDOW and 0 <= after <= MAX_WINDOW):
                raise InputError(f"{chain}: block window ({before}, {after}) outside [0, {MAX_WINDOW}]")

    def for_chain(self, symbol: str) -> Tuple[int, int]:
        return tuple(self.windows.get(symbol, self.default))


class HitClass(str, Enum):
    ZERO_HITS = "ZERO_HITS"
    SINGLE_HIT = "SINGLE_HIT"
    MULTI_HIT = "MULTI_HIT"


@dataclass(frozen=True)
class Candidate:
    """A payment of exactly the shift amount: transaction, recipient and output position."""
    tx: LedgerTx
    recipient: str
    index: int


@dataclass(frozen=True)
class Phase1Result:
    shift: ShiftRecord
    anchor: Optional[int]
    candidates: Tuple[Candidate, ...]

    @property
    def hit(self) -> HitClass:
        if not self.candidates:
            return HitClass.ZERO_HITS
        return HitClass.SINGLE_HIT if len(self.candidates) == 1 else HitClass.MULTI_HIT


@dataclass(frozen=True)
class Resolution:
    """A shift tied to its deposit transaction and the service's answer."""
    shift: ShiftRecord
    deposit: LedgerTx
    deposit_index: int
    status: ShiftStatus

    @property
    def deposit_address(self) -> Address:
        return self.status.address

    @property
    def payout_txid(self) -> str:
        return self.status.tx

    @property
    def withdraw(self) -> Address:
        return self.status.withdraw


def _payments_of(ledger: Ledger, low: int, high: int, amt: int) -> List[Candidate]:
    return [
        Candidate(tx, recipient, i)
        for tx in ledger.between(low, high)
        for i, (recipient, value) in enumerate(tx.payments())
        if value == amt
    ]


def phase1_basic(shift: ShiftRecord, ledger: Optional[Ledger], w: WindowParams = WindowParams()) -> Phase1Result:
    """
    Candidate deposits for a shift.

    The anchor is the block whose timestamp is closest to the advertised time;
    candidates are payments of exactly ``shift.amt`` in the blocks
    [anchor - before, anchor + after].

    Raises:
        ChainMissingError: if no ledger for the input currency is available
    """
    if ledger is None or ledger.chain.symbol != shift.cur_in:
        raise ChainMissingError(f"shift {shift.id}: no {shift.cur_in} ledger loaded")
    anchor = ledger.closest_height(shift.t)
    if anchor is None:
        return Phase1Result(shift, None, ())
    before, after = w.for_chain(shift.cur_in)
    return Phase1Result(shift, anchor, tuple(_payments_of(ledger, anchor - before, anchor + after, shift.amt)))


def phase1_augmented(
    shift: ShiftRecord,
    candidates: Union[Phase1Result, Sequence[Candidate]],
    oracle: ShiftOracle,
    ledger_out: Optional[Ledger] = None,
) -> Optional[Resolution]:
    """
    Confirm candidates by querying the service on each recipient address.

    An answer counts only when it is complete and agrees with the shift on
    the currency pair and the deposited amount; with ``ledger_out`` given the
    payout transaction must also exist and not precede the deposit. Reused
    deposit addresses return stale answers, which these checks discard.

    Raises:
        AmbiguousShiftError: if more than one candidate is confirmed
    """
    if isinstance(candidates, Phase1Result):
        candidates = candidates.candidates
    confirmed: List[Resolution] = []
    seen = set()
    for c in candidates:
        key = (c.tx.txid, c.recipient)
        if key in seen:
            continue
        seen.add(key)
        status = oracle.lookup(Address.of(shift.cur_in, c.recipient))
        if status is None or status.status is not ShiftStatusCode.COMPLETE:
            continue
        if (status.in_type, status.out_type) != shift.pair or status.in_coin != shift.amt:
            logger.debug(f"shift {shift.id}: discarding stale answer for {c.recipient}")
            continue
        if ledger_out is not None:
            payout = ledger_out.get(status.tx)
            if payout is None or payout.timestamp < c.tx.timestamp:
                continue
        confirmed.append(Resolution(shift, c.tx, c.index, status))
    if len(confirmed) > 1:
        raise AmbiguousShiftError(
            f"shift {shift.id}: {len(confirmed)} deposits confirmed",
            shift_id=shift.id, txids=[r.deposit.txid for r in confirmed],
        )
    return confirmed[0] if confirmed else None


def phase2_estimate(
    shift: ShiftRecord,
    ledger_out: Ledger,
    rate: Union[str, Decimal],
    fee: Union[str, Decimal],
    tol: Union[str, Decimal] = Decimal("0.01"),
    window: int = 3600,
    registry: Optional[ChainRegistry] = None,
) -> List[Candidate]:
    """
    Payout candidates estimated from a rate snapshot.

    The expected payout is amt * rate - fee in output coins; candidates are
    payments within ``tol`` (a fraction) of it made in the ``window`` seconds
    after the advertised time. The input scale comes from ``registry``
    (built-in chains when omitted).

    Raises:
        UnknownChainError: if the input currency is not a known chain
    """
    d_in = (registry or ChainRegistry()).get(shift.cur_in).decimals
    d_out = ledger_out.chain.decimals
    amount = Fraction(shift.amt, 10 ** d_in)
    expected = (amount * Fraction(Decimal(rate)) - Fraction(Decimal(fee))) * 10 ** d_out
    if expected <= 0:
        return []
    slack = expected * Fraction(Decimal(tol))
    out = []
    for tx in ledger_out:
        if not shift.t <= tx.timestamp <= shift.t + window:
            continue
        for i, (recipient, value) in enumerate(tx.payments()):
            if abs(value - expected) <= slack:
                out.append(Candidate(tx, recipient, i))
    return out


# ============================================================================
# Batch resolution
# ============================================================================

@dataclass(frozen=True)
class ShiftOutcome:
    shift: ShiftRecord
    hit: Optional[HitClass]
    candidates: int = 0
    resolution: Optional[Resolution] = None
    ambiguous: bool = False
    missing_chain: bool = False


@dataclass
class ResolutionReport:
    outcomes: List[ShiftOutcome]
    summary: Dict[str, Dict[str, float]]

    @property
    def resolved(self) -> List[Resolution]:
        return [o.resolution for o in self.outcomes if o.resolution is not None]


def _summarize(outcomes: Sequence[ShiftOutcome]) -> Dict[str, Dict[str, float]]:
    summary: Dict[str, Dict[str, float]] = defaultdict(lambda: {
        "shifts": 0, "zero_hits": 0, "single_hits": 0, "multi_hits": 0,
        "resolved": 0, "ambiguous": 0, "missing_chain": 0,
    })
    for o in outcomes:
        s = summary[o.shift.cur_in]
        s["shifts"] += 1
        if o.missing_chain:
            s["missing_chain"] += 1
            continue
        s[{HitClass.ZERO_HITS: "zero_hits", HitClass.SINGLE_HIT: "single_hits",
           HitClass.MULTI_HIT: "multi_hits"}[o.hit]] += 1
        s["resolved"] += o.resolution is not None
        s["ambiguous"] += o.ambiguous
    for s in summary.values():
        n = s["shifts"]
        s["basic_rate"] = s["single_hits"] / n if n else 0.0
        s["augmented_rate"] = s["resolved"] / n if n else 0.0
    return dict(sorted(summary.items()))


def resolve_shifts(
    shifts: Iterable[ShiftRecord],
    ledgers: Mapping[str, Ledger],
    oracle: ShiftOracle,
    windows: WindowParams = WindowParams(),
    strict: bool = False,
) -> ResolutionReport:
    """
    Run both Phase 1 steps over a shift stream.

    Shifts on chains without a ledger are counted as missing (or raise
    ChainMissingError when ``strict``); ambiguous confirmations are recorded,
    never guessed.
    """
    outcomes: List[ShiftOutcome] = []
    for shift in sorted(shifts, key=lambda s: (s.t, s.id)):
        ledger = ledgers.get(shift.cur_in)
        if ledger is None:
            if strict:
                raise ChainMissingError(f"shift {shift.id}: no {shift.cur_in} ledger loaded")
            outcomes.append(ShiftOutcome(shift, None, missing_chain=True))
            continue
        basic = phase1_basic(shift, ledger, windows)
        try:
            resolution = phase1_augmented(shift, basic, oracle, ledgers.get(shift.cur_out))
            outcomes.append(ShiftOutcome(shift, basic.hit, len(basic.candidates), resolution))
        except AmbiguousShiftError as e:
            logger.warning(str(e))
            outcomes.append(ShiftOutcome(shift, basic.hit, len(basic.candidates), ambiguous=True))
    report = ResolutionReport(outcomes, _summarize(outcomes))
    logger.info(f"Resolved {len(report.resolved)} of {len(outcomes)} shifts")
    return report

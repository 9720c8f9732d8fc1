"""
Canonical multi-chain ledger model.

This module provides:
- Chain descriptors and a registry seeded with the chains the toolkit knows
- Exact integer amount conversion (decimal strings in, smallest units out)
- Immutable transaction records for UTXO and account chains, including the
  transparent side of Zcash joinsplits
- The Ledger container with its indices (txid, height, address, spent outpoints)
- JSONL ingestion and serialization
- Zcash transaction-type classification and shielded pool accounting
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation, localcontext
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

from app.core.errors import (
    DoubleSpendError,
    DuplicateTxidError,
    InputError,
    MalformedRecordError,
    NegativePoolError,
    OutOfOrderError,
    UnknownChainError,
)

logger = logging.getLogger(__name__)

# zOut entries carrying value that is not assigned to any address (the miner
# fee allocation). Serialized as a JSON null address.
UNASSIGNED = "<unassigned>"

MAX_DECIMALS = 18


class Accounting(str, Enum):
    """Accounting model of a chain."""
    UTXO = "UTXO"
    ACCOUNT = "ACCOUNT"


@dataclass(frozen=True)
class ChainId:
    """Descriptor of one ledger: symbol, accounting model and unit scale."""
    symbol: str
    accounting: Accounting
    decimals: int
    joinsplits: bool = False

    def __post_init__(self) -> None:
        if not self.symbol or not self.symbol.isupper():
            raise InputError(f"Chain symbol must be a short uppercase token, got '{self.symbol}'")
        if not 0 <= self.decimals <= MAX_DECIMALS:
            raise InputError(f"Chain {self.symbol}: decimals must be in [0, {MAX_DECIMALS}]")
        if self.joinsplits and self.accounting is not Accounting.UTXO:
            raise InputError(f"Chain {self.symbol}: joinsplits require the UTXO model")

    @property
    def is_utxo(self) -> bool:
        return self.accounting is Accounting.UTXO

    def to_manifest(self) -> Dict[str, Any]:
        return {
            "symbol": self.symbol,
            "accounting": self.accounting.value,
            "decimals": self.decimals,
            "joinsplits": self.joinsplits,
        }


BUILTIN_CHAINS: Dict[str, ChainId] = {
    c.symbol: c
    for c in (
        ChainId("BTC", Accounting.UTXO, 8),
        ChainId("BCH", Accounting.UTXO, 8),
        ChainId("DASH", Accounting.UTXO, 8),
        ChainId("DOGE", Accounting.UTXO, 8),
        ChainId("LTC", Accounting.UTXO, 8),
        ChainId("ZEC", Accounting.UTXO, 8, joinsplits=True),
        ChainId("ETH", Accounting.ACCOUNT, 18),
        ChainId("ETC", Accounting.ACCOUNT, 18),
    )
}


def load_chain_manifest(path: Union[str, Path]) -> ChainId:
    """Read one chain manifest JSON file."""
    try:
        data = json.loads(Path(path).read_text())
        return ChainId(
            symbol=data["symbol"],
            accounting=Accounting(data["accounting"]),
            decimals=int(data["decimals"]),
            joinsplits=bool(data.get("joinsplits", False)),
        )
    except (OSError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"Invalid chain manifest {path}: {e}") from e


class ChainRegistry:
    """Registry of known chains, unique by symbol."""

    def __init__(self, chains: Iterable[ChainId] = ()):
        self._chains: Dict[str, ChainId] = dict(BUILTIN_CHAINS)
        for chain in chains:
            self.register(chain, replace_builtin=True)

    def register(self, chain: ChainId, replace_builtin: bool = False) -> None:
        existing = self._chains.get(chain.symbol)
        if existing is not None and existing != chain:
            if not (replace_builtin and BUILTIN_CHAINS.get(chain.symbol) == existing):
                raise InputError(f"Chain '{chain.symbol}' already registered with a different manifest")
            logger.warning(f"Manifest overrides built-in chain {chain.symbol}")
        self._chains[chain.symbol] = chain

    def get(self, symbol: str) -> ChainId:
        try:
            return self._chains[symbol]
        except KeyError:
            raise UnknownChainError(f"Unknown chain '{symbol}'") from None

    def __contains__(self, symbol: object) -> bool:
        return symbol in self._chains

    def __iter__(self) -> Iterator[ChainId]:
        return iter(self._chains.values())

    def symbols(self) -> List[str]:
        return sorted(self._chains)

    @classmethod
    def from_directory(cls, directory: Union[str, Path]) -> "ChainRegistry":
        """Load every ``<SYMBOL>.json`` manifest in a directory."""
        directory = Path(directory)
        if not directory.is_dir():
            raise InputError(f"Chain directory not found: {directory}")
        manifests = [load_chain_manifest(p) for p in sorted(directory.glob("*.json"))
                     if p.stem.isupper()]
        logger.info(f"Loaded {len(manifests)} chain manifests from {directory}")
        return cls(manifests)


# ============================================================================
# Amounts
# ============================================================================

def to_units(value: Union[str, int, Decimal], decimals: int) -> int:
    """
    Convert a decimal amount to integer smallest units, exactly.

    Args:
        value: Decimal string (e.g. "249.9999"), Decimal or whole int
        decimals: Unit scale of the chain

    Returns:
        Non-negative integer number of units

    Raises:
        InputError: if the value is negative, not a number, a float, or
            carries more precision than the chain supports
    """
    if isinstance(value, bool) or isinstance(value, float):
        raise InputError(f"Amount must be a decimal string, got {value!r}")
    with localcontext() as ctx:
        ctx.prec = 80
        try:
            amount = Decimal(value) if not isinstance(value, Decimal) else value
        except (InvalidOperation, TypeError):
            raise InputError(f"Not a decimal amount: {value!r}") from None
        if not amount.is_finite() or amount < 0:
            raise InputError(f"Amount must be finite and non-negative: {value!r}")
        scaled = amount.scaleb(decimals)
        if scaled != scaled.to_integral_value():
            raise InputError(f"Amount {value} is not exact at {decimals} decimals")
        return int(scaled)


def format_units(units: int, decimals: int) -> str:
    """Render integer units as the shortest exact decimal string."""
    if units < 0:
        return "-" + format_units(-units, decimals)
    whole, frac = divmod(units, 10 ** decimals)
    if frac == 0:
        return str(whole)
    return f"{whole}.{frac:0{decimals}d}".rstrip("0")


# ============================================================================
# Records
# ============================================================================

def _looks_shielded(chain: str, value: str) -> bool:
    return chain == "ZEC" and value[:2] in ("zc", "zs")


@dataclass(frozen=True, order=True)
class Address:
    """A chain-scoped address. Equality and ordering use (chain, value) only."""
    chain: str
    value: str
    shielded: bool = field(default=False, compare=False)

    @classmethod
    def of(cls, chain: str, value: str) -> "Address":
        return cls(chain, value, _looks_shielded(chain, value))

    @classmethod
    def parse(cls, text: str) -> "Address":
        """Parse the ``CHAIN:value`` form used in exports."""
        chain, sep, value = text.partition(":")
        if not sep or not chain or not value:
            raise InputError(f"Address must look like CHAIN:value, got '{text}'")
        return cls.of(chain, value)

    def __str__(self) -> str:
        return f"{self.chain}:{self.value}"


@dataclass(frozen=True, slots=True)
class TxIn:
    src_txid: str
    src_idx: int
    addr: str
    value: int

    @property
    def outpoint(self) -> Tuple[str, int]:
        return (self.src_txid, self.src_idx)


@dataclass(frozen=True, slots=True)
class TxOut:
    addr: str
    value: int

    @property
    def assigned(self) -> bool:
        return self.addr != UNASSIGNED


@dataclass(frozen=True, slots=True)
class JoinSplit:
    """Transparent side of a shielded component: zin funds the pool, zout leaves it."""
    zin: Tuple[TxOut, ...] = ()
    zout: Tuple[TxOut, ...] = ()

    @property
    def assigned_zout(self) -> Tuple[TxOut, ...]:
        return tuple(o for o in self.zout if o.assigned)


@dataclass(frozen=True, slots=True)
class AccountTransfer:
    sender: str
    recipient: str
    value: int
    fee: int = 0


def _distinct(values: Iterable[str]) -> Tuple[str, ...]:
    return tuple(dict.fromkeys(values))


@dataclass(frozen=True, slots=True)
class LedgerTx:
    """One chain-tagged transaction. All values are integer smallest units."""
    txid: str
    chain: str
    height: int
    timestamp: int
    coinbase: bool = False
    vin: Tuple[TxIn, ...] = ()
    vout: Tuple[TxOut, ...] = ()
    joinsplits: Tuple[JoinSplit, ...] = ()
    xfer: Optional[AccountTransfer] = None
    index: int = 0

    @property
    def position(self) -> Tuple[int, int]:
        return (self.height, self.index)

    @property
    def input_value(self) -> int:
        return sum(i.value for i in self.vin)

    @property
    def output_value(self) -> int:
        return sum(o.value for o in self.vout)

    @property
    def pool_deposit(self) -> int:
        """Value moved into the shielded pool (sum of zin)."""
        return sum(o.value for js in self.joinsplits for o in js.zin)

    @property
    def pool_withdrawal(self) -> int:
        """Value leaving the pool to transparent addresses (assigned zout)."""
        return sum(o.value for js in self.joinsplits for o in js.zout if o.assigned)

    @property
    def pool_release(self) -> int:
        """All value leaving the pool, including the unassigned fee allocation."""
        return sum(o.value for js in self.joinsplits for o in js.zout)

    @property
    def fee(self) -> int:
        if self.xfer is not None:
            return self.xfer.fee
        if self.coinbase:
            return 0
        return self.input_value - self.output_value - self.pool_deposit + self.pool_release

    @property
    def input_addresses(self) -> Tuple[str, ...]:
        if self.xfer is not None:
            return (self.xfer.sender,)
        return _distinct(i.addr for i in self.vin)

    @property
    def output_addresses(self) -> Tuple[str, ...]:
        if self.xfer is not None:
            return (self.xfer.recipient,)
        return _distinct(o.addr for o in self.vout)

    @property
    def zin_addresses(self) -> Tuple[str, ...]:
        return _distinct(o.addr for js in self.joinsplits for o in js.zin)

    @property
    def zout_addresses(self) -> Tuple[str, ...]:
        return _distinct(o.addr for js in self.joinsplits for o in js.zout if o.assigned)

    def addresses(self) -> Tuple[str, ...]:
        """Every transparent address the transaction touches."""
        return _distinct(
            self.input_addresses + self.output_addresses + self.zin_addresses + self.zout_addresses
        )

    def payments(self) -> Iterator[Tuple[str, int]]:
        """(recipient, value) for every visible payment: vout entries or the transfer."""
        if self.xfer is not None:
            yield self.xfer.recipient, self.xfer.value
        else:
            for o in self.vout:
                yield o.addr, o.value


class ZTxClass(str, Enum):
    """Zcash transaction types."""
    TRANSPARENT = "transparent"
    COINGEN = "coingen"
    SHIELDED = "shielded"
    DESHIELDED = "deshielded"
    MIXED = "mixed"
    PRIVATE = "private"


def classify_zcash_tx(tx: LedgerTx) -> ZTxClass:
    """
    Classify a transaction by its interaction with the shielded pool.

    Unassigned zOut entries (fee allocation) count as an empty zOut.
    """
    if tx.coinbase:
        return ZTxClass.COINGEN
    if not tx.joinsplits:
        return ZTxClass.TRANSPARENT
    if tx.vin and tx.vout:
        return ZTxClass.MIXED
    has_in = any(js.zin for js in tx.joinsplits)
    has_out = any(js.assigned_zout for js in tx.joinsplits)
    if has_in and has_out:
        return ZTxClass.MIXED
    if has_in:
        return ZTxClass.SHIELDED
    if has_out:
        return ZTxClass.DESHIELDED
    return ZTxClass.PRIVATE


# ============================================================================
# Ledger
# ============================================================================

class Ledger:
    """
    An ordered, validated, immutable list of transactions for one chain.

    Indices: txid, height, address, and spent outpoints. Construction checks
    height ordering, txid uniqueness, single spending of every outpoint,
    the accounting shape of every record, and non-negative fees.
    """

    def __init__(self, chain: ChainId, txs: Iterable[LedgerTx] = ()):
        self.chain = chain
        self._txs: List[LedgerTx] = []
        self._by_txid: Dict[str, LedgerTx] = {}
        self._by_height: Dict[int, List[LedgerTx]] = {}
        self._by_address: Dict[str, List[str]] = defaultdict(list)
        self._spent: Dict[Tuple[str, int], str] = {}
        for tx in txs:
            self._append(tx, line=None)
        self._freeze()

    @classmethod
    def _from_records(cls, chain: ChainId, records: Iterable[Tuple[int, LedgerTx]]) -> "Ledger":
        ledger = cls.__new__(cls)
        ledger.chain = chain
        ledger._txs = []
        ledger._by_txid = {}
        ledger._by_height = {}
        ledger._by_address = defaultdict(list)
        ledger._spent = {}
        for line, tx in records:
            ledger._append(tx, line=line)
        ledger._freeze()
        return ledger

    def _append(self, tx: LedgerTx, line: Optional[int]) -> None:
        if tx.chain != self.chain.symbol:
            raise MalformedRecordError(
                f"tx {tx.txid} belongs to {tx.chain}, ledger is {self.chain.symbol}", line=line)
        validate_tx(tx, self.chain, line)
        if tx.txid in self._by_txid:
            raise DuplicateTxidError(f"duplicate txid {tx.txid}", line=line)
        if self._txs and tx.height < self._txs[-1].height:
            raise OutOfOrderError(
                f"tx {tx.txid} at height {tx.height} after height {self._txs[-1].height}", line=line)

        block = self._by_height.setdefault(tx.height, [])
        if tx.index != len(block):
            tx = replace(tx, index=len(block))
        for i in tx.vin:
            spender = self._spent.get(i.outpoint)
            if spender is not None:
                raise DoubleSpendError(
                    f"outpoint {i.src_txid}:{i.src_idx} spent by {spender} and {tx.txid}", line=line)
            self._spent[i.outpoint] = tx.txid

        block.append(tx)
        self._txs.append(tx)
        self._by_txid[tx.txid] = tx
        for addr in tx.addresses():
            self._by_address[addr].append(tx.txid)

    def _freeze(self) -> None:
        self._heights: List[int] = sorted(self._by_height)
        self._block_ts: List[int] = [self._by_height[h][0].timestamp for h in self._heights]
        self._ts_sorted = all(a <= b for a, b in zip(self._block_ts, self._block_ts[1:]))
        self._by_address = dict(self._by_address)

    # ------------------------------------------------------------------ access

    def __len__(self) -> int:
        return len(self._txs)

    def __iter__(self) -> Iterator[LedgerTx]:
        return iter(self._txs)

    def __contains__(self, txid: object) -> bool:
        return txid in self._by_txid

    def __getitem__(self, txid: str) -> LedgerTx:
        return self._by_txid[txid]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ledger):
            return NotImplemented
        return self.chain == other.chain and self._txs == other._txs

    def get(self, txid: str) -> Optional[LedgerTx]:
        return self._by_txid.get(txid)

    @property
    def txs(self) -> Tuple[LedgerTx, ...]:
        return tuple(self._txs)

    @property
    def heights(self) -> List[int]:
        return list(self._heights)

    def at_height(self, height: int) -> List[LedgerTx]:
        return list(self._by_height.get(height, ()))

    def between(self, low: int, high: int) -> Iterator[LedgerTx]:
        """Transactions with low <= height <= high, in ledger order."""
        start = bisect.bisect_left(self._heights, low)
        stop = bisect.bisect_right(self._heights, high)
        for h in self._heights[start:stop]:
            yield from self._by_height[h]

    def blocks(self) -> Iterator[Tuple[int, List[LedgerTx]]]:
        for h in self._heights:
            yield h, self._by_height[h]

    def for_address(self, addr: str) -> List[LedgerTx]:
        return [self._by_txid[t] for t in self._by_address.get(addr, ())]

    def address_tx_count(self, addr: str) -> int:
        return len(self._by_address.get(addr, ()))

    def addresses(self) -> List[str]:
        return list(self._by_address)

    def spender(self, txid: str, index: int) -> Optional[LedgerTx]:
        """The transaction that spent outpoint (txid, index), if any."""
        spender = self._spent.get((txid, index))
        return self._by_txid[spender] if spender is not None else None

    def closest_height(self, ts: int) -> Optional[int]:
        """Height of the block whose timestamp is closest to ts (ties: lower height)."""
        if not self._heights:
            return None
        if not self._ts_sorted:
            best = min(range(len(self._heights)),
                       key=lambda i: (abs(self._block_ts[i] - ts), self._heights[i]))
            return self._heights[best]
        i = bisect.bisect_left(self._block_ts, ts)
        candidates = [j for j in (i - 1, i) if 0 <= j < len(self._heights)]
        best = min(candidates, key=lambda j: (abs(self._block_ts[j] - ts), self._heights[j]))
        return self._heights[best]


def validate_tx(tx: LedgerTx, chain: ChainId, line: Optional[int] = None) -> None:
    """Check the accounting shape and fee of one record."""
    if chain.accounting is Accounting.ACCOUNT:
        if tx.vin or tx.vout or tx.joinsplits:
            raise MalformedRecordError(f"tx {tx.txid}: account chain records carry only a transfer", line=line)
        if tx.xfer is None:
            raise MalformedRecordError(f"tx {tx.txid}: account chain record without transfer", line=line)
        return
    if tx.xfer is not None:
        raise MalformedRecordError(f"tx {tx.txid}: UTXO chain record with an account transfer", line=line)
    if tx.joinsplits and not chain.joinsplits:
        raise MalformedRecordError(f"tx {tx.txid}: {chain.symbol} has no shielded pool", line=line)
    if tx.coinbase:
        if tx.vin:
            raise MalformedRecordError(f"tx {tx.txid}: coinbase with inputs", line=line)
        return
    if tx.fee < 0:
        raise MalformedRecordError(f"tx {tx.txid}: outputs exceed inputs (fee {tx.fee})", line=line)


# ============================================================================
# JSONL ingestion
# ============================================================================

def _txout(entry: Dict[str, Any], decimals: int, allow_unassigned: bool = False) -> TxOut:
    addr = entry.get("addr")
    if addr is None:
        if not allow_unassigned:
            raise KeyError("addr")
        addr = UNASSIGNED
    elif not isinstance(addr, str) or not addr or addr == UNASSIGNED:
        raise ValueError(f"bad address {addr!r}")
    return TxOut(addr, to_units(entry["value"], decimals))


def _record_to_tx(record: Dict[str, Any], chain: ChainId) -> LedgerTx:
    d = chain.decimals
    if not isinstance(record.get("txid"), str) or not record["txid"]:
        raise ValueError("missing txid")
    vin = tuple(
        TxIn(str(i["src_txid"]), int(i["src_idx"]), str(i["addr"]), to_units(i["value"], d))
        for i in record.get("vin") or ()
    )
    vout = tuple(_txout(o, d) for o in record.get("vout") or ())
    joinsplits = tuple(
        JoinSplit(
            zin=tuple(_txout(o, d) for o in js.get("zin") or ()),
            zout=tuple(_txout(o, d, allow_unassigned=True) for o in js.get("zout") or ()),
        )
        for js in record.get("joinsplits") or ()
    )
    xfer = None
    if record.get("xfer") is not None:
        x = record["xfer"]
        xfer = AccountTransfer(str(x["from"]), str(x["to"]), to_units(x["value"], d),
                               to_units(x.get("fee", "0"), d))
    coinbase = record.get("coinbase", False)
    if not isinstance(coinbase, bool):
        raise ValueError("coinbase must be a boolean")
    return LedgerTx(
        txid=record["txid"],
        chain=chain.symbol,
        height=int(record["height"]),
        timestamp=int(record["ts"]),
        coinbase=coinbase,
        vin=vin,
        vout=vout,
        joinsplits=joinsplits,
        xfer=xfer,
    )


def parse_ledger(path: Union[str, Path], chain: ChainId) -> Ledger:
    """
    Parse a JSONL ledger file.

    Args:
        path: File with one transaction per line
        chain: Chain the ledger belongs to

    Returns:
        Validated, indexed Ledger in (height, intra-block index) order

    Raises:
        MalformedRecordError (with line number), DuplicateTxidError,
        DoubleSpendError, OutOfOrderError
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Ledger file not found: {path}")

    def records() -> Iterator[Tuple[int, LedgerTx]]:
        with path.open() as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    if not isinstance(record, dict):
                        raise ValueError("record is not an object")
                    yield line_no, _record_to_tx(record, chain)
                except InputError as e:
                    raise MalformedRecordError(str(e), line=line_no) from e
                except (KeyError, TypeError, ValueError) as e:
                    raise MalformedRecordError(f"{type(e).__name__}: {e}", line=line_no) from e

    ledger = Ledger._from_records(chain, records())
    logger.info(f"Parsed {len(ledger)} {chain.symbol} transactions from {path}")
    return ledger


def _out_record(o: TxOut, d: int) -> Dict[str, Any]:
    return {"addr": o.addr if o.assigned else None, "value": format_units(o.value, d)}


def tx_to_record(tx: LedgerTx, decimals: int) -> Dict[str, Any]:
    d = decimals
    return {
        "txid": tx.txid,
        "height": tx.height,
        "ts": tx.timestamp,
        "coinbase": tx.coinbase,
        "vin": [{"src_txid": i.src_txid, "src_idx": i.src_idx, "addr": i.addr,
                 "value": format_units(i.value, d)} for i in tx.vin],
        "vout": [_out_record(o, d) for o in tx.vout],
        "joinsplits": [{"zin": [_out_record(o, d) for o in js.zin],
                        "zout": [_out_record(o, d) for o in js.zout]} for js in tx.joinsplits],
        "xfer": None if tx.xfer is None else {
            "from": tx.xfer.sender, "to": tx.xfer.recipient,
            "value": format_units(tx.xfer.value, d), "fee": format_units(tx.xfer.fee, d)},
    }


def serialize_ledger(ledger: Ledger, path: Union[str, Path]) -> None:
    """Write a ledger as JSONL; parse_ledger reads it back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for tx in ledger:
            fh.write(json.dumps(tx_to_record(tx, ledger.chain.decimals), separators=(",", ":")))
            fh.write("\n")


def load_ledgers(directory: Union[str, Path], registry: ChainRegistry) -> Dict[str, Ledger]:
    """Parse every ``<SYMBOL>.jsonl`` ledger found in a chain directory."""
    directory = Path(directory)
    ledgers: Dict[str, Ledger] = {}
    for path in sorted(directory.glob("*.jsonl")):
        if path.stem in registry:
            ledgers[path.stem] = parse_ledger(path, registry.get(path.stem))
    return ledgers


# ============================================================================
# Zcash views
# ============================================================================

def type_counts(ledger: Ledger) -> Dict[ZTxClass, int]:
    counts = Counter(classify_zcash_tx(tx) for tx in ledger)
    return {cls: counts.get(cls, 0) for cls in ZTxClass}


def pool_balance_series(ledger: Ledger) -> List[Tuple[int, int]]:
    """
    Shielded pool balance after every block.

    Returns:
        List of (height, balance in units), one point per block

    Raises:
        NegativePoolError: if withdrawals ever exceed deposits
    """
    balance = 0
    series: List[Tuple[int, int]] = []
    for height, block in ledger.blocks():
        balance += sum(tx.pool_deposit - tx.pool_release for tx in block)
        if balance < 0:
            raise NegativePoolError(f"pool balance {balance} at height {height}", height=height)
        series.append((height, balance))
    return series


def month_of(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m")


def joinsplit_activity(ledger: Ledger) -> Dict[str, Any]:
    """Monthly z-to-z activity: transactions and joinsplits, and the single-joinsplit share."""
    per_month: Dict[str, Dict[str, int]] = defaultdict(lambda: {"transactions": 0, "joinsplits": 0})
    total = single = 0
    for tx in ledger:
        if classify_zcash_tx(tx) is not ZTxClass.PRIVATE:
            continue
        bucket = per_month[month_of(tx.timestamp)]
        bucket["transactions"] += 1
        bucket["joinsplits"] += len(tx.joinsplits)
        total += 1
        single += len(tx.joinsplits) == 1
    return {
        "private_transactions": total,
        "single_joinsplit_share": single / total if total else 0.0,
        "per_month": dict(sorted(per_month.items())),
    }

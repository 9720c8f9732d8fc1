"""
Synthetic worlds with ground truth.

Builds valid multi-chain ledgers, a shift stream with its oracle fixture,
and the set of links a perfect analyst would find: pass-throughs, U-turns,
round trips, founder and miner withdrawals, unique-value pool round trips
and CoinJoins. Every random choice comes from a labeled substream of the
world seed, so adding a chain leaves the others untouched.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from pydantic import ValidationError

from app.core.clustering import TagCategory, TagMap, export_tags, load_tags, tx_input_addresses
from app.core.errors import InputError, InvalidParamsError
from app.core.evidence import LinkEvidence, LinkKind, read_evidence, write_evidence
from app.core.ledger import (
    BUILTIN_CHAINS,
    UNASSIGNED,
    AccountTransfer,
    Address,
    ChainId,
    ChainRegistry,
    JoinSplit,
    Ledger,
    LedgerTx,
    TxIn,
    TxOut,
    load_ledgers,
    serialize_ledger,
    to_units,
    validate_tx,
)
from app.core.shifts import (
    ShiftRecord,
    ShiftStatus,
    ShiftStatusCode,
    load_oracle,
    load_shifts,
    write_oracle,
    write_shifts,
)
from app.models.schemas import GenParams, KindScore, ScoreReport

logger = logging.getLogger(__name__)

BLOCK_TIMES = {"BTC": 600, "BCH": 600, "LTC": 150, "DOGE": 60, "ZEC": 150, "DASH": 150, "ETH": 15, "ETC": 15}
ADDRESS_PREFIX = {"BTC": "1", "BCH": "q", "LTC": "L", "DOGE": "D", "DASH": "X", "ZEC": "t1", "ETH": "0x", "ETC": "0x"}
DEFAULT_START = 1_500_000_000
SHIFT_SERVICE = "shapeshift"

Payouts = Sequence[Tuple[str, int]]
Outpoint = Tuple[str, int]


def _digest(*parts: object) -> str:
    return hashlib.sha256(":".join(str(p) for p in parts).encode()).hexdigest()


def _default_fee(chain: ChainId) -> int:
    if chain.is_utxo:
        return to_units("0.0001", chain.decimals) if chain.decimals >= 4 else 1
    return to_units("0.00021", chain.decimals) if chain.decimals >= 5 else 1


# ============================================================================
# Ledger builders
# ============================================================================

class LedgerBuilder:
    """
    Builds a valid UTXO ledger transaction by transaction.

    Transactions land in the block covering their timestamp (never earlier
    than the current tip). Spent outputs are tracked, so building never
    double-spends, and the shielded pool balance is tracked for chains with
    joinsplits.
    """

    def __init__(self, chain: ChainId, start_ts: int = DEFAULT_START,
                 block_time: Optional[int] = None, salt: str = ""):
        if not chain.is_utxo:
            raise InputError(f"{chain.symbol} is an account chain; use AccountLedgerBuilder")
        self.chain = chain
        self.start_ts = start_ts
        self.block_time = block_time or BLOCK_TIMES.get(chain.symbol, 600)
        self.fee = _default_fee(chain)
        self.used_values: Set[int] = set()
        self.pool = 0
        self.height = 0
        self._salt = salt
        self._txs: List[LedgerTx] = []
        self._block_size: Counter = Counter()
        self._unspent: Dict[Outpoint, TxOut] = {}
        self._owned: Dict[str, List[Outpoint]] = defaultdict(list)

    def __len__(self) -> int:
        return len(self._txs)

    def height_for(self, ts: int) -> int:
        return max(self.height, (ts - self.start_ts) // self.block_time, 0)

    def block_ts(self, height: int) -> int:
        return self.start_ts + height * self.block_time

    def unique(self, value: int) -> int:
        """Reserve the first unused value at or above ``value``."""
        while value in self.used_values:
            value += 1
        self.used_values.add(value)
        return value

    def _unique_down(self, value: int) -> int:
        while value in self.used_values and value > 0:
            value -= 1
        self.used_values.add(value)
        return value

    def _emit(self, ts: int, vin: Sequence[TxIn] = (), vout: Payouts = (),
              joinsplits: Sequence[JoinSplit] = (), coinbase: bool = False) -> LedgerTx:
        height = self.height_for(ts)
        self.height = height
        txid = _digest(self._salt, self.chain.symbol, len(self._txs))[:32]
        tx = LedgerTx(
            txid=txid, chain=self.chain.symbol, height=height, timestamp=self.block_ts(height),
            coinbase=coinbase, vin=tuple(vin), vout=tuple(TxOut(a, v) for a, v in vout),
            joinsplits=tuple(joinsplits), index=self._block_size[height],
        )
        validate_tx(tx, self.chain)
        for i in tx.vin:
            del self._unspent[i.outpoint]
        for idx, out in enumerate(tx.vout):
            self._unspent[(txid, idx)] = out
            self._owned[out.addr].append((txid, idx))
        self._block_size[height] += 1
        self._txs.append(tx)
        return tx

    def _inputs(self, outpoints: Iterable[Outpoint]) -> List[TxIn]:
        vin = []
        for op in outpoints:
            out = self._unspent.get(op)
            if out is None:
                raise InputError(f"outpoint {op[0]}:{op[1]} is not unspent")
            vin.append(TxIn(op[0], op[1], out.addr, out.value))
        return vin

    def unspent_of(self, addr: str) -> List[Outpoint]:
        return [op for op in self._owned.get(addr, ()) if op in self._unspent]

    def coinbase(self, ts: int, payouts: Payouts) -> LedgerTx:
        return self._emit(ts, vout=payouts, coinbase=True)

    def fund(self, ts: int, addr: str, value: int) -> Outpoint:
        """A coinbase paying exactly ``value`` to ``addr``; returns the new outpoint."""
        tx = self.coinbase(ts, [(addr, value)])
        return (tx.txid, 0)

    def spend(self, ts: int, outpoints: Sequence[Outpoint], payouts: Payouts,
              change: Optional[str] = None, fee: Optional[int] = None) -> LedgerTx:
        """Spend outpoints; the remainder after fee goes to ``change`` (kept unique)."""
        vin = self._inputs(outpoints)
        fee = self.fee if fee is None else fee
        rest = sum(i.value for i in vin) - sum(v for _, v in payouts) - fee
        if rest < 0:
            raise InputError(f"inputs short by {-rest} units")
        vout = list(payouts)
        if change is not None and rest > 0:
            vout.append((change, self._unique_down(rest)))
        return self._emit(ts, vin=vin, vout=vout)

    def pay(self, ts: int, sender: Union[str, Sequence[str]], payouts: Payouts,
            change: Optional[str] = None, fee: Optional[int] = None) -> LedgerTx:
        """Spend the oldest outputs of the sender address(es) until the payouts are covered."""
        senders = [sender] if isinstance(sender, str) else list(sender)
        need = sum(v for _, v in payouts) + (self.fee if fee is None else fee)
        chosen: List[Outpoint] = []
        total = 0
        for addr in senders:
            for op in self.unspent_of(addr):
                if total >= need:
                    break
                chosen.append(op)
                total += self._unspent[op].value
        if total < need:
            raise InputError(f"{senders} cannot cover {need} units")
        return self.spend(ts, chosen, payouts, change or senders[0], fee)

    def shield(self, ts: int, outpoints: Sequence[Outpoint], fee: Optional[int] = None,
               exact: bool = False) -> LedgerTx:
        """t-to-z: everything but the fee enters the pool from the first input's address."""
        vin = self._inputs(outpoints)
        fee = self.fee if fee is None else fee
        value = sum(i.value for i in vin) - fee
        if value <= 0:
            raise InputError("nothing left to shield")
        if not exact:
            value = self._unique_down(value)
        self.pool += value
        return self._emit(ts, vin=vin, joinsplits=[JoinSplit(zin=(TxOut(vin[0].addr, value),))])

    def deshield(self, ts: int, payouts: Payouts, fee: Optional[int] = None) -> LedgerTx:
        """z-to-t: pays out of the pool; the fee is an unassigned zOut entry."""
        fee = self.fee if fee is None else fee
        released = sum(v for _, v in payouts) + fee
        if released > self.pool:
            raise InputError(f"pool holds {self.pool} units, cannot release {released}")
        self.pool -= released
        zout = tuple(TxOut(a, v) for a, v in payouts) + (TxOut(UNASSIGNED, fee),)
        return self._emit(ts, vout=payouts, joinsplits=[JoinSplit(zout=zout)])

    def private(self, ts: int, joinsplits: int = 1, fee: Optional[int] = None) -> LedgerTx:
        """z-to-z: only the fee leaves the pool."""
        fee = self.fee if fee is None else fee
        if fee > self.pool:
            raise InputError("pool cannot pay the fee")
        self.pool -= fee
        splits = [JoinSplit(zout=(TxOut(UNASSIGNED, fee),))] + [JoinSplit() for _ in range(joinsplits - 1)]
        return self._emit(ts, joinsplits=splits)

    def build(self) -> Ledger:
        return Ledger(self.chain, self._txs)


class AccountLedgerBuilder:
    """Builds an account-chain ledger of plain transfers."""

    def __init__(self, chain: ChainId, start_ts: int = DEFAULT_START,
                 block_time: Optional[int] = None, salt: str = ""):
        if chain.is_utxo:
            raise InputError(f"{chain.symbol} is a UTXO chain; use LedgerBuilder")
        self.chain = chain
        self.start_ts = start_ts
        self.block_time = block_time or BLOCK_TIMES.get(chain.symbol, 15)
        self.fee = _default_fee(chain)
        self.used_values: Set[int] = set()
        self.height = 0
        self._salt = salt
        self._txs: List[LedgerTx] = []

    def __len__(self) -> int:
        return len(self._txs)

    def height_for(self, ts: int) -> int:
        return max(self.height, (ts - self.start_ts) // self.block_time, 0)

    def block_ts(self, height: int) -> int:
        return self.start_ts + height * self.block_time

    def unique(self, value: int) -> int:
        while value in self.used_values:
            value += 1
        self.used_values.add(value)
        return value

    def transfer(self, ts: int, sender: str, recipient: str, value: int, fee: Optional[int] = None) -> LedgerTx:
        height = self.height_for(ts)
        self.height = height
        tx = LedgerTx(
            txid="0x" + _digest(self._salt, self.chain.symbol, len(self._txs))[:40],
            chain=self.chain.symbol, height=height, timestamp=self.block_ts(height),
            xfer=AccountTransfer(sender, recipient, value, self.fee if fee is None else fee),
        )
        validate_tx(tx, self.chain)
        self._txs.append(tx)
        return tx

    def build(self) -> Ledger:
        return Ledger(self.chain, self._txs)


# ============================================================================
# World
# ============================================================================

@dataclass
class SyntheticWorld:
    seed: int
    params: GenParams
    ledgers: Dict[str, Ledger]
    shifts: List[ShiftRecord]
    oracle: List[ShiftStatus]
    truth: List[LinkEvidence]
    entities: Dict[str, Dict[str, List[str]]]
    tags: TagMap
    stats: Dict[str, Any] = field(default_factory=dict)

    def truth_of(self, kind: LinkKind) -> List[LinkEvidence]:
        return [link for link in self.truth if link.kind is kind]

    def owner_of(self) -> Dict[Address, str]:
        return {Address(chain, a): entity
                for entity, chains in self.entities.items()
                for chain, addrs in chains.items() for a in addrs}


@dataclass
class _Shift:
    record: ShiftRecord
    deposit: LedgerTx
    user: str
    payout: Optional[LedgerTx] = None
    withdraw: Optional[str] = None
    out_coin: int = 0


@dataclass
class _ReturnHook:
    """Steers the payout of a return shift and records it as XRT truth when it qualifies."""
    gen: "_WorldGenerator"
    first: _Shift
    origin: Tuple[str, ...]
    back_to: Optional[str]
    tight: bool

    def withdraw_to(self, chain: str) -> str:
        return self.back_to or self.gen.new_address(chain, self.first.user)

    def __call__(self, second: _Shift) -> None:
        first, x = self.first, self.first.record.cur_in
        if self.tight and self.gen._verify(first, second, Fraction(5, 1000)):
            self.gen.truth.append(LinkEvidence(
                kind=LinkKind.XRT,
                src_txs=(first.deposit.txid,), src_addrs=tuple(Address(x, a) for a in self.origin),
                dst_txs=(second.payout.txid,), dst_addrs=(Address(x, second.withdraw),),
                value=second.out_coin, chain=x,
                meta={"same_address": second.withdraw in self.origin},
            ))
            self.gen.stats["xrt"] += 1


class _WorldGenerator:
    def __init__(self, params: GenParams, seed: int):
        self.p = params
        self.seed = seed
        self.chains = {s: BUILTIN_CHAINS[s] for s in params.chains}
        self.builders: Dict[str, Union[LedgerBuilder, AccountLedgerBuilder]] = {}
        for sym, chain in self.chains.items():
            cls = LedgerBuilder if chain.is_utxo else AccountLedgerBuilder
            self.builders[sym] = cls(chain, params.start_ts, salt=f"{seed}")
        self._rngs: Dict[str, random.Random] = {}
        self._queue: List[Tuple[int, int, Callable[[int], None]]] = []
        self._seq = 0
        self._addr_seq: Counter = Counter()
        self.entities: Dict[str, Dict[str, List[str]]] = defaultdict(lambda: defaultdict(list))
        self.truth: List[LinkEvidence] = []
        self.shifts: List[ShiftRecord] = []
        self.statuses: List[ShiftStatus] = []
        self.tags = TagMap()
        self.stats: Counter = Counter()
        self.users = [f"entity-{i:03d}" for i in range(params.n_entities)]

    # ------------------------------------------------------------- plumbing

    def rng(self, label: str) -> random.Random:
        if label not in self._rngs:
            self._rngs[label] = random.Random(f"{self.seed}:{label}")
        return self._rngs[label]

    def at(self, ts: int, action: Callable[[int], None]) -> None:
        heapq.heappush(self._queue, (ts, self._seq, action))
        self._seq += 1

    def new_address(self, chain: str, owner: str, shielded: bool = False) -> str:
        self._addr_seq[chain] += 1
        digest = _digest(self.seed, chain, self._addr_seq[chain], owner)
        if shielded:
            value = "zc" + digest[:60]
        else:
            prefix = ADDRESS_PREFIX.get(chain, chain.lower())
            value = prefix + digest[:40 if prefix == "0x" else 33]
        self.entities[owner][chain].append(value)
        return value

    def address_of(self, owner: str, chain: str, index: int = 0) -> str:
        addrs = self.entities[owner][chain]
        while len(addrs) <= index:
            self.new_address(chain, owner)
        return addrs[index]

    def draw(self, rng: random.Random, chain: str, low: str = "0.5", high: str = "20") -> int:
        """A value with more than three decimals, unique on its chain."""
        decimals = self.chains[chain].decimals
        digits = min(decimals, 8)
        k = rng.randint(int(Decimal(low).scaleb(digits)), int(Decimal(high).scaleb(digits)))
        if digits > 3 and k % 10 ** (digits - 3) == 0:
            k += 1
        return self.builders[chain].unique(k * 10 ** (decimals - digits))

    def _utxo(self, chain: str) -> Optional[LedgerBuilder]:
        b = self.builders.get(chain)
        return b if isinstance(b, LedgerBuilder) else None

    def _time(self, rng: random.Random) -> int:
        return self.p.start_ts + rng.randint(600, self.p.duration)

    # -------------------------------------------------------------- payments

    def _send(self, ts: int, chain: str, sender: str, recipient: str, value: int,
              outpoint: Optional[Outpoint] = None) -> LedgerTx:
        """Pay ``value`` from sender; UTXO senders are funded exactly when no outpoint is given."""
        b = self.builders[chain]
        if isinstance(b, AccountLedgerBuilder):
            return b.transfer(ts, sender, recipient, value)
        if outpoint is None:
            extra = self.draw(self.rng(f"change:{chain}"), chain, "0.01", "1")
            outpoint = b.fund(ts, sender, b.unique(value + b.fee + extra))
        return b.spend(ts, [outpoint], [(recipient, value)], change=sender)

    # ----------------------------------------------------------------- noise

    def schedule_noise(self) -> None:
        for chain in self.chains:
            rng = self.rng(f"noise:{chain}")
            for user in self.users:
                n_addrs = rng.randint(1, 3)
                for k in range(n_addrs):
                    self.address_of(user, chain, k)
                for _ in range(self.p.txs_per_entity):
                    ts = self._time(rng)
                    other = rng.choice(self.users)
                    cospend = n_addrs > 1 and rng.random() < 0.5
                    self.at(ts, lambda t, c=chain, u=user, o=other, m=cospend: self._noise_tx(t, c, u, o, m))

    def _noise_tx(self, ts: int, chain: str, user: str, other: str, cospend: bool) -> None:
        rng = self.rng(f"noise-values:{chain}")
        recipient = self.address_of(other, chain, 0)
        value = self.draw(rng, chain, "0.01", "5")
        b = self.builders[chain]
        if isinstance(b, AccountLedgerBuilder):
            b.transfer(ts, self.address_of(user, chain, 0), recipient, value)
            return
        senders = self.entities[user][chain][:2 if cospend else 1]
        share = b.unique(value // len(senders) + b.fee + 1)
        outpoints = [b.fund(ts, s, b.unique(share + self.draw(rng, chain, "0.01", "1"))) for s in senders]
        b.spend(ts, outpoints, [(recipient, value)], change=senders[0])

    # ---------------------------------------------------------------- shifts

    def schedule_shifts(self) -> None:
        if len(self.chains) < 2:
            return
        rng = self.rng("shifts")
        symbols = sorted(self.chains)
        for n in range(self.p.n_shifts):
            x, y = rng.sample(symbols, 2)
            user = rng.choice(self.users)
            self.at(self._time(rng), lambda t, i=n, a=x, b=y, u=user: self._shift_deposit(t, f"s{i:05d}", a, b, u))

    def _shift_deposit(self, ts: int, shift_id: str, x: str, y: str, user: str,
                       outpoint: Optional[Outpoint] = None, sender: Optional[str] = None,
                       amount: Optional[int] = None, on_paid: Optional["_ReturnHook"] = None) -> _Shift:
        rng = self.rng("shift-values")
        b = self.builders[x]
        addr_s = self.new_address(x, SHIFT_SERVICE)
        amt = amount if amount is not None else self.draw(rng, x)
        sender = sender or self.address_of(user, x, 0)
        injected = on_paid is not None

        if outpoint is None and x == "ZEC" and not injected and self.rng("interactions").random() < self.p.pool_interaction_rate:
            zb = self._utxo("ZEC")
            extra = self.draw(rng, x, "0.01", "1")
            tx = zb.deshield(ts, [(sender, zb.unique(amt + zb.fee + extra))])
            outpoint = (tx.txid, 0)
            self.stats["type3"] += 1
            self.stats["type3_value"] += amt
        deposit = self._send(ts, x, sender, addr_s, amt, outpoint)

        if self.rng("collisions").random() < self.p.collision_rate:
            decoy = self.new_address(x, "decoys")
            if isinstance(b, LedgerBuilder):
                b.coinbase(ts, [(decoy, amt)])
            else:
                b.transfer(ts, self.address_of("decoys", x, 0), decoy, amt)
            self.stats["collisions"] += 1

        jitter = self.rng("jitter").randrange(0, max(b.block_time // 2, 1))
        record = ShiftRecord(shift_id, x, y, amt, deposit.timestamp + jitter)
        self.shifts.append(record)
        shift = _Shift(record, deposit, user)

        if not injected and self.rng("errors").random() < self.p.shift_error_rate:
            self.statuses.append(ShiftStatus(Address.of(x, addr_s), ShiftStatusCode.ERROR,
                                             in_coin=amt, in_type=x, error="shift failed"))
            self.stats["errors"] += 1
            return shift
        delay = self.builders[y].block_time + self.rng("delays").randint(30, 240)
        self.at(ts + delay, lambda t: self._shift_payout(t, shift, addr_s, on_paid))
        return shift

    def _shift_payout(self, ts: int, shift: _Shift, addr_s: str,
                      on_paid: Optional["_ReturnHook"]) -> None:
        x, y = shift.record.cur_in, shift.record.cur_out
        rng = self.rng("payouts")
        out_coin = self.draw(rng, y)
        hot = self.address_of(SHIFT_SERVICE + "-hot", y, 0)
        shielded = False
        if y == "ZEC" and on_paid is None and self.rng("interactions").random() < self.p.pool_interaction_rate:
            shielded = rng.random() < 0.5
        if shielded:
            zb = self._utxo("ZEC")
            withdraw = self.new_address("ZEC", shift.user, shielded=True)
            op = zb.fund(ts, hot, zb.unique(out_coin + zb.fee))
            payout = zb.shield(ts, [op], exact=True)
            self.stats["type1"] += 1
            self.stats["type1_value"] += out_coin
        else:
            withdraw = self.address_of(shift.user, y, 0) if on_paid is None else on_paid.withdraw_to(y)
            payout = self._send(ts, y, hot, withdraw, out_coin)
            if y == "ZEC" and on_paid is None and self.rng("interactions").random() < self.p.pool_interaction_rate:
                index = next(i for i, o in enumerate(payout.vout) if o.addr == withdraw)
                self.at(ts + self.rng("delays").randint(60, 600),
                        lambda t, op=(payout.txid, index): self._utxo("ZEC").shield(t, [op]))
                self.stats["type2"] += 1
                self.stats["type2_value"] += out_coin

        shift.payout, shift.withdraw, shift.out_coin = payout, withdraw, out_coin
        self.statuses.append(ShiftStatus(
            address=Address.of(x, addr_s), status=ShiftStatusCode.COMPLETE,
            withdraw=Address.of(y, withdraw), in_coin=shift.record.amt, in_type=x,
            out_coin=out_coin, out_type=y, tx=payout.txid,
        ))
        self.truth.append(LinkEvidence(
            kind=LinkKind.PASS_THROUGH,
            src_txs=(shift.deposit.txid,),
            src_addrs=tuple(Address(x, a) for a in tx_input_addresses(shift.deposit)),
            dst_txs=(payout.txid,), dst_addrs=(Address.of(y, withdraw),),
            value=shift.record.amt, chain=x, meta={"shift_id": shift.record.id},
        ))
        if on_paid is not None:
            on_paid(shift)
        elif not shielded:
            draw = self.rng("returns").random()
            if draw < self.p.xrt_rate:
                self._schedule_return(ts, shift, tight=True)
            elif draw < self.p.xrt_rate + self.p.uturn_rate:
                self._schedule_return(ts, shift, tight=False)

    # ------------------------------------------------------ U-turns and XRTs

    def _schedule_return(self, ts: int, first: _Shift, tight: bool) -> None:
        self.at(ts + self.rng("delays").randint(270, 420), lambda t: self._return(t, first, tight))

    def _return(self, ts: int, first: _Shift, tight: bool) -> None:
        """Shift the first payout straight back: same coin, same address, or another address."""
        rng = self.rng("returns-shape")
        x, y = first.record.cur_in, first.record.cur_out
        b = self.builders[y]
        drift = Fraction(rng.randint(10, 40 if tight else 90), 10_000)
        amt = b.unique(first.out_coin - max(int(first.out_coin * drift), 2 * b.fee))
        variant = rng.choice(("utxo", "addr", "basic") if isinstance(b, LedgerBuilder) else ("addr", "basic"))
        outpoint = None
        sender = first.withdraw
        if isinstance(b, LedgerBuilder):
            if variant == "utxo":
                index = next(i for i, o in enumerate(first.payout.vout) if o.addr == first.withdraw)
                outpoint = (first.payout.txid, index)
            elif variant == "addr":
                outpoint = b.fund(ts, sender, b.unique(amt + b.fee + self.draw(rng, y, "0.01", "1")))
        if variant == "basic":
            sender = self.new_address(y, first.user)

        origin = tuple(tx_input_addresses(first.deposit))
        back_to = origin[0] if tight and rng.random() < 0.5 else None

        second = self._shift_deposit(ts, f"{first.record.id}r", y, x, first.user,
                                     outpoint=outpoint, sender=sender, amount=amt,
                                     on_paid=_ReturnHook(self, first, origin, back_to, tight))
        if not self._verify(first, second, Fraction(1, 100)):
            return
        tiers = [LinkKind.UTURN_BASIC]
        if variant in ("utxo", "addr"):
            tiers.append(LinkKind.UTURN_ADDR)
        if variant == "utxo":
            tiers.append(LinkKind.UTURN_UTXO)
        for kind in tiers:
            self.truth.append(LinkEvidence(
                kind=kind, src_txs=(first.payout.txid,), src_addrs=(Address(y, first.withdraw),),
                dst_txs=(second.deposit.txid,),
                dst_addrs=tuple(Address(y, a) for a in tx_input_addresses(second.deposit)),
                value=amt, chain=y,
            ))
        self.stats["uturns"] += 1

    @staticmethod
    def _verify(first: _Shift, second: _Shift, tol: Fraction, window: int = 1800) -> bool:
        gap = second.record.t - first.record.t
        return 0 < gap <= window and abs(second.record.amt - first.out_coin) <= tol * first.out_coin

    # ------------------------------------------------------------ Zcash pool

    def schedule_pool(self) -> None:
        zb = self._utxo("ZEC")
        if zb is None:
            return
        start = self.p.start_ts
        reserve = self.new_address("ZEC", "reserve")
        self.at(start, lambda t: zb.shield(t, [zb.fund(t, reserve, zb.unique(to_units("1000000", 8)))]))

        rng = self.rng("pool")
        if self.p.founder_schedule:
            self._schedule_founders(start + 300)
        founder_rng = self.rng("founder-withdrawals")
        for _ in range(self.p.founder_withdrawals):
            self.at(self._time(founder_rng), self._founder_withdrawal)

        pool_addr = self.new_address("ZEC", "pool")
        self.tags.add(Address("ZEC", pool_addr), "SynthPool", TagCategory.POOL)
        miners = [self.new_address("ZEC", "miners") for _ in range(max(self.p.miner_fanout - 1, 0))]
        for _ in range(self.p.miner_payouts):
            self.at(self._time(rng), lambda t: self._miner_payout(t, pool_addr, miners))

        for _ in range(self.p.round_trips):
            user = rng.choice(self.users)
            gap = rng.randint(0, self.p.round_trip_max_gap)
            self.at(self._time(rng), lambda t, u=user, g=gap: self._round_trip(t, u, g))

        for n in range(self.p.pool_noise):
            user = rng.choice(self.users)
            action = (self._pool_deposit, self._pool_withdrawal, self._pool_private)[n % 3]
            self.at(self._time(rng), lambda t, u=user, f=action: f(t, u))

    def _schedule_founders(self, ts: int) -> None:
        zb = self._utxo("ZEC")
        rng = self.rng("founders")
        reward = to_units("250", 8)
        deposit = to_units("249.9999", 8)
        cap = to_units("44272.5", 8)
        state = {"addr": None, "total": 0}

        def founder_deposit(t: int) -> None:
            if state["addr"] is None or state["total"] + deposit > cap:
                state["addr"] = self.new_address("ZEC", "founders")
                state["total"] = 0
                self.tags.add(Address("ZEC", state["addr"]), "founders", TagCategory.FOUNDER)
                self.stats["founder_addresses"] += 1
            tx = zb.coinbase(t, [(state["addr"], reward)])
            zb.shield(t, [(tx.txid, 0)], fee=reward - deposit, exact=True)
            state["total"] += deposit
            self.stats["founder_deposits"] += 1

        for _ in range(self.p.founder_deposits):
            self.at(ts, founder_deposit)
            ts += rng.randint(6, 10) * zb.block_time

    def _founder_withdrawal(self, ts: int) -> None:
        zb = self._utxo("ZEC")
        recipient = self.new_address("ZEC", "founders")
        tx = zb.deshield(ts, [(recipient, to_units("250.0001", 8))])
        self.truth.append(LinkEvidence(kind=LinkKind.FOUNDER_VALUE, dst_txs=(tx.txid,),
                                       dst_addrs=(Address("ZEC", recipient),), value=tx.pool_withdrawal,
                                       chain="ZEC"))

    def _miner_payout(self, ts: int, pool_addr: str, miners: List[str]) -> None:
        zb = self._utxo("ZEC")
        rng = self.rng("miner-values")
        zb.coinbase(ts, [(pool_addr, zb.unique(to_units("10", 8)))])
        payouts = [(pool_addr, self.draw(rng, "ZEC", "0.01", "1"))]
        payouts += [(m, self.draw(rng, "ZEC", "0.01", "1")) for m in miners]
        tx = zb.deshield(ts, payouts)
        self.truth.append(LinkEvidence(kind=LinkKind.MINER_PAYOUT, dst_txs=(tx.txid,),
                                       dst_addrs=tuple(Address("ZEC", a) for a, _ in payouts),
                                       value=tx.pool_withdrawal, chain="ZEC"))

    def _round_trip(self, ts: int, user: str, gap: int) -> None:
        zb = self._utxo("ZEC")
        rng = self.rng("round-trips")
        value = self.draw(rng, "ZEC")
        src = self.address_of(user, "ZEC", 0)
        dep = zb.shield(ts, [zb.fund(ts, src, zb.unique(value + zb.fee))], exact=True)
        if dep.pool_deposit != value:
            raise InputError("round-trip deposit lost its value")

        def withdraw(t: int) -> None:
            wd = zb.deshield(t, [(self.new_address("ZEC", user), value)])
            if wd.height - dep.height <= self.p.round_trip_max_gap:
                self.truth.append(LinkEvidence(
                    kind=LinkKind.ROUND_TRIP_UNIQUE, src_txs=(dep.txid,), src_addrs=(Address("ZEC", src),),
                    dst_txs=(wd.txid,), dst_addrs=tuple(Address("ZEC", a) for a in wd.zout_addresses),
                    value=value, chain="ZEC", meta={"gap": wd.height - dep.height},
                ))
        self.at(ts + gap * zb.block_time, withdraw)

    def _pool_deposit(self, ts: int, user: str) -> None:
        zb = self._utxo("ZEC")
        src = self.address_of(user, "ZEC", 0)
        zb.shield(ts, [zb.fund(ts, src, self.draw(self.rng("pool-values"), "ZEC"))])

    def _pool_withdrawal(self, ts: int, user: str) -> None:
        zb = self._utxo("ZEC")
        zb.deshield(ts, [(self.address_of(user, "ZEC", 0), self.draw(self.rng("pool-values"), "ZEC"))])

    def _pool_private(self, ts: int, user: str) -> None:
        self._utxo("ZEC").private(ts, joinsplits=1 + self.rng("pool-values").random().__lt__(0.1))

    # --------------------------------------------------------------- CoinJoin

    def schedule_coinjoins(self) -> None:
        if self._utxo("DASH") is None:
            return
        rng = self.rng("coinjoins")
        for n in range(self.p.coinjoins):
            self.at(self._time(rng), lambda t, i=n: self._coinjoin(t, i))

    def _coinjoin(self, ts: int, n: int) -> None:
        db = self._utxo("DASH")
        rng = self.rng("coinjoin-values")
        denomination = to_units(rng.choice(("0.1", "1", "10")), 8)
        denominations = {to_units(d, 8) for d in ("0.01", "0.1", "1", "10")}
        participants = [f"mixer-{n:03d}-{k}" for k in range(rng.randint(3, 5))]
        outpoints = []
        total = 0
        for who in participants:
            value = db.unique(int(denomination * Fraction(rng.randint(110, 300), 100)) + rng.randint(1, 10**4))
            outpoints.append(db.fund(ts, self.new_address("DASH", who), value))
            total += value
        count = (total - db.fee) // denomination
        rest = total - db.fee - count * denomination
        fee = db.fee
        while rest in denominations or (rest and rest in db.used_values):
            rest -= 1
            fee += 1
        payouts = [(self.new_address("DASH", participants[k % len(participants)]), denomination)
                   for k in range(count)]
        if rest:
            payouts.append((self.new_address("DASH", participants[0]), rest))
            db.used_values.add(rest)
        tx = db.spend(ts, outpoints, payouts, fee=fee)
        self.truth.append(LinkEvidence(
            kind=LinkKind.COINJOIN, src_txs=(tx.txid,),
            src_addrs=tuple(Address("DASH", a) for a in tx.input_addresses),
            dst_addrs=tuple(Address("DASH", a) for a in tx.output_addresses),
            value=denomination * count, chain="DASH",
        ))

    # ------------------------------------------------------------------- run

    def tag_exchanges(self) -> None:
        for i, user in enumerate(self.users[:3]):
            for chain in sorted(self.chains):
                addrs = self.entities[user].get(chain)
                if addrs and self.chains[chain].is_utxo:
                    self.tags.add(Address(chain, addrs[0]), f"Exchange-{i}", TagCategory.EXCHANGE)
        for chain, addrs in sorted(self.entities[SHIFT_SERVICE + "-hot"].items()):
            for a in addrs:
                self.tags.add(Address(chain, a), "ShapeShift", TagCategory.SERVICE)

    def run(self) -> SyntheticWorld:
        self.schedule_noise()
        self.schedule_pool()
        self.schedule_coinjoins()
        self.schedule_shifts()
        while self._queue:
            ts, _, action = heapq.heappop(self._queue)
            action(ts)
        self.tag_exchanges()
        ledgers = {sym: b.build() for sym, b in sorted(self.builders.items())}
        world = SyntheticWorld(
            seed=self.seed, params=self.p, ledgers=ledgers,
            shifts=sorted(self.shifts, key=lambda s: (s.t, s.id)),
            oracle=sorted(self.statuses, key=lambda s: s.address),
            truth=sorted(self.truth, key=lambda link: (link.kind.value, link.key())),
            entities={e: {c: list(a) for c, a in sorted(chains.items())} for e, chains in sorted(self.entities.items())},
            tags=self.tags, stats=dict(sorted(self.stats.items())),
        )
        logger.info(
            f"Generated world seed={self.seed}: "
            + ", ".join(f"{s} {len(l)} txs" for s, l in ledgers.items())
            + f", {len(world.shifts)} shifts, {len(world.truth)} true links"
        )
        return world


def generate(params: Union[GenParams, Mapping[str, Any], None] = None, seed: int = 0) -> SyntheticWorld:
    """
    Generate a world, deterministic for (params, seed).

    Raises:
        InvalidParamsError: if params fail validation or name unknown chains
    """
    try:
        if params is None:
            params = GenParams()
        elif not isinstance(params, GenParams):
            params = GenParams.model_validate(params)
    except ValidationError as e:
        raise InvalidParamsError(f"invalid generator parameters: {e.errors()[0]['msg']}") from e
    unknown = [c for c in params.chains if c not in BUILTIN_CHAINS]
    if unknown:
        raise InvalidParamsError(f"unknown chains {unknown}")
    return _WorldGenerator(params, seed).run()


# ============================================================================
# World bundle
# ============================================================================

def write_world(world: SyntheticWorld, directory: Union[str, Path]) -> List[Path]:
    """Write ledgers, manifests, shifts, oracle, truth, entities, tags and params."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    registry = ChainRegistry()
    written = []
    for sym, ledger in world.ledgers.items():
        manifest = directory / f"{sym}.json"
        manifest.write_text(json.dumps(ledger.chain.to_manifest(), indent=2))
        serialize_ledger(ledger, directory / f"{sym}.jsonl")
        written += [manifest, directory / f"{sym}.jsonl"]
    write_shifts(world.shifts, directory / "shifts.csv", registry)
    write_oracle(world.oracle, directory / "oracle.csv", registry)
    write_evidence(world.truth, directory / "truth.jsonl")
    (directory / "entities.json").write_text(json.dumps(world.entities, indent=2, sort_keys=True))
    export_tags(world.tags, directory / "tags.csv")
    (directory / "params.json").write_text(json.dumps(
        {"seed": world.seed, "params": world.params.model_dump(mode="json"), "stats": world.stats},
        indent=2, sort_keys=True))
    written += [directory / n for n in
                ("shifts.csv", "oracle.csv", "truth.jsonl", "entities.json", "tags.csv", "params.json")]
    logger.info(f"Wrote world bundle to {directory}")
    return written


def load_world(directory: Union[str, Path]) -> SyntheticWorld:
    directory = Path(directory)
    if not (directory / "params.json").is_file():
        raise InputError(f"{directory} is not a world bundle")
    meta = json.loads((directory / "params.json").read_text())
    registry = ChainRegistry.from_directory(directory)
    return SyntheticWorld(
        seed=meta["seed"],
        params=GenParams.model_validate(meta["params"]),
        ledgers=load_ledgers(directory, registry),
        shifts=load_shifts(directory / "shifts.csv", registry),
        oracle=load_oracle(directory / "oracle.csv", registry).statuses(),
        truth=read_evidence(directory / "truth.jsonl"),
        entities=json.loads((directory / "entities.json").read_text()),
        tags=load_tags(directory / "tags.csv"),
        stats=meta.get("stats", {}),
    )


# ============================================================================
# Scoring
# ============================================================================

def _kind_score(pred: Set[Tuple], truth: Set[Tuple]) -> KindScore:
    tp = len(pred & truth)
    return KindScore(
        predicted=len(pred), truth=len(truth), true_positives=tp,
        precision=tp / len(pred) if pred else 1.0,
        recall=tp / len(truth) if truth else 1.0,
        zero_predictions=not pred,
    )


def score(
    predicted: Iterable[LinkEvidence],
    truth: Union[SyntheticWorld, Iterable[LinkEvidence]],
    kinds: Optional[Iterable[Union[LinkKind, str]]] = None,
) -> ScoreReport:
    """
    Precision and recall of predicted links against the truth, by canonical key.

    Only ``kinds`` are compared (default: the kinds present in the truth).
    With no predictions precision is reported as 1.0 and flagged.
    """
    truth_links = truth.truth if isinstance(truth, SyntheticWorld) else list(truth)
    predicted = list(predicted)
    selected = sorted({LinkKind(k) for k in kinds} if kinds is not None else {l.kind for l in truth_links},
                      key=lambda k: k.value)
    per_kind: Dict[str, KindScore] = {}
    all_pred: Set[Tuple] = set()
    all_truth: Set[Tuple] = set()
    for kind in selected:
        p = {l.key() for l in predicted if l.kind is kind}
        t = {l.key() for l in truth_links if l.kind is kind}
        per_kind[kind.value] = _kind_score(p, t)
        all_pred |= p
        all_truth |= t
    return ScoreReport(kinds=[k.value for k in selected], overall=_kind_score(all_pred, all_truth), per_kind=per_kind)

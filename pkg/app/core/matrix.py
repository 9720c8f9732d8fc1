"""
Matrix contract simulator.

Deterministic model of a two-matrix referral contract: every user owns up
to twelve slots in each of the X3 and X4 matrices, registration buys level 1
in both, and each payment is routed up the referral chain to the first
upline holding an open slot at the same level. The contract never keeps
funds: every wei paid in is paid out within the same call.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

from pydantic import ValidationError

from app.core.errors import (
    AlreadyActiveError,
    AlreadyRegisteredError,
    BadAmountError,
    InvariantViolation,
    LevelRangeError,
    MalformedRecordError,
    NonSequentialLevelError,
    NotRegisteredError,
)
from app.core.ledger import format_units, to_units
from app.models.schemas import ScenarioCall

logger = logging.getLogger(__name__)

ETH_DECIMALS = 18
LEVELS = 12
BASE_PRICE = to_units("0.025", ETH_DECIMALS)
REGISTRATION_PRICE = 2 * BASE_PRICE
DEFAULT_GAS = to_units("0.00883", ETH_DECIMALS)
OWNER = "owner"


class Matrix(str, Enum):
    X3 = "X3"
    X4 = "X4"

    @property
    def capacity(self) -> int:
        return 3 if self is Matrix.X3 else 6


class Reason(str, Enum):
    """
    Why a payment reached its payee.

    A walk past a blocked slot is SKIP_BLOCKED in X3 and SPILLOVER in X4,
    where the passed-over payment fills a place in a higher matrix. A walk
    past inactive slots only is FALLBACK. Profit reports count both blocked
    reasons as diverted.
    """
    DIRECT = "DIRECT"
    SKIP_BLOCKED = "SKIP_BLOCKED"
    SPILLOVER = "SPILLOVER"
    FALLBACK = "FALLBACK"


def slot_price(level: int) -> int:
    """Price of a slot in wei: 0.025 ETH doubled at every level."""
    if not 1 <= level <= LEVELS:
        raise LevelRangeError(f"level must be in [1, {LEVELS}], got {level}")
    return BASE_PRICE << (level - 1)


@dataclass
class SlotState:
    level: int
    active: bool = False
    blocked: bool = False
    unblockable: bool = False
    reinvest_count: int = 0
    referrals: List[str] = field(default_factory=list)
    slot_referrer: Optional[str] = None
    closed_part: Optional[str] = None
    placements: int = 0


def _slots() -> List[SlotState]:
    return [SlotState(level) for level in range(1, LEVELS + 1)]


@dataclass
class MatrixUser:
    id: str
    upline: Optional[str]
    x3: List[SlotState] = field(default_factory=_slots)
    x4: List[SlotState] = field(default_factory=_slots)
    partners_count: int = 0
    direct_referrals: int = 0
    paid_in: int = 0
    paid_out: int = 0
    gas_paid: int = 0

    def slot(self, matrix: Matrix, level: int) -> SlotState:
        return (self.x3 if matrix is Matrix.X3 else self.x4)[level - 1]

    def highest_level(self, matrix: Matrix) -> int:
        slots = self.x3 if matrix is Matrix.X3 else self.x4
        return max((s.level for s in slots if s.active), default=0)

    @property
    def net(self) -> int:
        return self.paid_out - self.paid_in - self.gas_paid


@dataclass(frozen=True)
class PaymentEvent:
    seq: int
    call: int
    payer: str
    payee: str
    matrix: Matrix
    level: int
    amount: int
    reason: Reason
    reinvest: bool = False
    trail: Tuple[str, ...] = ()


class RoutingStrategy(Protocol):
    """Chooses who receives a placement at (matrix, level), starting above ``start``."""

    def find_payee(self, world: "MatrixWorld", start: str, matrix: Matrix, level: int) -> Tuple[str, Reason]:
        ...


class UplineWalk:
    """
    Walk the upline chain to the first user whose slot is active and not
    blocked. The owner ends every walk.
    """

    def find_payee(self, world: "MatrixWorld", start: str, matrix: Matrix, level: int) -> Tuple[str, Reason]:
        current = world.users[start].upline or world.owner
        skipped_blocked = skipped_inactive = False
        while current != world.owner:
            user = world.users[current]
            slot = user.slot(matrix, level)
            if slot.active and not slot.blocked:
                break
            if slot.blocked:
                skipped_blocked = True
            else:
                skipped_inactive = True
            current = user.upline or world.owner
        if skipped_blocked:
            reason = Reason.SPILLOVER if matrix is Matrix.X4 else Reason.SKIP_BLOCKED
        elif skipped_inactive:
            reason = Reason.FALLBACK
        else:
            reason = Reason.DIRECT
        return current, reason


@dataclass(frozen=True)
class Route:
    payee: str
    reason: Reason
    events: Tuple[PaymentEvent, ...]


class MatrixWorld:
    """Full contract state plus the payment log."""

    def __init__(self, owner: str = OWNER, gas_fee: int = DEFAULT_GAS,
                 strategies: Optional[Dict[Matrix, RoutingStrategy]] = None):
        self.owner = owner
        self.gas_fee = gas_fee
        self.users: Dict[str, MatrixUser] = {}
        self.events: List[PaymentEvent] = []
        self.calls = 0
        self.strategies: Dict[Matrix, RoutingStrategy] = {Matrix.X3: UplineWalk(), Matrix.X4: UplineWalk()}
        self.strategies.update(strategies or {})
        root = MatrixUser(owner, None)
        for slot in root.x3 + root.x4:
            slot.active = True
            slot.unblockable = True
        self.users[owner] = root

    @property
    def balance(self) -> int:
        """Funds held by the contract; zero after every call."""
        return sum(u.paid_in for u in self.users.values()) - sum(u.paid_out for u in self.users.values())

    def user(self, user_id: str) -> MatrixUser:
        try:
            return self.users[user_id]
        except KeyError:
            raise NotRegisteredError(f"user '{user_id}' is not registered") from None


def new_world(owner: str = OWNER, gas_fee: int = DEFAULT_GAS) -> MatrixWorld:
    """A contract with only its owner, who holds every slot for free."""
    return MatrixWorld(owner, gas_fee)


def route_payment(world: MatrixWorld, origin: str, matrix: Matrix, level: int, amount: int) -> Route:
    """
    Place ``origin`` in the first eligible upline slot and pay its owner.

    A placement that fills a slot (3 for X3, 6 for X4) recycles it: the
    reinvest count goes up, the referral list empties, and the slot is blocked
    unless its holder owns the next level (or is the owner, or bought past it).
    The filling payment then continues up from the slot holder. The owner's
    slots recycle but always keep the payment.
    """
    strategy = world.strategies[matrix]
    current = origin
    trail: List[str] = []
    first: Optional[Tuple[str, Reason]] = None
    while True:
        payee, reason = strategy.find_payee(world, current, matrix, level)
        if first is None:
            first = (payee, reason)
        holder = world.users[payee]
        slot = holder.slot(matrix, level)
        if slot.blocked or not slot.active:
            raise InvariantViolation(f"routing chose an unavailable slot of {payee} at {matrix.value}/{level}")
        slot.referrals.append(current)
        slot.placements += 1
        if matrix is Matrix.X3:
            holder.partners_count += 1
        if len(slot.referrals) < matrix.capacity or payee == world.owner:
            if len(slot.referrals) >= matrix.capacity:
                slot.reinvest_count += 1
                slot.referrals.clear()
            break
        slot.reinvest_count += 1
        slot.referrals.clear()
        next_owned = level < LEVELS and holder.slot(matrix, level + 1).active
        if level < LEVELS and not next_owned and not slot.unblockable:
            slot.blocked = True
        trail.append(payee)
        current = payee

    event = PaymentEvent(
        seq=len(world.events), call=world.calls, payer=origin, payee=payee, matrix=matrix,
        level=level, amount=amount, reason=reason,
        reinvest=bool(trail), trail=tuple(trail),
    )
    world.users[payee].paid_out += amount
    world.events.append(event)
    return Route(first[0], first[1], (event,))


def _check(world: MatrixWorld, before: int, paid: int) -> None:
    emitted = sum(e.amount for e in world.events[before:])
    if emitted != paid or world.balance != 0:
        raise InvariantViolation(
            f"call {world.calls}: paid in {paid}, paid out {emitted}, contract holds {world.balance}")


def _charge(world: MatrixWorld, user: MatrixUser, amount: int) -> None:
    user.paid_in += amount
    user.gas_paid += world.gas_fee
    world.calls += 1


def register(world: MatrixWorld, new_user: str, referrer: Optional[str] = None,
             payment: int = REGISTRATION_PRICE) -> List[PaymentEvent]:
    """
    Register a user and buy level 1 of both matrices.

    The payment splits into two equal halves routed independently through X3
    and X4. Without a referrer the owner becomes the upline.

    Raises:
        AlreadyRegisteredError, BadAmountError, NotRegisteredError (unknown referrer)
    """
    if new_user in world.users:
        raise AlreadyRegisteredError(f"user '{new_user}' is already registered")
    if payment != REGISTRATION_PRICE:
        raise BadAmountError(
            f"registration costs {format_units(REGISTRATION_PRICE, ETH_DECIMALS)} ETH, "
            f"got {format_units(payment, ETH_DECIMALS)}")
    upline = referrer if referrer is not None else world.owner
    world.user(upline).direct_referrals += 1
    user = MatrixUser(new_user, upline)
    user.x3[0].active = True
    user.x4[0].active = True
    world.users[new_user] = user

    before = len(world.events)
    _charge(world, user, payment)
    half = payment // 2
    for matrix in Matrix:
        route = route_payment(world, new_user, matrix, 1, half)
        user.slot(matrix, 1).slot_referrer = route.payee
    _check(world, before, payment)
    logger.debug(f"Registered {new_user} under {upline}")
    return world.events[before:]


def fallback(world: MatrixWorld, new_user: str, payment: int = REGISTRATION_PRICE) -> List[PaymentEvent]:
    """A bare transfer to the contract: registration under the owner."""
    return register(world, new_user, None, payment)


def buy_new_level(world: MatrixWorld, user_id: str, matrix: Matrix, level: int) -> List[PaymentEvent]:
    """
    Buy the next level in one matrix.

    The previous level is unblocked and can never be blocked again.

    Raises:
        NotRegisteredError, LevelRangeError, AlreadyActiveError, NonSequentialLevelError
    """
    user = world.user(user_id)
    price = slot_price(level)
    slot = user.slot(matrix, level)
    if slot.active:
        raise AlreadyActiveError(f"{user_id} already holds {matrix.value} level {level}")
    highest = user.highest_level(matrix)
    if level != highest + 1:
        raise NonSequentialLevelError(f"{user_id} holds {matrix.value} up to {highest}, cannot buy {level}")
    slot.active = True
    if level > 1:
        previous = user.slot(matrix, level - 1)
        previous.blocked = False
        previous.unblockable = True

    before = len(world.events)
    _charge(world, user, price)
    route = route_payment(world, user_id, matrix, level, price)
    slot.slot_referrer = route.payee
    _check(world, before, price)
    return world.events[before:]


# ============================================================================
# Scenarios
# ============================================================================

def load_scenario(path: Union[str, Path]) -> List[ScenarioCall]:
    calls = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                calls.append(ScenarioCall.model_validate_json(line))
            except ValidationError as e:
                raise MalformedRecordError(f"bad scenario call: {e.errors()[0]['msg']}", line=line_no) from e
    return calls


def run_scenario(world: MatrixWorld, calls: Iterable[ScenarioCall]) -> List[PaymentEvent]:
    before = len(world.events)
    for call in calls:
        payment = to_units(call.payment, ETH_DECIMALS) if call.payment is not None else REGISTRATION_PRICE
        if call.op == "register":
            register(world, call.user, call.ref, payment)
        elif call.op == "fallback":
            fallback(world, call.user, payment)
        else:
            buy_new_level(world, call.user, Matrix(call.matrix), call.level)
    logger.info(f"Scenario ran {world.calls} calls, {len(world.events) - before} payments")
    return world.events[before:]


def random_scenario(seed: int, n_users: int, buy_prob: float = 0.3) -> List[ScenarioCall]:
    """A seeded recruitment schedule: every user joins under an existing one, some buy up."""
    rng = random.Random(f"matrix:{seed}")
    calls: List[ScenarioCall] = []
    members = [OWNER]
    levels: Dict[Tuple[str, str], int] = {}
    for n in range(n_users):
        user = f"u{n:05d}"
        choice = rng.random()
        if choice < 0.05:
            calls.append(ScenarioCall(op="fallback", user=user))
        else:
            ref = rng.choice(members) if choice >= 0.1 else None
            calls.append(ScenarioCall(op="register", user=user, ref=None if ref == OWNER else ref))
        members.append(user)
        levels[(user, "X3")] = levels[(user, "X4")] = 1
        while rng.random() < buy_prob:
            buyer = rng.choice(members[1:])
            matrix = rng.choice(("X3", "X4"))
            nxt = levels[(buyer, matrix)] + 1
            if nxt > LEVELS:
                break
            levels[(buyer, matrix)] = nxt
            calls.append(ScenarioCall(op="buy", user=buyer, matrix=matrix, level=nxt))
    return calls


# ============================================================================
# Reports and exports
# ============================================================================

def state_hash(world: MatrixWorld) -> str:
    """SHA-256 over the canonical JSON of users and payment log."""
    state = {
        "owner": world.owner,
        "gas_fee": world.gas_fee,
        "calls": world.calls,
        "users": [asdict(world.users[u]) for u in sorted(world.users)],
        "events": [asdict(e) for e in world.events],
    }
    blob = json.dumps(state, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# Bucket upper bounds in ETH; the last bucket is open.
HISTOGRAM_EDGES = ("-10", "-1", "-0.1", "-0.01", "0", "0.01", "0.1", "1", "10")


def _histogram(nets: Sequence[int]) -> Dict[str, int]:
    edges = [to_units(e.lstrip("-"), ETH_DECIMALS) * (-1 if e.startswith("-") else 1) for e in HISTOGRAM_EDGES]
    labels = [f"<= {e}" for e in HISTOGRAM_EDGES] + [f"> {HISTOGRAM_EDGES[-1]}"]
    counts = Counter()
    for net in nets:
        index = next((i for i, edge in enumerate(edges) if net <= edge), len(edges))
        counts[labels[index]] += 1
    return {label: counts[label] for label in labels}


def profit_report(world: MatrixWorld, top_k: Sequence[int] = (1, 10, 100)) -> Dict[str, object]:
    """
    Profit and loss across users (owner reported separately).

    net = paid out - paid in - gas. Top-k shares are fractions of all positive
    profit held by the k best earners; the spillover fraction counts payments
    diverted past a blocked slot per state-changing call.
    """
    users = [u for uid, u in sorted(world.users.items()) if uid != world.owner]
    nets = [u.net for u in users]
    profitable = sorted((n for n in nets if n > 0), reverse=True)
    gains = sum(profitable)
    diverted = sum(e.reason in (Reason.SPILLOVER, Reason.SKIP_BLOCKED) for e in world.events)

    level_counts: Dict[int, Dict[str, int]] = {}
    for u in users:
        owned = u.highest_level(Matrix.X3) + u.highest_level(Matrix.X4)
        bucket = level_counts.setdefault(owned, {"users": 0, "net": 0})
        bucket["users"] += 1
        bucket["net"] += u.net

    return {
        "users": len(users),
        "calls": world.calls,
        "payments": len(world.events),
        "owner_net": world.users[world.owner].net,
        "profitable_share": len(profitable) / len(users) if users else 0.0,
        "net_without_gas": sum(u.paid_out - u.paid_in for u in world.users.values()),
        "histogram": _histogram(nets),
        "top_k_shares": {str(k): (sum(profitable[:k]) / gains if gains else 0.0) for k in top_k},
        "spillover_fraction": diverted / world.calls if world.calls else 0.0,
        "levels": {str(k): v for k, v in sorted(level_counts.items())},
        "referrals": {str(k): v for k, v in sorted(Counter(u.direct_referrals for u in users).items())},
        "nets": {u.id: u.net for u in users},
    }


def export_events(world: MatrixWorld, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq", "payer", "payee", "matrix", "level", "amount", "reason", "reinvest"])
        for e in world.events:
            writer.writerow([e.seq, e.payer, e.payee, e.matrix.value, e.level,
                             format_units(e.amount, ETH_DECIMALS), e.reason.value, int(e.reinvest)])

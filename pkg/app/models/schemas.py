"""
Pydantic models for run configuration, wire records and reports.
"""

from datetime import datetime
from decimal import Decimal
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

# Bumped whenever a report or snapshot field changes.
SCHEMA_VERSION = "1.0"

DEFAULT_WINDOWS: Dict[str, Tuple[int, int]] = {
    "BTC": (0, 1),
    "BCH": (9, 4),
    "DASH": (5, 5),
    "DOGE": (1, 4),
    "ETH": (5, 0),
    "ETC": (5, 0),
    "LTC": (1, 2),
    "ZEC": (1, 3),
}


def _fraction(value: Decimal) -> Decimal:
    if not Decimal(0) <= value <= Decimal(1):
        raise ValueError("must be within [0, 1]")
    return value


# ============================================================================
# Wire records
# ============================================================================

class EndpointRecord(BaseModel):
    """One side of a link: transactions and CHAIN:value addresses."""
    txs: List[str] = Field(default_factory=list)
    addrs: List[str] = Field(default_factory=list)


class LinkEvidenceRecord(BaseModel):
    """JSONL form of one heuristic link."""
    kind: str
    params: Dict[str, Any] = Field(default_factory=dict)
    src: EndpointRecord = Field(default_factory=EndpointRecord)
    dst: EndpointRecord = Field(default_factory=EndpointRecord)
    value: int = 0
    chain: str = ""
    meta: Dict[str, Any] = Field(default_factory=dict)


class ScenarioCall(BaseModel):
    """One state-changing call against the matrix contract."""
    op: Literal["register", "buy", "fallback"]
    user: str
    ref: Optional[str] = None
    matrix: Optional[Literal["X3", "X4"]] = None
    level: Optional[int] = None
    payment: Optional[Decimal] = None

    @model_validator(mode="after")
    def _buy_needs_target(self) -> "ScenarioCall":
        if self.op == "buy" and (self.matrix is None or self.level is None):
            raise ValueError("buy requires matrix and level")
        return self


# ============================================================================
# Configuration
# ============================================================================

class ClusterParams(BaseModel):
    change_heuristic: bool = False
    excluded: List[str] = Field(default_factory=list, description="CHAIN:value addresses never treated as change")
    skip_coinjoins: bool = True


class ZcashParams(BaseModel):
    founder_withdrawal: Decimal = Decimal("250.0001")
    founder_deposit: Decimal = Decimal("249.9999")
    founder_cap: Decimal = Decimal("44272.5")
    founder_addresses: List[str] = Field(default_factory=list)
    miner_min_outputs: int = Field(default=100, ge=1)
    round_trip_interval: int = Field(default=10, ge=0)
    sweep_max: int = Field(default=100, ge=1)
    tsb_amounts: List[Decimal] = Field(default_factory=lambda: [Decimal(a) for a in ("100", "200", "400", "500")])
    tsb_tx_tol: Decimal = Decimal("5")
    tsb_cluster_tol: Decimal = Decimal("1")
    tsb_max_history: int = Field(default=250, ge=0)
    tsb_split_dates: List[str] = Field(default_factory=lambda: ["2017-05-16"])
    coinjoin_denominations: List[Decimal] = Field(
        default_factory=lambda: [Decimal(d) for d in ("0.01", "0.1", "1", "10")])

    @field_validator("tsb_split_dates")
    @classmethod
    def _iso_dates(cls, v: List[str]) -> List[str]:
        for d in v:
            datetime.strptime(d, "%Y-%m-%d")
        return v


class TraceParams(BaseModel):
    windows: Dict[str, Tuple[int, int]] = Field(default_factory=lambda: dict(DEFAULT_WINDOWS))
    uturn_window: int = Field(default=1800, gt=0)
    uturn_tol: Decimal = Decimal("0.01")
    uturn_clock: Literal["advertised", "block"] = "advertised"
    xrt_tol: Decimal = Decimal("0.005")

    @field_validator("windows")
    @classmethod
    def _window_range(cls, v: Dict[str, Tuple[int, int]]) -> Dict[str, Tuple[int, int]]:
        for chain, (before, after) in v.items():
            if not (0 <= before <= 30 and 0 <= after <= 30):
                raise ValueError(f"{chain}: block windows must be within [0, 30]")
        return v

    @field_validator("uturn_tol", "xrt_tol")
    @classmethod
    def _tolerance(cls, v: Decimal) -> Decimal:
        return _fraction(v)


class BotParams(BaseModel):
    min_set: int = Field(default=15, ge=2)
    span: int = Field(default=300, gt=0)
    tol: Decimal = Decimal("0.01")
    mode: Literal["pair", "leg"] = "pair"
    rates: Dict[str, Decimal] = Field(default_factory=dict)
    odd_pair_share: Decimal = Decimal("0.2")

    @field_validator("tol", "odd_pair_share")
    @classmethod
    def _tolerance(cls, v: Decimal) -> Decimal:
        return _fraction(v)


class MatrixParams(BaseModel):
    gas: Decimal = Decimal("0.00883")
    top_k: List[int] = Field(default_factory=lambda: [1, 10, 100])
    users: int = Field(default=1000, ge=0, description="Users in a random scenario when no scenario file is given")
    buy_prob: float = Field(default=0.3, ge=0.0, lt=1.0)

    @field_validator("gas")
    @classmethod
    def _non_negative(cls, v: Decimal) -> Decimal:
        if v < 0:
            raise ValueError("gas must be non-negative")
        return v


class GenParams(BaseModel):
    """Synthetic world generator parameters."""
    chains: List[str] = Field(default_factory=lambda: ["BTC", "DASH", "ETH", "ZEC"])
    n_entities: int = Field(default=20, ge=1)
    txs_per_entity: int = Field(default=6, ge=0)
    n_shifts: int = Field(default=40, ge=0)
    duration: int = Field(default=86_400, gt=0)
    start_ts: int = 1_500_000_000
    collision_rate: float = 0.0
    shift_error_rate: float = 0.0
    uturn_rate: float = 0.1
    xrt_rate: float = 0.05
    pool_interaction_rate: float = 0.2
    founder_schedule: bool = True
    founder_deposits: int = Field(default=20, ge=0)
    founder_withdrawals: int = Field(default=12, ge=0)
    miner_payouts: int = Field(default=2, ge=0)
    miner_fanout: int = Field(default=120, ge=1)
    round_trips: int = Field(default=10, ge=0)
    round_trip_max_gap: int = Field(default=10, ge=0)
    pool_noise: int = Field(default=20, ge=0)
    coinjoins: int = Field(default=5, ge=0)

    @field_validator("collision_rate", "shift_error_rate", "uturn_rate", "xrt_rate", "pool_interaction_rate")
    @classmethod
    def _rate(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("rates must be within [0, 1]")
        return v

    @field_validator("chains")
    @classmethod
    def _distinct(cls, v: List[str]) -> List[str]:
        if len(set(v)) != len(v):
            raise ValueError("chains must be distinct")
        return v


class RunConfig(BaseModel):
    """Everything a CLI run needs to be reproduced."""
    schema_version: str = SCHEMA_VERSION
    command: str = ""
    chains: Optional[str] = None
    shifts: Optional[str] = None
    oracle: Optional[str] = None
    tags: Optional[str] = None
    scenario: Optional[str] = None
    pred: Optional[str] = None
    truth: Optional[str] = None
    out: str = "out"
    seed: int = 0
    cluster: ClusterParams = Field(default_factory=ClusterParams)
    zcash: ZcashParams = Field(default_factory=ZcashParams)
    trace: TraceParams = Field(default_factory=TraceParams)
    bots: BotParams = Field(default_factory=BotParams)
    matrix: MatrixParams = Field(default_factory=MatrixParams)
    gen: GenParams = Field(default_factory=GenParams)


# ============================================================================
# Reports
# ============================================================================

class ClassShare(BaseModel):
    count: int = 0
    value: int = 0
    share: float = 0.0
    count_share: float = 0.0


class AnonymityReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    withdrawals: int
    total_withdrawn: int
    classes: Dict[str, ClassShare]
    linked_share: float
    other_share: float


class KindScore(BaseModel):
    predicted: int
    truth: int
    true_positives: int
    precision: float
    recall: float
    zero_predictions: bool = False


class ScoreReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    kinds: List[str]
    overall: KindScore
    per_kind: Dict[str, KindScore]


class StageReport(BaseModel):
    name: str
    status: str
    duration_ms: float
    error: Optional[str] = None


class HeuristicInfo(BaseModel):
    name: str
    description: str
    params: Dict[str, Any] = Field(default_factory=dict)


class PipelineReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    run_id: str
    command: str
    status: str
    created_at: datetime
    completed_at: Optional[datetime] = None
    stages: List[StageReport]
    heuristics: List[HeuristicInfo] = Field(default_factory=list)
    headline: Dict[str, Any] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)

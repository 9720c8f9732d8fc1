"""
Tests for the synthetic world generator and link scoring.

The generator's ground truth doubles as an oracle for the heuristics: on a
world without amount collisions each heuristic must find its truth exactly.
"""

import pytest

from app.core.clustering import TagCategory
from app.core.errors import InvalidParamsError
from app.core.evidence import LinkEvidence, LinkKind
from app.core.patterns import detect_pass_through, detect_round_trip, detect_uturn
from app.core.shifts import FixtureOracle, resolve_shifts
from app.core.synth import generate, load_world, score, write_world
from app.core.zcash import round_trip_unique, scan_coinjoins, tag_founders, tag_miners
from app.models.schemas import GenParams

SMALL = GenParams(
    n_entities=8, txs_per_entity=3, n_shifts=40, uturn_rate=0.3, xrt_rate=0.2,
    founder_deposits=10, founder_withdrawals=6, miner_payouts=2, round_trips=8,
    pool_noise=9, coinjoins=4,
)


@pytest.fixture(scope="module")
def world():
    return generate(SMALL, seed=3)


def test_generation_is_deterministic(world):
    again = generate(SMALL, seed=3)
    assert again.ledgers == world.ledgers
    assert again.shifts == world.shifts
    assert [l.key() for l in again.truth] == [l.key() for l in world.truth]

    other = generate(SMALL, seed=4)
    assert other.ledgers["ZEC"] != world.ledgers["ZEC"]


def test_world_contents(world):
    assert sorted(world.ledgers) == ["BTC", "DASH", "ETH", "ZEC"]
    returns = [s for s in world.shifts if s.id.endswith("r")]
    assert len(world.shifts) - len(returns) == SMALL.n_shifts
    assert len(world.truth_of(LinkKind.FOUNDER_VALUE)) == SMALL.founder_withdrawals
    assert len(world.truth_of(LinkKind.MINER_PAYOUT)) == SMALL.miner_payouts
    assert len(world.truth_of(LinkKind.ROUND_TRIP_UNIQUE)) == SMALL.round_trips
    assert len(world.truth_of(LinkKind.COINJOIN)) == SMALL.coinjoins
    assert world.stats["founder_deposits"] == SMALL.founder_deposits
    owners = world.owner_of()
    for link in world.truth_of(LinkKind.FOUNDER_VALUE):
        assert owners[link.dst_addrs[0]] == "founders"


def test_pool_heuristics_recover_the_truth(world):
    zec = world.ledgers["ZEC"]
    founders = tag_founders(zec)
    _, miners = tag_miners(zec, world.tags)
    round_trips = round_trip_unique(zec, max_interval=SMALL.round_trip_max_gap)
    coinjoins = scan_coinjoins(world.ledgers["DASH"])

    report = score(founders.links + miners + round_trips + coinjoins, world,
                   kinds=["FOUNDER_VALUE", "MINER_PAYOUT", "ROUND_TRIP_UNIQUE", "COINJOIN"])
    for kind, result in report.per_kind.items():
        assert (kind, result.precision, result.recall) == (kind, 1.0, 1.0)
    assert set(founders.addresses) == {a.value for a in world.tags.with_category(TagCategory.FOUNDER)}
    assert all(s.within_cap and s.at_deposit_value == s.deposits for s in founders.addresses.values())
    assert founders.spacing_share == 1.0


def test_shift_tracing_recovers_the_truth(world):
    resolution = resolve_shifts(world.shifts, world.ledgers, FixtureOracle(world.oracle))
    assert len(resolution.resolved) == len(world.shifts)

    passthroughs = detect_pass_through(resolution.resolved)
    report = score(passthroughs, world, kinds=["PASS_THROUGH"])
    assert report.overall.precision == report.overall.recall == 1.0

    found = detect_uturn(resolution.resolved, world.ledgers) + detect_round_trip(resolution.resolved)
    kinds = [k for k in ("UTURN_BASIC", "UTURN_ADDR", "UTURN_UTXO", "XRT") if world.truth_of(LinkKind(k))]
    assert kinds
    for kind, result in score(found, world, kinds=kinds).per_kind.items():
        assert (kind, result.recall) == (kind, 1.0)


def test_world_bundle_reloads(world, tmp_path):
    written = write_world(world, tmp_path)
    assert {p.name for p in written} >= {"ZEC.json", "ZEC.jsonl", "shifts.csv", "oracle.csv", "truth.jsonl"}

    loaded = load_world(tmp_path)
    assert loaded.ledgers == world.ledgers
    assert loaded.shifts == world.shifts
    assert [s.tx for s in loaded.oracle] == [s.tx for s in world.oracle]
    assert [l.key() for l in loaded.truth] == [l.key() for l in world.truth]
    assert dict(loaded.tags.items()) == dict(world.tags.items())
    assert loaded.params == SMALL


def test_bad_parameters():
    with pytest.raises(InvalidParamsError):
        generate({"chains": ["XMR"]})
    with pytest.raises(InvalidParamsError):
        generate({"collision_rate": 2})
    with pytest.raises(InvalidParamsError):
        generate({"chains": ["BTC", "BTC"]})


def _single_hits(world) -> int:
    summary = resolve_shifts(world.shifts, world.ledgers, FixtureOracle(world.oracle)).summary
    return sum(s["single_hits"] for s in summary.values())


def test_collisions_only_lower_single_hits():
    worlds = [generate(SMALL.model_copy(update={"collision_rate": rate}), seed=3) for rate in (0.0, 0.2, 0.6)]
    assert [w.shifts for w in worlds[1:]] == [worlds[0].shifts] * 2
    assert worlds[0].stats.get("collisions", 0) == 0
    assert worlds[2].stats["collisions"] > 0

    hits = [_single_hits(w) for w in worlds]
    assert hits == sorted(hits, reverse=True)
    assert hits[2] < hits[0]


def test_adding_a_chain_leaves_the_others_alone():
    quiet = {"n_shifts": 0, "n_entities": 5, "txs_per_entity": 3, "founder_deposits": 4,
             "founder_withdrawals": 3, "round_trips": 3, "pool_noise": 5, "coinjoins": 0}
    two = generate({**quiet, "chains": ["BTC", "ZEC"]}, seed=8)
    three = generate({**quiet, "chains": ["BTC", "ZEC", "ETH"]}, seed=8)
    assert list(three.ledgers["BTC"]) == list(two.ledgers["BTC"])
    assert list(three.ledgers["ZEC"]) == list(two.ledgers["ZEC"])
    assert len(three.ledgers["ETH"]) > 0


# ============================================================================
# Scoring
# ============================================================================

def _rt(n: int) -> LinkEvidence:
    return LinkEvidence(kind=LinkKind.ROUND_TRIP_UNIQUE, src_txs=(f"d{n}",), dst_txs=(f"w{n}",))


def test_score_against_a_hand_confusion():
    truth = [_rt(n) for n in range(5)] + [LinkEvidence(kind=LinkKind.PASS_THROUGH, src_txs=("a",), dst_txs=("b",))]
    predicted = [_rt(0), _rt(1), _rt(2), _rt(9), LinkEvidence(kind=LinkKind.XRT, src_txs=("x",))]

    report = score(predicted, truth)
    assert report.kinds == ["PASS_THROUGH", "ROUND_TRIP_UNIQUE"]
    rt = report.per_kind["ROUND_TRIP_UNIQUE"]
    assert (rt.predicted, rt.truth, rt.true_positives) == (4, 5, 3)
    assert (rt.precision, rt.recall) == (0.75, 0.6)
    pt = report.per_kind["PASS_THROUGH"]
    assert pt.zero_predictions and pt.precision == 1.0 and pt.recall == 0.0
    assert (report.overall.precision, report.overall.recall) == (0.75, 0.5)

    only_xrt = score(predicted, truth, kinds=[LinkKind.XRT])
    assert only_xrt.overall.precision == 0.0 and only_xrt.overall.recall == 1.0

"""
Forensics pipelines, one per CLI subcommand.

Each subcommand is a linear pipeline of stages over a shared state:

- ingest:        chains -> ledgers -> ledger summary
- cluster:       chains -> ledgers -> tags -> co-spend -> [change] -> cluster tags
- zcash-analyze: chains -> ledgers -> tags -> co-spend -> pool heuristics -> [CoinJoins] -> evidence
- trace:         chains -> ledgers -> shifts -> resolution -> patterns -> evidence
- simulate:      scenario -> matrix run
- generate:      synthetic world
- score:         predictions + truth -> precision/recall
- report:        everything above that the inputs allow, plus report.json

Bracketed stages are skipped when their toggle is off or their chain is absent.
"""

from typing import Any, Callable, Dict, List, Optional
from collections import Counter
from pathlib import Path
import json
import logging
import uuid

from app.core.clustering import (
    ClusterSet,
    TagMap,
    build_relation_graph,
    change_cluster,
    export_clusters,
    load_tags,
    multi_input_cluster,
    propagate_tags,
)
from app.core.errors import ChainMissingError, InputError
from app.core.evidence import LinkEvidence, LinkKind, read_evidence, write_evidence
from app.core.ledger import (
    Address,
    ChainRegistry,
    Ledger,
    format_units,
    joinsplit_activity,
    load_ledgers,
    pool_balance_series,
    to_units,
    type_counts,
)
from app.core.matrix import (
    ETH_DECIMALS,
    export_events,
    load_scenario,
    new_world,
    profit_report,
    random_scenario,
    run_scenario,
    state_hash,
)
from app.core.patterns import (
    coinjoin_shift_usage,
    detect_pass_through,
    detect_round_trip,
    detect_trading_bots,
    detect_uturn,
    pool_shift_interactions,
)
from app.core.pipeline import Pipeline, PipelineExecutor, PipelineRun, RunStatus, State, Step
from app.core.registry import HeuristicRegistry
from app.core.shifts import FixtureOracle, WindowParams, load_oracle, load_shifts, resolve_shifts
from app.core.storage import ArtifactStore, RunStore
from app.core.synth import generate, load_world, score, write_world
from app.core.zcash import (
    anonymity_reduction,
    coinbase_recipients,
    detect_coinjoin,
    round_trip_sweep,
    round_trip_unique,
    scan_coinjoins,
    tag_founders,
    tag_miners,
    tsb_filter,
)
from app.models.schemas import HeuristicInfo, PipelineReport, RunConfig, StageReport

logger = logging.getLogger(__name__)

ZEC = "ZEC"
DASH = "DASH"


# ============================================================================
# Heuristics
# ============================================================================

def build_heuristics(config: RunConfig) -> HeuristicRegistry:
    """Register every heuristic with its defaults taken from the run config."""
    z, t, b = config.zcash, config.trace, config.bots
    zec = lambda v: to_units(v, 8)  # noqa: E731
    registry = HeuristicRegistry()

    registry.register(
        "founders", tag_founders, "Exact-value founder withdrawals and deposit pattern",
        {"known": [Address.parse(a) for a in z.founder_addresses],
         "withdrawal_value": zec(z.founder_withdrawal), "deposit_value": zec(z.founder_deposit),
         "cap": zec(z.founder_cap)},
        group="zcash",
    )
    registry.register(
        "miners", tag_miners, "Mining pool payouts with large fan-out",
        {"min_outputs": z.miner_min_outputs}, group="zcash",
    )
    registry.register(
        "round_trip_unique", round_trip_unique, "Unique-value deposit/withdrawal pairs",
        {"max_interval": z.round_trip_interval}, group="zcash",
    )
    registry.register(
        "round_trip_sweep", round_trip_sweep, "Linked value per round-trip interval",
        {"intervals": list(range(1, z.sweep_max + 1))}, group="zcash",
    )
    registry.register(
        "tsb_filter", tsb_filter, "Clusters matching a ransom deposit pattern",
        {"amounts": [zec(a) for a in z.tsb_amounts], "tx_tol": zec(z.tsb_tx_tol),
         "cluster_tol": zec(z.tsb_cluster_tol), "max_history": z.tsb_max_history,
         "split_dates": list(z.tsb_split_dates)},
        group="zcash",
    )
    registry.register(
        "coinjoins", scan_coinjoins, "Dash-style mixing transactions",
        {"denominations": frozenset(to_units(d, 8) for d in z.coinjoin_denominations)}, group="dash",
    )
    registry.register("pass_through", detect_pass_through, "Resolved shift deposit/payout pairs", group="trace")
    registry.register(
        "uturn", detect_uturn, "Shifts straight back into the original currency",
        {"window": t.uturn_window, "tol": t.uturn_tol, "clock": t.uturn_clock}, group="trace",
    )
    registry.register(
        "round_trip", detect_round_trip, "X->Y->X cross-chain round trips",
        {"window": t.uturn_window, "tol": t.xrt_tol, "clock": t.uturn_clock}, group="trace",
    )
    registry.register(
        "trading_bots", detect_trading_bots, "Bursts of near-identical shifts",
        {"min_set": b.min_set, "span": b.span, "tol": b.tol, "mode": b.mode,
         "rates": dict(b.rates), "odd_pair_share": b.odd_pair_share},
        group="trace",
    )
    return registry


def _jsonable(value: Any) -> Any:
    return json.loads(json.dumps(value, default=str, sort_keys=True))


# ============================================================================
# Shared stages
# ============================================================================

def _cfg(state: State) -> RunConfig:
    return state["config"]


def _store(state: State) -> ArtifactStore:
    return state["store"]


def _headline(state: State, **items: Any) -> Dict[str, Any]:
    return {"headline": {**state.get("headline", {}), **items}}


def load_chains(state: State) -> State:
    """Chain registry from the manifest directory (built-ins otherwise)."""
    cfg = _cfg(state)
    if cfg.chains is None:
        return {"chain_registry": ChainRegistry()}
    return {"chain_registry": ChainRegistry.from_directory(cfg.chains)}


def load_chain_ledgers(state: State) -> State:
    cfg = _cfg(state)
    if cfg.chains is None:
        raise InputError(f"{cfg.command} needs --chains")
    ledgers = load_ledgers(cfg.chains, state["chain_registry"])
    if not ledgers:
        raise InputError(f"no <SYMBOL>.jsonl ledgers found in {cfg.chains}")
    logger.info("Loaded ledgers: " + ", ".join(f"{s} ({len(l)} txs)" for s, l in ledgers.items()))
    return {
        "ledgers": ledgers,
        **_headline(state, chains=sorted(ledgers), transactions=sum(len(l) for l in ledgers.values())),
    }


def summarize_ledgers(state: State) -> State:
    summary: Dict[str, Any] = {}
    for symbol, ledger in state["ledgers"].items():
        entry: Dict[str, Any] = {
            "accounting": ledger.chain.accounting.value,
            "transactions": len(ledger),
            "addresses": len(ledger.addresses()),
            "blocks": len(ledger.heights),
        }
        if ledger.chain.joinsplits:
            entry["types"] = {cls.value: n for cls, n in type_counts(ledger).items()}
            series = pool_balance_series(ledger)
            entry["pool_balance"] = format_units(series[-1][1] if series else 0, ledger.chain.decimals)
            entry["joinsplit_activity"] = joinsplit_activity(ledger)
        summary[symbol] = entry
    _store(state).write_json("ledger_summary.json", summary)
    return {"ledger_summary": summary}


def load_tag_file(state: State) -> State:
    cfg = _cfg(state)
    tags = load_tags(cfg.tags) if cfg.tags else TagMap()
    return {"tags": tags}


def _coinjoin_skip(state: State) -> Optional[Callable]:
    cfg = _cfg(state)
    if not cfg.cluster.skip_coinjoins:
        return None
    denominations = frozenset(to_units(d, 8) for d in cfg.zcash.coinjoin_denominations)
    return lambda tx: tx.chain == DASH and detect_coinjoin(tx, denominations)


def cluster_inputs(state: State) -> State:
    txs = (tx for ledger in state["ledgers"].values() if ledger.chain.is_utxo for tx in ledger)
    clusters = multi_input_cluster(txs, skip=_coinjoin_skip(state))
    return {"clusters": clusters}


def cluster_change(state: State) -> State:
    cfg = _cfg(state)
    clusters: ClusterSet = state["clusters"]
    excluded = [Address.parse(a) for a in cfg.cluster.excluded]
    for ledger in state["ledgers"].values():
        if ledger.chain.joinsplits:
            clusters = change_cluster(ledger, clusters, excluded, state["tags"])
    return {"clusters": clusters}


def tag_clusters(state: State) -> State:
    clusters: ClusterSet = state["clusters"]
    store = _store(state)
    summaries = propagate_tags(clusters, state["tags"], include_untagged=False)
    store.write_with("clusters.csv", lambda p: export_clusters(clusters, p))
    store.write_json("cluster_tags.json", {
        str(cid): {
            "size": s.size,
            "dominant": s.dominant,
            "category": s.dominant_category.value if s.dominant_category else None,
            "coverage": s.coverage,
            "labels": dict(s.labels),
            "conflicts": s.conflicts,
        }
        for cid, s in summaries.items()
    })
    if clusters.rejected:
        store.write_json("rejected_merges.json", [
            {"txid": r.txid, "left": str(r.left), "right": str(r.right),
             "labels": [sorted(r.left_labels), sorted(r.right_labels)]}
            for r in clusters.rejected
        ])
    sizes = clusters.sizes()
    return _headline(
        state,
        addresses=len(clusters),
        clusters=len(sizes),
        largest_cluster=max(sizes.values(), default=0),
        tagged_clusters=len(summaries),
        conflicting_clusters=sum(bool(s.conflicts) for s in summaries.values()),
        rejected_merges=len(clusters.rejected),
    )


def write_links(state: State) -> State:
    links: List[LinkEvidence] = state.get("links", [])
    _store(state).write_with("evidence.jsonl", lambda p: write_evidence(links, p))
    by_kind = Counter(link.kind.value for link in links)
    return _headline(state, links=dict(sorted(by_kind.items())))


# ============================================================================
# Zcash pool
# ============================================================================

def _pool_ledger(state: State) -> Optional[Ledger]:
    return next((l for l in state.get("ledgers", {}).values() if l.chain.joinsplits), None)


def analyze_pool(state: State) -> State:
    ledger = _pool_ledger(state)
    if ledger is None:
        raise ChainMissingError("no shielded-pool ledger (a chain with joinsplits) loaded")
    heuristics: HeuristicRegistry = state["heuristics"]
    tags: TagMap = state["tags"]
    d = ledger.chain.decimals

    founders = heuristics.call("founders", ledger)
    miner_tags, miner_links = heuristics.call("miners", ledger, tags)
    round_trips = heuristics.call("round_trip_unique", ledger)
    tags.merge(founders.tags)
    tags.merge(miner_tags)
    links = founders.links + miner_links + round_trips
    anonymity = anonymity_reduction(ledger, links)
    sweep = heuristics.call("round_trip_sweep", ledger)
    tsb = heuristics.call("tsb_filter", ledger, state["clusters"], tags=tags)
    coingen = coinbase_recipients(ledger)

    _store(state).write_json("zcash_report.json", {
        "chain": ledger.chain.symbol,
        "types": {cls.value: n for cls, n in type_counts(ledger).items()},
        "founders": {
            "withdrawals": len(founders.links),
            "spacing_share": founders.spacing_share,
            "addresses": {a: vars(s) for a, s in founders.addresses.items()},
        },
        "miners": {"payouts": len(miner_links), "tagged": len(miner_tags),
                   "coinbase_recipients": len(coingen)},
        "round_trips": {
            "links": len(round_trips),
            "sweep": [{**row, "value": format_units(row["value"], d)} for row in sweep],
        },
        "anonymity": anonymity.model_dump(mode="json"),
        "tsb": {"flagged": tsb.flagged, "table": tsb.table, "unclustered": tsb.unclustered},
        "joinsplit_activity": joinsplit_activity(ledger),
    })
    return {
        "links": state.get("links", []) + links + tsb.links,
        **_headline(state, withdrawals=anonymity.withdrawals, linked_share=anonymity.linked_share,
                    tsb_flags=len(tsb.links)),
    }


def find_coinjoins(state: State) -> State:
    links = state["heuristics"].call("coinjoins", state["ledgers"][DASH])
    return {"links": state.get("links", []) + links, **_headline(state, coinjoins=len(links))}


# ============================================================================
# Cross-chain tracing
# ============================================================================

def load_shift_stream(state: State) -> State:
    cfg = _cfg(state)
    if cfg.shifts is None:
        raise InputError(f"{cfg.command} needs --shifts")
    registry = state["chain_registry"]
    shifts = load_shifts(cfg.shifts, registry)
    oracle = load_oracle(cfg.oracle, registry) if cfg.oracle else FixtureOracle()
    if not cfg.oracle:
        logger.warning("No oracle given; only Phase 1 basic matching will run")
    return {"shifts": shifts, "oracle": oracle}


def resolve(state: State) -> State:
    cfg = _cfg(state)
    report = resolve_shifts(state["shifts"], state["ledgers"], state["oracle"], WindowParams(cfg.trace.windows))
    rows = []
    for o in report.outcomes:
        r = o.resolution
        rows.append([
            o.shift.id, o.shift.cur_in, o.shift.cur_out, o.hit.value if o.hit else "", o.candidates,
            r.deposit.txid if r else "", r.payout_txid if r else "", int(o.ambiguous), int(o.missing_chain),
        ])
    _store(state).write_csv(
        "resolutions.csv",
        ["shift_id", "cur_in", "cur_out", "hit", "candidates", "deposit_txid", "payout_txid",
         "ambiguous", "missing_chain"],
        rows,
    )
    return {
        "resolution": report,
        **_headline(state, shifts=len(report.outcomes), resolved=len(report.resolved)),
    }


def trace_patterns(state: State) -> State:
    heuristics: HeuristicRegistry = state["heuristics"]
    ledgers: Dict[str, Ledger] = state["ledgers"]
    resolved = state["resolution"].resolved
    store = _store(state)

    passthroughs = heuristics.call("pass_through", resolved)
    uturns = heuristics.call("uturn", resolved, ledgers)
    round_trips = heuristics.call("round_trip", resolved)
    bots = heuristics.call("trading_bots", state["shifts"])

    graph = build_relation_graph(passthroughs)
    store.write_with("relation_graph.csv", graph.export_csv)

    report: Dict[str, Any] = {
        "summary": state["resolution"].summary,
        "links": {
            "pass_through": len(passthroughs),
            **{kind.value: sum(l.kind is kind for l in uturns)
               for kind in (LinkKind.UTURN_BASIC, LinkKind.UTURN_ADDR, LinkKind.UTURN_UTXO)},
            "round_trips": len(round_trips),
            "round_trips_same_address": sum(bool(l.meta.get("same_address")) for l in round_trips),
        },
        "relation_graph": {
            "nodes": graph.graph.number_of_nodes(),
            "edges": len(graph.edges()),
            "weight": graph.total_weight,
            "self_loops": graph.self_loops,
            "skipped": graph.skipped,
            "top_receivers": [[str(a), n] for a, n in graph.rank_by_in_degree(10)],
            "top_senders": [[str(a), n] for a, n in graph.rank_by_out_degree(10)],
        },
        "trading_bots": [
            {"key": c.key, "shifts": len(c.shifts), "start": c.start, "end": c.end, "pairs": dict(c.pairs)}
            for c in bots
        ],
    }
    if ZEC in ledgers:
        report["pool_interactions"] = pool_shift_interactions(resolved, ledgers[ZEC])
    if DASH in ledgers:
        report["coinjoin_usage"] = coinjoin_shift_usage(
            resolved, ledgers[DASH], heuristics.get("coinjoins").defaults["denominations"])
    store.write_json("trace_report.json", report)
    return {
        "links": state.get("links", []) + passthroughs + uturns + round_trips,
        **_headline(state, uturns=report["links"][LinkKind.UTURN_BASIC.value],
                    round_trips=len(round_trips), bot_clusters=len(bots)),
    }


# ============================================================================
# Matrix simulation
# ============================================================================

def load_matrix_scenario(state: State) -> State:
    cfg = _cfg(state)
    if cfg.scenario:
        calls = load_scenario(cfg.scenario)
    else:
        logger.info(f"No scenario file; generating {cfg.matrix.users} users from seed {cfg.seed}")
        calls = random_scenario(cfg.seed, cfg.matrix.users, cfg.matrix.buy_prob)
    return {"calls": calls}


def run_matrix(state: State) -> State:
    cfg = _cfg(state)
    store = _store(state)
    world = new_world(gas_fee=to_units(cfg.matrix.gas, ETH_DECIMALS))
    run_scenario(world, state["calls"])
    report = profit_report(world, cfg.matrix.top_k)
    report["state_hash"] = state_hash(world)
    store.write_with("events.csv", lambda p: export_events(world, p))
    store.write_json("profit_report.json", report)
    return {
        "matrix_world": world,
        **_headline(state, users=report["users"], payments=report["payments"],
                    profitable_share=report["profitable_share"],
                    owner_net=format_units(report["owner_net"], ETH_DECIMALS),
                    state_hash=report["state_hash"]),
    }


# ============================================================================
# Synthetic worlds and scoring
# ============================================================================

def generate_world(state: State) -> State:
    cfg = _cfg(state)
    world = generate(cfg.gen, cfg.seed)
    store = _store(state)
    for path in write_world(world, store.root):
        store.artifacts.append(path.name)
    truth = Counter(link.kind.value for link in world.truth)
    return {
        "world": world,
        **_headline(state, transactions=sum(len(l) for l in world.ledgers.values()),
                    shifts=len(world.shifts), truth=dict(sorted(truth.items()))),
    }


def score_predictions(state: State) -> State:
    cfg = _cfg(state)
    if not cfg.pred or not cfg.truth:
        raise InputError("score needs --pred and --truth")
    predicted = read_evidence(cfg.pred)
    truth_path = Path(cfg.truth)
    truth = load_world(truth_path) if truth_path.is_dir() else read_evidence(truth_path)
    report = score(predicted, truth)
    _store(state).write_json("score.json", report)
    return _headline(state, precision=report.overall.precision, recall=report.overall.recall)


# ============================================================================
# Pipelines
# ============================================================================

def _has(symbol: str) -> Callable[[State], bool]:
    return lambda state: symbol in state.get("ledgers", {})


def _change_enabled(state: State) -> bool:
    return _cfg(state).cluster.change_heuristic


def _has_pool(state: State) -> bool:
    return _pool_ledger(state) is not None


def _has_shifts(state: State) -> bool:
    return _cfg(state).shifts is not None


CHAINS = Step("load_chains", load_chains, "Load chain manifests")
LEDGERS = Step("load_ledgers", load_chain_ledgers, "Parse and validate ledgers")
SUMMARY = Step("summarize_ledgers", summarize_ledgers, "Per-chain ledger statistics")
TAGS = Step("load_tags", load_tag_file, "Load address tags")
COSPEND = Step("cluster_inputs", cluster_inputs, "Multi-input clustering")
CHANGE = Step("cluster_change", cluster_change, "Single-change clustering", _change_enabled)
CLUSTER_TAGS = Step("tag_clusters", tag_clusters, "Propagate tags over clusters")
EVIDENCE = Step("write_evidence", write_links, "Write link evidence")
SHIFTS = Step("load_shifts", load_shift_stream, "Load shift stream and oracle")
RESOLVE = Step("resolve_shifts", resolve, "Phase 1 shift resolution")
PATTERNS = Step("trace_patterns", trace_patterns, "Pass-through, U-turn, round-trip and bot patterns")

PIPELINES: Dict[str, List[Step]] = {
    "ingest": [CHAINS, LEDGERS, SUMMARY],
    "cluster": [CHAINS, LEDGERS, TAGS, COSPEND, CHANGE, CLUSTER_TAGS],
    "zcash-analyze": [
        CHAINS, LEDGERS, TAGS, COSPEND, CHANGE,
        Step("analyze_pool", analyze_pool, "Shielded pool heuristics"),
        Step("find_coinjoins", find_coinjoins, "CoinJoin detection", _has(DASH)),
        EVIDENCE,
    ],
    "trace": [CHAINS, LEDGERS, SHIFTS, RESOLVE, PATTERNS, EVIDENCE],
    "simulate": [
        Step("load_scenario", load_matrix_scenario, "Load or generate a matrix scenario"),
        Step("run_matrix", run_matrix, "Run the matrix contract"),
    ],
    "generate": [Step("generate_world", generate_world, "Generate a synthetic world")],
    "score": [Step("score", score_predictions, "Score predicted links")],
    "report": [
        CHAINS, LEDGERS, SUMMARY, TAGS, COSPEND, CHANGE, CLUSTER_TAGS,
        Step("analyze_pool", analyze_pool, "Shielded pool heuristics", _has_pool),
        Step("find_coinjoins", find_coinjoins, "CoinJoin detection", _has(DASH)),
        Step("load_shifts", load_shift_stream, "Load shift stream and oracle", _has_shifts),
        Step("resolve_shifts", resolve, "Phase 1 shift resolution", _has_shifts),
        Step("trace_patterns", trace_patterns, "Cross-chain patterns", _has_shifts),
        EVIDENCE,
    ],
}

COMMANDS = tuple(PIPELINES)


def create_pipeline(command: str) -> Pipeline:
    if command not in PIPELINES:
        raise InputError(f"unknown command '{command}'")
    pipeline = Pipeline(name=command)
    pipeline.add_steps(PIPELINES[command])
    return pipeline


def build_report(run: PipelineRun, heuristics: HeuristicRegistry, artifacts: List[str]) -> PipelineReport:
    ran = list(dict.fromkeys(heuristics.calls))
    return PipelineReport(
        run_id=run.run_id,
        command=run.pipeline.name,
        status=run.status.value,
        created_at=run.created_at,
        completed_at=run.completed_at,
        stages=[StageReport(name=log.stage, status=log.status, duration_ms=log.duration_ms, error=log.error)
                for log in run.logs],
        heuristics=[HeuristicInfo(name=name, description=heuristics.get(name).description,
                                  params=_jsonable(heuristics.get(name).defaults))
                    for name in ran],
        headline=_jsonable(run.state.get("headline", {})),
        artifacts=list(artifacts),
    )


def run_command(config: RunConfig) -> PipelineRun:
    """
    Run one subcommand end to end.

    Writes the config snapshot first, records the run in ``runs.db`` and,
    for ``report``, writes ``report.json`` whether or not the run succeeded.
    Stage errors propagate unchanged after the run is recorded as failed.
    """
    pipeline = create_pipeline(config.command)
    store = ArtifactStore(config.out)
    store.write_json("config.json", config)
    heuristics = build_heuristics(config)
    runs = RunStore(config.out)
    run_id = uuid.uuid4().hex[:12]
    runs.start(run_id, config.command, config.model_dump(mode="json"))

    executor = PipelineExecutor(pipeline)
    state: State = {"config": config, "store": store, "heuristics": heuristics, "headline": {}}
    try:
        run = executor.execute(state, run_id=run_id)
    except Exception as e:
        if config.command == "report" and executor.run is not None:
            store.write_json("report.json", build_report(executor.run, heuristics, store.artifacts))
        runs.finish(run_id, RunStatus.FAILED.value, store.artifacts, str(e))
        runs.close()
        raise
    if config.command == "report":
        store.write_json("report.json", build_report(run, heuristics, store.artifacts))
    runs.finish(run_id, run.status.value, store.artifacts)
    runs.close()
    logger.info(f"[{run_id}] {config.command} finished: {run.state.get('headline', {})}")
    return run

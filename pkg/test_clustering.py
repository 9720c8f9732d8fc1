"""
Tests for address clustering, tags and the relation graph.

The co-spend partition is checked against networkx connected components
over the same co-spend graph.
"""

import csv

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.clustering import (
    ClusterSet,
    TagCategory,
    TagMap,
    build_relation_graph,
    change_cluster,
    export_clusters,
    load_tags,
    multi_input_cluster,
    propagate_tags,
)
from app.core.errors import MalformedRecordError, TagConflictError
from app.core.evidence import LinkEvidence, LinkKind
from app.core.ledger import Address, JoinSplit, LedgerTx, TxIn, TxOut, to_units


def A(value: str, chain: str = "BTC") -> Address:
    return Address(chain, value)


def tx_spending(txid: str, inputs, outputs=("out",), chain: str = "BTC") -> LedgerTx:
    return LedgerTx(
        txid=txid, chain=chain, height=0, timestamp=0,
        vin=tuple(TxIn(f"src-{txid}", i, a, 10) for i, a in enumerate(inputs)),
        vout=tuple(TxOut(a, 1) for a in outputs),
    )


def _js(zin=(), zout=()):
    return JoinSplit(zin=tuple(TxOut(a, v) for a, v in zin), zout=tuple(TxOut(a, v) for a, v in zout))


def cospend_oracle(txs) -> set:
    graph = nx.Graph()
    for tx in txs:
        addrs = [Address(tx.chain, a) for a in tx.addresses()]
        graph.add_nodes_from(addrs)
        inputs = [Address(tx.chain, a) for a in tx.input_addresses]
        nx.add_path(graph, inputs)
    return {frozenset(c) for c in nx.connected_components(graph)}


# ============================================================================
# Disjoint sets
# ============================================================================

def test_union_find_basics():
    clusters = ClusterSet()
    clusters.union(A("a"), A("b"))
    clusters.union(A("c"), A("d"))
    clusters.union(A("b"), A("d"))
    clusters.add(A("z"))

    assert clusters.connected(A("a"), A("c"))
    assert not clusters.connected(A("a"), A("z"))
    assert clusters.sizes() == {0: 4, 1: 1}
    assert clusters.cluster_id(A("z")) == 1
    assert len(clusters) == 5


def test_cluster_ids_are_deterministic():
    one, two = ClusterSet(), ClusterSet()
    pairs = [("a", "b"), ("c", "d"), ("e", "f"), ("d", "g")]
    for x, y in pairs:
        one.union(A(x), A(y))
    for x, y in reversed(pairs):
        two.union(A(y), A(x))
    assert one.clusters() == two.clusters()
    assert one.clusters()[0] == frozenset({A("c"), A("d"), A("g")})
    assert one.cluster_id(A("a")) == 1


def test_same_value_on_two_chains_stays_apart():
    clusters = multi_input_cluster([
        tx_spending("t1", ["a", "b"]),
        tx_spending("t2", ["a", "c"], chain="LTC"),
    ])
    assert not clusters.connected(A("a"), A("a", "LTC"))
    assert clusters.connected(A("a", "LTC"), A("c", "LTC"))


def test_skipped_transactions_do_not_merge():
    txs = [tx_spending("mix", ["a", "b", "c"]), tx_spending("t2", ["d", "e"])]
    clusters = multi_input_cluster(txs, skip=lambda tx: tx.txid == "mix")
    assert not clusters.connected(A("a"), A("b"))
    assert clusters.connected(A("d"), A("e"))
    assert A("a") in clusters


@settings(max_examples=60, deadline=None)
@given(st.lists(
    st.tuples(
        st.lists(st.integers(min_value=0, max_value=40), min_size=1, max_size=4),
        st.lists(st.integers(min_value=0, max_value=40), min_size=1, max_size=3),
    ),
    max_size=80,
))
def test_cospend_partition_matches_connected_components(shapes):
    txs = [
        tx_spending(f"t{n}", [f"a{i}" for i in ins], [f"a{o}" for o in outs])
        for n, (ins, outs) in enumerate(shapes)
    ]
    clusters = multi_input_cluster(txs)
    assert clusters.partition() == cospend_oracle(txs)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.lists(st.integers(min_value=0, max_value=30), min_size=1, max_size=4), max_size=60),
    st.integers(min_value=0, max_value=60),
)
def test_clustering_parts_then_merging_equals_clustering_the_whole(inputs, cut):
    txs = [tx_spending(f"t{n}", [f"a{i}" for i in ins]) for n, ins in enumerate(inputs)]
    whole = multi_input_cluster(txs)

    left, right = multi_input_cluster(txs[:cut]), multi_input_cluster(txs[cut:])
    merged = left.copy()
    merged.merge(right)
    assert merged.partition() == whole.partition()
    assert merged.clusters() == whole.clusters()

    right.merge(left)
    assert right.partition() == whole.partition()


def test_large_random_ledger_matches_oracle():
    import random

    rng = random.Random(7)
    txs = []
    for n in range(10_000):
        ins = [f"a{rng.randrange(20_000)}" for _ in range(rng.choice((1, 1, 2, 3)))]
        txs.append(tx_spending(f"t{n}", ins, [f"a{rng.randrange(20_000)}"]))
    assert multi_input_cluster(txs).partition() == cospend_oracle(txs)


# ============================================================================
# Change heuristic
# ============================================================================

def test_change_heuristic_joins_single_zout_address():
    fee = to_units("0.0001", 8)
    ok = LedgerTx(
        txid="c1", chain="ZEC", height=1, timestamp=1,
        vin=(TxIn("x", 0, "t1a", to_units("5", 8)), TxIn("x", 1, "t1b", to_units("1", 8))),
        vout=(TxOut("t1c", to_units("2", 8)),),
        joinsplits=(_js(zin=[("t1a", to_units("6", 8) - fee)], zout=[("t1c", to_units("2", 8))]),),
    )
    two_outputs = LedgerTx(
        txid="c2", chain="ZEC", height=2, timestamp=2,
        vin=(TxIn("y", 0, "t1d", to_units("5", 8)),),
        vout=(TxOut("t1e", to_units("1", 8)), TxOut("t1f", to_units("1", 8))),
        joinsplits=(_js(zout=[("t1e", to_units("1", 8)), ("t1f", to_units("1", 8))]),),
    )
    clusters = multi_input_cluster([ok, two_outputs])
    assert clusters.connected(A("t1a", "ZEC"), A("t1b", "ZEC"))
    assert not clusters.connected(A("t1a", "ZEC"), A("t1c", "ZEC"))

    changed = change_cluster([ok, two_outputs], clusters)
    assert changed.connected(A("t1a", "ZEC"), A("t1c", "ZEC"))
    assert not changed.connected(A("t1d", "ZEC"), A("t1e", "ZEC"))
    assert not clusters.connected(A("t1a", "ZEC"), A("t1c", "ZEC"))

    excluded = change_cluster([ok], clusters, excluded=[A("t1c", "ZEC")])
    assert not excluded.connected(A("t1a", "ZEC"), A("t1c", "ZEC"))


def test_change_heuristic_refuses_exchange_merges():
    tags = TagMap()
    tags.add(A("t1a", "ZEC"), "Bitfinex", TagCategory.EXCHANGE)
    tags.add(A("t1c", "ZEC"), "Poloniex", TagCategory.EXCHANGE)
    tx = LedgerTx(
        txid="c1", chain="ZEC", height=1, timestamp=1,
        vin=(TxIn("x", 0, "t1a", to_units("5", 8)),),
        vout=(TxOut("t1c", to_units("2", 8)),),
        joinsplits=(_js(zin=[("t1a", to_units("2", 8))], zout=[("t1c", to_units("2", 8))]),),
    )
    clusters = multi_input_cluster([tx])
    changed = change_cluster([tx], clusters, tags=tags)

    assert not changed.connected(A("t1a", "ZEC"), A("t1c", "ZEC"))
    [rejected] = changed.rejected
    assert rejected.txid == "c1"
    assert rejected.left_labels == frozenset({"Bitfinex"})
    assert rejected.right_labels == frozenset({"Poloniex"})


# ============================================================================
# Tags
# ============================================================================

def test_tag_map_refuses_relabeling():
    tags = TagMap()
    tags.add(A("a"), "Bitfinex", TagCategory.EXCHANGE)
    tags.add(A("a"), "Bitfinex", TagCategory.EXCHANGE)
    with pytest.raises(TagConflictError):
        tags.add(A("a"), "Poloniex", TagCategory.EXCHANGE)

    other = TagMap()
    other.add(A("a"), "Kraken", TagCategory.EXCHANGE)
    other.add(A("b"), "Kraken", TagCategory.EXCHANGE)
    conflicts = tags.merge(other)
    assert [c.address for c in conflicts] == [A("a")]
    assert tags.get(A("a")).label == "Bitfinex"
    assert tags.get(A("b")).label == "Kraken"


def test_load_tags(tmp_path):
    path = tmp_path / "tags.csv"
    path.write_text("address,chain,label,category\n1abc,BTC,Bitfinex,exchange\nt1p,ZEC,Flypool,POOL\n")
    tags = load_tags(path)
    assert tags.get(A("1abc")).category is TagCategory.EXCHANGE
    assert tags.with_category(TagCategory.POOL) == {A("t1p", "ZEC")}

    path.write_text("address,chain,label,category\n1abc,BTC,Bitfinex,casino\n")
    with pytest.raises(MalformedRecordError):
        load_tags(path)


def test_propagate_tags_reports_dominant_and_conflicts(tmp_path):
    clusters = ClusterSet()
    for x in ("b", "c", "d"):
        clusters.union(A("a"), A(x))
    clusters.union(A("e"), A("f"))
    clusters.add(A("g"))
    tags = TagMap()
    tags.add(A("a"), "Bitfinex", TagCategory.EXCHANGE)
    tags.add(A("b"), "Bitfinex", TagCategory.EXCHANGE)
    tags.add(A("c"), "Poloniex", TagCategory.EXCHANGE)
    tags.add(A("zz"), "Elsewhere", TagCategory.OTHER)

    summaries = propagate_tags(clusters, tags)
    big = summaries[0]
    assert big.dominant == "Bitfinex"
    assert big.dominant_category is TagCategory.EXCHANGE
    assert big.conflicts == ["Poloniex"]
    assert big.coverage == 0.75
    assert summaries[1].dominant is None
    assert set(summaries) == {0, 1, 2}
    assert set(propagate_tags(clusters, tags, include_untagged=False)) == {0}

    export_clusters(clusters, tmp_path / "clusters.csv")
    with open(tmp_path / "clusters.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert {r["cluster_id"] for r in rows if r["address"] in ("a", "b", "c", "d")} == {"0"}


# ============================================================================
# Relation graph
# ============================================================================

def _pass_through(src: Address, dst: Address) -> LinkEvidence:
    return LinkEvidence(kind=LinkKind.PASS_THROUGH, src_addrs=(src,), dst_addrs=(dst,))


def test_relation_graph_degrees_match_recount():
    import random

    rng = random.Random(3)
    senders = [A(f"s{i}") for i in range(40)]
    receivers = [A(f"r{i}", "ETH") for i in range(40)]
    links = [_pass_through(rng.choice(senders), rng.choice(receivers)) for _ in range(1000)]
    graph = build_relation_graph(links)

    pairs = {(l.src_addrs[0], l.dst_addrs[0]) for l in links}
    assert graph.total_weight == 1000
    for v in receivers:
        assert graph.input_cluster(v) == {u for u, w in pairs if w == v}
    in_degrees = {v: sum(1 for _, w in pairs if w == v) for v in receivers}
    expected = {}
    for v in {w for _, w in pairs}:
        expected[in_degrees[v]] = expected.get(in_degrees[v], 0) + 1
    senders_used = {u for u, _ in pairs}
    expected[0] = len(senders_used)
    assert graph.degree_histogram("in") == dict(sorted(expected.items()))
    top, degree = graph.rank_by_in_degree(1)[0]
    assert degree == max(in_degrees.values())


def test_relation_graph_counts_the_links_it_drops(tmp_path):
    graph = build_relation_graph([
        _pass_through(A("u"), A("u")),
        _pass_through(A("u"), A("v", "ETH")),
        _pass_through(A("u"), A("v", "ETH")),
        LinkEvidence(kind=LinkKind.UTURN_BASIC, src_addrs=(A("x"),), dst_addrs=(A("y"),)),
    ])
    assert graph.edges() == [(A("u"), A("v", "ETH"), 2)]
    assert (graph.total_weight, graph.self_loops, graph.skipped) == (2, 1, 1)
    assert graph.output_cluster(A("u")) == {A("v", "ETH")}
    graph.export_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines() == ["src,dst,weight", "BTC:u,ETH:v,2"]

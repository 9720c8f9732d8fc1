"""
Address clustering, tag propagation and the cross-chain relation graph.

- ClusterSet: disjoint-set forest over chain-scoped addresses with
  union-by-size, path halving and deterministic cluster ids
- multi_input_cluster / change_cluster: the co-spend and single-change heuristics
- TagMap / propagate_tags: entity labels and their per-cluster summary
- RelationGraph: directed, weighted "who shifted to whom" graph
"""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Optional,
    Set,
    Tuple,
    Union,
)

import networkx as nx

from app.core.errors import MalformedRecordError, TagConflictError
from app.core.evidence import LinkEvidence, LinkKind
from app.core.ledger import Address, LedgerTx

logger = logging.getLogger(__name__)


# ============================================================================
# Tags
# ============================================================================

class TagCategory(str, Enum):
    EXCHANGE = "EXCHANGE"
    POOL = "POOL"
    FOUNDER = "FOUNDER"
    MINER = "MINER"
    SERVICE = "SERVICE"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Tag:
    label: str
    category: TagCategory


@dataclass(frozen=True)
class TagConflict:
    address: Address
    existing: Tag
    incoming: Tag


class TagMap:
    """Address -> (label, category). An address never silently changes label."""

    def __init__(self) -> None:
        self._tags: Dict[Address, Tag] = {}

    def add(self, address: Address, label: str, category: TagCategory) -> None:
        """
        Tag an address.

        Raises:
            TagConflictError: if the address already carries a different tag
        """
        tag = Tag(label, TagCategory(category))
        existing = self._tags.get(address)
        if existing is not None and existing != tag:
            raise TagConflictError(
                f"{address} already tagged {existing.label}/{existing.category.value}, "
                f"refusing {label}/{tag.category.value}",
                address=str(address),
            )
        self._tags[address] = tag

    def merge(self, other: "TagMap") -> List[TagConflict]:
        """Add every tag of ``other``; conflicting ones are returned, not applied."""
        conflicts: List[TagConflict] = []
        for address, tag in other.items():
            existing = self._tags.get(address)
            if existing is not None and existing != tag:
                conflicts.append(TagConflict(address, existing, tag))
                continue
            self._tags[address] = tag
        for c in conflicts:
            logger.warning(f"TAG_CONFLICT {c.address}: {c.existing.label} vs {c.incoming.label}")
        return conflicts

    def get(self, address: Address) -> Optional[Tag]:
        return self._tags.get(address)

    def __contains__(self, address: object) -> bool:
        return address in self._tags

    def __len__(self) -> int:
        return len(self._tags)

    def items(self) -> Iterator[Tuple[Address, Tag]]:
        return iter(self._tags.items())

    def with_category(self, category: TagCategory) -> Set[Address]:
        return {a for a, t in self._tags.items() if t.category is category}


def load_tags(path: Union[str, Path]) -> TagMap:
    """Read a tag CSV with header ``address,chain,label,category``."""
    tags = TagMap()
    with Path(path).open(newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                tags.add(Address.of(row["chain"], row["address"]), row["label"],
                         TagCategory(row["category"].upper()))
            except (KeyError, ValueError, AttributeError) as e:
                if isinstance(e, TagConflictError):
                    raise
                raise MalformedRecordError(f"bad tag row: {e}", line=line_no) from e
    logger.info(f"Loaded {len(tags)} tags from {path}")
    return tags


def export_tags(tags: TagMap, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["address", "chain", "label", "category"])
        for address, tag in sorted(tags.items()):
            writer.writerow([address.value, address.chain, tag.label, tag.category.value])


# ============================================================================
# Disjoint-set forest
# ============================================================================

@dataclass(frozen=True)
class RejectedMerge:
    """A merge the exchange guard refused (likely heuristic false positive)."""
    left: Address
    right: Address
    txid: str
    left_labels: FrozenSet[str]
    right_labels: FrozenSet[str]


class ClusterSet:
    """
    Disjoint-set partition of addresses.

    Cluster ids are assigned on demand in a deterministic pass: clusters
    sorted by (size descending, smallest address), largest cluster = 0.
    """

    def __init__(self) -> None:
        self._parent: Dict[Address, Address] = {}
        self._size: Dict[Address, int] = {}
        self._ids: Optional[Dict[Address, int]] = None
        self.rejected: List[RejectedMerge] = []

    def add(self, address: Address) -> None:
        if address not in self._parent:
            self._parent[address] = address
            self._size[address] = 1
            self._ids = None

    def find(self, address: Address) -> Address:
        parent = self._parent
        while parent[address] != address:
            parent[address] = parent[parent[address]]
            address = parent[address]
        return address

    def union(self, a: Address, b: Address) -> Address:
        """Merge the clusters of a and b. Returns the surviving root."""
        self.add(a)
        self.add(b)
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self._size[ra] < self._size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size.pop(rb)
        self._ids = None
        return ra

    def connected(self, a: Address, b: Address) -> bool:
        return self.find(a) == self.find(b)

    def __contains__(self, address: object) -> bool:
        return address in self._parent

    def __len__(self) -> int:
        return len(self._parent)

    def __iter__(self) -> Iterator[Address]:
        return iter(self._parent)

    def copy(self) -> "ClusterSet":
        other = ClusterSet()
        other._parent = dict(self._parent)
        other._size = dict(self._size)
        other.rejected = list(self.rejected)
        return other

    def merge(self, other: "ClusterSet") -> None:
        """Fold another partition into this one."""
        for address in other:
            self.union(address, other.find(address))

    # ------------------------------------------------------------------ ids

    def _groups(self) -> Dict[Address, List[Address]]:
        groups: Dict[Address, List[Address]] = defaultdict(list)
        for address in self._parent:
            groups[self.find(address)].append(address)
        return groups

    def _assign_ids(self) -> Dict[Address, int]:
        if self._ids is None:
            groups = sorted(self._groups().values(), key=lambda m: (-len(m), min(m)))
            self._ids = {a: cid for cid, members in enumerate(groups) for a in members}
        return self._ids

    def cluster_id(self, address: Address) -> int:
        return self._assign_ids()[address]

    def clusters(self) -> Dict[int, FrozenSet[Address]]:
        out: Dict[int, Set[Address]] = defaultdict(set)
        for address, cid in self._assign_ids().items():
            out[cid].add(address)
        return {cid: frozenset(members) for cid, members in sorted(out.items())}

    def sizes(self) -> Dict[int, int]:
        return {cid: len(m) for cid, m in self.clusters().items()}

    def partition(self) -> Set[FrozenSet[Address]]:
        return {frozenset(m) for m in self._groups().values()}


def tx_input_addresses(tx: LedgerTx) -> Tuple[str, ...]:
    """Transparent addresses funding a transaction: vin plus joinsplit zin."""
    return tuple(dict.fromkeys(tx.input_addresses + tx.zin_addresses))


def multi_input_cluster(
    txs: Iterable[LedgerTx],
    skip: Optional[Callable[[LedgerTx], bool]] = None,
) -> ClusterSet:
    """
    Co-spend clustering: addresses used as inputs to one transaction share an owner.

    Every transparent address seen is added; account-chain records are ignored.

    Args:
        txs: UTXO transactions (transparent, shielded or mixed)
        skip: Optional predicate; matching transactions add their addresses but
            do not merge them (used to keep CoinJoins out)

    Returns:
        ClusterSet equal to the connected components of the co-spend graph
    """
    clusters = ClusterSet()
    count = 0
    for tx in txs:
        if tx.xfer is not None:
            continue
        count += 1
        chain = tx.chain
        for addr in tx.addresses():
            clusters.add(Address(chain, addr))
        if skip is not None and skip(tx):
            continue
        inputs = tx_input_addresses(tx)
        if len(inputs) < 2:
            continue
        first = Address(chain, inputs[0])
        for other in inputs[1:]:
            clusters.union(first, Address(chain, other))
    logger.info(f"Clustered {len(clusters)} addresses from {count} transactions")
    return clusters


def change_cluster(
    txs: Iterable[LedgerTx],
    clusters: ClusterSet,
    excluded: Iterable[Address] = (),
    tags: Optional[TagMap] = None,
) -> ClusterSet:
    """
    Single-change heuristic for shielding transactions.

    A joinsplit transaction with transparent inputs whose only transparent
    output is a single zOut address has that address joined to the inputs.
    Merges that would join two clusters tagged with different exchange
    labels are refused and recorded on ``result.rejected``.

    Args:
        txs: Zcash transactions
        clusters: Partition to extend (left unchanged)
        excluded: Known fee/operator addresses never treated as change
        tags: Optional tags used for the exchange guard

    Returns:
        A new ClusterSet
    """
    result = clusters.copy()
    excluded = set(excluded)
    labels: Dict[Address, Set[str]] = defaultdict(set)
    if tags is not None:
        for address in tags.with_category(TagCategory.EXCHANGE):
            if address in result:
                labels[result.find(address)].add(tags.get(address).label)

    merged = 0
    for tx in txs:
        if not tx.joinsplits:
            continue
        inputs = tx_input_addresses(tx)
        zouts = tx.zout_addresses
        if not inputs or len(zouts) != 1:
            continue
        if any(a != zouts[0] for a in tx.output_addresses):
            continue
        target = Address(tx.chain, zouts[0])
        if target in excluded or zouts[0] in inputs:
            continue
        result.add(target)
        for inp in inputs:
            source = Address(tx.chain, inp)
            result.add(source)
            ra, rb = result.find(source), result.find(target)
            if ra == rb:
                continue
            la, lb = labels.get(ra, set()), labels.get(rb, set())
            if la and lb and la != lb:
                rejected = RejectedMerge(source, target, tx.txid, frozenset(la), frozenset(lb))
                result.rejected.append(rejected)
                logger.warning(f"Refused change merge in {tx.txid}: {sorted(la)} vs {sorted(lb)}")
                continue
            root = result.union(source, target)
            labels.pop(ra, None)
            labels.pop(rb, None)
            if la or lb:
                labels[root] = la | lb
            merged += 1
    logger.info(f"Change heuristic merged {merged} clusters, refused {len(result.rejected)}")
    return result


@dataclass
class ClusterTagSummary:
    cluster_id: int
    size: int
    labels: Counter = field(default_factory=Counter)
    dominant: Optional[str] = None
    dominant_category: Optional[TagCategory] = None
    coverage: float = 0.0
    conflicts: List[str] = field(default_factory=list)


def propagate_tags(
    clusters: ClusterSet,
    tags: TagMap,
    include_untagged: bool = True,
) -> Dict[int, ClusterTagSummary]:
    """
    Summarize the tags found in every cluster.

    The dominant label is the most frequent one (ties broken by label);
    every other label is listed as a conflict.
    """
    sizes = clusters.sizes()
    summaries: Dict[int, ClusterTagSummary] = {}
    categories: Dict[Tuple[int, str], TagCategory] = {}
    tagged: Counter = Counter()
    for address, tag in tags.items():
        if address not in clusters:
            continue
        cid = clusters.cluster_id(address)
        summary = summaries.setdefault(cid, ClusterTagSummary(cid, sizes[cid]))
        summary.labels[tag.label] += 1
        categories.setdefault((cid, tag.label), tag.category)
        tagged[cid] += 1

    for cid, summary in summaries.items():
        ranked = sorted(summary.labels.items(), key=lambda kv: (-kv[1], kv[0]))
        summary.dominant = ranked[0][0]
        summary.dominant_category = categories[(cid, summary.dominant)]
        summary.coverage = tagged[cid] / summary.size
        summary.conflicts = sorted(label for label, _ in ranked[1:])
        if summary.conflicts:
            logger.warning(f"TAG_CONFLICT in cluster {cid}: {summary.dominant} vs {summary.conflicts}")

    if include_untagged:
        for cid, size in sizes.items():
            summaries.setdefault(cid, ClusterTagSummary(cid, size))
    return dict(sorted(summaries.items()))


def export_clusters(clusters: ClusterSet, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["address", "chain", "cluster_id"])
        for cid, members in clusters.clusters().items():
            for address in sorted(members):
                writer.writerow([address.value, address.chain, cid])


# ============================================================================
# Relation graph
# ============================================================================

class RelationGraph:
    """
    Directed graph of shift activity: an edge u -> v with weight n means
    n pass-through links from sender u to recipient v.

    Links that add no edge are counted, so that
    ``total_weight + self_loops + skipped`` equals the links supplied.
    """

    def __init__(self) -> None:
        self.graph = nx.DiGraph()
        self.self_loops = 0
        self.skipped = 0

    def add_shift(self, u: Address, v: Address) -> bool:
        if u == v:
            self.self_loops += 1
            return False
        if self.graph.has_edge(u, v):
            self.graph[u][v]["weight"] += 1
        else:
            self.graph.add_edge(u, v, weight=1)
        return True

    def input_cluster(self, v: Address) -> Set[Address]:
        """Every address that sent through the service to v."""
        return set(self.graph.predecessors(v)) if v in self.graph else set()

    def output_cluster(self, u: Address) -> Set[Address]:
        """Every address u received shifted coins at."""
        return set(self.graph.successors(u)) if u in self.graph else set()

    def rank_by_in_degree(self, k: Optional[int] = None) -> List[Tuple[Address, int]]:
        ranked = sorted(self.graph.in_degree(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k] if k is not None else ranked

    def rank_by_out_degree(self, k: Optional[int] = None) -> List[Tuple[Address, int]]:
        ranked = sorted(self.graph.out_degree(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k] if k is not None else ranked

    def degree_histogram(self, direction: str = "in") -> Dict[int, int]:
        degrees = self.graph.in_degree() if direction == "in" else self.graph.out_degree()
        return dict(sorted(Counter(d for _, d in degrees).items()))

    def edges(self) -> List[Tuple[Address, Address, int]]:
        return sorted((u, v, d["weight"]) for u, v, d in self.graph.edges(data=True))

    @property
    def total_weight(self) -> int:
        return sum(d["weight"] for _, _, d in self.graph.edges(data=True))

    def export_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src", "dst", "weight"])
            for u, v, w in self.edges():
                writer.writerow([str(u), str(v), w])


def build_relation_graph(passthroughs: Iterable[LinkEvidence]) -> RelationGraph:
    """
    Build the common-relationship graph from pass-through links.

    Each link contributes one unit of weight from its first deposit input
    address to its withdrawal address. Self-shifts and links of another kind
    or without endpoints add no edge and are counted on the graph instead.
    """
    graph = RelationGraph()
    for link in passthroughs:
        if link.kind is not LinkKind.PASS_THROUGH or not link.src_addrs or not link.dst_addrs:
            graph.skipped += 1
            continue
        graph.add_shift(link.src_addrs[0], link.dst_addrs[0])
    logger.info(
        f"Relation graph: {graph.graph.number_of_nodes()} nodes, weight {graph.total_weight}, "
        f"{graph.self_loops} self-shifts, {graph.skipped} skipped"
    )
    return graph

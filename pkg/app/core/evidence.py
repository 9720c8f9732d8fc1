"""
Link evidence produced by the heuristics and detectors.

One LinkEvidence records one heuristic-derived link: which heuristic made
it, with which parameters, between which transactions/addresses, and how
much value it carries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Tuple, Union

from pydantic import ValidationError

from app.core.errors import MalformedRecordError
from app.core.ledger import Address
from app.models.schemas import EndpointRecord, LinkEvidenceRecord

logger = logging.getLogger(__name__)


class LinkKind(str, Enum):
    FOUNDER_VALUE = "FOUNDER_VALUE"
    MINER_PAYOUT = "MINER_PAYOUT"
    ROUND_TRIP_UNIQUE = "ROUND_TRIP_UNIQUE"
    PASS_THROUGH = "PASS_THROUGH"
    UTURN_BASIC = "UTURN_BASIC"
    UTURN_ADDR = "UTURN_ADDR"
    UTURN_UTXO = "UTURN_UTXO"
    XRT = "XRT"
    TSB_FLAG = "TSB_FLAG"
    COINJOIN = "COINJOIN"


@dataclass(frozen=True)
class LinkEvidence:
    """One link. ``value`` is in smallest units of ``chain``."""
    kind: LinkKind
    params: Mapping[str, Any] = field(default_factory=dict, compare=False)
    src_txs: Tuple[str, ...] = ()
    src_addrs: Tuple[Address, ...] = ()
    dst_txs: Tuple[str, ...] = ()
    dst_addrs: Tuple[Address, ...] = ()
    value: int = 0
    chain: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def key(self) -> Tuple[Any, ...]:
        """
        Canonical identity used for scoring.

        Transaction endpoints identify a link when present; address-only
        links (flags over clusters) fall back to their address sets.
        """
        if self.src_txs or self.dst_txs:
            return (self.kind, tuple(sorted(self.src_txs)), tuple(sorted(self.dst_txs)))
        return (self.kind, tuple(sorted(self.src_addrs)), tuple(sorted(self.dst_addrs)))


def to_record(link: LinkEvidence) -> LinkEvidenceRecord:
    return LinkEvidenceRecord(
        kind=link.kind.value,
        params=dict(link.params),
        src=EndpointRecord(txs=list(link.src_txs), addrs=[str(a) for a in link.src_addrs]),
        dst=EndpointRecord(txs=list(link.dst_txs), addrs=[str(a) for a in link.dst_addrs]),
        value=link.value,
        chain=link.chain,
        meta=dict(link.meta),
    )


def from_record(record: LinkEvidenceRecord) -> LinkEvidence:
    return LinkEvidence(
        kind=LinkKind(record.kind),
        params=record.params,
        src_txs=tuple(record.src.txs),
        src_addrs=tuple(Address.parse(a) for a in record.src.addrs),
        dst_txs=tuple(record.dst.txs),
        dst_addrs=tuple(Address.parse(a) for a in record.dst.addrs),
        value=record.value,
        chain=record.chain,
        meta=record.meta,
    )


def write_evidence(links: Iterable[LinkEvidence], path: Union[str, Path]) -> int:
    """Write links as JSONL. Returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w") as fh:
        for link in links:
            fh.write(to_record(link).model_dump_json())
            fh.write("\n")
            count += 1
    logger.info(f"Wrote {count} links to {path}")
    return count


def read_evidence(path: Union[str, Path]) -> List[LinkEvidence]:
    links: List[LinkEvidence] = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                links.append(from_record(LinkEvidenceRecord.model_validate(json.loads(line))))
            except (ValidationError, ValueError) as e:
                raise MalformedRecordError(f"bad evidence record: {e}", line=line_no) from e
    return links

"""
Storage layer for run artifacts and run records.

Artifacts (CSV/JSON/JSONL) are plain files under the output directory; run
records live in a SQLite database (``runs.db``) next to them.
"""

from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union
import csv
import json
import logging

from pydantic import BaseModel
from sqlalchemy import JSON, DateTime, String, Text, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column

logger = logging.getLogger(__name__)

RUNS_DB = "runs.db"


class ArtifactStore:
    """Writes outputs under one directory and remembers what was written."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _record(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        logger.info(f"Wrote artifact: {self.root / name}")
        return self.root / name

    def write_json(self, name: str, payload: Union[BaseModel, Dict[str, Any], List[Any]]) -> Path:
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        else:
            text = json.dumps(payload, indent=2, sort_keys=True, default=str)
        self.path(name).write_text(text + "\n")
        return self._record(name)

    def write_csv(self, name: str, header: List[str], rows: List[List[Any]]) -> Path:
        with open(self.path(name), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return self._record(name)

    def write_with(self, name: str, writer: Callable[[Path], Any]) -> Path:
        """Hand the path to a module-level writer (``write_evidence`` and friends)."""
        writer(self.path(name))
        return self._record(name)


# ============================================================================
# Run records
# ============================================================================

class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    __tablename__ = "runs"

    run_id: Mapped[str] = mapped_column(String(32), primary_key=True)
    command: Mapped[str] = mapped_column(String(32))
    status: Mapped[str] = mapped_column(String(16))
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True))
    completed_at: Mapped[Optional[datetime]] = mapped_column(DateTime(timezone=True), nullable=True)
    config: Mapped[Dict[str, Any]] = mapped_column(JSON, default=dict)
    artifacts: Mapped[List[str]] = mapped_column(JSON, default=list)
    error: Mapped[Optional[str]] = mapped_column(Text, nullable=True)


class RunStore:
    """Run history of one output directory, kept in SQLite."""

    def __init__(self, root: Union[str, Path], filename: str = RUNS_DB):
        path = Path(root) / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{path}")
        Base.metadata.create_all(self.engine)

    def start(self, run_id: str, command: str, config: Dict[str, Any]) -> None:
        with Session(self.engine) as session:
            session.add(RunRecord(
                run_id=run_id, command=command, status="running",
                created_at=datetime.now(timezone.utc), config=config, artifacts=[],
            ))
            session.commit()
        logger.info(f"Saved run: {run_id}")

    def finish(self, run_id: str, status: str, artifacts: List[str], error: Optional[str] = None) -> None:
        with Session(self.engine) as session:
            record = session.get(RunRecord, run_id)
            if record is None:
                logger.warning(f"Run {run_id} was never started")
                return
            record.status = status
            record.completed_at = datetime.now(timezone.utc)
            record.artifacts = list(artifacts)
            record.error = error
            session.commit()

    def get(self, run_id: str) -> Optional[RunRecord]:
        with Session(self.engine) as session:
            return session.get(RunRecord, run_id)

    def list_all(self) -> List[RunRecord]:
        with Session(self.engine) as session:
            return list(session.scalars(select(RunRecord).order_by(RunRecord.created_at)))

    def list_by_command(self, command: str) -> List[RunRecord]:
        with Session(self.engine) as session:
            stmt = select(RunRecord).where(RunRecord.command == command).order_by(RunRecord.created_at)
            return list(session.scalars(stmt))

    def close(self) -> None:
        self.engine.dispose()

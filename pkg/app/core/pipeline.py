"""
Stage pipeline engine.

Every CLI subcommand runs as a small directed pipeline:
- Stages: functions that read the shared state and return updates to it
- Edges: connections between stages with optional conditions
- State: shared dictionary flowing through the pipeline
- Branching: a stage whose toggle is off is skipped through a conditional edge
- Looping: guarded by a maximum step count
"""

from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
from enum import Enum
import logging
import time
import uuid
from datetime import datetime, timezone

from app.core.errors import InvariantViolation

logger = logging.getLogger(__name__)

State = Dict[str, Any]
StageFunc = Callable[[State], Optional[State]]


def _now() -> datetime:
    return datetime.now(timezone.utc)


class RunStatus(str, Enum):
    """Status of a pipeline run."""
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class StageLog:
    """Log entry for one stage execution."""
    step_id: str
    stage: str
    timestamp: datetime
    status: str
    keys_written: List[str] = field(default_factory=list)
    error: Optional[str] = None
    duration_ms: float = 0.0


@dataclass
class StageDefinition:
    name: str
    func: StageFunc
    description: str = ""


@dataclass(frozen=True)
class Step:
    """A stage in a linear pipeline, skipped when ``when`` is given and false."""
    name: str
    func: StageFunc
    description: str = ""
    when: Optional[Callable[[State], bool]] = None


@dataclass
class EdgeDefinition:
    """Edge between stages; taken when ``condition`` is None or holds on the state."""
    from_stage: str
    to_stage: str
    condition: Optional[Callable[[State], bool]] = None
    description: str = ""


class Pipeline:
    """A directed graph of stages with a single entry point."""

    def __init__(self, name: str = "pipeline"):
        self.name = name
        self.stages: Dict[str, StageDefinition] = {}
        self.edges: List[EdgeDefinition] = []
        self.entry_point: Optional[str] = None

    def add_stage(self, name: str, func: StageFunc, description: str = "") -> None:
        """Add a stage; the first stage added becomes the entry point."""
        if name in self.stages:
            raise ValueError(f"Stage '{name}' already exists")
        self.stages[name] = StageDefinition(name=name, func=func, description=description)
        if self.entry_point is None:
            self.entry_point = name

    def add_edge(
        self,
        from_stage: str,
        to_stage: str,
        condition: Optional[Callable[[State], bool]] = None,
        description: str = "",
    ) -> None:
        if from_stage not in self.stages:
            raise ValueError(f"Source stage '{from_stage}' does not exist")
        if to_stage not in self.stages:
            raise ValueError(f"Destination stage '{to_stage}' does not exist")
        self.edges.append(EdgeDefinition(from_stage, to_stage, condition, description))

    def add_steps(self, steps: Sequence["Step"]) -> None:
        """
        Add stages run in order.

        A step with a ``when`` condition is skipped when it does not hold:
        each stage gets an edge to every following optional step up to and
        including the next unconditional one, nearest first.
        """
        for step in steps:
            self.add_stage(step.name, step.func, step.description)
        for i, step in enumerate(steps):
            for later in steps[i + 1:]:
                self.add_edge(step.name, later.name, later.when,
                              description="optional" if later.when else "")
                if later.when is None:
                    break

    def next_stages(self, current: str, state: State) -> List[str]:
        return [
            e.to_stage for e in self.edges
            if e.from_stage == current and (e.condition is None or e.condition(state))
        ]

    def validate(self) -> Tuple[bool, str]:
        if not self.stages:
            return False, "Pipeline has no stages"
        if self.entry_point is None:
            return False, "No entry point set"
        if self.entry_point not in self.stages:
            return False, f"Entry point '{self.entry_point}' does not exist"
        return True, ""


class PipelineRun:
    """One execution of a pipeline."""

    def __init__(self, pipeline: Pipeline, initial_state: State, run_id: Optional[str] = None):
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.pipeline = pipeline
        self.state = dict(initial_state)
        self.status = RunStatus.RUNNING
        self.logs: List[StageLog] = []
        self.created_at = _now()
        self.completed_at: Optional[datetime] = None
        self.error: Optional[str] = None
        self.visited: List[str] = []

    def stage_log(self, stage: str) -> Optional[StageLog]:
        """Latest log entry for ``stage``."""
        for entry in reversed(self.logs):
            if entry.stage == stage:
                return entry
        return None


class PipelineExecutor:
    """
    Runs a pipeline stage by stage.

    When several edges leave a stage, the first one whose condition holds is
    taken. A stage that raises marks the run FAILED and the exception
    propagates unchanged, so callers can map it to an exit code.
    """

    MAX_STEPS = 1000

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self.run: Optional[PipelineRun] = None

    def execute(self, initial_state: State, max_steps: Optional[int] = None,
                run_id: Optional[str] = None) -> PipelineRun:
        ok, message = self.pipeline.validate()
        if not ok:
            raise ValueError(f"Invalid pipeline: {message}")

        run = self.run = PipelineRun(self.pipeline, initial_state, run_id)
        max_steps = max_steps or self.MAX_STEPS
        steps = 0
        try:
            current = self.pipeline.entry_point
            while current:
                if steps >= max_steps:
                    raise InvariantViolation(f"pipeline '{self.pipeline.name}' exceeded {max_steps} steps")
                steps += 1
                logger.info(f"[{run.run_id}] Executing stage: {current}")
                stage = self.pipeline.stages[current]
                started = time.perf_counter()
                try:
                    result = stage.func(run.state)
                except Exception as e:
                    run.logs.append(StageLog(
                        step_id=uuid.uuid4().hex[:8], stage=current, timestamp=_now(), status="error",
                        error=str(e), duration_ms=(time.perf_counter() - started) * 1000,
                    ))
                    raise
                written = sorted(result) if isinstance(result, dict) else []
                if written:
                    run.state.update(result)
                run.logs.append(StageLog(
                    step_id=uuid.uuid4().hex[:8], stage=current, timestamp=_now(), status="success",
                    keys_written=written, duration_ms=(time.perf_counter() - started) * 1000,
                ))
                run.visited.append(current)
                following = self.pipeline.next_stages(current, run.state)
                current = following[0] if following else None

            run.status = RunStatus.COMPLETED
        except Exception as e:
            run.status = RunStatus.FAILED
            run.error = str(e)
            logger.error(f"[{run.run_id}] Pipeline failed: {e}")
            raise
        finally:
            run.completed_at = _now()
        return run

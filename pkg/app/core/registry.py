"""
Heuristic registry.

Maps heuristic names to the callables that implement them, with a
description and default parameters, so pipeline stages can run the
enabled heuristics by name and reports can list what ran.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional
import logging

from app.core.errors import UnknownHeuristicError

logger = logging.getLogger(__name__)


@dataclass
class Heuristic:
    name: str
    func: Callable[..., Any]
    description: str = ""
    defaults: Dict[str, Any] = field(default_factory=dict)
    group: str = ""


class HeuristicRegistry:
    """Named heuristics, grouped by the pipeline stage that runs them."""

    def __init__(self):
        self.heuristics: Dict[str, Heuristic] = {}
        self.calls: List[str] = []

    def register(
        self,
        name: str,
        func: Callable[..., Any],
        description: str = "",
        defaults: Optional[Dict[str, Any]] = None,
        group: str = "",
    ) -> None:
        if name in self.heuristics:
            logger.warning(f"Heuristic '{name}' is being overwritten")
        self.heuristics[name] = Heuristic(name, func, description, dict(defaults or {}), group)
        logger.debug(f"Registered heuristic: {name}")

    def get(self, name: str) -> Optional[Heuristic]:
        return self.heuristics.get(name)

    def call(self, name: str, *args: Any, **overrides: Any) -> Any:
        """
        Call a heuristic with its defaults, overridden by ``overrides``.

        Every call is remembered in ``calls`` for the run report.
        """
        heuristic = self.heuristics.get(name)
        if heuristic is None:
            raise UnknownHeuristicError(f"Heuristic '{name}' not found in registry")
        logger.info(f"Running heuristic: {name}")
        self.calls.append(name)
        return heuristic.func(*args, **{**heuristic.defaults, **overrides})

    def in_group(self, group: str) -> List[Heuristic]:
        return [h for h in self.heuristics.values() if h.group == group]

    def list_heuristics(self) -> Dict[str, str]:
        return {name: h.description for name, h in self.heuristics.items()}


"""
Command-line front door for chaintrace.

Subcommands:
- ingest:        parse and validate ledgers, write per-chain statistics
- cluster:       address clustering and tag propagation
- zcash-analyze: shielded pool heuristics and CoinJoin detection
- trace:         cross-chain shift resolution and pattern detection
- simulate:      matrix contract simulation
- generate:      synthetic world with ground truth
- score:         precision/recall of predicted links against ground truth
- report:        every analysis the inputs allow, plus report.json

Exit codes: 0 success, 2 bad input or usage, 3 internal invariant violated.
"""

from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from pathlib import Path
import json
import logging
import os
import sys

import click
from click.core import ParameterSource
from pydantic import ValidationError

from app.core.errors import ChainTraceError, InputError, InvariantViolation
from app.models.schemas import RunConfig
from app.workflows.forensics import run_command

logger = logging.getLogger(__name__)

LOG_ENV = "CHAINTRACE_LOG"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3

DEFAULTS = RunConfig()


def configure_logging() -> None:
    """Configure root logging; the level comes from CHAINTRACE_LOG."""
    requested = os.environ.get(LOG_ENV, "INFO").upper()
    level = requested if requested in LOG_LEVELS else "INFO"
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(getattr(logging, level))
    if level != requested:
        logger.warning(f"Unknown {LOG_ENV} value '{requested}', using INFO")


# ============================================================================
# Flags -> RunConfig
# ============================================================================

# Flag name -> path inside the RunConfig dump.
FLAG_PATHS: Dict[str, Tuple[str, ...]] = {
    "chains": ("chains",),
    "shifts": ("shifts",),
    "oracle": ("oracle",),
    "tags": ("tags",),
    "out": ("out",),
    "seed": ("seed",),
    "uturn_window": ("trace", "uturn_window"),
    "uturn_tol": ("trace", "uturn_tol"),
    "xrt_tol": ("trace", "xrt_tol"),
    "bot_min": ("bots", "min_set"),
    "bot_span": ("bots", "span"),
    "gas": ("matrix", "gas"),
    "change": ("cluster", "change_heuristic"),
    "scenario": ("scenario",),
    "users": ("matrix", "users"),
    "pred": ("pred",),
    "truth": ("truth",),
    "entities": ("gen", "n_entities"),
    "n_shifts": ("gen", "n_shifts"),
    "collision_rate": ("gen", "collision_rate"),
}


def _set(data: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    for key in path[:-1]:
        data = data.setdefault(key, {})
    data[path[-1]] = value


def build_config(ctx: click.Context, command: str, params: Dict[str, Any]) -> RunConfig:
    """
    RunConfig for one invocation.

    Starts from the ``--config`` snapshot when given (built-in defaults
    otherwise); only flags passed explicitly override it.
    """
    snapshot = params.pop("config", None)
    if snapshot:
        try:
            data = json.loads(Path(snapshot).read_text())
        except (OSError, ValueError) as e:
            raise InputError(f"cannot read config snapshot {snapshot}: {e}") from e
    else:
        data = DEFAULTS.model_dump(mode="json")
    data["command"] = command

    def explicit(name: str) -> bool:
        return ctx.get_parameter_source(name) not in (ParameterSource.DEFAULT, None)

    for name, value in params.items():
        if name in FLAG_PATHS and (explicit(name) or (not snapshot and value is not None)):
            _set(data, FLAG_PATHS[name], value)

    windows = data.setdefault("trace", {}).setdefault("windows", DEFAULTS.model_dump(mode="json")["trace"]["windows"])
    for name, index in (("delta_b", 0), ("delta_a", 1)):
        if params.get(name) is not None:
            for chain, pair in windows.items():
                pair = list(pair)
                pair[index] = params[name]
                windows[chain] = pair

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise InputError(f"invalid configuration at {where}: {first['msg']}") from e


def _run(command: str) -> None:
    ctx = click.get_current_context()
    config = build_config(ctx, command, dict(ctx.params))
    run = run_command(config)
    click.echo(json.dumps({"run_id": run.run_id, "command": command, "out": config.out,
                           **run.state.get("headline", {})}, default=str))


# ============================================================================
# Options
# ============================================================================

_FILE = click.Path(exists=True, dir_okay=False)
_DIR = click.Path(exists=True, file_okay=False)


def common_options(func: Callable) -> Callable:
    """Flags every subcommand accepts; defaults are the built-in parameter values."""
    options = [
        click.option("--config", type=_FILE, help="Reload a config.json snapshot; explicit flags override it"),
        click.option("--chains", type=_DIR, help="Directory of <SYMBOL>.json manifests and <SYMBOL>.jsonl ledgers"),
        click.option("--shifts", type=_FILE, help="Shift stream CSV (id,cur_in,cur_out,amt,ts)"),
        click.option("--oracle", type=_FILE, help="Shift status CSV answering deposit-address lookups"),
        click.option("--tags", type=_FILE, help="Address tags CSV (address,chain,label,category)"),
        click.option("--out", type=click.Path(file_okay=False), default=DEFAULTS.out, show_default=True,
                     help="Output directory"),
        click.option("--seed", type=int, default=DEFAULTS.seed, show_default=True),
        click.option("--delta-b", type=click.IntRange(0, 30),
                     help="Blocks searched before the anchor block, all chains [default: per chain]"),
        click.option("--delta-a", type=click.IntRange(0, 30),
                     help="Blocks searched after the anchor block, all chains [default: per chain]"),
        click.option("--uturn-window", type=click.IntRange(min=1), default=DEFAULTS.trace.uturn_window,
                     show_default=True, help="Seconds between the two shifts of a U-turn"),
        click.option("--uturn-tol", default=str(DEFAULTS.trace.uturn_tol), show_default=True,
                     help="Relative value tolerance for U-turns"),
        click.option("--xrt-tol", default=str(DEFAULTS.trace.xrt_tol), show_default=True,
                     help="Relative value tolerance for round trips"),
        click.option("--bot-min", type=click.IntRange(min=2), default=DEFAULTS.bots.min_set, show_default=True,
                     help="Minimum shifts in a trading-bot set"),
        click.option("--bot-span", type=click.IntRange(min=1), default=DEFAULTS.bots.span, show_default=True,
                     help="Seconds spanned by a trading-bot set"),
        click.option("--gas", default=str(DEFAULTS.matrix.gas), show_default=True,
                     help="Gas cost in ETH charged per matrix call"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


_change = click.option("--change/--no-change", default=DEFAULTS.cluster.change_heuristic, show_default=True,
                       help="Also run the single-change heuristic on shielding transactions")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main() -> None:
    """Cross-ledger forensics: clustering, shielded pool and cross-chain tracing."""


@main.command()
@common_options
def ingest(**_: Any) -> None:
    """Parse and validate ledgers, write per-chain statistics."""
    _run("ingest")


@main.command()
@common_options
@_change
def cluster(**_: Any) -> None:
    """Cluster addresses and propagate tags."""
    _run("cluster")


@main.command("zcash-analyze")
@common_options
@_change
def zcash_analyze(**_: Any) -> None:
    """Run the shielded pool heuristics."""
    _run("zcash-analyze")


@main.command()
@common_options
def trace(**_: Any) -> None:
    """Resolve shifts and detect cross-chain patterns."""
    _run("trace")


@main.command()
@common_options
@click.option("--scenario", type=_FILE, help="JSONL of register/buy/fallback calls")
@click.option("--users", type=click.IntRange(min=0), default=DEFAULTS.matrix.users, show_default=True,
              help="Users in a random scenario when --scenario is not given")
def simulate(**_: Any) -> None:
    """Simulate the matrix contract."""
    _run("simulate")


@main.command()
@common_options
@click.option("--entities", type=click.IntRange(min=1), default=DEFAULTS.gen.n_entities, show_default=True)
@click.option("--n-shifts", type=click.IntRange(min=0), default=DEFAULTS.gen.n_shifts, show_default=True)
@click.option("--collision-rate", type=click.FloatRange(0, 1), default=DEFAULTS.gen.collision_rate,
              show_default=True)
def generate(**_: Any) -> None:
    """Generate a synthetic world bundle with ground truth."""
    _run("generate")


@main.command()
@common_options
@click.option("--pred", type=_FILE, required=True, help="Predicted evidence JSONL")
@click.option("--truth", type=click.Path(exists=True), required=True,
              help="World bundle directory or truth evidence JSONL")
def score(**_: Any) -> None:
    """Score predicted links against ground truth."""
    _run("score")


@main.command()
@common_options
@_change
def report(**_: Any) -> None:
    """Run every analysis the inputs allow and write report.json."""
    _run("report")


def cli(argv: Optional[List[str]] = None) -> int:
    """Run the command line and return the exit code."""
    configure_logging()
    try:
        result = main.main(args=argv, prog_name="chaintrace", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_INPUT
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_INPUT
    except InvariantViolation as e:
        logger.error(str(e))
        click.echo(f"Error: {e}", err=True)
        return EXIT_INVARIANT
    except (ChainTraceError, OSError) as e:
        logger.error(str(e))
        click.echo(f"Error: {e}", err=True)
        return EXIT_INPUT
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(cli())

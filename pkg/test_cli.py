"""
End-to-end tests for the command line: exit codes, run artifacts and
config snapshots.
"""

import json
import logging

import pytest

from app.core.evidence import read_evidence
from app.core.ledger import BUILTIN_CHAINS, UNASSIGNED, JoinSplit, Ledger, LedgerTx, TxOut, serialize_ledger, to_units
from app.core.storage import RunStore
from app.core.synth import load_world, score
from app.main import EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, LOG_ENV, cli


def run(*args) -> int:
    return cli([str(a) for a in args])


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    assert run("generate", "--out", out, "--seed", 5, "--entities", 6, "--n-shifts", 20) == EXIT_OK
    return out


@pytest.fixture
def broken_pool(tmp_path):
    """A ZEC ledger whose only transaction withdraws from an empty pool."""
    zec = BUILTIN_CHAINS["ZEC"]
    one = to_units("1", 8)
    withdrawal = LedgerTx(
        txid="w", chain="ZEC", height=1, timestamp=1_500_000_150, vout=(TxOut("t1a", one),),
        joinsplits=(JoinSplit(zout=(TxOut("t1a", one), TxOut(UNASSIGNED, to_units("0.0001", 8)))),),
    )
    chains = tmp_path / "chains"
    chains.mkdir()
    serialize_ledger(Ledger(zec, [withdrawal]), chains / "ZEC.jsonl")
    return chains


def read_json(path):
    return json.loads(path.read_text())


# ============================================================================
# Exit codes
# ============================================================================

def test_usage_errors(tmp_path, capsys):
    assert run("ingest", "--out", tmp_path / "o") == EXIT_INPUT
    assert "needs --chains" in capsys.readouterr().err
    assert run("ingest", "--no-such-flag") == EXIT_INPUT
    assert run("ingest", "--chains", tmp_path / "missing") == EXIT_INPUT
    assert run("trace", "--chains", tmp_path, "--delta-b", 31) == EXIT_INPUT
    assert run("--help") == EXIT_OK


def test_invariant_violation_exits_3(broken_pool, tmp_path):
    assert run("ingest", "--chains", broken_pool, "--out", tmp_path / "o") == EXIT_INVARIANT
    [record] = RunStore(tmp_path / "o").list_all()
    assert record.status == "failed"
    assert "pool" in record.error


def test_failed_report_still_writes_report(broken_pool, tmp_path):
    out = tmp_path / "o"
    assert run("report", "--chains", broken_pool, "--out", out) == EXIT_INVARIANT
    report = read_json(out / "report.json")
    assert report["status"] == "failed"
    assert [s["status"] for s in report["stages"]][-1] == "error"
    assert report["stages"][-1]["name"] == "summarize_ledgers"


# ============================================================================
# Runs on a generated world
# ============================================================================

def test_generate_writes_a_bundle(bundle):
    assert {"ZEC.jsonl", "shifts.csv", "oracle.csv", "truth.jsonl", "params.json"} <= {p.name for p in bundle.iterdir()}
    config = read_json(bundle / "config.json")
    assert (config["command"], config["seed"], config["gen"]["n_entities"]) == ("generate", 5, 6)
    assert load_world(bundle).params.n_shifts == 20


def test_trace_then_score(bundle, tmp_path, capsys):
    traced = tmp_path / "trace"
    capsys.readouterr()
    code = run("trace", "--chains", bundle, "--shifts", bundle / "shifts.csv",
               "--oracle", bundle / "oracle.csv", "--out", traced)
    assert code == EXIT_OK
    echoed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert echoed["command"] == "trace"
    assert echoed["resolved"] == echoed["shifts"] >= 20

    report = read_json(traced / "trace_report.json")
    assert report["links"]["pass_through"] == echoed["resolved"]
    relation = report["relation_graph"]
    assert relation["weight"] + relation["self_loops"] + relation["skipped"] == report["links"]["pass_through"]
    assert (traced / "relation_graph.csv").is_file()
    [record] = RunStore(traced).list_all()
    assert (record.run_id, record.status) == (echoed["run_id"], "completed")
    assert "evidence.jsonl" in record.artifacts

    scored = tmp_path / "score"
    assert run("score", "--pred", traced / "evidence.jsonl", "--truth", bundle, "--out", scored) == EXIT_OK
    expected = score(read_evidence(traced / "evidence.jsonl"), load_world(bundle))
    assert read_json(scored / "score.json") == expected.model_dump(mode="json")
    assert expected.per_kind["PASS_THROUGH"].recall == 1.0


def test_config_snapshot_replays_with_overrides(bundle, tmp_path):
    first = tmp_path / "first"
    assert run("trace", "--chains", bundle, "--shifts", bundle / "shifts.csv", "--oracle", bundle / "oracle.csv",
               "--out", first, "--delta-b", 2) == EXIT_OK
    second = tmp_path / "second"
    assert run("trace", "--config", first / "config.json", "--out", second, "--uturn-window", 900) == EXIT_OK

    one, two = read_json(first / "config.json"), read_json(second / "config.json")
    assert two["trace"]["uturn_window"] == 900
    assert two["out"] == str(second)
    assert {k: v[0] for k, v in two["trace"]["windows"].items()} == {k: 2 for k in one["trace"]["windows"]}
    for key in ("chains", "shifts", "oracle", "seed"):
        assert two[key] == one[key]


def test_zcash_and_report(bundle, tmp_path):
    out = tmp_path / "z"
    assert run("zcash-analyze", "--chains", bundle, "--tags", bundle / "tags.csv", "--out", out) == EXIT_OK
    zcash = read_json(out / "zcash_report.json")
    assert zcash["founders"]["withdrawals"] == 12
    assert zcash["miners"]["payouts"] == 2
    assert not (out / "report.json").exists()

    out = tmp_path / "r"
    assert run("report", "--chains", bundle, "--tags", bundle / "tags.csv", "--shifts", bundle / "shifts.csv",
               "--oracle", bundle / "oracle.csv", "--out", out) == EXIT_OK
    report = read_json(out / "report.json")
    assert report["status"] == "completed"
    names = {h["name"] for h in report["heuristics"]}
    assert {"founders", "miners", "pass_through", "uturn", "coinjoins"} <= names
    assert {"zcash_report.json", "trace_report.json", "evidence.jsonl"} <= set(report["artifacts"])


def test_simulate_is_reproducible(tmp_path, capsys):
    capsys.readouterr()
    assert run("simulate", "--users", 300, "--seed", 2, "--out", tmp_path / "a") == EXIT_OK
    assert run("simulate", "--users", 300, "--seed", 2, "--out", tmp_path / "b") == EXIT_OK
    first, second = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()[-2:]]
    assert first["state_hash"] == second["state_hash"]
    assert first["users"] == 300
    assert (tmp_path / "a" / "events.csv").is_file()


# ============================================================================
# Logging
# ============================================================================

def test_log_level_comes_from_the_environment(monkeypatch):
    root = logging.getLogger()
    saved = root.level
    try:
        monkeypatch.setenv(LOG_ENV, "debug")
        run("--help")
        assert root.level == logging.DEBUG
        monkeypatch.setenv(LOG_ENV, "chatty")
        run("--help")
        assert root.level == logging.INFO
    finally:
        root.setLevel(saved)

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from umafed.policy import Policy  # noqa: E402
from umafed.scenario import resolve_registry  # noqa: E402
from umafed.simnet import Network, build_topology  # noqa: E402

SECRETS = {"alice": b"alice-pw", "bob": b"bob-pw", "carol": b"carol-pw"}


def two_domain_network(**kwargs) -> Network:
    """two_domain topology with alice (owner), bob (doctor, level 3) and carol
    (researcher, level 1) registered and logged in on the front channel."""
    net = build_topology(resolve_registry("two_domain"), **kwargs)
    net.register_principal("alice", SECRETS["alice"], ["owner"])
    net.register_principal("bob", SECRETS["bob"], ["doctor", "researcher"], 3)
    net.register_principal("carol", SECRETS["carol"], ["researcher"], 1)
    for who, secret in SECRETS.items():
        net.login(who, secret)
    return net


def bob_reads_records(version: int = 0) -> Policy:
    return Policy("p-bob", "alice", frozenset({"read", "list"}), resources=frozenset({"rs1.1/records"}),
                  parties=frozenset({"bob"}), required_roles=frozenset({"doctor"}), version=version)


@pytest.fixture
def net() -> Network:
    return two_domain_network()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in report.nodeid:
                continue
            if report.when != "call" and report.passed:
                continue
            name = report.nodeid.split("::")[-1]
            detail = dict(report.user_properties).get("detail", "")
            if name not in rows or not report.passed:
                rows[name] = ("PASS" if report.passed else "FAIL", detail)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(rows, key=lambda n: int(n.split("_")[2])):
        status, detail = rows[name]
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())

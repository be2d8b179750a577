"""Scenario files: parse, run against a simulated network, report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Any, Callable

from umafed.authz import TTLs
from umafed.core import SignedEnvelope, canonical_serialize, digest
from umafed.errors import AssertionFailed, ParseError, QuiescenceTimeout, UmafedError
from umafed.federation import VIA_AS, FederationRegistry, validate_document
from umafed.policy import PERMIT, Policy
from umafed.simnet import FRONT, Network, OracleRequest, build_topology, oracle_decide


def bundled_names(kind: str = "scenarios") -> list[str]:
    root = importlib_resources.files(f"umafed.data.{kind}")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def _bundled(kind: str, name: str) -> Path | None:
    candidate = importlib_resources.files(f"umafed.data.{kind}").joinpath(f"{name}.json")
    return Path(str(candidate)) if candidate.is_file() else None


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"{path}: no such file", location=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", location=f"line {exc.lineno}") from exc


def resolve_registry(ref: Any, base: Path | None = None) -> FederationRegistry:
    """A registry given inline, as a bundled name, or as a path relative to ``base``."""
    if isinstance(ref, dict):
        return FederationRegistry.from_document(ref)
    path = Path(ref)
    if base is not None and not path.is_absolute() and (base / path).exists():
        path = base / path
    elif not path.exists():
        path = _bundled("registries", ref) or path
    return FederationRegistry.load(path)


@dataclass
class Scenario:
    name: str
    registry: FederationRegistry
    steps: list[dict[str, Any]]
    seed: int = 0
    route: str = VIA_AS
    mls_strict: bool = False
    strict_introspection: bool = False
    description: str = ""

    @classmethod
    def from_document(cls, doc: Any, base: Path | None = None) -> "Scenario":
        validate_document(doc, "scenario")
        registry = resolve_registry(doc["registry"], base)
        scenario = cls(
            name=doc["name"],
            registry=registry,
            steps=doc["steps"],
            seed=doc.get("seed", 0),
            route=doc.get("route", VIA_AS),
            mls_strict=doc.get("mls_strict", False),
            strict_introspection=doc.get("strict_introspection", False),
            description=doc.get("description", ""),
        )
        scenario.check_references()
        return scenario

    @classmethod
    def load(cls, source: str | Path) -> "Scenario":
        """Load by path, or by bundled scenario name."""
        path = Path(source)
        if not path.exists():
            path = _bundled("scenarios", str(source)) or path
        return cls.from_document(_read_json(path), path.parent)

    def check_references(self) -> None:
        nodes = {n for m in self.registry.members.values() for n in m.nodes}
        fields = ("as", "rs", "node", "a", "b", "idp")
        for i, step in enumerate(self.steps):
            for f in fields:
                if f in step and step[f] not in nodes:
                    raise ParseError(f"step {i} references undeclared node {step[f]!r}",
                                     location=f"$.steps[{i}].{f}")
            if step["op"] == "access":
                key = f"{step['rs']}/{step['resource']}"
                if key not in self.registry.resources:
                    raise ParseError(f"step {i} references undeclared resource {key!r}",
                                     location=f"$.steps[{i}].resource")


@dataclass
class StepFailure:
    step: int
    op: str
    message: str

    def to_record(self) -> dict[str, Any]:
        return {"step": self.step, "op": self.op, "message": self.message}


@dataclass
class ScenarioReport:
    name: str
    seed: int
    route: str
    failures: list[StepFailure] = field(default_factory=list)
    transcript: list[dict[str, Any]] = field(default_factory=list)
    ticks: int = 0
    network: Network | None = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def transcript_digest(self) -> str:
        return digest(canonical_serialize(self.transcript))

    def raise_for_failures(self) -> None:
        if self.failures:
            first = self.failures[0]
            raise AssertionFailed(f"step {first.step} ({first.op}): {first.message}", first.step)

    def to_record(self) -> dict[str, Any]:
        return {
            "scenario": self.name,
            "seed": self.seed,
            "route": self.route,
            "passed": self.passed,
            "ticks": self.ticks,
            "events": len(self.transcript),
            "transcript_digest": self.transcript_digest,
            "failures": [f.to_record() for f in self.failures],
        }


class _Check(Exception):
    pass


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise _Check(message)


class ScenarioRunner:
    def __init__(self, scenario: Scenario, net: Network) -> None:
        self.scenario = scenario
        self.net = net
        self.saved: dict[str, tuple[SignedEnvelope, SignedEnvelope]] = {}
        self.handlers: dict[str, Callable[[dict[str, Any]], None]] = {
            name[len("op_"):]: getattr(self, name) for name in dir(self) if name.startswith("op_")
        }

    def run(self, report: ScenarioReport) -> None:
        for index, step in enumerate(self.scenario.steps):
            self.net.log("step", index=index, op=step["op"])
            try:
                self._guarded(step)
            except _Check as exc:
                report.failures.append(StepFailure(index, step["op"], str(exc)))
                self.net.log("assertion_failed", index=index, message=str(exc))

    def _guarded(self, step: dict[str, Any]) -> None:
        expected = step.get("expect_error")
        try:
            self.handlers[step["op"]](step)
        except UmafedError as exc:
            if expected is None:
                raise _Check(f"unexpected {exc.code}: {exc.message}") from exc
            _expect(exc.code == expected, f"expected error {expected}, got {exc.code}")
            return
        _expect(expected is None, f"expected error {expected}, got success")

    # -- operations -------------------------------------------------------------------

    def op_register_principal(self, s: dict[str, Any]) -> None:
        self.net.register_principal(s["principal"], s["secret"].encode(), s.get("roles", ()),
                                    s.get("mls_level"), idp=s.get("idp"))

    def op_login(self, s: dict[str, Any]) -> None:
        self.net.login(s["principal"], s["secret"].encode(), idp=s.get("idp"),
                       channel=s.get("channel", FRONT), as_node=s.get("as"))

    def op_set_policy(self, s: dict[str, Any]) -> None:
        version = self.net.set_policy(s["as"], s["principal"], Policy.from_record(s["policy"]))
        if "expect_version" in s:
            _expect(version == s["expect_version"], f"expected version {s['expect_version']}, got {version}")

    def op_retract_policy(self, s: dict[str, Any]) -> None:
        self.net.retract_policy(s["as"], s["principal"], s["policy_id"])

    def op_refresh(self, s: dict[str, Any]) -> None:
        self.net.as_call(s["as"], lambda n: n.refresh_policies(self.net.clock))

    def op_quiesce(self, s: dict[str, Any]) -> None:
        try:
            ticks = self.net.run_until_quiescent(s.get("max_ticks", 50))
        except QuiescenceTimeout as exc:
            _expect(s.get("expect_timeout", False), f"unexpected quiescence timeout: {exc.message}")
            if "expect_pending" in s:
                finals = sorted({p["final"] for p in exc.pending})
                _expect(finals == sorted(s["expect_pending"]), f"pending deliveries to {finals}")
            return
        _expect(not s.get("expect_timeout", False), "expected a quiescence timeout")
        if "expect_ticks_max" in s:
            _expect(ticks <= s["expect_ticks_max"], f"quiescence took {ticks} ticks")

    def op_advance(self, s: dict[str, Any]) -> None:
        self.net.advance(s["ticks"])

    def op_advance_to(self, s: dict[str, Any]) -> None:
        _expect(s["tick"] >= self.net.clock, f"clock already at {self.net.clock}")
        self.net.advance(s["tick"] - self.net.clock)

    def op_set_node(self, s: dict[str, Any]) -> None:
        self.net.set_node_state(s["node"], s["state"] == "online")

    def op_set_link(self, s: dict[str, Any]) -> None:
        self.net.set_link_state(s["a"], s["b"], s["state"] == "up")

    def op_access(self, s: dict[str, Any]) -> None:
        tokens = None
        if "tokens" in s:
            _expect(s["tokens"] in self.saved, f"no saved tokens {s['tokens']!r}")
            rqp, client = self.saved[s["tokens"]]
            if s.get("swap"):
                rqp, client = client, rqp
            if s.get("drop") == "rqp":
                rqp = None
            elif s.get("drop") == "client":
                client = None
            tokens = (rqp, client)
        flow = self.net.access(
            s["principal"], s["client"], s["rs"], s["resource"], s["scopes"],
            active_role=s.get("active_role"), tokens=tokens, bootstrap_only=s.get("leg") == "bootstrap",
        )
        if "save_tokens" in s:
            _expect(flow.tokens is not None, f"no tokens issued ({flow.status}: {flow.reason})")
            self.saved[s["save_tokens"]] = flow.tokens
        if "expect" in s:
            _expect(flow.status == s["expect"], f"expected {s['expect']}, got {flow.status} ({flow.reason})")
        if "expect_reason" in s:
            _expect(flow.reason == s["expect_reason"], f"expected reason {s['expect_reason']}, got {flow.reason}")
        if s.get("expect_oracle"):
            request = OracleRequest(s["principal"], s.get("active_role"), s["client"],
                                    f"{s['rs']}/{s['resource']}", frozenset(s["scopes"]))
            verdict = oracle_decide(self.net, request)
            _expect((verdict == PERMIT) == flow.outcome.granted,
                    f"distributed {flow.status} disagrees with oracle {verdict}")

    def _saved_token(self, s: dict[str, Any]) -> SignedEnvelope:
        _expect(s["tokens"] in self.saved, f"no saved tokens {s['tokens']!r}")
        pair = self.saved[s["tokens"]]
        return pair[0] if s["which"] == "rqp" else pair[1]

    def op_revoke_token(self, s: dict[str, Any]) -> None:
        env = self._saved_token(s)
        self.net.as_call(env.header.issuer, lambda n: n.revoke_token(env.record()["token_id"]))
        self.net.log("revoke_token", tokens=s["tokens"], which=s["which"])

    def op_introspect(self, s: dict[str, Any]) -> None:
        env = self._saved_token(s)
        result = self.net.as_call(env.header.issuer, lambda n: n.introspect(env, self.net.clock))
        self.net.log("introspect", tokens=s["tokens"], which=s["which"], active=result["active"])
        if "expect_active" in s:
            _expect(result["active"] == s["expect_active"], f"introspection returned {result}")
        if "expect_reason" in s:
            _expect(result.get("reason") == s["expect_reason"], f"introspection returned {result}")

    def op_assert_cache(self, s: dict[str, Any]) -> None:
        cache = self.net.node(s["rs"]).cache
        entry = cache.entry(s["owner"], s["policy_id"])
        if "version" in s:
            got = None if entry is None else entry.policy.version
            _expect(got == s["version"], f"cache holds version {got}, expected {s['version']}")
        if "revoked" in s:
            revoked = entry is not None and cache.is_revoked(entry)
            _expect(revoked == s["revoked"], f"revoked={revoked}, expected {s['revoked']}")
        if "live" in s:
            live = entry is not None and not cache.is_revoked(entry) and entry.live_at(self.net.clock)
            _expect(live == s["live"], f"live={live}, expected {s['live']}")

    def op_assert_receipts(self, s: dict[str, Any]) -> None:
        count = len(self.net.node(s["as"]).receipts)
        _expect(count >= s.get("min", 1), f"{s['as']} holds {count} relay receipts")

    def op_assert_delivered(self, s: dict[str, Any]) -> None:
        _expect(bool(self.net.reports), "no propagation has happened")
        report = self.net.reports[-1]
        for target in s.get("targets", ()):
            _expect(target in report.with_status("delivered"), f"{target} not delivered in {report.report_id}")
        for target in s.get("pending", ()):
            _expect(target in report.with_status("pending"), f"{target} not pending in {report.report_id}")


def run_scenario(
    source: Scenario | str | Path,
    *,
    seed: int | None = None,
    route: str | None = None,
    data_dir: str | Path | None = None,
    ttls: TTLs = TTLs(),
) -> ScenarioReport:
    """Execute a scenario; assertions are collected, never raised."""
    scenario = source if isinstance(source, Scenario) else Scenario.load(source)
    seed = scenario.seed if seed is None else seed
    route = route or scenario.route
    registry = FederationRegistry.from_document(scenario.registry.to_document())
    net = build_topology(
        registry, seed=seed, route=route, ttls=ttls, mls_strict=scenario.mls_strict,
        strict_introspection=scenario.strict_introspection, data_dir=data_dir,
    )
    report = ScenarioReport(scenario.name, seed, route)
    try:
        ScenarioRunner(scenario, net).run(report)
    finally:
        net.close()
    report.transcript = net.transcript
    report.ticks = net.clock
    report.network = net
    return report


__all__ = [
    "Scenario",
    "ScenarioReport",
    "StepFailure",
    "bundled_names",
    "resolve_registry",
    "run_scenario",
]

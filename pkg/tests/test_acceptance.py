"""Acceptance criteria, one test per criterion.

Each test is named ``test_criterion_N_*``; the conftest terminal-summary hook
prints one PASS/FAIL line per criterion from these results.
"""

from __future__ import annotations

import json
import random
import time

import pytest

from conftest import bob_reads_records, two_domain_network
from oracles import MLS_TABLE, naive_outcome, parse_frame, ref_mac
from test_policy import RESOURCES, random_policy, random_subject
from umafed.core import Kind, ResourceRef, SignedEnvelope, canonical_serialize
from umafed.errors import DigestMismatch, QuiescenceTimeout, SignatureInvalid, rejection_cause
from umafed.authz import TTLs
from umafed.federation import DIRECT, VIA_AS
from umafed.policy import DENY, PERMIT, Policy, SubjectAttributes, evaluate, evaluate_mls, evaluate_rbac
from umafed.resource import GRANTED, TicketCache
from umafed.scenario import bundled_names, run_scenario
from umafed.simnet import oracle_decide
from umafed.tickets import CLIENT_OPERATOR, REQUESTING_PARTY
from umafed.universe import build_universe, random_universe, request_access, route_digests

SWEEP_SEEDS = range(5)
SCOPE_SETS = [frozenset(c) for c in ({"read"}, {"list"}, {"write"}, {"read", "list"}, {"read", "write"},
                                      {"list", "write"}, {"list", "read", "write"})]
SIGNATURE_CLASS = {"signature_invalid", "malformed_envelope", "unknown_issuer", "unknown_key"}


def outcome_bytes(outcome) -> bytes:
    return canonical_serialize(outcome.to_record())


# -- shared sweep (criteria 1, 2 and 9) ----------------------------------------------------------


class Sweep:
    def __init__(self, tmp_path_factory):
        self.runs = []  # (net, [(request, flow, oracle)])
        self.quiesce_ticks = []
        start = time.perf_counter()
        for seed in SWEEP_SEEDS:
            universe = random_universe(seed)
            net = build_universe(universe, seed=seed, data_dir=tmp_path_factory.mktemp(f"sweep{seed}"))
            self.quiesce_ticks.append(net.run_until_quiescent(5))
            rows = []
            for request in universe.request_tuples():
                flow = request_access(net, request)
                rows.append((request, flow, oracle_decide(net, request)))
            self.runs.append((net, rows))
        self.elapsed = time.perf_counter() - start

    @property
    def tuples(self) -> int:
        return sum(len(rows) for _, rows in self.runs)


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    result = Sweep(tmp_path_factory)
    yield result
    for net, _ in result.runs:
        net.close()


def test_criterion_1_two_domain_and_exhaustive_sweep(sweep, record_property):
    # two_domain: alice authors at AS2 a policy for her resource hosted in domain 1
    for role, expected in (("doctor", PERMIT), ("researcher", DENY)):
        net = two_domain_network()
        net.set_policy("as2", "alice", bob_reads_records())
        assert net.run_until_quiescent(5) <= 5
        flow = net.access("bob", "client-a", "rs1.1", "records", ["read"], active_role=role)
        assert flow.tokens is not None or expected == DENY
        assert (flow.status == GRANTED) == (expected == PERMIT)

    assert all(t <= 5 for t in sweep.quiesce_ticks)
    mismatches = [(r.to_record(), f.reason, o) for _, rows in sweep.runs for r, f, o in rows
                  if (f.status == GRANTED) != (o == PERMIT)]
    grants = sum(f.status == GRANTED for _, rows in sweep.runs for _, f, _ in rows)
    record_property("detail", f"{sweep.tuples} tuples, {len(mismatches)} mismatches, {grants} grants, "
                              f"{sweep.elapsed:.1f}s")
    assert sweep.tuples >= 1000
    assert 0 < grants < sweep.tuples
    assert mismatches == []
    assert sweep.elapsed < 60


def test_criterion_2_offline_enforcement_is_identical(sweep, record_property):
    compared = divergences = 0
    for net, rows in sweep.runs:
        # every issued pair is presented for every resource hosted at its RS and every scope set,
        # so the comparison covers denials as well as grants
        probes = []
        for request, flow, _ in rows:
            if flow.tokens is None:
                continue
            rs = net.registry.resources[request.resource].rs
            for resource_id in sorted(net.nodes[rs].hosted):
                for scopes in SCOPE_SETS:
                    probes.append((rs, resource_id, scopes, flow.tokens))
        online = [net.access("-", "-", rs, rid, scopes, tokens=tokens).outcome for rs, rid, scopes, tokens in probes]
        for as_node in net.registry.as_nodes():
            net.set_node_state(as_node, False)
        try:
            for (rs, rid, scopes, tokens), before in zip(probes, online):
                after = net.access("-", "-", rs, rid, scopes, tokens=tokens).outcome
                compared += 1
                divergences += outcome_bytes(after) != outcome_bytes(before)
        finally:
            for as_node in net.registry.as_nodes():
                net.set_node_state(as_node, True)

    # the two_domain case with both authorization servers down
    net = two_domain_network()
    net.set_policy("as2", "alice", bob_reads_records())
    net.run_until_quiescent(5)
    flow = net.access("bob", "client-a", "rs1.1", "records", ["read"], active_role="doctor")
    net.set_node_state("as1", False)
    net.set_node_state("as2", False)
    offline = net.access("bob", "client-a", "rs1.1", "records", ["read"], tokens=flow.tokens)
    assert outcome_bytes(offline.outcome) == outcome_bytes(flow.outcome) and offline.status == GRANTED

    record_property("detail", f"{compared} token-pair probes re-enforced offline, {divergences} divergences")
    assert compared > 0 and divergences == 0


# -- criterion 3 ----------------------------------------------------------------------------


def _ref_valid(env, secret: bytes, kind: str, issuer: str, holder_kind: str, now: int) -> bool:
    """Independent validity check: MAC over the raw header and payload bytes,
    header fields read straight from the frame."""
    if env is None:
        return False
    try:
        head, payload, sig = parse_frame(env.to_wire())
        header = json.loads(head)
        body = json.loads(payload)
    except Exception:
        return False
    return (ref_mac(secret, header, payload) == sig and header["kind"] == kind and header["issuer"] == issuer
            and header["issued_at"] <= now < header["expires_at"] and body.get("holder_kind") == holder_kind)


def _flip(env: SignedEnvelope, rng: random.Random) -> SignedEnvelope | None:
    wire = bytearray(env.to_wire())
    bit = rng.randrange(len(wire) * 8)
    wire[bit // 8] ^= 1 << (bit % 8)
    try:
        return SignedEnvelope.from_wire(bytes(wire))
    except SignatureInvalid:
        return None  # unparseable frames cannot even be presented


def test_criterion_3_token_fuzz_never_grants_without_both_tokens(record_property):
    net = two_domain_network(ttls=TTLs(access_token=100))
    photos = Policy("p-photos", "alice", frozenset({"read"}), resources=frozenset({"rs2.1/photos"}))
    net.set_policy("as1", "alice", bob_reads_records())
    net.set_policy("as1", "alice", photos)
    net.run_until_quiescent(5)
    as1, as2, rs = net.nodes["as1"], net.nodes["as2"], net.nodes["rs1.1"]
    bob = net.wallet["bob"]
    now = 250

    def pair(node, resource, at):
        ticket = node.issue_permission_ticket(resource, ["read"], at)
        return node.exchange(ticket, bob, "client-a" if node is as1 else "client-b", "doctor", at)

    valid, other, expired = pair(as1, "rs1.1/records", 200), pair(as1, "rs1.1/records", 210), pair(as1, "rs1.1/records", 0)
    foreign = pair(as2, "rs2.1/photos", 200)
    pool = [valid[0], valid[1], other[0], other[1], expired[0], expired[1], foreign[0], foreign[1], bob,
            as1.issue_permission_ticket("rs1.1/records", ["read"], 200), None]
    secret = net.registry.signing_key("as1").secret
    assert rs.enforce(valid[0], valid[1], "records", {"read"}, now).granted

    rng = random.Random(3)
    cases = grants = bad = 0
    by_kind = {"missing": 0, "expired": 0, "tampered": 0, "swapped": 0}
    while cases < 10_000:
        slots = []
        for _ in range(2):
            roll = rng.random()
            env = rng.choice(pool)
            if roll < 0.35:
                env = _flip(rng.choice(pool[:-1]), rng)
                if env is None:
                    continue
            slots.append(env)
        if len(slots) != 2:
            continue
        if rng.random() < 0.2:
            slots.reverse()
        rqp, client = slots
        scopes = rng.choice([{"read"}, {"list"}, {"read", "list"}, {"write"}])
        outcome = rs.enforce(rqp, client, "records", scopes, now)
        cases += 1
        for env in slots:
            if env is None:
                by_kind["missing"] += 1
            elif env in (expired[0], expired[1]):
                by_kind["expired"] += 1
            elif env not in pool:
                by_kind["tampered"] += 1
            elif env not in (valid[0], valid[1], other[0], other[1]):
                by_kind["swapped"] += 1
        if outcome.granted:
            grants += 1
            ok = (_ref_valid(rqp, secret, "access_token", "as1", REQUESTING_PARTY, now)
                  and _ref_valid(client, secret, "access_token", "as1", CLIENT_OPERATOR, now))
            bad += not ok
    record_property("detail", f"{cases} cases {by_kind}, {grants} grants, {bad} without two valid tokens")
    assert all(count > 0 for count in by_kind.values())
    assert grants > 0 and bad == 0


# -- criterion 4 ----------------------------------------------------------------------------


def test_criterion_4_retraction_denies_everywhere_and_stale_grants_expire(record_property):
    checked = stale = 0
    for seed in range(100, 106):
        universe = random_universe(seed)
        net = build_universe(universe, seed=seed)
        net.run_until_quiescent(5)
        before = [(r, request_access(net, r)) for r in universe.request_tuples()]
        for as_node in net.registry.as_nodes():
            for (owner, pid), stored in sorted(net.nodes[as_node].policies.items()):
                if not stored.revoked:
                    net.retract_policy(as_node, owner, pid)
        net.run_until_quiescent(5)
        for request, flow in before:
            fresh = request_access(net, request)
            checked += 1
            stale += fresh.status == GRANTED
            if flow.tokens is not None:
                ref = net.registry.resources[request.resource]
                replay = net.access(request.principal, request.client, ref.rs, ref.resource_id, request.scopes,
                                    tokens=flow.tokens)
                checked += 1
                stale += replay.status == GRANTED
    assert checked > 0 and stale == 0

    # partition: revocation cannot reach rs1.1, which keeps granting until the policy ticket lapses
    net = two_domain_network()
    net.set_policy("as1", "alice", bob_reads_records())
    net.run_until_quiescent(5)
    net.advance(100 - net.clock)
    flow = net.access("bob", "client-a", "rs1.1", "records", ["read"], active_role="doctor")
    assert flow.status == GRANTED
    net.set_link_state("as1", "rs1.1", False)
    net.retract_policy("as1", "alice", "p-bob")
    with pytest.raises(QuiescenceTimeout):
        net.run_until_quiescent(5)
    last_grant = None
    while net.clock < 400:
        outcome = net.access("bob", "client-a", "rs1.1", "records", ["read"], tokens=flow.tokens).outcome
        if outcome.granted:
            last_grant = net.clock
        elif net.clock >= 300:
            assert outcome.reason in {"policy_expired", "expired"}
        net.tick()
    assert net.nodes["rs2.1"].cache.entry("alice", "p-bob") is not None
    assert net.nodes["rs2.1"].cache.is_revoked(net.nodes["rs2.1"].cache.entry("alice", "p-bob"))
    assert net.queue  # the partition persisted throughout
    record_property("detail", f"{checked} post-retraction requests, {stale} grants; "
                              f"partitioned rs granted until tick {last_grant}")
    assert last_grant is not None and last_grant < 300


# -- criterion 5 ----------------------------------------------------------------------------


def test_criterion_5_bit_flips_are_rejected_without_mutation(record_property):
    net = two_domain_network()
    net.set_policy("as1", "alice", bob_reads_records())
    policy_env = SignedEnvelope.from_hex(next(q.message["envelope"] for q in net.queue if q.message["type"] == "policy"))
    net.run_until_quiescent(5)
    net.set_policy("as1", "alice", Policy("p-tmp", "alice", frozenset({"list"})))
    net.retract_policy("as1", "alice", "p-tmp")
    revocation_env = SignedEnvelope.from_hex(
        next(q.message["envelope"] for q in net.queue if q.message["type"] == "revocation"))
    net.run_until_quiescent(5)
    as1, as2, rs = net.nodes["as1"], net.nodes["as2"], net.nodes["rs1.1"]
    now = net.clock
    authn = net.wallet["bob"]
    ticket = as1.issue_permission_ticket("rs1.1/records", ["read"], now)
    rqp, client = as1.exchange(as1.issue_permission_ticket("rs1.1/records", ["read"], now), authn, "client-a",
                               "doctor", now)
    new_ref = ResourceRef("d1", "rs1.1", "scans", "alice", frozenset({"read"}))
    update_env = net.registry.make_update(new_ref, net.registry.signing_key("as1"), now)

    def expect_rejected(fn):
        try:
            fn()
        except (SignatureInvalid, DigestMismatch):
            return True
        except Exception as exc:  # unwrap ticket / authn rejections
            return isinstance(rejection_cause(exc), (SignatureInvalid, DigestMismatch))
        return False

    consumers = {
        Kind.PERMISSION_TICKET.value + "/policy": (policy_env, [
            lambda e: rs.install_policy_ticket(e, now), lambda e: as2.install_policy_ticket(e, now)]),
        Kind.PERMISSION_TICKET.value + "/correlation": (ticket, [
            lambda e: as1.exchange(e, authn, "client-a", "doctor", now)]),
        Kind.REVOCATION.value: (revocation_env, [
            lambda e: rs.install_revocation(e, now), lambda e: as2.install_revocation(e, now)]),
        Kind.REGISTRY_UPDATE.value: (update_env, [lambda e: net.registry.apply_update(e, now)]),
        Kind.AUTHN_TOKEN.value: (authn, [lambda e: as1.exchange(ticket, e, "client-a", "doctor", now)]),
        Kind.ACCESS_TOKEN.value: (rqp, [
            lambda e: _deny_as_error(rs.enforce(e, client, "records", {"read"}, now)),
            lambda e: _deny_as_error(rs.enforce(client, e, "records", {"read"}, now))]),
    }

    def snapshot():
        return net.state_digests(), net.registry.digest()

    before = snapshot()
    rng = random.Random(5)
    flips = rejected = 0
    per_kind = {}
    for i in range(1000):
        name = sorted(consumers)[i % len(consumers)]
        env, fns = consumers[name]
        wire = bytearray(env.to_wire())
        bit = rng.randrange(len(wire) * 8)
        wire[bit // 8] ^= 1 << (bit % 8)
        flips += 1
        try:
            flipped = SignedEnvelope.from_wire(bytes(wire))
        except SignatureInvalid:
            rejected += 1
            per_kind[name] = per_kind.get(name, 0) + 1
            continue
        fn = rng.choice(fns)
        if expect_rejected(lambda: fn(flipped)):
            rejected += 1
            per_kind[name] = per_kind.get(name, 0) + 1
    mutated = snapshot() != before
    record_property("detail", f"{flips} flips, {rejected} rejected, state mutated: {mutated}")
    assert rejected == flips == 1000 and not mutated
    # the untampered envelopes are accepted by the same consumers
    assert rs.enforce(rqp, client, "records", {"read"}, now).granted
    assert net.registry.apply_update(update_env, now) == "rs1.1/scans"


def _deny_as_error(outcome) -> None:
    if outcome.reason in SIGNATURE_CLASS:
        raise SignatureInvalid(outcome.reason)
    raise AssertionError(f"tampered token not rejected by signature: {outcome.to_record()}")


# -- criterion 6 ----------------------------------------------------------------------------


def test_criterion_6_routes_converge(record_property):
    empty = TicketCache().digest()
    differing, populated = [], 0
    for seed in range(100):
        direct, via = route_digests(seed, DIRECT), route_digests(seed, VIA_AS)
        if direct != via:
            differing.append(seed)
        populated += any(d != empty for d in direct.values())
    record_property("detail", f"100 seeds ({populated} with populated caches), {len(differing)} with differing cache digests")
    assert populated > 50 and differing == []


# -- criterion 7 ----------------------------------------------------------------------------


def test_criterion_7_bundled_scenarios_are_deterministic(record_property):
    names = bundled_names("scenarios")
    unstable, failed = [], []
    for name in names:
        if run_scenario(name, seed=0).transcript_digest != run_scenario(name, seed=0).transcript_digest:
            unstable.append(name)
        for seed in range(10):
            if not run_scenario(name, seed=seed).passed:
                failed.append((name, seed))
    record_property("detail", f"{len(names)} scenarios x 10 seeds, {len(unstable)} unstable, {len(failed)} failed")
    assert len(names) >= 1 and unstable == [] and failed == []


# -- criterion 8 ----------------------------------------------------------------------------


def test_criterion_8_policy_vectors_and_deny_overrides(record_property):
    grid = {(s, o): evaluate_mls(s, o, "read").permitted for s in range(4) for o in range(4)}
    assert grid == MLS_TABLE and sum(grid.values()) == 10 and len(grid) - sum(grid.values()) == 6

    doctors = Policy("p", "alice", frozenset({"read", "list"}), required_roles=frozenset({"doctor"}))
    attrs = lambda active: SubjectAttributes("bob", frozenset({"doctor", "researcher"}), active, 2)  # noqa: E731
    assert evaluate_rbac(attrs("doctor"), doctors, {"read"}).permitted
    assert not evaluate_rbac(attrs("researcher"), doctors, {"read"}).permitted
    assert not evaluate_rbac(attrs(None), doctors, {"read"}).permitted
    assert evaluate_rbac(attrs("doctor"), doctors, {"read", "list"}).permitted
    assert not evaluate_rbac(attrs("doctor"), doctors, {"read", "write"}).permitted

    rng = random.Random(8)
    violations = 0
    for n in range(1000):
        policies = [random_policy(rng, f"p{i}") for i in range(rng.randint(1, 6))]
        subject, resource = random_subject(rng), rng.choice(RESOURCES)
        scopes = frozenset(rng.sample(["read", "list", "write"], rng.randint(1, 2)))
        base = evaluate(policies, subject, resource, scopes).permitted
        expected = naive_outcome(policies, subject.principal, subject.roles, subject.active_role,
                                 subject.mls_level, resource, scopes) == PERMIT
        deny = Policy(f"deny{n}", resource.owner, scopes, effect=DENY, resources=frozenset({resource.key}))
        extended = policies + [deny]
        rng.shuffle(extended)
        after = evaluate(extended, subject, resource, scopes).permitted
        violations += after or base != expected
    record_property("detail", f"grid 10/6, rbac vectors ok, {violations} deny-overrides violations in 1000 sets")
    assert violations == 0


# -- criterion 9 ----------------------------------------------------------------------------


def test_criterion_9_restart_from_journals_changes_nothing(sweep, record_property):
    changed = digest_changes = 0
    for net, rows in sweep.runs:
        before = net.state_digests()
        net.restart_all()
        digest_changes += net.state_digests() != before
        for request, flow, _ in rows:
            again = request_access(net, request)
            changed += (again.status, again.reason) != (flow.status, flow.reason)
    record_property("detail", f"{sweep.tuples} tuples after restart, {changed} changed, "
                              f"{digest_changes} state digest changes")
    assert changed == 0 and digest_changes == 0

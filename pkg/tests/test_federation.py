from __future__ import annotations

import copy
import json

import pytest

from conftest import bob_reads_records, two_domain_network
from umafed.core import Kind, ResourceRef, SigningKey, seal
from umafed.errors import (
    DuplicateDomain,
    DuplicateResource,
    ForeignResourceServer,
    InvariantViolation,
    NoKeys,
    ParseError,
    QuiescenceTimeout,
    UnknownIssuer,
    UnknownKey,
    UntrustedOrigin,
    WrongKind,
)
from umafed.federation import (
    DIRECT,
    VIA_AS,
    Federation,
    FederationRegistry,
    MemberRecord,
    Route,
    member_from_nodes,
)
from umafed.policy import Policy
from umafed.scenario import resolve_registry
from umafed.simnet import build_topology


def _doc(name="two_domain"):
    return resolve_registry(name).to_document()


class Recorder:
    def __init__(self):
        self.sent = []

    def send(self, src, dst, message):
        self.sent.append((src, dst, message))


# -- registry -----------------------------------------------------------------------------------


def test_document_round_trip():
    reg = resolve_registry("three_domain")
    again = FederationRegistry.from_document(json.loads(json.dumps(reg.to_document())))
    assert again.digest() == reg.digest()


def test_duplicate_domain():
    reg = FederationRegistry("f")
    reg.register_member(member_from_nodes("d1", "as1"))
    with pytest.raises(DuplicateDomain):
        reg.register_member(member_from_nodes("d1", "as9"))
    doc = _doc()
    doc["members"][1]["domain"] = "d1"
    with pytest.raises(InvariantViolation) as info:
        FederationRegistry.from_document(doc)
    assert info.value.location == "$.members[1].domain"


def test_member_without_keys():
    with pytest.raises(NoKeys):
        FederationRegistry("f").register_member(MemberRecord("d1", "as1"))
    doc = _doc()
    doc["members"][1]["keys"] = []
    with pytest.raises(InvariantViolation) as info:
        FederationRegistry.from_document(doc)
    assert info.value.location == "$.members[1].keys"


def test_node_in_two_domains():
    reg = FederationRegistry("f")
    reg.register_member(member_from_nodes("d1", "as1", ["rs"]))
    with pytest.raises(InvariantViolation):
        reg.register_member(member_from_nodes("d2", "as2", ["rs"]))


def test_schema_errors_carry_location():
    doc = _doc()
    doc["members"][0]["as_node"] = 7
    with pytest.raises(ParseError) as info:
        FederationRegistry.from_document(doc)
    assert info.value.details["location"] == "$.members[0].as_node"
    with pytest.raises(ParseError):
        FederationRegistry.from_document({**_doc(), "format_version": 2})


def test_resource_on_undeclared_rs():
    doc = _doc()
    doc["resources"][0]["rs"] = "rs9"
    with pytest.raises(InvariantViolation) as info:
        FederationRegistry.from_document(doc)
    assert info.value.location.startswith("$.resources[0]")


def test_duplicate_resource_in_document():
    doc = _doc()
    doc["resources"].append(copy.deepcopy(doc["resources"][0]))
    with pytest.raises(InvariantViolation):
        FederationRegistry.from_document(doc)


def test_verify_member_is_the_trust_gate():
    reg = resolve_registry("two_domain")
    good = seal(Kind.REVOCATION, {"x": 1}, reg.signing_key("as1"), 0, 10)
    assert reg.verify_member(good) == "d1"
    stranger = seal(Kind.REVOCATION, {"x": 1}, SigningKey("as9", "k1", b"k" * 32), 0, 10)
    with pytest.raises(UnknownIssuer):
        reg.verify_member(stranger)
    rotated = seal(Kind.REVOCATION, {"x": 1}, SigningKey("as1", "k7", b"k" * 32), 0, 10)
    with pytest.raises(UnknownKey):
        reg.verify_member(rotated)


def test_owner_index():
    reg = resolve_registry("two_domain")
    assert reg.rs_targets("alice") == ["rs1.1", "rs2.1"]
    assert reg.domains_of("alice") == ["d1", "d2"]
    assert reg.rs_targets("nobody") == []
    with pytest.raises(ForeignResourceServer):
        reg.index_resource(ResourceRef("d1", "rs2.1", "x", "alice", frozenset({"read"})))
    changed = ResourceRef("d1", "rs1.1", "records", "bob", frozenset({"read"}))
    with pytest.raises(DuplicateResource):
        reg.index_resource(changed)


def test_registry_update_only_from_domain_as():
    reg = resolve_registry("two_domain")
    ref = ResourceRef("d2", "rs2.1", "x", "bob", frozenset({"read"}))
    assert reg.apply_update(reg.make_update(ref, reg.signing_key("as2"), 0), 0) == "rs2.1/x"
    other = ResourceRef("d2", "rs2.1", "y", "bob", frozenset({"read"}))
    with pytest.raises(UntrustedOrigin):
        reg.apply_update(reg.make_update(other, reg.signing_key("as1"), 0), 0)
    with pytest.raises(WrongKind):
        reg.apply_update(seal(Kind.REVOCATION, {}, reg.signing_key("as2"), 0, 10), 0)


def test_five_domain_registry():
    reg = FederationRegistry("five")
    for i in range(1, 6):
        reg.register_member(member_from_nodes(f"d{i}", f"as{i}", [f"rs{i}.1", f"rs{i}.2"], [f"idp{i}"], [f"c{i}"]))
    assert len(reg.as_nodes()) == 5 and len(reg.rs_nodes()) == 10 and len(reg.idp_nodes()) == 5
    net = build_topology(reg)
    assert len(net.nodes) == 20


# -- routing and fan-out --------------------------------------------------------------------------


def test_route_shapes():
    assert Route.direct("as1", "rs2.1").hops == ("as1", "rs2.1")
    assert Route.via_as("as1", "as2", "rs2.1").hops == ("as1", "as2", "rs2.1")
    assert Route.via_as("as1", "as1", "rs1.1").hops == ("as1", "rs1.1")
    with pytest.raises(ValueError):
        Federation(resolve_registry("two_domain"), Recorder(), "carrier_pigeon")


def _index_oracle(reg, origin_as, owner):
    """Expected targets straight from the resource list."""
    refs = [r for r in reg.resources.values() if r.owner == owner]
    origin_domain = reg.domain_of(origin_as)
    rs = {r.rs for r in refs}
    pdp = {reg.members[r.domain].as_node for r in refs if r.domain != origin_domain}
    return rs, pdp


@pytest.mark.parametrize("route", [DIRECT, VIA_AS])
@pytest.mark.parametrize("origin", ["as1", "as2", "as3"])
def test_fan_out_matches_index(route, origin):
    reg = resolve_registry("three_domain")
    reg.index_resource(ResourceRef("d2", "rs2.1", "letters", "bob", frozenset({"read"})))
    fed = Federation(reg, Recorder(), route)
    for owner in ("alice", "bob", "nobody"):
        plan = fed.plan(origin, owner)
        rs, pdp = _index_oracle(reg, origin, owner)
        assert {d.target for d in plan if d.role == "rs"} == rs
        assert {d.target for d in plan if d.role == "pdp"} == pdp


def test_via_as_sends_through_relay_hop():
    reg = resolve_registry("three_domain")
    transport = Recorder()
    fed = Federation(reg, transport, VIA_AS)
    env = seal(Kind.REVOCATION, {"owner": "alice", "policy_id": "p", "revoked_version": 1, "issued_at": 0},
               reg.signing_key("as1"), 0, 300)
    report = fed.propagate_revocation("as1", env, 0)
    assert report.rs_targets() == {"rs1.1", "rs2.1", "rs3.1"}
    assert sorted((s, d) for s, d, _ in transport.sent) == [("as1", "as2"), ("as1", "as3"), ("as1", "rs1.1")]
    finals = sorted(m["hops"][-1] for _, _, m in transport.sent)
    assert finals == ["rs1.1", "rs2.1", "rs3.1"]


def test_propagation_checks_origin():
    reg = resolve_registry("two_domain")
    fed = Federation(reg, Recorder())
    env = seal(Kind.REVOCATION, {"owner": "alice"}, reg.signing_key("as1"), 0, 300)
    with pytest.raises(UntrustedOrigin):
        fed.propagate_revocation("as2", env, 0)
    with pytest.raises(WrongKind):
        fed.propagate_policy("as1", env, 0)


@pytest.mark.parametrize("route", [DIRECT, VIA_AS])
def test_revocation_reaches_every_policy_holder(route):
    net = two_domain_network(route=route)
    net.set_policy("as1", "alice", Policy("p", "alice", frozenset({"read"})))
    net.run_until_quiescent()
    holders = {n for n in net.registry.rs_nodes() if net.nodes[n].cache.entry("alice", "p")}
    net.retract_policy("as1", "alice", "p")
    net.run_until_quiescent()
    report = net.reports[-1]
    assert report.with_status("delivered") == set(report.deliveries)
    tombstoned = {n for n in net.registry.rs_nodes() if ("alice", "p") in net.nodes[n].cache.tombstones}
    assert tombstoned == holders == {"rs1.1", "rs2.1"}
    assert ("alice", "p") in net.nodes["as2"].view.tombstones


def test_relay_leaves_receipts():
    net = two_domain_network(route=VIA_AS)
    net.set_policy("as1", "alice", bob_reads_records())
    net.run_until_quiescent()
    receipts = net.nodes["as2"].receipts
    assert len(receipts) == 1
    assert receipts[0]["from"] == "as1" and receipts[0]["to"] == "rs2.1" and receipts[0]["type"] == "policy"
    assert net.nodes["as1"].receipts == []


def test_direct_route_skips_remote_as():
    net = two_domain_network(route=DIRECT)
    net.set_node_state("as2", False)
    net.set_policy("as1", "alice", bob_reads_records())
    with pytest.raises(QuiescenceTimeout):
        net.run_until_quiescent(max_ticks=5)
    assert net.nodes["rs2.1"].cache.entry("alice", "p-bob") is not None
    assert net.nodes["as2"].receipts == []
    net.set_node_state("as2", True)
    net.run_until_quiescent()
    assert net.nodes["as2"].view.entry("alice", "p-bob") is not None


def test_via_as_waits_for_offline_relay():
    net = two_domain_network(route=VIA_AS)
    net.set_node_state("as2", False)
    net.set_policy("as1", "alice", bob_reads_records())
    net.advance(5)
    assert net.nodes["rs2.1"].cache.entry("alice", "p-bob") is None
    assert net.nodes["rs1.1"].cache.entry("alice", "p-bob") is not None
    assert net.reports[-1].with_status("pending") == {"as2", "rs2.1"}
    net.set_node_state("as2", True)
    net.run_until_quiescent()
    assert net.reports[-1].complete


def test_failed_install_is_reported_not_raised():
    net = two_domain_network()
    env = seal(Kind.REVOCATION, {"owner": "alice"}, net.registry.signing_key("idp1"), 0, 300)
    result = net.federation.receive(net.nodes["rs1.1"], {"type": "revocation", "envelope": env.to_hex(),
                                                         "hops": ["as1", "rs1.1"], "hop": 1}, 0)
    assert result == {"status": "failed", "reason": "untrusted_origin"}

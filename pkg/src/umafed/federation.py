"""Trust framework as data, plus the policy/revocation propagation fabric.

The registry lists member domains, their nodes and verification keys, and
the owner index (which domains hold whose resources). The fabric fans policy
tickets and revocations out to every resource server holding the owner's
resources, along either route: straight to the RS, or relayed through the
target domain's authorization server.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Any, Iterable, Protocol

import jsonschema

from umafed.core import (
    Kind,
    KeyRegistry,
    ResourceRef,
    SignedEnvelope,
    SigningKey,
    canonical_serialize,
    digest,
    seal,
    verify_envelope,
    verify_signature,
)
from umafed.errors import (
    DuplicateDomain,
    DuplicateResource,
    ForeignResourceServer,
    InvariantViolation,
    NoKeys,
    ParseError,
    RouteUnavailable,
    UmafedError,
    UnknownIssuer,
    UnknownResource,
    UntrustedOrigin,
    WrongKind,
)
from umafed.policy import SYNTAXES

FORMAT_VERSION = 1
DIRECT = "direct"
VIA_AS = "via_as"
ROUTE_KINDS = (DIRECT, VIA_AS)


def load_schema(name: str) -> dict[str, Any]:
    text = importlib_resources.files("umafed.data.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc: Any, schema_name: str) -> None:
    """Schema-check a JSON document, raising ParseError with a JSON-path location."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ParseError(f"{where}: {err.message}", location=where)


@dataclass(frozen=True)
class KeySpec:
    node: str
    key_id: str
    secret: bytes = field(repr=False)

    def signing_key(self) -> SigningKey:
        return SigningKey(self.node, self.key_id, self.secret)


@dataclass(frozen=True)
class MemberRecord:
    domain: str
    as_node: str
    rs_nodes: tuple[str, ...] = ()
    idp_nodes: tuple[str, ...] = ()
    clients: frozenset[str] = frozenset()
    policy_syntaxes: frozenset[str] = frozenset(SYNTAXES)
    keys: tuple[KeySpec, ...] = ()

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.as_node, *self.rs_nodes, *self.idp_nodes)

    def to_record(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "as_node": self.as_node,
            "rs_nodes": list(self.rs_nodes),
            "idp_nodes": list(self.idp_nodes),
            "clients": sorted(self.clients),
            "policy_syntaxes": sorted(self.policy_syntaxes),
            "keys": [{"node": k.node, "key_id": k.key_id, "secret": k.secret.hex()} for k in self.keys],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "MemberRecord":
        return cls(
            domain=rec["domain"],
            as_node=rec["as_node"],
            rs_nodes=tuple(rec.get("rs_nodes", ())),
            idp_nodes=tuple(rec.get("idp_nodes", ())),
            clients=frozenset(rec.get("clients", ())),
            policy_syntaxes=frozenset(rec.get("policy_syntaxes", SYNTAXES)),
            keys=tuple(KeySpec(k["node"], k["key_id"], bytes.fromhex(k["secret"])) for k in rec.get("keys", ())),
        )


class FederationRegistry:
    """Membership, key directory and owner-resource index.

    Mutations are serialized by an internal lock; readers get the current
    key snapshot via :attr:`keys`.
    """

    def __init__(self, federation_id: str) -> None:
        self.federation_id = federation_id
        self.members: dict[str, MemberRecord] = {}
        self.resources: dict[str, ResourceRef] = {}
        self.owner_index: dict[str, set[tuple[str, str]]] = {}
        self._node_domain: dict[str, str] = {}
        self._keys = KeyRegistry()
        self._lock = threading.Lock()

    # -- membership -----------------------------------------------------------

    def register_member(self, member: MemberRecord) -> dict[str, Any]:
        with self._lock:
            if member.domain in self.members:
                raise DuplicateDomain(f"domain {member.domain!r} is already a member")
            if not member.keys:
                raise NoKeys(f"member {member.domain!r} declares no verification keys")
            for node in member.nodes:
                if node in self._node_domain:
                    raise InvariantViolation(f"node {node!r} already belongs to {self._node_domain[node]!r}")
            for key in member.keys:
                if key.node not in member.nodes:
                    raise InvariantViolation(f"key {key.key_id!r} names node {key.node!r} outside {member.domain!r}")
            self.members[member.domain] = member
            for node in member.nodes:
                self._node_domain[node] = member.domain
            self._keys = KeyRegistry(k.signing_key() for m in self.members.values() for k in m.keys)
        return {"ok": True, "domain": member.domain}

    @property
    def keys(self) -> KeyRegistry:
        return self._keys

    def domain_of(self, node: str) -> str:
        try:
            return self._node_domain[node]
        except KeyError:
            raise UnknownIssuer(f"node {node!r} is not a federation member", issuer=node) from None

    def member_of(self, node: str) -> MemberRecord:
        return self.members[self.domain_of(node)]

    def as_node(self, domain: str) -> str:
        return self.members[domain].as_node

    def is_as(self, node: str) -> bool:
        domain = self._node_domain.get(node)
        return domain is not None and self.members[domain].as_node == node

    def as_nodes(self) -> list[str]:
        return sorted(m.as_node for m in self.members.values())

    def rs_nodes(self) -> list[str]:
        return sorted(rs for m in self.members.values() for rs in m.rs_nodes)

    def idp_nodes(self) -> list[str]:
        return sorted(i for m in self.members.values() for i in m.idp_nodes)

    def signing_key(self, node: str, key_id: str | None = None) -> SigningKey:
        member = self.member_of(node)
        for key in member.keys:
            if key.node == node and (key_id is None or key.key_id == key_id):
                return key.signing_key()
        raise NoKeys(f"node {node!r} has no signing key")

    def verify_member(self, env: SignedEnvelope) -> str:
        """The single trust gate: resolve the issuer's domain and check the signature."""
        domain = self.domain_of(env.header.issuer)
        verify_signature(env, self._keys)
        return domain

    # -- owner index ------------------------------------------------------------

    def index_resource(self, ref: ResourceRef) -> str:
        with self._lock:
            member = self.members.get(ref.domain)
            if member is None or ref.rs not in member.rs_nodes:
                raise ForeignResourceServer(f"{ref.rs!r} is not a resource server of domain {ref.domain!r}")
            existing = self.resources.get(ref.key)
            if existing is not None:
                if existing != ref:
                    raise DuplicateResource(f"resource {ref.key!r} is already indexed differently")
                return ref.key
            self.resources[ref.key] = ref
            self.owner_index.setdefault(ref.owner, set()).add((ref.domain, ref.key))
        return ref.key

    def resource(self, key: str) -> ResourceRef:
        try:
            return self.resources[key]
        except KeyError:
            raise UnknownResource(f"resource {key!r} is not indexed") from None

    def resources_of(self, owner: str) -> list[ResourceRef]:
        return [self.resources[key] for _, key in sorted(self.owner_index.get(owner, ()))]

    def rs_targets(self, owner: str) -> list[str]:
        return sorted({r.rs for r in self.resources_of(owner)})

    def domains_of(self, owner: str) -> list[str]:
        return sorted({d for d, _ in self.owner_index.get(owner, ())})

    # -- registry updates over the wire --------------------------------------------

    def make_update(self, ref: ResourceRef, key: SigningKey, now: int, ttl: int = 300) -> SignedEnvelope:
        return seal(Kind.REGISTRY_UPDATE, {"op": "index_resource", "resource": ref.to_record()}, key, now, ttl)

    def apply_update(self, env: SignedEnvelope, now: int) -> str:
        """Index a resource announced by the AS of the resource's domain."""
        verify_envelope(env, self._keys, now)
        if env.header.kind is not Kind.REGISTRY_UPDATE:
            raise WrongKind(f"expected registry_update, got {env.header.kind.value}")
        record = env.record()
        ref = ResourceRef.from_record(record["resource"])
        if ref.domain not in self.members or self.members[ref.domain].as_node != env.header.issuer:
            raise UntrustedOrigin(f"{env.header.issuer!r} may not announce resources of {ref.domain!r}")
        return self.index_resource(ref)

    # -- documents --------------------------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "federation_id": self.federation_id,
            "members": [self.members[d].to_record() for d in sorted(self.members)],
            "resources": [self.resources[k].to_record() for k in sorted(self.resources)],
        }

    def digest(self) -> str:
        return digest(canonical_serialize(self.to_document()))

    @classmethod
    def from_document(cls, doc: Any) -> "FederationRegistry":
        validate_document(doc, "registry")
        reg = cls(doc["federation_id"])
        for i, rec in enumerate(doc["members"]):
            where = f"$.members[{i}]"
            try:
                member = MemberRecord.from_record(rec)
            except ValueError as exc:
                raise InvariantViolation(str(exc), f"{where}.keys") from exc
            try:
                reg.register_member(member)
            except DuplicateDomain as exc:
                raise InvariantViolation(exc.message, f"{where}.domain") from exc
            except NoKeys as exc:
                raise InvariantViolation(exc.message, f"{where}.keys") from exc
            except InvariantViolation as exc:
                raise InvariantViolation(exc.message, where) from exc
            for node in (member.as_node, *member.idp_nodes):
                if not any(k.node == node for k in member.keys):
                    raise InvariantViolation(f"signing node {node!r} has no key", f"{where}.keys")
        for i, rec in enumerate(doc.get("resources", [])):
            where = f"$.resources[{i}]"
            try:
                ref = ResourceRef.from_record(rec)
            except ValueError as exc:
                raise InvariantViolation(str(exc), where) from exc
            if ref.key in reg.resources:
                raise InvariantViolation(f"duplicate resource {ref.key!r}", f"{where}.resource_id")
            try:
                reg.index_resource(ref)
            except UmafedError as exc:
                raise InvariantViolation(exc.message, f"{where}.rs") from exc
        return reg

    @classmethod
    def load(cls, path: str | Path) -> "FederationRegistry":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}", location=f"line {exc.lineno}") from exc
        return cls.from_document(doc)


# -- routing ------------------------------------------------------------------------


@dataclass(frozen=True)
class Route:
    kind: str
    hops: tuple[str, ...]

    @classmethod
    def direct(cls, origin_as: str, target: str) -> "Route":
        return cls(DIRECT, (origin_as, target))

    @classmethod
    def via_as(cls, origin_as: str, target_domain_as: str, target_rs: str) -> "Route":
        if target_domain_as == origin_as:
            # same domain: nothing to relay through
            return cls(VIA_AS, (origin_as, target_rs))
        return cls(VIA_AS, (origin_as, target_domain_as, target_rs))

    def to_record(self) -> dict[str, Any]:
        return {"kind": self.kind, "hops": list(self.hops)}


PENDING, DELIVERED, FAILED = "pending", "delivered", "failed"


@dataclass
class Delivery:
    target: str
    role: str  # "rs" for enforcement points, "pdp" for the target domain's AS
    route: Route
    status: str = PENDING
    reason: str = ""

    def to_record(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "role": self.role,
            "route": self.route.to_record(),
            "status": self.status,
            "reason": self.reason,
        }


@dataclass
class DeliveryReport:
    report_id: str
    kind: str
    owner: str
    envelope_digest: str
    deliveries: dict[str, Delivery] = field(default_factory=dict)

    def rs_targets(self) -> set[str]:
        return {t for t, d in self.deliveries.items() if d.role == "rs"}

    def with_status(self, status: str) -> set[str]:
        return {t for t, d in self.deliveries.items() if d.status == status}

    @property
    def complete(self) -> bool:
        return all(d.status == DELIVERED for d in self.deliveries.values())

    def to_record(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "kind": self.kind,
            "owner": self.owner,
            "envelope_digest": self.envelope_digest,
            "deliveries": [self.deliveries[t].to_record() for t in sorted(self.deliveries)],
        }


class Transport(Protocol):
    def send(self, src: str, dst: str, message: dict[str, Any]) -> None:
        """Queue or transmit ``message``; raise RouteUnavailable if it cannot be accepted."""


class Federation:
    """Fan-out and routing of policy tickets and revocations."""

    def __init__(self, registry: FederationRegistry, transport: Transport, route: str = VIA_AS) -> None:
        if route not in ROUTE_KINDS:
            raise ValueError(f"unknown route kind {route!r}")
        self.registry = registry
        self.transport = transport
        self.route = route
        self.reports: dict[str, DeliveryReport] = {}
        self._ids = itertools.count(1)

    def _check_origin(self, origin_as: str, env: SignedEnvelope, kind: Kind, now: int) -> dict[str, Any]:
        verify_envelope(env, self.registry.keys, now)
        if env.header.kind is not kind:
            raise WrongKind(f"expected {kind.value}, got {env.header.kind.value}")
        if not self.registry.is_as(origin_as) or env.header.issuer != origin_as:
            raise UntrustedOrigin(f"{origin_as!r} is not the issuing member AS")
        return env.record()

    def plan(self, origin_as: str, owner: str) -> list[Delivery]:
        """Deliveries for ``owner``: every RS holding their resources, and the AS of
        each such remote domain so its decision point sees the same policies."""
        origin_domain = self.registry.domain_of(origin_as)
        deliveries = []
        remote_domains = set()
        for ref in self.registry.resources_of(owner):
            if any(d.target == ref.rs for d in deliveries):
                continue
            target_as = self.registry.as_node(ref.domain)
            if self.route == DIRECT:
                route = Route.direct(origin_as, ref.rs)
            else:
                route = Route.via_as(origin_as, target_as, ref.rs)
            deliveries.append(Delivery(ref.rs, "rs", route))
            if ref.domain != origin_domain:
                remote_domains.add(ref.domain)
        for domain in sorted(remote_domains):
            target_as = self.registry.as_node(domain)
            # via_as: the AS is reached as the relay hop of the RS-bound messages
            deliveries.append(Delivery(target_as, "pdp", Route.direct(origin_as, target_as)))
        return deliveries

    def _propagate(self, kind: str, origin_as: str, env: SignedEnvelope, owner: str) -> DeliveryReport:
        report = DeliveryReport(f"{origin_as}#{next(self._ids)}", kind, owner, env.digest)
        for delivery in self.plan(origin_as, owner):
            report.deliveries[delivery.target] = delivery
        self.reports[report.report_id] = report
        for delivery in list(report.deliveries.values()):
            if delivery.role == "pdp" and self.route == VIA_AS:
                continue
            self.route_ticket(env, delivery.route, report_id=report.report_id, kind=kind)
        return report

    def propagate_policy(self, origin_as: str, ticket: SignedEnvelope, now: int) -> DeliveryReport:
        record = self._check_origin(origin_as, ticket, Kind.PERMISSION_TICKET, now)
        return self._propagate("policy", origin_as, ticket, record["owner"])

    def propagate_revocation(self, origin_as: str, record_env: SignedEnvelope, now: int) -> DeliveryReport:
        record = self._check_origin(origin_as, record_env, Kind.REVOCATION, now)
        return self._propagate("revocation", origin_as, record_env, record["owner"])

    def route_ticket(
        self, envelope: SignedEnvelope, route: Route, *, report_id: str = "", kind: str = "policy"
    ) -> str:
        """Send along ``route``; returns ``pending`` or ``queued`` when the first hop is unavailable."""
        message = {
            "type": kind,
            "envelope": envelope.to_hex(),
            "route": route.kind,
            "hops": list(route.hops),
            "hop": 1,
            "report": report_id,
        }
        try:
            self.transport.send(route.hops[0], route.hops[1], message)
        except RouteUnavailable:
            return "queued"
        return PENDING

    # -- receiving side ------------------------------------------------------------

    def receive(self, node: Any, message: dict[str, Any], now: int) -> dict[str, Any]:
        """Handle ``message`` arriving at ``node``: relay onwards or install.

        Returns a result record ``{status, reason}``; relay failures and install
        rejections are reported, never raised.
        """
        hops = message["hops"]
        index = message["hop"]
        env = SignedEnvelope.from_hex(message["envelope"])
        final = index == len(hops) - 1
        try:
            if message["type"] == "policy":
                node.install_policy_ticket(env, now) if final else node.relay(env, message, now)
            elif message["type"] == "revocation":
                node.install_revocation(env, now) if final else node.relay(env, message, now)
            else:
                raise ValueError(f"unknown message type {message['type']!r}")
        except UmafedError as exc:
            self._settle(message, hops[-1], FAILED, exc.code)
            if not final:
                self._settle_pdp(message, node, FAILED, exc.code)
            return {"status": FAILED, "reason": exc.code}
        if final:
            self._settle(message, hops[-1], DELIVERED, "")
            return {"status": DELIVERED, "reason": ""}
        self._settle_pdp(message, node, DELIVERED, "")
        forward = dict(message, hop=index + 1)
        try:
            self.transport.send(hops[index], hops[index + 1], forward)
        except RouteUnavailable as exc:
            return {"status": "queued", "reason": exc.code}
        return {"status": "relayed", "reason": ""}

    def _settle(self, message: dict[str, Any], target: str, status: str, reason: str) -> None:
        report = self.reports.get(message.get("report", ""))
        if report is None or target not in report.deliveries:
            return
        delivery = report.deliveries[target]
        if delivery.status != DELIVERED:
            delivery.status, delivery.reason = status, reason

    def _settle_pdp(self, message: dict[str, Any], node: Any, status: str, reason: str) -> None:
        target = getattr(node, "node_id", None)
        if target is not None:
            self._settle(message, target, status, reason)


def member_from_nodes(
    domain: str,
    as_node: str,
    rs_nodes: Iterable[str] = (),
    idp_nodes: Iterable[str] = (),
    clients: Iterable[str] = (),
    secrets: dict[str, bytes] | None = None,
) -> MemberRecord:
    """Build a member record, deriving deterministic keys when none are given."""
    idp_nodes = tuple(idp_nodes)
    signers = (as_node, *idp_nodes)
    secrets = secrets or {}
    keys = tuple(
        KeySpec(node, "k1", secrets.get(node) or digest(f"umafed-test-key:{node}".encode()).encode()[:32])
        for node in signers
    )
    return MemberRecord(domain, as_node, tuple(rs_nodes), idp_nodes, frozenset(clients), frozenset(SYNTAXES), keys)

"""Deterministic in-process federation network.

One tick is one delivery round. Messages sent during tick ``t`` become due at
``t + 1``; messages due in the same tick are ordered by a seeded random
tiebreak, so a given (registry, scenario, seed) always yields the same
transcript while different seeds exercise different orderings.

Undeliverable messages (offline endpoint, link down) stay queued; nothing is
dropped.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from umafed.authz import TTLs, AuthorizationServer
from umafed.core import ResourceRef, SignedEnvelope, canonical_serialize, digest
from umafed.errors import (
    AccessDenied,
    QuiescenceTimeout,
    RouteUnavailable,
    UmafedError,
    UnknownNode,
)
from umafed.federation import VIA_AS, DeliveryReport, Federation, FederationRegistry
from umafed.idp import DEFAULT_AUTHN_TTL, IdentityProvider
from umafed.journal import Journal, persist_replay
from umafed.policy import DENY, PERMIT, SubjectAttributes, evaluate
from umafed.resource import DENIED, AccessOutcome, ResourceServer

logger = logging.getLogger(__name__)

FRONT, BACK = "front", "back"


@dataclass(order=True)
class _Queued:
    deliver_at: int
    tiebreak: int
    seq: int
    src: str = field(compare=False)
    dst: str = field(compare=False)
    message: dict[str, Any] = field(compare=False)

    def describe(self) -> dict[str, Any]:
        return {"src": self.src, "dst": self.dst, "type": self.message["type"],
                "final": self.message.get("hops", [self.dst])[-1]}


@dataclass
class AccessFlow:
    """Result of one client access attempt, including the tokens it obtained."""

    outcome: AccessOutcome
    tokens: tuple[SignedEnvelope, SignedEnvelope] | None = None
    exchange_error: str = ""

    @property
    def status(self) -> str:
        return self.outcome.status

    @property
    def reason(self) -> str:
        return self.outcome.reason


@dataclass(frozen=True)
class OracleRequest:
    principal: str
    active_role: str | None
    client: str
    resource: str
    scopes: frozenset[str]

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"principal": self.principal, "client": self.client,
                               "resource": self.resource, "scopes": sorted(self.scopes)}
        if self.active_role is not None:
            rec["active_role"] = self.active_role
        return rec


class Network:
    def __init__(
        self,
        registry: FederationRegistry,
        *,
        seed: int = 0,
        route: str = VIA_AS,
        ttls: TTLs = TTLs(),
        authn_ttl: int = DEFAULT_AUTHN_TTL,
        mls_strict: bool = False,
        strict_introspection: bool = False,
        data_dir: str | Path | None = None,
    ) -> None:
        self.registry = registry
        self.seed = seed
        self.rng = random.Random(seed)
        self.ttls = ttls
        self.authn_ttl = authn_ttl
        self.mls_strict = mls_strict
        self.strict_introspection = strict_introspection
        self.data_dir = Path(data_dir) if data_dir else None
        self.clock = 0
        self.federation = Federation(registry, self, route)
        self.nodes: dict[str, Any] = {}
        self.online: dict[str, bool] = {}
        self.down_links: set[frozenset[str]] = set()
        self.queue: list[_Queued] = []
        self._seq = 0
        self.transcript: list[dict[str, Any]] = []
        self.reports: list[DeliveryReport] = []
        self.queue_depth: list[int] = []
        self.authn_inbox: dict[tuple[str, str], SignedEnvelope] = {}
        self.wallet: dict[str, SignedEnvelope] = {}
        for node_id in self._declared_nodes():
            self.nodes[node_id] = self._make_node(node_id)
            self.online[node_id] = True

    # -- construction -------------------------------------------------------------

    def _declared_nodes(self) -> list[str]:
        out = []
        for domain in sorted(self.registry.members):
            member = self.registry.members[domain]
            out.extend([*member.idp_nodes, member.as_node, *member.rs_nodes])
        return out

    def _journal(self, node_id: str) -> Journal | None:
        if self.data_dir is None:
            return None
        return Journal(self.data_dir / f"{node_id.replace('/', '_')}.log")

    def journal_path(self, node_id: str) -> Path | None:
        return None if self.data_dir is None else self.data_dir / f"{node_id.replace('/', '_')}.log"

    def _make_node(self, node_id: str) -> Any:
        member = self.registry.member_of(node_id)
        journal = self._journal(node_id)
        if node_id in member.idp_nodes:
            return IdentityProvider(node_id, self.registry.signing_key(node_id), token_ttl=self.authn_ttl,
                                    journal=journal)
        if node_id == member.as_node:
            return AuthorizationServer(
                node_id, self.registry, ttls=self.ttls, mls_strict=self.mls_strict, journal=journal,
                emit=lambda kind, env, now, origin=node_id: self._on_emit(origin, kind, env, now),
            )
        as_node = member.as_node
        return ResourceServer(
            node_id,
            self.registry,
            ticket_source=lambda key, scopes, now, rs=node_id, a=as_node: self.call(
                rs, a, lambda node: node.issue_permission_ticket(key, scopes, now)
            ),
            introspector=lambda env, now, rs=node_id, a=as_node: self.call(
                rs, a, lambda node: node.introspect(env, now)
            ),
            strict_introspection=self.strict_introspection,
            mls_strict=self.mls_strict,
            journal=journal,
        )

    def host_declared_resources(self) -> None:
        """Register every resource of the registry at its RS and its domain's AS."""
        for key in sorted(self.registry.resources):
            ref = self.registry.resources[key]
            self.nodes[ref.rs].host(ref)
            as_node = self.nodes[self.registry.as_node(ref.domain)]
            if key not in as_node.resources:
                as_node.register_resource(ref.rs, ref, self.clock)

    def node(self, node_id: str) -> Any:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r}") from None

    # -- transport --------------------------------------------------------------------

    def _on_emit(self, origin: str, kind: str, env: SignedEnvelope, now: int) -> None:
        if kind == "policy":
            self.reports.append(self.federation.propagate_policy(origin, env, now))
        elif kind == "revocation":
            self.reports.append(self.federation.propagate_revocation(origin, env, now))
        # registry updates need no transport here: all nodes share one registry

    def send(self, src: str, dst: str, message: dict[str, Any]) -> None:
        self.node(src)
        self.node(dst)
        self._seq += 1
        item = _Queued(self.clock + 1, self.rng.getrandbits(32), self._seq, src, dst, message)
        heapq.heappush(self.queue, item)
        self.log("send", **item.describe())

    def deliverable(self, src: str, dst: str) -> bool:
        return self.online[src] and self.online[dst] and frozenset((src, dst)) not in self.down_links

    def call(self, src: str, dst: str, fn: Any) -> Any:
        """Synchronous back-channel request from ``src`` to ``dst``."""
        if not self.deliverable(src, dst):
            raise RouteUnavailable(f"{src} cannot reach {dst}")
        return fn(self.nodes[dst])

    def log(self, event: str, **fields: Any) -> None:
        self.transcript.append({"tick": self.clock, "event": event, **fields})

    def tick(self) -> None:
        self.clock += 1
        due = []
        while self.queue and self.queue[0].deliver_at <= self.clock:
            due.append(heapq.heappop(self.queue))
        for item in due:
            if not self.deliverable(item.src, item.dst):
                self._seq += 1
                heapq.heappush(
                    self.queue,
                    _Queued(self.clock + 1, self.rng.getrandbits(32), self._seq, item.src, item.dst, item.message),
                )
                continue
            self._deliver(item)
        self.queue_depth.append(len(self.queue))

    def _deliver(self, item: _Queued) -> None:
        node = self.nodes[item.dst]
        if item.message["type"] == "authn":
            env = SignedEnvelope.from_hex(item.message["envelope"])
            self.authn_inbox[(item.dst, item.message["principal"])] = env
            self.log("deliver", **item.describe(), status="delivered", reason="")
            return
        result = self.federation.receive(node, item.message, self.clock)
        self.log("deliver", **item.describe(), **result)

    def run_until_quiescent(self, max_ticks: int = 100) -> int:
        if max_ticks <= 0:
            raise ValueError("max_ticks must be > 0")
        consumed = 0
        while self.queue and consumed < max_ticks:
            self.tick()
            consumed += 1
        if self.queue:
            pending = [q.describe() for q in sorted(self.queue)]
            self.log("quiescence_timeout", pending=pending)
            raise QuiescenceTimeout(f"{len(pending)} messages still queued after {max_ticks} ticks", pending)
        self.log("quiescent", ticks=consumed)
        return consumed

    def advance(self, ticks: int) -> None:
        for _ in range(ticks):
            self.tick()

    def set_node_state(self, node: str, online: bool) -> dict[str, Any]:
        self.node(node)
        self.online[node] = online
        self.log("node_state", node=node, online=online)
        return {"ok": True}

    def set_link_state(self, a: str, b: str, up: bool) -> dict[str, Any]:
        self.node(a)
        self.node(b)
        link = frozenset((a, b))
        if up:
            self.down_links.discard(link)
        else:
            self.down_links.add(link)
        self.log("link_state", a=min(a, b), b=max(a, b), up=up)
        return {"ok": True}

    # -- client-side operations -----------------------------------------------------------

    def register_principal(self, principal: str, secret: bytes, roles: Iterable[str] = (),
                           mls_level: int | None = None, idp: str | None = None) -> None:
        idp = idp or self.registry.idp_nodes()[0]
        self.node(idp).register_principal(principal, secret, roles, mls_level)
        self.log("register_principal", idp=idp, principal=principal)

    def login(self, principal: str, secret: bytes, *, idp: str | None = None, channel: str = FRONT,
              as_node: str | None = None) -> SignedEnvelope:
        """Authenticate at an IdP. Front channel: the token goes to the client's
        wallet. Back channel: the IdP sends it to ``as_node`` as a message."""
        idp = idp or self.registry.idp_nodes()[0]
        if not self.online[idp]:
            raise RouteUnavailable(f"{idp} is offline")
        env = self.node(idp).authenticate(principal, secret, self.clock)
        if channel == FRONT:
            self.wallet[principal] = env
        else:
            if as_node is None:
                raise ValueError("back-channel login needs a destination AS")
            self.send(idp, as_node, {"type": "authn", "principal": principal, "envelope": env.to_hex(),
                                     "hops": [idp, as_node], "hop": 1})
        self.log("login", principal=principal, idp=idp, channel=channel)
        return env

    def authn_for(self, principal: str, as_node: str) -> SignedEnvelope | None:
        return self.authn_inbox.get((as_node, principal)) or self.wallet.get(principal)

    def as_call(self, as_node: str, fn: Any) -> Any:
        if not self.online[as_node]:
            raise RouteUnavailable(f"{as_node} is offline")
        return fn(self.nodes[as_node])

    def set_policy(self, as_node: str, principal: str, policy: Any) -> int:
        authn = self.authn_for(principal, as_node)
        version = self.as_call(as_node, lambda n: n.set_policy(authn, policy, self.clock))
        self.log("set_policy", as_node=as_node, owner=policy.owner, policy_id=policy.policy_id, version=version)
        return version

    def retract_policy(self, as_node: str, principal: str, policy_id: str) -> Any:
        authn = self.authn_for(principal, as_node)
        record = self.as_call(as_node, lambda n: n.retract_policy(authn, policy_id, self.clock))
        self.log("retract_policy", as_node=as_node, owner=principal, policy_id=policy_id,
                 version=record.revoked_version)
        return record

    def access(
        self,
        principal: str,
        client: str,
        rs: str,
        resource_id: str,
        scopes: Iterable[str],
        *,
        active_role: str | None = None,
        tokens: tuple[SignedEnvelope | None, SignedEnvelope | None] | None = None,
        bootstrap_only: bool = False,
    ) -> AccessFlow:
        """Drive one client request through the ticket / exchange / retry legs."""
        scopes = sorted(set(scopes))
        flow = self._access(principal, client, rs, resource_id, scopes, active_role, tokens, bootstrap_only)
        self.log("access", principal=principal, client=client, rs=rs, resource=resource_id, scopes=scopes,
                 status=flow.status, reason=flow.reason)
        return flow

    def _access(self, principal, client, rs, resource_id, scopes, active_role, tokens, bootstrap_only) -> AccessFlow:
        server = self.node(rs)
        if not self.online[rs]:
            return AccessFlow(AccessOutcome(DENIED, "rs_unavailable"))
        if tokens is not None:
            request = {"resource_id": resource_id, "scopes": scopes, "rqp_token": tokens[0], "client_token": tokens[1]}
            return AccessFlow(server.handle_request(request, self.clock))
        first = server.handle_request({"resource_id": resource_id, "scopes": scopes}, self.clock)
        if bootstrap_only or first.ticket is None:
            return AccessFlow(first)
        as_node = first.as_location
        authn = self.authn_for(principal, as_node)
        if authn is None:
            return AccessFlow(AccessOutcome(DENIED, "authn_missing"))
        try:
            pair = self.as_call(as_node, lambda n: n.exchange(first.ticket, authn, client, active_role, self.clock))
        except AccessDenied as exc:
            return AccessFlow(AccessOutcome(DENIED, exc.reason), exchange_error=exc.code)
        except RouteUnavailable:
            return AccessFlow(AccessOutcome(DENIED, "as_unavailable"), exchange_error="route_unavailable")
        except UmafedError as exc:
            reason = getattr(exc, "reason", exc.code)
            return AccessFlow(AccessOutcome(DENIED, reason), exchange_error=exc.code)
        request = {"resource_id": resource_id, "scopes": scopes, "rqp_token": pair[0], "client_token": pair[1]}
        return AccessFlow(server.handle_request(request, self.clock), tokens=pair)

    # -- crash / replay ----------------------------------------------------------------------

    def restart(self, node_id: str) -> int:
        """Discard a node's memory and rebuild it from its journal."""
        if self.data_dir is None:
            raise RuntimeError("restart needs a data_dir with journals")
        old = self.node(node_id)
        if old.journal is not None:
            old.journal.close()
        fresh = self._make_node(node_id)
        journal, fresh.journal = fresh.journal, None
        count = persist_replay(fresh, self.journal_path(node_id), repair=True)
        fresh.journal = journal
        self.nodes[node_id] = fresh
        self.log("restart", node=node_id, records=count)
        return count

    def restart_all(self) -> dict[str, int]:
        return {node_id: self.restart(node_id) for node_id in sorted(self.nodes)}

    def close(self) -> None:
        for node in self.nodes.values():
            if node.journal is not None:
                node.journal.close()

    # -- observation ------------------------------------------------------------------------------

    def state_digests(self) -> dict[str, str]:
        return {n: digest(canonical_serialize(self.nodes[n].state_record())) for n in sorted(self.nodes)}

    def cache_digests(self) -> dict[str, str]:
        return {n: self.nodes[n].cache.digest() for n in self.registry.rs_nodes()}

    def transcript_digest(self) -> str:
        return digest(canonical_serialize(self.transcript))


def build_topology(source: Any, **kwargs: Any) -> Network:
    """Build a network from a registry path, document or registry object.

    All nodes start online with all links up at tick 0, and every declared
    resource is hosted at its RS and registered at its domain's AS.
    """
    if isinstance(source, FederationRegistry):
        registry = source
    elif isinstance(source, dict):
        registry = FederationRegistry.from_document(source)
    else:
        registry = FederationRegistry.load(source)
    net = Network(registry, **kwargs)
    net.host_declared_resources()
    return net


def oracle_decide(net: Network, request: OracleRequest) -> str:
    """Centralized decision from global state, ignoring propagation.

    Gathers every unrevoked latest-version policy of the resource owner from
    every AS's authored store, then applies the same admission rules a
    correct deployment should: the principal is registered at some IdP, the
    active role is one they hold, and the client is registered in the
    resource's domain.
    """
    credential = None
    for node in net.nodes.values():
        if isinstance(node, IdentityProvider) and request.principal in node.credentials:
            credential = node.credentials[request.principal]
            break
    if credential is None:
        return DENY
    if request.active_role is not None and request.active_role not in credential.roles:
        return DENY
    ref: ResourceRef = net.registry.resources.get(request.resource)
    if ref is None:
        return DENY
    if request.client not in net.registry.members[ref.domain].clients:
        return DENY
    policies = []
    for node in net.nodes.values():
        if isinstance(node, AuthorizationServer):
            for (owner, _), stored in sorted(node.policies.items()):
                if owner == ref.owner and not stored.revoked:
                    policies.append(stored.policy)
    attrs = SubjectAttributes(request.principal, credential.roles, request.active_role, credential.mls_level)
    decision = evaluate(policies, attrs, ref, request.scopes, mls_strict=net.mls_strict)
    return PERMIT if decision.permitted else DENY

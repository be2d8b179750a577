"""Policy enforcement point.

A resource server enforces from its local ticket cache only. Policies arrive
as signed policy-carrying tickets, revocations as tombstones; both are
versioned so any delivery order of the same messages converges to one state.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from umafed.core import Kind, ResourceRef, SignedEnvelope, canonical_serialize, digest, verify_envelope
from umafed.errors import (
    RouteUnavailable,
    UmafedError,
    UnknownResource,
    UntrustedOrigin,
    WrongKind,
)
from umafed.federation import FederationRegistry
from umafed.journal import Journal
from umafed.policy import NO_APPLICABLE_POLICY, PERMITTED, Policy, SubjectAttributes, evaluate
from umafed.tickets import (
    CLIENT_OPERATOR,
    REQUESTING_PARTY,
    AccessToken,
    open_policy_ticket,
    open_revocation,
)

GRANTED = "granted"
DENIED = "denied"
TICKET_NEEDED = "ticket_needed"

POLICY_REVOKED = "policy_revoked"
POLICY_EXPIRED = "policy_expired"


@dataclass(frozen=True)
class CacheEntry:
    policy: Policy
    origin_as: str
    ticket_id: str
    expires_at: int | None  # None for policies authored by the holder itself

    def rank(self) -> tuple[int, float, str]:
        expiry = float("inf") if self.expires_at is None else self.expires_at
        return (self.policy.version, expiry, digest(canonical_serialize(self.to_record())))

    def live_at(self, now: int) -> bool:
        return self.expires_at is None or now < self.expires_at

    def to_record(self) -> dict[str, Any]:
        rec = {"policy": self.policy.to_record(), "origin_as": self.origin_as, "ticket_id": self.ticket_id}
        if self.expires_at is not None:
            rec["expires_at"] = self.expires_at
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "CacheEntry":
        return cls(Policy.from_record(rec["policy"]), rec["origin_as"], rec["ticket_id"], rec.get("expires_at"))


class TicketCache:
    """Highest-version policy per (owner, policy_id) plus revocation tombstones.

    Merging is a join: the kept entry is the max by (version, expiry) and the
    tombstone is the max revoked version, so the final state does not depend
    on delivery order.
    """

    def __init__(self) -> None:
        self.entries: dict[tuple[str, str], CacheEntry] = {}
        self.tombstones: dict[tuple[str, str], int] = {}

    def install(self, entry: CacheEntry) -> str:
        key = (entry.policy.owner, entry.policy.policy_id)
        current = self.entries.get(key)
        if current is not None and current.rank() >= entry.rank():
            return "ignored"
        self.entries[key] = entry
        if current is not None and current.policy.version == entry.policy.version:
            return "refreshed"
        return "installed"

    def revoke(self, owner: str, policy_id: str, version: int) -> str:
        key = (owner, policy_id)
        if self.tombstones.get(key, -1) >= version:
            return "ignored"
        self.tombstones[key] = version
        return "revoked"

    def is_revoked(self, entry: CacheEntry) -> bool:
        key = (entry.policy.owner, entry.policy.policy_id)
        return entry.policy.version <= self.tombstones.get(key, -1)

    def _of(self, owner: str) -> list[CacheEntry]:
        return [self.entries[k] for k in sorted(self.entries) if k[0] == owner]

    def live_policies(self, owner: str, now: int) -> list[Policy]:
        return [e.policy for e in self._of(owner) if not self.is_revoked(e) and e.live_at(now)]

    def revoked_policies(self, owner: str) -> list[Policy]:
        return [e.policy for e in self._of(owner) if self.is_revoked(e)]

    def expired_policies(self, owner: str, now: int) -> list[Policy]:
        return [e.policy for e in self._of(owner) if not self.is_revoked(e) and not e.live_at(now)]

    def entry(self, owner: str, policy_id: str) -> CacheEntry | None:
        return self.entries.get((owner, policy_id))

    def state_record(self) -> dict[str, Any]:
        return {
            "entries": [self.entries[k].to_record() for k in sorted(self.entries)],
            "tombstones": [[o, p, v] for (o, p), v in sorted(self.tombstones.items())],
        }

    def digest(self) -> str:
        return digest(canonical_serialize(self.state_record()))


@dataclass(frozen=True)
class AccessOutcome:
    status: str
    reason: str
    ticket: SignedEnvelope | None = None
    as_location: str | None = None
    content: bytes | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if (self.ticket is not None) != (self.status == TICKET_NEEDED):
            raise ValueError("a ticket accompanies exactly the ticket_needed outcomes")

    @property
    def granted(self) -> bool:
        return self.status == GRANTED

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"status": self.status, "reason": self.reason}
        if self.ticket is not None:
            rec["ticket"] = self.ticket.to_hex()
        if self.as_location is not None:
            rec["as_location"] = self.as_location
        return rec


TicketSource = Callable[[str, Iterable[str], int], SignedEnvelope]
Introspector = Callable[[SignedEnvelope, int], dict[str, Any]]


class _Deny(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason


class ResourceServer:
    def __init__(
        self,
        node_id: str,
        registry: FederationRegistry,
        *,
        ticket_source: TicketSource | None = None,
        introspector: Introspector | None = None,
        strict_introspection: bool = False,
        mls_strict: bool = False,
        content_dir: str | Path | None = None,
        journal: Journal | None = None,
    ) -> None:
        self.node_id = node_id
        self.registry = registry
        self.domain = registry.domain_of(node_id)
        self.as_node = registry.as_node(self.domain)
        self.ticket_source = ticket_source
        self.introspector = introspector
        self.strict_introspection = strict_introspection
        self.mls_strict = mls_strict
        self.content_dir = Path(content_dir) if content_dir else None
        self.journal = journal
        self.hosted: dict[str, ResourceRef] = {}
        self.cache = TicketCache()
        self._lock = threading.Lock()

    # -- hosting ----------------------------------------------------------------

    def host(self, ref: ResourceRef) -> str:
        if ref.rs != self.node_id:
            raise UntrustedOrigin(f"resource {ref.key!r} belongs to {ref.rs!r}")
        with self._lock:
            if ref.resource_id not in self.hosted:
                self._commit({"op": "host", "resource": ref.to_record()})
        return ref.key

    def _resource(self, resource_id: str) -> ResourceRef:
        try:
            return self.hosted[resource_id]
        except KeyError:
            raise UnknownResource(f"{self.node_id} does not host {resource_id!r}") from None

    def content(self, resource_id: str) -> bytes | None:
        if self.content_dir is None:
            return None
        path = self.content_dir / resource_id
        return path.read_bytes() if path.is_file() else None

    # -- requests ---------------------------------------------------------------

    def handle_request(self, request: dict[str, Any], now: int) -> AccessOutcome:
        """Entry point for client requests.

        ``request`` holds ``resource_id``, ``scopes`` and optional ``rqp_token``
        / ``client_token`` envelopes. Missing either token yields a fresh
        correlation ticket and the AS to redeem it at.
        """
        ref = self._resource(request["resource_id"])
        scopes = frozenset(request["scopes"])
        rqp, client = request.get("rqp_token"), request.get("client_token")
        if rqp is None or client is None:
            if self.ticket_source is None:
                return AccessOutcome(DENIED, "as_unavailable")
            try:
                ticket = self.ticket_source(ref.key, sorted(scopes), now)
            except RouteUnavailable:
                return AccessOutcome(DENIED, "as_unavailable")
            return AccessOutcome(TICKET_NEEDED, "token_missing", ticket=ticket, as_location=self.as_node)
        outcome = self.enforce(rqp, client, ref.resource_id, scopes, now)
        if outcome.granted and self.content_dir is not None:
            return AccessOutcome(GRANTED, outcome.reason, content=self.content(ref.resource_id))
        return outcome

    def _open_token(self, env: SignedEnvelope | None, now: int) -> AccessToken:
        if env is None:
            raise _Deny("token_missing")
        try:
            verify_envelope(env, self.registry.keys, now)
            if env.header.kind is not Kind.ACCESS_TOKEN:
                raise WrongKind("not an access token")
            if env.header.issuer != self.as_node:
                raise UntrustedOrigin("token not issued by this domain's AS")
            return AccessToken.from_record(env.record())
        except UmafedError as exc:
            raise _Deny(exc.code) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise _Deny("malformed_token") from exc

    def enforce(
        self,
        rqp_token: SignedEnvelope | None,
        client_token: SignedEnvelope | None,
        resource_id: str,
        scopes: Iterable[str],
        now: int,
    ) -> AccessOutcome:
        """Grant iff both tokens check out and the cached policies permit.

        Never calls the AS unless strict introspection is configured.
        """
        requested = frozenset(scopes)
        try:
            ref = self.hosted.get(resource_id)
            if ref is None:
                raise _Deny("unknown_resource")
            rqp = self._open_token(rqp_token, now)
            client = self._open_token(client_token, now)
            if rqp.holder_kind != REQUESTING_PARTY or client.holder_kind != CLIENT_OPERATOR:
                raise _Deny("holder_kind_mismatch")
            if rqp.ticket_id != client.ticket_id:
                raise _Deny("token_pair_mismatch")
            if rqp.resource != ref.key or client.resource != ref.key:
                raise _Deny("resource_mismatch")
            if not (requested <= rqp.scopes and requested <= client.scopes):
                raise _Deny("scope_not_covered")
            if self.strict_introspection:
                self._introspect_both(rqp_token, client_token, now)
            try:
                attrs = SubjectAttributes(rqp.holder, rqp.roles, rqp.active_role, rqp.mls_level)
            except ValueError:
                raise _Deny("role_not_held") from None
            with self._lock:
                policies = self.cache.live_policies(ref.owner, now)
                decision = evaluate(policies, attrs, ref, requested, mls_strict=self.mls_strict)
                reason = decision.reason
                if reason == NO_APPLICABLE_POLICY:
                    reason = self._absence_reason(ref, now)
        except _Deny as deny:
            return AccessOutcome(DENIED, deny.reason)
        if decision.permitted:
            return AccessOutcome(GRANTED, PERMITTED)
        return AccessOutcome(DENIED, reason)

    def _absence_reason(self, ref: ResourceRef, now: int) -> str:
        if any(p.selects(ref) for p in self.cache.revoked_policies(ref.owner)):
            return POLICY_REVOKED
        if any(p.selects(ref) for p in self.cache.expired_policies(ref.owner, now)):
            return POLICY_EXPIRED
        return NO_APPLICABLE_POLICY

    def _introspect_both(self, rqp_token: SignedEnvelope, client_token: SignedEnvelope, now: int) -> None:
        if self.introspector is None:
            raise _Deny("as_unavailable")
        for env in (rqp_token, client_token):
            try:
                result = self.introspector(env, now)
            except RouteUnavailable:
                raise _Deny("as_unavailable") from None
            if not result.get("active"):
                raise _Deny(result.get("reason") or "inactive_token")

    # -- propagation inputs --------------------------------------------------------

    def install_policy_ticket(self, env: SignedEnvelope, now: int) -> dict[str, Any]:
        ticket = open_policy_ticket(env, self.registry, now)
        entries = [CacheEntry(p, ticket.origin_as, ticket.ticket_id, env.header.expires_at) for p in ticket.policies]
        with self._lock:
            self._commit(
                {"op": "install", "entries": [e.to_record() for e in entries], "envelope": env.digest, "at": now}
            )
        return {"ok": True, "ticket_id": ticket.ticket_id}

    def install_revocation(self, env: SignedEnvelope, now: int) -> dict[str, Any]:
        record = open_revocation(env, self.registry, now)
        with self._lock:
            self._commit(
                {
                    "op": "revoke",
                    "owner": record.owner,
                    "policy_id": record.policy_id,
                    "version": record.revoked_version,
                    "envelope": env.digest,
                    "at": now,
                }
            )
        return {"ok": True, "policy_id": record.policy_id}

    # -- command log ---------------------------------------------------------------

    def _commit(self, cmd: dict[str, Any]) -> None:
        if self.journal is not None:
            self.journal.append(cmd)
        self.apply(cmd)

    def apply(self, cmd: dict[str, Any]) -> None:
        op = cmd["op"]
        if op == "host":
            ref = ResourceRef.from_record(cmd["resource"])
            self.hosted[ref.resource_id] = ref
        elif op == "install":
            for rec in cmd["entries"]:
                self.cache.install(CacheEntry.from_record(rec))
        elif op == "revoke":
            self.cache.revoke(cmd["owner"], cmd["policy_id"], cmd["version"])
        else:
            raise ValueError(f"unknown rs command {op!r}")

    def state_record(self) -> dict[str, Any]:
        return {
            "node": self.node_id,
            "hosted": [self.hosted[r].to_record() for r in sorted(self.hosted)],
            "cache": self.cache.state_record(),
        }

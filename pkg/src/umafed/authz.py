"""Authorization server: resource registration, owner policies, permission
tickets, the paired access-token exchange, introspection and revocation."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from umafed.core import Kind, ResourceRef, SignedEnvelope, SigningKey, seal, verify_envelope
from umafed.errors import (
    AccessDenied,
    AuthnInvalid,
    DuplicateResource,
    ForeignResourceServer,
    NotOwner,
    StaleVersion,
    TicketInvalid,
    UmafedError,
    UnknownClient,
    UnknownPolicy,
    UnknownResource,
    UnknownToken,
    UnsupportedSyntax,
    VerificationError,
)
from umafed.federation import FederationRegistry
from umafed.idp import AuthnToken, read_authn_token
from umafed.journal import Journal
from umafed.policy import Policy, PolicyDecision, SubjectAttributes, evaluate
from umafed.resource import CacheEntry, TicketCache
from umafed.tickets import (
    CLIENT_OPERATOR,
    CORRELATION,
    REQUESTING_PARTY,
    AccessToken,
    PermissionTicket,
    RevocationRecord,
    open_policy_ticket,
    open_revocation,
)


@dataclass(frozen=True)
class TTLs:
    correlation_ticket: int = 60
    access_token: int = 300
    policy_ticket: int = 300
    revocation: int = 300

    def __post_init__(self) -> None:
        for name in ("correlation_ticket", "access_token", "policy_ticket", "revocation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ttl {name} must be > 0")


@dataclass
class StoredPolicy:
    policy: Policy
    revoked: bool = False


Emit = Callable[[str, SignedEnvelope, int], None]


class AuthorizationServer:
    """One domain's decision point.

    Every state change goes through :meth:`_commit`, which journals the command
    before applying it, so a node rebuilt from its journal has identical state.
    Outbound envelopes are handed to ``emit(kind, envelope, now)``; replay
    never emits.
    """

    def __init__(
        self,
        node_id: str,
        registry: FederationRegistry,
        *,
        key: SigningKey | None = None,
        ttls: TTLs = TTLs(),
        mls_strict: bool = False,
        journal: Journal | None = None,
        emit: Emit | None = None,
    ) -> None:
        self.node_id = node_id
        self.registry = registry
        self.key = key or registry.signing_key(node_id)
        member = registry.member_of(node_id)
        self.domain = member.domain
        self.clients = member.clients
        self.ttls = ttls
        self.mls_strict = mls_strict
        self.journal = journal
        self.emit = emit
        self.resources: dict[str, ResourceRef] = {}
        self.policies: dict[tuple[str, str], StoredPolicy] = {}
        self.view = TicketCache()
        self.tokens: dict[str, dict[str, Any]] = {}
        self.receipts: list[dict[str, Any]] = []
        self.ticket_seq = 0
        self.token_seq = 0
        self._lock = threading.RLock()

    # -- helpers ----------------------------------------------------------------

    def _emit(self, kind: str, env: SignedEnvelope, now: int) -> None:
        if self.emit is not None:
            self.emit(kind, env, now)

    def _authn(self, env: SignedEnvelope, now: int) -> AuthnToken:
        try:
            return read_authn_token(env, self.registry.keys, now, self.registry.idp_nodes())
        except UmafedError as exc:
            raise AuthnInvalid(exc.code, exc) from exc
        except (KeyError, TypeError) as exc:
            raise AuthnInvalid("malformed_token") from exc

    def _check_syntax(self, policy: Policy) -> None:
        domains = {self.domain, *self.registry.domains_of(policy.owner)}
        for domain in sorted(domains):
            if policy.syntax not in self.registry.members[domain].policy_syntaxes:
                raise UnsupportedSyntax(f"domain {domain!r} does not support {policy.syntax!r}")

    def _check_resources(self, principal: str, policy: Policy) -> None:
        if policy.resources is None:
            if not self.registry.resources_of(principal):
                raise UnknownResource(f"{principal!r} owns no resources in the federation")
            return
        for key in sorted(policy.resources):
            ref = self.registry.resources.get(key) or self.resources.get(key)
            if ref is None:
                raise UnknownResource(f"resource {key!r} is not known to the federation")
            if ref.owner != principal:
                raise NotOwner(f"{principal!r} does not own {key!r}")

    # -- resource registration ----------------------------------------------------

    def register_resource(self, rs: str, descriptor: ResourceRef, now: int = 0) -> str:
        if rs not in self.registry.members[self.domain].rs_nodes or descriptor.rs != rs or descriptor.domain != self.domain:
            raise ForeignResourceServer(f"{rs!r} is not a resource server of {self.domain!r}")
        with self._lock:
            if descriptor.key in self.resources:
                raise DuplicateResource(f"{descriptor.key!r} is already registered")
            self._commit({"op": "register_resource", "resource": descriptor.to_record()})
        self._emit("registry", self.registry.make_update(descriptor, self.key, now), now)
        return descriptor.key

    # -- policies ---------------------------------------------------------------------

    def set_policy(self, owner_authn: SignedEnvelope, policy: Policy, now: int) -> int:
        principal = self._authn(owner_authn, now).principal
        if principal != policy.owner:
            raise NotOwner(f"{principal!r} cannot set policies for {policy.owner!r}")
        self._check_resources(principal, policy)
        self._check_syntax(policy)
        with self._lock:
            current = self.policies.get((policy.owner, policy.policy_id))
            previous = current.policy.version if current else 0
            if policy.version and policy.version <= previous:
                raise StaleVersion(f"version {policy.version} <= current {previous}")
            stored = policy.with_version(previous + 1)
            ticket_id = f"{self.node_id}/pt{self.ticket_seq + 1}"
            ticket = PermissionTicket.carrying(ticket_id, self.node_id, stored.owner, [stored])
            env = seal(Kind.PERMISSION_TICKET, ticket.to_record(), self.key, now, self.ttls.policy_ticket)
            self._commit({"op": "set_policy", "policy": stored.to_record(), "ticket_id": ticket_id, "at": now})
        self._emit("policy", env, now)
        return stored.version

    def retract_policy(self, owner_authn: SignedEnvelope, policy_id: str, now: int) -> RevocationRecord:
        principal = self._authn(owner_authn, now).principal
        with self._lock:
            stored = self.policies.get((principal, policy_id))
            if stored is None or stored.revoked:
                if any(pid == policy_id and not s.revoked for (_, pid), s in self.policies.items()):
                    raise NotOwner(f"{principal!r} does not own policy {policy_id!r}")
                raise UnknownPolicy(f"no live policy {policy_id!r} for {principal!r}")
            record = RevocationRecord(principal, policy_id, stored.policy.version, now)
            env = seal(Kind.REVOCATION, record.to_record(), self.key, now, self.ttls.revocation)
            self._commit({"op": "retract", "owner": principal, "policy_id": policy_id,
                          "version": stored.policy.version, "at": now})
        self._emit("revocation", env, now)
        return record

    def refresh_policies(self, now: int) -> list[SignedEnvelope]:
        """Re-issue policy tickets for every live authored policy with a fresh lifetime."""
        with self._lock:
            live = [s.policy for k, s in sorted(self.policies.items()) if not s.revoked]
            envs = []
            for i, policy in enumerate(live, start=1):
                ticket_id = f"{self.node_id}/pt{self.ticket_seq + i}"
                ticket = PermissionTicket.carrying(ticket_id, self.node_id, policy.owner, [policy])
                envs.append(seal(Kind.PERMISSION_TICKET, ticket.to_record(), self.key, now, self.ttls.policy_ticket))
            if live:
                self._commit({"op": "refresh", "count": len(live), "at": now})
        for env in envs:
            self._emit("policy", env, now)
        return envs

    # -- client flow ---------------------------------------------------------------------

    def issue_permission_ticket(self, resource: str, scopes: Iterable[str], now: int) -> SignedEnvelope:
        scopes = frozenset(scopes)
        with self._lock:
            ref = self.resources.get(resource)
            if ref is None:
                raise UnknownResource(f"{resource!r} is not registered at {self.node_id}")
            if not scopes:
                raise ValueError("a ticket must request at least one scope")
            ticket_id = f"{self.node_id}/ct{self.ticket_seq + 1}"
            ticket = PermissionTicket(ticket_id, CORRELATION, ref.owner, (ref.key,), scopes, self.node_id)
            env = seal(Kind.PERMISSION_TICKET, ticket.to_record(), self.key, now, self.ttls.correlation_ticket)
            self._commit({"op": "ticket", "ticket_id": ticket_id, "at": now})
        return env

    def _open_correlation_ticket(self, env: SignedEnvelope, now: int) -> PermissionTicket:
        try:
            verify_envelope(env, self.registry.keys, now)
        except VerificationError as exc:
            raise TicketInvalid(exc.code, exc) from exc
        if env.header.kind is not Kind.PERMISSION_TICKET:
            raise TicketInvalid("wrong_kind")
        if env.header.issuer != self.node_id:
            raise TicketInvalid("foreign_ticket")
        try:
            ticket = PermissionTicket.from_record(env.record())
        except (KeyError, TypeError, UmafedError) as exc:
            raise TicketInvalid("malformed_ticket") from exc
        if ticket.mode != CORRELATION or len(ticket.resources) != 1:
            raise TicketInvalid("not_a_correlation_ticket")
        if ticket.resources[0] not in self.resources:
            raise TicketInvalid("unknown_resource")
        return ticket

    def decide(self, attrs: SubjectAttributes, resource: ResourceRef, scopes: Iterable[str], now: int) -> PolicyDecision:
        return evaluate(self.view.live_policies(resource.owner, now), attrs, resource, scopes, mls_strict=self.mls_strict)

    def exchange(
        self,
        ticket: SignedEnvelope,
        rqp_authn: SignedEnvelope,
        client_id: str,
        active_role: str | None,
        now: int,
    ) -> tuple[SignedEnvelope, SignedEnvelope]:
        """Redeem a correlation ticket for the requesting-party / client-operator token pair.

        Both tokens or neither: any unauthorized scope fails the whole exchange.
        """
        opened = self._open_correlation_ticket(ticket, now)
        authn = self._authn(rqp_authn, now)
        if client_id not in self.clients:
            raise UnknownClient(f"client {client_id!r} is not registered in {self.domain!r}")
        if active_role is not None and active_role not in authn.roles:
            raise AuthnInvalid("role_not_held")
        attrs = SubjectAttributes(authn.principal, authn.roles, active_role, authn.mls_level)
        resource = self.resources[opened.resources[0]]
        with self._lock:
            decision = self.decide(attrs, resource, opened.scopes, now)
            if not decision.permitted:
                raise AccessDenied(decision.reason, decision)
            base = self.token_seq
            rqp = AccessToken(f"{self.node_id}/at{base + 1}", authn.principal, REQUESTING_PARTY, resource.key,
                              opened.scopes, opened.ticket_id, authn.roles, active_role, authn.mls_level)
            client = AccessToken(f"{self.node_id}/at{base + 2}", client_id, CLIENT_OPERATOR, resource.key,
                                 opened.scopes, opened.ticket_id)
            envs = tuple(
                seal(Kind.ACCESS_TOKEN, t.to_record(), self.key, now, self.ttls.access_token) for t in (rqp, client)
            )
            self._commit(
                {
                    "op": "issue_tokens",
                    "tokens": [
                        {"token_id": t.token_id, "holder": t.holder, "holder_kind": t.holder_kind,
                         "resource": t.resource, "scopes": sorted(t.scopes), "ticket_id": t.ticket_id,
                         "expires_at": e.header.expires_at}
                        for t, e in zip((rqp, client), envs)
                    ],
                    "at": now,
                }
            )
        return envs[0], envs[1]

    def introspect(self, token_env: SignedEnvelope, now: int) -> dict[str, Any]:
        try:
            verify_envelope(token_env, self.registry.keys, now)
        except VerificationError as exc:
            return {"active": False, "reason": exc.code}
        if token_env.header.kind is not Kind.ACCESS_TOKEN:
            return {"active": False, "reason": "wrong_kind"}
        if token_env.header.issuer != self.node_id:
            return {"active": False, "reason": "foreign_token"}
        try:
            token = AccessToken.from_record(token_env.record())
        except (KeyError, TypeError, UmafedError):
            return {"active": False, "reason": "malformed_token"}
        entry = self.tokens.get(token.token_id)
        if entry is None:
            return {"active": False, "reason": "unknown_token"}
        if entry["revoked"]:
            return {"active": False, "reason": "revoked"}
        return {
            "active": True,
            "holder": token.holder,
            "holder_kind": token.holder_kind,
            "resource": token.resource,
            "scopes": sorted(token.scopes),
            "expires_at": token_env.header.expires_at,
        }

    def revoke_token(self, token_id: str) -> dict[str, Any]:
        with self._lock:
            if token_id not in self.tokens:
                raise UnknownToken(f"unknown token {token_id!r}")
            self._commit({"op": "revoke_token", "token_id": token_id})
        return {"ok": True, "token_id": token_id}

    # -- federation inputs ------------------------------------------------------------------

    def install_policy_ticket(self, env: SignedEnvelope, now: int) -> dict[str, Any]:
        ticket = open_policy_ticket(env, self.registry, now)
        entries = [CacheEntry(p, ticket.origin_as, ticket.ticket_id, env.header.expires_at) for p in ticket.policies]
        with self._lock:
            if ticket.origin_as != self.node_id:
                self._commit({"op": "install", "entries": [e.to_record() for e in entries], "at": now})
        return {"ok": True, "ticket_id": ticket.ticket_id}

    def install_revocation(self, env: SignedEnvelope, now: int) -> dict[str, Any]:
        record = open_revocation(env, self.registry, now)
        with self._lock:
            self._commit({"op": "revoke", "owner": record.owner, "policy_id": record.policy_id,
                          "version": record.revoked_version, "at": now})
        return {"ok": True, "policy_id": record.policy_id}

    def relay(self, env: SignedEnvelope, message: dict[str, Any], now: int) -> dict[str, Any]:
        """Intermediate hop: take the envelope into this decision point's view and
        record an auditable receipt before it is forwarded."""
        if message["type"] == "policy":
            self.install_policy_ticket(env, now)
        else:
            self.install_revocation(env, now)
        with self._lock:
            self._commit({"op": "relay_receipt", "envelope": env.digest, "type": message["type"],
                          "from": message["hops"][0], "to": message["hops"][-1], "at": now})
        return {"ok": True}

    # -- command log -------------------------------------------------------------------------

    def _commit(self, cmd: dict[str, Any]) -> None:
        if self.journal is not None:
            self.journal.append(cmd)
        self.apply(cmd)

    def apply(self, cmd: dict[str, Any]) -> None:
        op = cmd["op"]
        if op == "register_resource":
            ref = ResourceRef.from_record(cmd["resource"])
            self.resources[ref.key] = ref
            self.registry.index_resource(ref)
        elif op == "set_policy":
            policy = Policy.from_record(cmd["policy"])
            self.policies[(policy.owner, policy.policy_id)] = StoredPolicy(policy)
            self.view.install(CacheEntry(policy, self.node_id, cmd["ticket_id"], None))
            self.ticket_seq += 1
        elif op == "retract":
            self.policies[(cmd["owner"], cmd["policy_id"])].revoked = True
            self.view.revoke(cmd["owner"], cmd["policy_id"], cmd["version"])
        elif op == "refresh":
            self.ticket_seq += cmd["count"]
        elif op == "ticket":
            self.ticket_seq += 1
        elif op == "issue_tokens":
            for tok in cmd["tokens"]:
                self.tokens[tok["token_id"]] = dict(tok, revoked=False)
            self.token_seq += len(cmd["tokens"])
        elif op == "revoke_token":
            self.tokens[cmd["token_id"]]["revoked"] = True
        elif op == "install":
            for rec in cmd["entries"]:
                self.view.install(CacheEntry.from_record(rec))
        elif op == "revoke":
            self.view.revoke(cmd["owner"], cmd["policy_id"], cmd["version"])
        elif op == "relay_receipt":
            self.receipts.append({k: cmd[k] for k in ("envelope", "type", "from", "to", "at")})
        else:
            raise ValueError(f"unknown as command {op!r}")

    def state_record(self) -> dict[str, Any]:
        return {
            "node": self.node_id,
            "resources": [self.resources[k].to_record() for k in sorted(self.resources)],
            "policies": [
                {"policy": s.policy.to_record(), "revoked": s.revoked} for _, s in sorted(self.policies.items())
            ],
            "view": self.view.state_record(),
            "tokens": [self.tokens[t] for t in sorted(self.tokens)],
            "receipts": list(self.receipts),
            "ticket_seq": self.ticket_seq,
            "token_seq": self.token_seq,
        }

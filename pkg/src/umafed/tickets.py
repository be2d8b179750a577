"""Payloads carried in signed envelopes: permission tickets, access tokens,
revocation records, and the checks a receiver applies before trusting them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from umafed.core import Kind, SignedEnvelope, verify_envelope
from umafed.errors import DigestMismatch, UntrustedOrigin, WrongKind
from umafed.federation import FederationRegistry
from umafed.policy import Policy, policy_digest

CORRELATION = "correlation"
POLICY_CARRYING = "policy_carrying"

REQUESTING_PARTY = "requesting_party"
CLIENT_OPERATOR = "client_operator"


@dataclass(frozen=True)
class PermissionTicket:
    ticket_id: str
    mode: str
    owner: str
    resources: tuple[str, ...]
    scopes: frozenset[str]
    origin_as: str
    policies: tuple[Policy, ...] = ()
    policy_digest: str = ""

    def to_record(self) -> dict[str, Any]:
        return {
            "ticket_id": self.ticket_id,
            "mode": self.mode,
            "owner": self.owner,
            "resources": list(self.resources),
            "scopes": sorted(self.scopes),
            "origin_as": self.origin_as,
            "policies": [p.to_record() for p in self.policies],
            "policy_digest": self.policy_digest,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "PermissionTicket":
        return cls(
            ticket_id=rec["ticket_id"],
            mode=rec["mode"],
            owner=rec["owner"],
            resources=tuple(rec["resources"]),
            scopes=frozenset(rec["scopes"]),
            origin_as=rec["origin_as"],
            policies=tuple(Policy.from_record(p) for p in rec.get("policies", ())),
            policy_digest=rec.get("policy_digest", ""),
        )

    @classmethod
    def carrying(cls, ticket_id: str, origin_as: str, owner: str, policies: list[Policy]) -> "PermissionTicket":
        resources = sorted({r for p in policies for r in (p.resources or ("*",))})
        scopes = frozenset(s for p in policies for s in p.scopes)
        return cls(ticket_id, POLICY_CARRYING, owner, tuple(resources), scopes, origin_as,
                   tuple(policies), policy_digest(policies))


@dataclass(frozen=True)
class AccessToken:
    token_id: str
    holder: str
    holder_kind: str
    resource: str
    scopes: frozenset[str]
    ticket_id: str
    # subject attributes travel with the requesting-party token so enforcement
    # can re-run the decision locally
    roles: frozenset[str] = frozenset()
    active_role: str | None = None
    mls_level: int | None = None

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "token_id": self.token_id,
            "holder": self.holder,
            "holder_kind": self.holder_kind,
            "resource": self.resource,
            "scopes": sorted(self.scopes),
            "ticket_id": self.ticket_id,
        }
        if self.holder_kind == REQUESTING_PARTY:
            rec["roles"] = sorted(self.roles)
            if self.active_role is not None:
                rec["active_role"] = self.active_role
            if self.mls_level is not None:
                rec["mls_level"] = self.mls_level
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "AccessToken":
        return cls(
            token_id=rec["token_id"],
            holder=rec["holder"],
            holder_kind=rec["holder_kind"],
            resource=rec["resource"],
            scopes=frozenset(rec["scopes"]),
            ticket_id=rec["ticket_id"],
            roles=frozenset(rec.get("roles", ())),
            active_role=rec.get("active_role"),
            mls_level=rec.get("mls_level"),
        )


@dataclass(frozen=True)
class RevocationRecord:
    owner: str
    policy_id: str
    revoked_version: int
    issued_at: int

    def to_record(self) -> dict[str, Any]:
        return {
            "owner": self.owner,
            "policy_id": self.policy_id,
            "revoked_version": self.revoked_version,
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "RevocationRecord":
        return cls(rec["owner"], rec["policy_id"], rec["revoked_version"], rec["issued_at"])


def _member_as_origin(env: SignedEnvelope, registry: FederationRegistry) -> None:
    if not registry.is_as(env.header.issuer):
        raise UntrustedOrigin(f"{env.header.issuer!r} is not a member authorization server")


def open_policy_ticket(env: SignedEnvelope, registry: FederationRegistry, now: int) -> PermissionTicket:
    """Verify a policy-carrying ticket end to end, returning its payload."""
    verify_envelope(env, registry.keys, now)
    if env.header.kind is not Kind.PERMISSION_TICKET:
        raise WrongKind(f"expected permission_ticket, got {env.header.kind.value}")
    _member_as_origin(env, registry)
    try:
        ticket = PermissionTicket.from_record(env.record())
    except Exception as exc:
        raise DigestMismatch(f"ticket payload does not decode: {exc}") from exc
    if ticket.mode != POLICY_CARRYING:
        raise WrongKind(f"expected a policy_carrying ticket, got {ticket.mode}")
    if ticket.origin_as != env.header.issuer:
        raise UntrustedOrigin("ticket origin_as differs from its signer")
    if any(p.owner != ticket.owner for p in ticket.policies):
        raise UntrustedOrigin("ticket embeds policies of another owner")
    if policy_digest(ticket.policies) != ticket.policy_digest:
        raise DigestMismatch("embedded policies do not match policy_digest")
    return ticket


def open_revocation(env: SignedEnvelope, registry: FederationRegistry, now: int) -> RevocationRecord:
    verify_envelope(env, registry.keys, now)
    if env.header.kind is not Kind.REVOCATION:
        raise WrongKind(f"expected revocation, got {env.header.kind.value}")
    _member_as_origin(env, registry)
    return RevocationRecord.from_record(env.record())

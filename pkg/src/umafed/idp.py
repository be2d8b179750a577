"""Authentication provider: credential store and authentication tokens."""

from __future__ import annotations

import hashlib
import hmac
import threading
from dataclasses import dataclass
from typing import Any, Iterable

from umafed.core import Kind, KeyRegistry, SignedEnvelope, SigningKey, require_id, seal, verify_envelope
from umafed.errors import AlreadyRegistered, AuthenticationFailed, InvalidLifetime, UntrustedOrigin, WrongKind
from umafed.journal import Journal

DEFAULT_AUTHN_TTL = 600


def secret_digest(principal: str, secret: bytes) -> str:
    return hashlib.sha256(b"umafed-credential\x00" + principal.encode("utf-8") + b"\x00" + secret).hexdigest()


# compared against when the principal is unknown so both failure paths do the same work
_DUMMY_DIGEST = secret_digest("\x00", b"")


@dataclass(frozen=True)
class Credential:
    principal: str
    secret_digest: str
    roles: frozenset[str] = frozenset()
    mls_level: int | None = None

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "principal": self.principal,
            "secret_digest": self.secret_digest,
            "roles": sorted(self.roles),
        }
        if self.mls_level is not None:
            record["mls_level"] = self.mls_level
        return record


@dataclass(frozen=True)
class AuthnToken:
    principal: str
    idp: str
    auth_time: int
    roles: frozenset[str] = frozenset()
    mls_level: int | None = None

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "principal": self.principal,
            "idp": self.idp,
            "auth_time": self.auth_time,
            "roles": sorted(self.roles),
        }
        if self.mls_level is not None:
            record["mls_level"] = self.mls_level
        return record

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "AuthnToken":
        return cls(
            principal=record["principal"],
            idp=record["idp"],
            auth_time=record["auth_time"],
            roles=frozenset(record.get("roles", ())),
            mls_level=record.get("mls_level"),
        )


class IdentityProvider:
    """Holds credential digests and issues signed authentication tokens."""

    def __init__(
        self,
        node_id: str,
        key: SigningKey,
        *,
        token_ttl: int = DEFAULT_AUTHN_TTL,
        max_lifetime: int = DEFAULT_AUTHN_TTL,
        journal: Journal | None = None,
    ) -> None:
        if token_ttl <= 0 or token_ttl > max_lifetime:
            raise InvalidLifetime(f"token ttl {token_ttl} must be in (0, {max_lifetime}]")
        self.node_id = node_id
        self.key = key
        self.token_ttl = token_ttl
        self.credentials: dict[str, Credential] = {}
        self.journal = journal
        self._lock = threading.Lock()

    def register_principal(
        self, principal: str, secret: bytes, roles: Iterable[str] = (), mls_level: int | None = None
    ) -> dict[str, Any]:
        require_id(principal, "principal")
        with self._lock:
            if principal in self.credentials:
                raise AlreadyRegistered(f"principal {principal!r} is already registered")
            cred = Credential(principal, secret_digest(principal, secret), frozenset(roles), mls_level)
            self._commit({"op": "register_principal", "credential": cred.to_record()})
        return {"ok": True, "principal": principal}

    def authenticate(self, principal: str, secret: bytes, now: int) -> SignedEnvelope:
        cred = self.credentials.get(principal)
        expected = cred.secret_digest if cred else _DUMMY_DIGEST
        presented = secret_digest(principal, secret)
        matched = hmac.compare_digest(expected, presented)
        if cred is None or not matched:
            raise AuthenticationFailed("authentication failed")
        token = AuthnToken(principal, self.node_id, now, cred.roles, cred.mls_level)
        return seal(Kind.AUTHN_TOKEN, token.to_record(), self.key, now, self.token_ttl)

    # -- command log --------------------------------------------------------

    def _commit(self, cmd: dict[str, Any]) -> None:
        if self.journal is not None:
            self.journal.append(cmd)
        self.apply(cmd)

    def apply(self, cmd: dict[str, Any]) -> None:
        if cmd["op"] == "register_principal":
            rec = cmd["credential"]
            self.credentials[rec["principal"]] = Credential(
                rec["principal"], rec["secret_digest"], frozenset(rec["roles"]), rec.get("mls_level")
            )
        else:
            raise ValueError(f"unknown idp command {cmd['op']!r}")

    def state_record(self) -> dict[str, Any]:
        return {
            "node": self.node_id,
            "credentials": [self.credentials[p].to_record() for p in sorted(self.credentials)],
        }


def read_authn_token(
    env: SignedEnvelope, registry: KeyRegistry, now: int, trusted_idps: Iterable[str] | None = None
) -> AuthnToken:
    verify_envelope(env, registry, now)
    if env.header.kind is not Kind.AUTHN_TOKEN:
        raise WrongKind(f"expected authn_token, got {env.header.kind.value}")
    if trusted_idps is not None and env.header.issuer not in set(trusted_idps):
        raise UntrustedOrigin(f"{env.header.issuer!r} is not a federation identity provider")
    token = AuthnToken.from_record(env.record())
    if token.idp != env.header.issuer:
        raise UntrustedOrigin("token idp does not match envelope issuer")
    return token


def validate_authn_token(
    env: SignedEnvelope, registry: KeyRegistry, now: int, trusted_idps: Iterable[str] | None = None
) -> str:
    """Return the authenticated principal."""
    return read_authn_token(env, registry, now, trusted_idps).principal


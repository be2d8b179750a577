"""Shared vocabulary: canonical records, digests and signed envelopes."""

from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from umafed.errors import (
    Expired,
    InvalidLifetime,
    MalformedEnvelope,
    NotYetValid,
    SignatureInvalid,
    UnknownIssuer,
    UnknownKey,
    UnsupportedValue,
)

DIGEST_HEX_LEN = 64

_U32 = struct.Struct(">I")


def _check(value: Any, path: str) -> None:
    if isinstance(value, bool) or isinstance(value, int):
        return
    if isinstance(value, str):
        try:
            value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise UnsupportedValue(f"{path}: string is not encodable as UTF-8") from exc
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnsupportedValue(f"{path}: map key {key!r} is not a string")
            _check(key, path)
            _check(item, f"{path}.{key}")
        return
    raise UnsupportedValue(f"{path}: unsupported value of type {type(value).__name__}")


def canonical_serialize(value: Any) -> bytes:
    """Serialize strings, integers, booleans, lists and string-keyed maps.

    Map keys are emitted in lexicographic order with no insignificant
    whitespace, so equal values always produce identical bytes.
    """
    _check(value, "$")
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _reject_float(text: str) -> Any:
    raise UnsupportedValue(f"non-integer number {text!r}")


def _reject_constant(text: str) -> Any:
    raise UnsupportedValue(f"unsupported constant {text!r}")


def canonical_deserialize(data: bytes, *, strict: bool = False) -> Any:
    """Inverse of :func:`canonical_serialize`.

    With ``strict`` the input must already be in canonical form.
    """
    try:
        value = json.loads(
            data.decode("utf-8"),
            parse_float=_reject_float,
            parse_constant=_reject_constant,
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnsupportedValue(f"not a canonical record: {exc}") from exc
    if value is None:
        raise UnsupportedValue("null is not a supported value")
    _check_no_null(value)
    if strict and canonical_serialize(value) != data:
        raise UnsupportedValue("record is not in canonical form")
    return value


def _check_no_null(value: Any) -> None:
    if value is None:
        raise UnsupportedValue("null is not a supported value")
    if isinstance(value, list):
        for item in value:
            _check_no_null(item)
    elif isinstance(value, dict):
        for item in value.values():
            _check_no_null(item)


def digest(data: bytes) -> str:
    """Lowercase hex SHA-256."""
    return hashlib.sha256(data).hexdigest()


def record_digest(value: Any) -> str:
    return digest(canonical_serialize(value))


# -- domain records -----------------------------------------------------------


def require_id(value: Any, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"{what} must be a non-empty string")
    return value


@dataclass(frozen=True)
class ResourceRef:
    domain: str
    rs: str
    resource_id: str
    owner: str
    scopes: frozenset[str]
    mls_level: int | None = None

    def __post_init__(self) -> None:
        for name in ("domain", "rs", "resource_id", "owner"):
            require_id(getattr(self, name), name)
        object.__setattr__(self, "scopes", frozenset(self.scopes))
        if not self.scopes:
            raise ValueError("resource scopes must be non-empty")
        if self.mls_level is not None and self.mls_level < 0:
            raise ValueError("mls_level must be >= 0")

    @property
    def key(self) -> str:
        """Deployment-wide identifier; node ids are unique so ``rs/id`` is too."""
        return f"{self.rs}/{self.resource_id}"

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "domain": self.domain,
            "rs": self.rs,
            "resource_id": self.resource_id,
            "owner": self.owner,
            "scopes": sorted(self.scopes),
        }
        if self.mls_level is not None:
            record["mls_level"] = self.mls_level
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "ResourceRef":
        return cls(
            domain=record["domain"],
            rs=record["rs"],
            resource_id=record["resource_id"],
            owner=record["owner"],
            scopes=frozenset(record["scopes"]),
            mls_level=record.get("mls_level"),
        )


# -- envelopes ----------------------------------------------------------------


class Kind(str, Enum):
    AUTHN_TOKEN = "authn_token"
    ACCESS_TOKEN = "access_token"
    PERMISSION_TICKET = "permission_ticket"
    REVOCATION = "revocation"
    REGISTRY_UPDATE = "registry_update"


@dataclass(frozen=True)
class Header:
    issuer: str
    key_id: str
    kind: Kind
    issued_at: int
    expires_at: int

    def to_record(self) -> dict[str, Any]:
        return {
            "issuer": self.issuer,
            "key_id": self.key_id,
            "kind": self.kind.value,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "Header":
        if not isinstance(record, dict) or set(record) != {"issuer", "key_id", "kind", "issued_at", "expires_at"}:
            raise ValueError("header fields mismatch")
        issued, expires = record["issued_at"], record["expires_at"]
        if type(issued) is not int or type(expires) is not int:
            raise ValueError("header ticks must be integers")
        return cls(
            issuer=require_id(record["issuer"], "issuer"),
            key_id=require_id(record["key_id"], "key_id"),
            kind=Kind(record["kind"]),
            issued_at=issued,
            expires_at=expires,
        )

    def to_bytes(self) -> bytes:
        return canonical_serialize(self.to_record())


@dataclass(frozen=True)
class SignedEnvelope:
    header: Header
    payload: bytes
    signature: bytes

    def to_wire(self) -> bytes:
        head = self.header.to_bytes()
        return b"".join(
            (
                _U32.pack(len(head)), head,
                _U32.pack(len(self.payload)), self.payload,
                _U32.pack(len(self.signature)), self.signature,
            )
        )

    @classmethod
    def from_wire(cls, data: bytes) -> "SignedEnvelope":
        parts = []
        offset = 0
        for _ in range(3):
            if offset + 4 > len(data):
                raise MalformedEnvelope("truncated envelope frame")
            (length,) = _U32.unpack_from(data, offset)
            offset += 4
            if offset + length > len(data):
                raise MalformedEnvelope("envelope section overruns frame")
            parts.append(bytes(data[offset : offset + length]))
            offset += length
        if offset != len(data):
            raise MalformedEnvelope("trailing bytes after envelope frame")
        head, payload, signature = parts
        try:
            header = Header.from_record(canonical_deserialize(head, strict=True))
        except (UnsupportedValue, ValueError, KeyError, TypeError) as exc:
            raise MalformedEnvelope(f"header does not decode: {exc}") from exc
        return cls(header, payload, signature)

    def to_hex(self) -> str:
        return self.to_wire().hex()

    @classmethod
    def from_hex(cls, text: str) -> "SignedEnvelope":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise MalformedEnvelope("envelope is not valid hex") from exc
        return cls.from_wire(raw)

    def record(self) -> Any:
        """Decode the payload as a canonical record."""
        return canonical_deserialize(self.payload)

    @property
    def digest(self) -> str:
        return digest(self.to_wire())


@dataclass(frozen=True)
class SigningKey:
    issuer: str
    key_id: str
    secret: bytes = field(repr=False)


class KeyRegistry:
    """Immutable snapshot of verification keys by (issuer, key_id)."""

    def __init__(self, keys: Iterable[SigningKey] = ()) -> None:
        self._keys: dict[str, dict[str, bytes]] = {}
        for key in keys:
            self._keys.setdefault(key.issuer, {})[key.key_id] = key.secret

    def lookup(self, issuer: str, key_id: str) -> bytes:
        by_id = self._keys.get(issuer)
        if by_id is None:
            raise UnknownIssuer(f"issuer {issuer!r} is not registered", issuer=issuer)
        if key_id not in by_id:
            raise UnknownKey(f"issuer {issuer!r} has no key {key_id!r}", issuer=issuer, key_id=key_id)
        return by_id[key_id]

    def __contains__(self, issuer: object) -> bool:
        return issuer in self._keys

    def issuers(self) -> list[str]:
        return sorted(self._keys)


def _mac(secret: bytes, header: Header, payload: bytes) -> bytes:
    return hmac.new(secret, header.to_bytes() + payload, hashlib.sha256).digest()


def sign_envelope(
    header: Header, payload: bytes, key: SigningKey, registry: KeyRegistry | None = None
) -> SignedEnvelope:
    """Sign ``header || payload`` with a keyed MAC.

    ``key`` must be the key registered for ``(header.issuer, header.key_id)``;
    when ``registry`` is given that registration is checked as well.
    """
    if key.issuer != header.issuer or key.key_id != header.key_id:
        raise UnknownKey(
            f"key ({key.issuer}, {key.key_id}) is not registered for header issuer "
            f"({header.issuer}, {header.key_id})"
        )
    if registry is not None:
        registered = registry.lookup(header.issuer, header.key_id)
        if not hmac.compare_digest(registered, key.secret):
            raise UnknownKey(f"key ({key.issuer}, {key.key_id}) does not match the registry")
    if header.expires_at <= header.issued_at:
        raise InvalidLifetime(
            f"expires_at {header.expires_at} must exceed issued_at {header.issued_at}"
        )
    return SignedEnvelope(header, bytes(payload), _mac(key.secret, header, payload))


def verify_signature(env: SignedEnvelope, registry: KeyRegistry) -> None:
    secret = registry.lookup(env.header.issuer, env.header.key_id)
    if not hmac.compare_digest(_mac(secret, env.header, env.payload), env.signature):
        raise SignatureInvalid("signature does not verify", issuer=env.header.issuer)


def verify_envelope(env: SignedEnvelope, registry: KeyRegistry, now: int) -> bytes:
    """Return the payload iff the signature verifies and ``issued_at <= now < expires_at``."""
    verify_signature(env, registry)
    if now < env.header.issued_at:
        raise NotYetValid(f"envelope valid from tick {env.header.issued_at}, now {now}")
    if now >= env.header.expires_at:
        raise Expired(f"envelope expired at tick {env.header.expires_at}, now {now}")
    return env.payload


def seal(kind: Kind, record: Any, key: SigningKey, issued_at: int, ttl: int) -> SignedEnvelope:
    header = Header(key.issuer, key.key_id, kind, issued_at, issued_at + ttl)
    return sign_envelope(header, canonical_serialize(record), key)

"""Exception hierarchy.

Every error carries a stable snake_case ``code`` so callers (CLI, service
endpoints, transcripts) can report failures as machine-readable records.
"""

from __future__ import annotations

from typing import Any


class UmafedError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details: Any) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {"error": self.code, "message": self.message}
        for key, value in self.details.items():
            if isinstance(value, (str, int, bool)):
                record[key] = value
        return record


# core model

class UnsupportedValue(UmafedError):
    code = "unsupported_value"


class InvalidLifetime(UmafedError):
    code = "invalid_lifetime"


class VerificationError(UmafedError):
    code = "verification_failed"


class SignatureInvalid(VerificationError):
    code = "signature_invalid"


class MalformedEnvelope(SignatureInvalid):
    """Frame or header bytes do not decode; treated as an integrity failure."""

    code = "malformed_envelope"


class UnknownIssuer(SignatureInvalid):
    """No verification key exists for the claimed issuer.

    A subclass of SignatureInvalid: an envelope whose signer cannot be
    resolved is unauthenticated for this registry.
    """

    code = "unknown_issuer"


class UnknownKey(SignatureInvalid):
    code = "unknown_key"


class Expired(VerificationError):
    code = "expired"


class NotYetValid(VerificationError):
    code = "not_yet_valid"


class WrongKind(VerificationError):
    code = "wrong_kind"


# policy engine

class SyntaxMismatch(UmafedError):
    code = "syntax_mismatch"


class InvalidPolicy(UmafedError):
    code = "invalid_policy"


# identity provider

class AlreadyRegistered(UmafedError):
    code = "already_registered"


class AuthenticationFailed(UmafedError):
    code = "authentication_failed"


# authorization server

class ForeignResourceServer(UmafedError):
    code = "foreign_resource_server"


class DuplicateResource(UmafedError):
    code = "duplicate_resource"


class NotOwner(UmafedError):
    code = "not_owner"


class UnknownResource(UmafedError):
    code = "unknown_resource"


class StaleVersion(UmafedError):
    code = "stale_version"


class UnknownPolicy(UmafedError):
    code = "unknown_policy"


class UnsupportedSyntax(UmafedError):
    code = "unsupported_syntax"


class UnknownClient(UmafedError):
    code = "unknown_client"


class UnknownToken(UmafedError):
    code = "unknown_token"


class _WrappedRejection(UmafedError):
    """Rejection caused by an underlying verification failure."""

    def __init__(self, reason: str, cause: BaseException | None = None, message: str = "") -> None:
        super().__init__(message or reason, reason=reason)
        self.reason = reason
        self.cause = cause


class TicketInvalid(_WrappedRejection):
    code = "ticket_invalid"


class AuthnInvalid(_WrappedRejection):
    code = "authn_invalid"


class AccessDenied(UmafedError):
    code = "access_denied"

    def __init__(self, reason: str, decision: Any = None) -> None:
        super().__init__(f"access denied: {reason}", reason=reason)
        self.reason = reason
        self.decision = decision


# resource server / federation

class UntrustedOrigin(UmafedError):
    code = "untrusted_origin"


class DigestMismatch(UmafedError):
    code = "digest_mismatch"


class DuplicateDomain(UmafedError):
    code = "duplicate_domain"


class NoKeys(UmafedError):
    code = "no_keys"


class RouteUnavailable(UmafedError):
    code = "route_unavailable"


# simnet / cli-service

class ParseError(UmafedError):
    code = "parse_error"


class InvariantViolation(UmafedError):
    code = "invariant_violation"

    def __init__(self, message: str, location: str = "$") -> None:
        super().__init__(f"{location}: {message}", location=location)
        self.location = location


class QuiescenceTimeout(UmafedError):
    code = "quiescence_timeout"

    def __init__(self, message: str, pending: list[dict[str, Any]] | None = None) -> None:
        super().__init__(message, pending_count=len(pending or []))
        self.pending = pending or []


class UnknownNode(UmafedError):
    code = "unknown_node"


class AssertionFailed(UmafedError):
    code = "assertion_failed"

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"step {step}: {message}", step=step)
        self.step = step


class CorruptLog(UmafedError):
    code = "corrupt_log"

    def __init__(self, message: str, offset: int, records: list[Any] | None = None) -> None:
        super().__init__(message, offset=offset)
        self.offset = offset
        self.records = records or []


class ConfigError(UmafedError):
    code = "config_error"


def rejection_cause(exc: BaseException) -> BaseException:
    """Unwrap TicketInvalid/AuthnInvalid to the verification error beneath."""
    while isinstance(exc, _WrappedRejection) and exc.cause is not None:
        exc = exc.cause
    return exc

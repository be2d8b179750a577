"""Independent reference implementations the library is checked against.

Nothing here imports the code under test's logic: each oracle restates the
contract the slow, obvious way.
"""

from __future__ import annotations

import hashlib
import hmac
import itertools
import struct
from typing import Any


def ref_serialize(value: Any) -> bytes:
    """Hand-rolled canonical encoder: sorted keys, no whitespace, UTF-8."""
    if value is True:
        return b"true"
    if value is False:
        return b"false"
    if isinstance(value, int):
        return str(value).encode()
    if isinstance(value, str):
        out = ['"']
        for ch in value:
            code = ord(ch)
            if ch == '"':
                out.append('\\"')
            elif ch == "\\":
                out.append("\\\\")
            elif ch == "\n":
                out.append("\\n")
            elif ch == "\r":
                out.append("\\r")
            elif ch == "\t":
                out.append("\\t")
            elif ch == "\b":
                out.append("\\b")
            elif ch == "\f":
                out.append("\\f")
            elif code < 0x20:
                out.append(f"\\u{code:04x}")
            else:
                out.append(ch)
        out.append('"')
        return "".join(out).encode("utf-8")
    if isinstance(value, (list, tuple)):
        return b"[" + b",".join(ref_serialize(v) for v in value) + b"]"
    if isinstance(value, dict):
        items = sorted(value.items())
        return b"{" + b",".join(ref_serialize(k) + b":" + ref_serialize(v) for k, v in items) + b"}"
    raise TypeError(type(value))


def ref_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_frame(frame: bytes) -> tuple[bytes, bytes, bytes]:
    """Split a wire frame into (header, payload, signature) with struct alone."""
    parts = []
    offset = 0
    for _ in range(3):
        (length,) = struct.unpack_from(">I", frame, offset)
        offset += 4
        parts.append(frame[offset:offset + length])
        offset += length
    assert offset == len(frame)
    return parts[0], parts[1], parts[2]


def ref_mac(secret: bytes, header: dict[str, Any], payload: bytes) -> bytes:
    return hmac.new(secret, ref_serialize(header) + payload, hashlib.sha256).digest()


# -- policy -----------------------------------------------------------------------------------

MLS_TABLE = {(s, o): s >= o for s in range(4) for o in range(4)}


def naive_outcome(policies, principal, roles, active_role, level, resource, requested, strict=False) -> str:
    """Deny-overrides restated from scratch over plain attribute reads."""
    requested = set(requested)

    def holds(p) -> bool:
        if p.parties is not None and principal not in p.parties:
            return False
        if not requested <= set(p.scopes):
            return False
        if p.syntax == "rbac_v1":
            return not p.required_roles or active_role in p.required_roles
        if level is None:
            return False
        obj = resource.mls_level or 0
        return level > obj if strict else level >= obj

    applicable = [
        p for p in policies
        if p.owner == resource.owner and (p.resources is None or resource.key in p.resources)
    ]
    if any(p.effect == "deny" and holds(p) for p in applicable):
        return "deny"
    if any(p.effect == "permit" and holds(p) for p in applicable):
        return "permit"
    return "deny"


def scope_subsets(scopes):
    scopes = sorted(scopes)
    return [frozenset(c) for n in range(1, len(scopes) + 1) for c in itertools.combinations(scopes, n)]

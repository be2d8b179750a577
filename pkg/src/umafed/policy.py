"""Policy decision point: RBAC and MLS evaluation with deny-overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from umafed.core import ResourceRef, canonical_serialize, digest, require_id
from umafed.errors import InvalidPolicy, SyntaxMismatch

UNCLASSIFIED, CONFIDENTIAL, SECRET, TOP_SECRET = 0, 1, 2, 3

RBAC_V1 = "rbac_v1"
MLS_V1 = "mls_v1"
SYNTAXES = (RBAC_V1, MLS_V1)

PERMIT = "permit"
DENY = "deny"

# MLS dominance only has meaning for read-class actions.
READ_CLASS_SCOPES = frozenset({"read", "list"})

WILDCARD = "*"

# reason codes
PERMITTED = "permitted"
NO_APPLICABLE_POLICY = "no_applicable_policy"
EXPLICIT_DENY = "explicit_deny"
PARTY_NOT_PERMITTED = "party_not_permitted"
ROLE_NOT_ACTIVE = "role_not_active"
SCOPE_EXCEEDED = "scope_exceeded"
MLS_DOMINANCE_FAILED = "mls_dominance_failed"
MLS_LEVEL_MISSING = "mls_level_missing"


@dataclass(frozen=True)
class SubjectAttributes:
    principal: str
    roles: frozenset[str] = frozenset()
    active_role: str | None = None
    mls_level: int | None = None

    def __post_init__(self) -> None:
        require_id(self.principal, "principal")
        object.__setattr__(self, "roles", frozenset(self.roles))
        if self.active_role is not None and self.active_role not in self.roles:
            raise ValueError(f"active role {self.active_role!r} is not held by {self.principal!r}")


@dataclass(frozen=True)
class Policy:
    """An owner's access rule.

    ``resources`` and ``parties`` of ``None`` are wildcards: every resource of
    the owner, and any authenticated principal, respectively.
    """

    policy_id: str
    owner: str
    scopes: frozenset[str]
    syntax: str = RBAC_V1
    effect: str = PERMIT
    resources: frozenset[str] | None = None
    parties: frozenset[str] | None = None
    required_roles: frozenset[str] = frozenset()
    version: int = 0

    def __post_init__(self) -> None:
        try:
            require_id(self.policy_id, "policy_id")
            require_id(self.owner, "owner")
        except ValueError as exc:
            raise InvalidPolicy(str(exc)) from exc
        object.__setattr__(self, "scopes", frozenset(self.scopes))
        object.__setattr__(self, "required_roles", frozenset(self.required_roles))
        if self.resources is not None:
            object.__setattr__(self, "resources", frozenset(self.resources))
        if self.parties is not None:
            object.__setattr__(self, "parties", frozenset(self.parties))
        if not self.scopes:
            raise InvalidPolicy("policy scopes must be non-empty")
        if self.syntax not in SYNTAXES:
            raise InvalidPolicy(f"unknown policy syntax {self.syntax!r}")
        if self.effect not in (PERMIT, DENY):
            raise InvalidPolicy(f"unknown effect {self.effect!r}")
        if self.version < 0:
            raise InvalidPolicy("version must be >= 0")
        if self.syntax == MLS_V1:
            if self.required_roles:
                raise InvalidPolicy("mls_v1 policies take no required_roles")
            if not self.scopes <= READ_CLASS_SCOPES:
                raise InvalidPolicy(f"mls_v1 scopes must be read-class {sorted(READ_CLASS_SCOPES)}")

    def selects(self, resource: ResourceRef) -> bool:
        if resource.owner != self.owner:
            return False
        return self.resources is None or resource.key in self.resources

    def with_version(self, version: int) -> "Policy":
        return replace(self, version=version)

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "policy_id": self.policy_id,
            "owner": self.owner,
            "version": self.version,
            "syntax": self.syntax,
            "effect": self.effect,
            "scopes": sorted(self.scopes),
            "resources": WILDCARD if self.resources is None else sorted(self.resources),
            "parties": WILDCARD if self.parties is None else sorted(self.parties),
        }
        if self.syntax == RBAC_V1:
            record["required_roles"] = sorted(self.required_roles)
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "Policy":
        try:
            resources = record.get("resources", WILDCARD)
            parties = record.get("parties", WILDCARD)
            return cls(
                policy_id=record["policy_id"],
                owner=record["owner"],
                scopes=frozenset(record["scopes"]),
                syntax=record.get("syntax", RBAC_V1),
                effect=record.get("effect", PERMIT),
                resources=None if resources == WILDCARD else frozenset(resources),
                parties=None if parties == WILDCARD else frozenset(parties),
                required_roles=frozenset(record.get("required_roles", ())),
                version=int(record.get("version", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidPolicy(f"malformed policy record: {exc}") from exc


@dataclass(frozen=True)
class PolicyDecision:
    outcome: str
    reason: str
    matched_policy_ids: tuple[str, ...] = field(default=())

    @property
    def permitted(self) -> bool:
        return self.outcome == PERMIT

    def to_record(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome,
            "reason": self.reason,
            "matched_policy_ids": list(self.matched_policy_ids),
        }


def _permit(ids: Iterable[str] = ()) -> PolicyDecision:
    return PolicyDecision(PERMIT, PERMITTED, tuple(ids))


def _deny(reason: str, ids: Iterable[str] = ()) -> PolicyDecision:
    return PolicyDecision(DENY, reason, tuple(ids))


def evaluate_mls(subject_level: int, object_level: int, action: str, *, strict: bool = False) -> PolicyDecision:
    """Simple-security check: permit iff the subject dominates the object.

    Dominance is ``>=`` by default; ``strict`` demands ``>``.
    """
    if action not in READ_CLASS_SCOPES:
        raise ValueError(f"{action!r} is not a read-class action")
    dominates = subject_level > object_level if strict else subject_level >= object_level
    return _permit() if dominates else _deny(MLS_DOMINANCE_FAILED)


def _party_ok(attrs: SubjectAttributes, policy: Policy) -> bool:
    return policy.parties is None or attrs.principal in policy.parties


def evaluate_rbac(attrs: SubjectAttributes, policy: Policy, requested_scopes: Iterable[str]) -> PolicyDecision:
    if policy.syntax != RBAC_V1:
        raise SyntaxMismatch(f"policy {policy.policy_id} has syntax {policy.syntax}, expected {RBAC_V1}")
    requested = frozenset(requested_scopes)
    if not _party_ok(attrs, policy):
        return _deny(PARTY_NOT_PERMITTED)
    if policy.required_roles and attrs.active_role not in policy.required_roles:
        return _deny(ROLE_NOT_ACTIVE)
    if not requested <= policy.scopes:
        return _deny(SCOPE_EXCEEDED)
    return _permit([policy.policy_id])


def _evaluate_mls_policy(
    attrs: SubjectAttributes, policy: Policy, resource: ResourceRef, requested: frozenset[str], strict: bool
) -> PolicyDecision:
    if not _party_ok(attrs, policy):
        return _deny(PARTY_NOT_PERMITTED)
    if not requested <= policy.scopes:
        return _deny(SCOPE_EXCEEDED)
    if attrs.mls_level is None:
        return _deny(MLS_LEVEL_MISSING)
    object_level = resource.mls_level or UNCLASSIFIED
    for action in sorted(requested):
        decision = evaluate_mls(attrs.mls_level, object_level, action, strict=strict)
        if not decision.permitted:
            return decision
    return _permit([policy.policy_id])


def evaluate_policy(
    policy: Policy,
    attrs: SubjectAttributes,
    resource: ResourceRef,
    requested_scopes: Iterable[str],
    *,
    mls_strict: bool = False,
) -> PolicyDecision:
    """Evaluate one policy's conditions, ignoring its effect."""
    requested = frozenset(requested_scopes)
    if policy.syntax == RBAC_V1:
        return evaluate_rbac(attrs, policy, requested)
    return _evaluate_mls_policy(attrs, policy, resource, requested, mls_strict)


def decision_order(policies: Iterable[Policy]) -> list[Policy]:
    return sorted(policies, key=lambda p: (-p.version, p.policy_id))


def evaluate(
    policy_set: Iterable[Policy],
    attrs: SubjectAttributes,
    resource: ResourceRef,
    requested_scopes: Iterable[str],
    *,
    mls_strict: bool = False,
) -> PolicyDecision:
    """Combine the owner's applicable policies with deny-overrides.

    A matching deny whose conditions hold wins outright; otherwise at least
    one permit is needed. With nothing applicable the answer is
    ``no_applicable_policy``. When no permit-effect policy grants, the reason
    is that of the first permit-effect policy in (version desc, id asc) order.
    """
    requested = frozenset(requested_scopes)
    applicable = decision_order(p for p in policy_set if p.selects(resource))
    if not applicable:
        return _deny(NO_APPLICABLE_POLICY)

    results = [(p, evaluate_policy(p, attrs, resource, requested, mls_strict=mls_strict)) for p in applicable]
    firing_denies = [p.policy_id for p, d in results if p.effect == DENY and d.permitted]
    if firing_denies:
        return _deny(EXPLICIT_DENY, firing_denies)

    permit_results = [(p, d) for p, d in results if p.effect == PERMIT]
    granting = [p.policy_id for p, d in permit_results if d.permitted]
    if granting:
        return _permit(granting)
    if not permit_results:
        return _deny(NO_APPLICABLE_POLICY, [p.policy_id for p in applicable])
    return _deny(permit_results[0][1].reason, [p.policy_id for p in applicable])


def policy_digest(policy_set: Iterable[Policy]) -> str:
    ordered = sorted(policy_set, key=lambda p: (p.owner, p.policy_id, p.version))
    return digest(canonical_serialize([p.to_record() for p in ordered]))

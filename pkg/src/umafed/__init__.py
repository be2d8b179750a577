"""Federated user-managed access: signed envelopes, a policy engine, identity
provider, authorization and resource servers, a propagation fabric, and a
deterministic simulator to exercise them together."""

from umafed.core import (
    Kind,
    ResourceRef,
    SignedEnvelope,
    canonical_serialize,
    digest,
    sign_envelope,
    verify_envelope,
)
from umafed.errors import UmafedError
from umafed.federation import Federation, FederationRegistry
from umafed.policy import Policy, SubjectAttributes, evaluate

__version__ = "0.1.0"

__all__ = [
    "Federation",
    "FederationRegistry",
    "Kind",
    "Policy",
    "ResourceRef",
    "SignedEnvelope",
    "SubjectAttributes",
    "UmafedError",
    "canonical_serialize",
    "digest",
    "evaluate",
    "sign_envelope",
    "verify_envelope",
]

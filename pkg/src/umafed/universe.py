"""Seeded random universes for sweeps: a small federation, principals,
resources and a policy history, plus the full request-tuple space over them."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Iterator

from umafed.federation import VIA_AS, FederationRegistry, member_from_nodes
from umafed.core import ResourceRef
from umafed.policy import DENY, MLS_V1, PERMIT, RBAC_V1, READ_CLASS_SCOPES, Policy
from umafed.simnet import Network, OracleRequest, build_topology

SCOPES = ("list", "read", "write")
ROLES = ("doctor", "researcher")
PRINCIPALS = ("alice", "bob", "carol", "dave")
ROGUE_CLIENT = "client-rogue"


@dataclass(frozen=True)
class PrincipalSpec:
    name: str
    secret: bytes
    roles: frozenset[str]
    mls_level: int | None


@dataclass(frozen=True)
class PolicyOp:
    op: str  # "set" or "retract"
    as_node: str
    owner: str
    policy: Policy | None = None
    policy_id: str = ""


@dataclass
class Universe:
    seed: int
    registry: FederationRegistry
    principals: list[PrincipalSpec]
    ops: list[PolicyOp] = field(default_factory=list)

    def clients(self) -> list[str]:
        return sorted({c for m in self.registry.members.values() for c in m.clients} | {ROGUE_CLIENT})

    def request_tuples(self) -> Iterator[OracleRequest]:
        """Every (principal, active role, client, resource, scope set) combination."""
        scope_sets = [frozenset(c) for n in range(1, len(SCOPES) + 1) for c in itertools.combinations(SCOPES, n)]
        for p in self.principals:
            for role in (None, *ROLES):
                for key in sorted(self.registry.resources):
                    ref = self.registry.resources[key]
                    for client in (sorted(self.registry.members[ref.domain].clients)[0], ROGUE_CLIENT):
                        for scopes in scope_sets:
                            yield OracleRequest(p.name, role, client, key, scopes)


def _subset(rng: random.Random, items: list[str], *, allow_empty: bool = False) -> frozenset[str]:
    lo = 0 if allow_empty else 1
    return frozenset(rng.sample(items, rng.randint(lo, len(items))))


def random_registry(rng: random.Random, n_domains: int, n_resources: int, owners: list[str]) -> FederationRegistry:
    reg = FederationRegistry(f"universe-{rng.getrandbits(24):06x}")
    for i in range(1, n_domains + 1):
        rs_nodes = [f"rs{i}.{j}" for j in range(1, (2 if i == 1 else 1) + 1)]
        idps = ["idp1"] if i == 1 else []
        reg.register_member(member_from_nodes(f"d{i}", f"as{i}", rs_nodes, idps, [f"client-d{i}"]))
    rs_all = reg.rs_nodes()
    for k in range(n_resources):
        rs = rng.choice(rs_all)
        level = rng.choice([None, 0, 1, 2, 3])
        reg.index_resource(ResourceRef(reg.domain_of(rs), rs, f"res{k}", rng.choice(owners),
                                       frozenset(SCOPES), level))
    return reg


def random_policy(rng: random.Random, policy_id: str, owner: str, resource_keys: list[str]) -> Policy:
    syntax = MLS_V1 if rng.random() < 0.3 else RBAC_V1
    resources = None if rng.random() < 0.4 else _subset(rng, resource_keys)
    parties = None if rng.random() < 0.3 else _subset(rng, list(PRINCIPALS))
    effect = DENY if rng.random() < 0.2 else PERMIT
    if syntax == MLS_V1:
        scopes = _subset(rng, sorted(READ_CLASS_SCOPES))
        roles: frozenset[str] = frozenset()
    else:
        scopes = _subset(rng, list(SCOPES))
        roles = frozenset() if rng.random() < 0.4 else _subset(rng, list(ROLES))
    return Policy(policy_id, owner, scopes, syntax, effect, resources, parties, roles)


def random_universe(
    seed: int,
    *,
    n_domains: int | None = None,
    n_resources: int = 4,
    n_policies: int | None = None,
) -> Universe:
    """Draw a universe of at most 3 domains, 4 principals, 4 resources, 3
    scopes and 6 policies. Some policies are later updated or retracted."""
    rng = random.Random(seed)
    n_domains = n_domains or rng.randint(2, 3)
    owners = list(PRINCIPALS[:2])
    registry = random_registry(rng, n_domains, n_resources, owners)
    principals = [
        PrincipalSpec(name, f"secret-{name}".encode(), _subset(rng, list(ROLES), allow_empty=True),
                      rng.choice([None, 0, 1, 2, 3]))
        for name in PRINCIPALS
    ]
    universe = Universe(seed, registry, principals)
    owners_with_resources = sorted({r.owner for r in registry.resources.values()})
    n_policies = rng.randint(1, 6) if n_policies is None else n_policies
    for k in range(n_policies):
        owner = rng.choice(owners_with_resources)
        keys = sorted(r.key for r in registry.resources_of(owner))
        as_node = rng.choice(registry.as_nodes())
        pid = f"pol{k}"
        universe.ops.append(PolicyOp("set", as_node, owner, random_policy(rng, pid, owner, keys)))
        roll = rng.random()
        if roll < 0.25:
            universe.ops.append(PolicyOp("set", as_node, owner, random_policy(rng, pid, owner, keys)))
        elif roll < 0.4:
            universe.ops.append(PolicyOp("retract", as_node, owner, policy_id=pid))
    return universe


def populate(net: Network, universe: Universe) -> None:
    """Register and log in every principal, then replay the policy history."""
    for p in universe.principals:
        net.register_principal(p.name, p.secret, p.roles, p.mls_level)
        net.login(p.name, p.secret)
    for op in universe.ops:
        if op.op == "set":
            net.set_policy(op.as_node, op.owner, op.policy)
        else:
            net.retract_policy(op.as_node, op.owner, op.policy_id)


def build_universe(universe: Universe, **kwargs: Any) -> Network:
    net = build_topology(FederationRegistry.from_document(universe.registry.to_document()), **kwargs)
    populate(net, universe)
    return net


def request_access(net: Network, request: OracleRequest, **kwargs: Any):
    ref = net.registry.resources[request.resource]
    return net.access(request.principal, request.client, ref.rs, ref.resource_id, request.scopes,
                      active_role=request.active_role, **kwargs)


def route_digests(seed: int, route: str = VIA_AS, max_ticks: int = 50) -> dict[str, str]:
    """Final RS cache digests after propagating a universe's policy history."""
    net = build_universe(random_universe(seed), seed=seed, route=route)
    net.run_until_quiescent(max_ticks)
    return net.cache_digests()

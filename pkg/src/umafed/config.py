"""Node configuration files and the factory that turns one into a live node."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from umafed.authz import TTLs, AuthorizationServer
from umafed.errors import ConfigError, ParseError
from umafed.federation import FederationRegistry, validate_document
from umafed.idp import DEFAULT_AUTHN_TTL, IdentityProvider
from umafed.journal import Journal, persist_replay
from umafed.resource import ResourceServer

CONFIG_ENV = "UMAFED_CONFIG"
ROLES = ("idp", "as", "rs", "sim")


@dataclass(frozen=True)
class Config:
    role: str
    registry: str = ""
    node: str = ""
    listen: str = "127.0.0.1:8400"
    peers: dict[str, str] = field(default_factory=dict)
    data_dir: str = ""
    ttls: TTLs = TTLs()
    authn_ttl: int = DEFAULT_AUTHN_TTL
    mls_strict: bool = False
    strict_introspection: bool = False
    seed: int = 0
    content_dir: str = ""

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {', '.join(ROLES)}")
        if self.role != "sim":
            missing = [name for name in ("registry", "node") if not getattr(self, name)]
            if missing:
                raise ConfigError(f"role {self.role} needs {' and '.join(missing)}")
        if self.authn_ttl <= 0:
            raise ConfigError("TTLs must be > 0")

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host, int(port)

    @classmethod
    def from_document(cls, doc: Any, base: Path | None = None) -> "Config":
        validate_document(doc, "config")
        ttls = dict(doc.get("ttls", {}))
        authn_ttl = ttls.pop("authn_token", DEFAULT_AUTHN_TTL)

        def rel(value: str) -> str:
            if value and base is not None and not Path(value).is_absolute():
                return str(base / value)
            return value

        try:
            return cls(
                role=doc["role"],
                registry=rel(doc.get("registry", "")),
                node=doc.get("node", ""),
                listen=doc.get("listen", "127.0.0.1:8400"),
                peers=dict(doc.get("peers", {})),
                data_dir=rel(doc.get("data_dir", "")),
                ttls=TTLs(**ttls),
                authn_ttl=authn_ttl,
                mls_strict=doc.get("mls_strict", False),
                strict_introspection=doc.get("strict_introspection", False),
                seed=doc.get("seed", 0),
                content_dir=rel(doc.get("content_dir", "")),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", location=f"line {exc.lineno}") from exc
        return cls.from_document(doc, path.parent)

    def override(self, **changes: Any) -> "Config":
        return replace(self, **{k: v for k, v in changes.items() if v not in (None, "")})


def load_config(path: str | Path | None = None, **overrides: Any) -> Config:
    """Config from ``path``, else ``$UMAFED_CONFIG``, else overrides alone."""
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        return Config.load(path).override(**overrides)
    if not overrides.get("role"):
        raise ConfigError(f"no config given (use --config or set {CONFIG_ENV})")
    return Config(**{k: v for k, v in overrides.items() if v not in (None, "")})


def journal_path(config: Config) -> Path | None:
    if not config.data_dir:
        return None
    return Path(config.data_dir) / f"{config.node.replace('/', '_')}.log"


def open_node(
    config: Config,
    registry: FederationRegistry | None = None,
    *,
    emit: Callable[..., None] | None = None,
    ticket_source: Callable[..., Any] | None = None,
    introspector: Callable[..., Any] | None = None,
) -> Any:
    """Build the configured node and restore it from its journal, if any."""
    registry = registry or FederationRegistry.load(config.registry)
    member = registry.member_of(config.node)
    path = journal_path(config)
    if config.role == "idp":
        if config.node not in member.idp_nodes:
            raise ConfigError(f"{config.node} is not an IdP in the registry")
        node: Any = IdentityProvider(config.node, registry.signing_key(config.node), token_ttl=config.authn_ttl)
    elif config.role == "as":
        if config.node != member.as_node:
            raise ConfigError(f"{config.node} is not an AS in the registry")
        node = AuthorizationServer(config.node, registry, ttls=config.ttls, mls_strict=config.mls_strict, emit=emit)
        for ref in registry.resources.values():
            if ref.domain == member.domain and ref.key not in node.resources:
                node.apply({"op": "register_resource", "resource": ref.to_record()})
    elif config.role == "rs":
        if config.node not in member.rs_nodes:
            raise ConfigError(f"{config.node} is not an RS in the registry")
        node = ResourceServer(
            config.node, registry, ticket_source=ticket_source, introspector=introspector,
            strict_introspection=config.strict_introspection, mls_strict=config.mls_strict,
            content_dir=config.content_dir or None,
        )
        for ref in registry.resources.values():
            if ref.rs == config.node and ref.resource_id not in node.hosted:
                node.apply({"op": "host", "resource": ref.to_record()})
    else:
        raise ConfigError("the sim role has no single node to open")
    if path is not None:
        if path.exists():
            persist_replay(node, path, repair=True)
        node.journal = Journal(path)
    return node

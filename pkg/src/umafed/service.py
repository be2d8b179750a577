"""Service mode: expose one node over HTTP with canonical JSON bodies.

Every endpoint decodes its body, calls the matching node operation and
encodes the result; ``NodeService.handle`` is also what the CLI verbs call,
so the command line and the wire run identical code paths.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from umafed.config import Config, open_node
from umafed.core import ResourceRef, SignedEnvelope, canonical_deserialize, canonical_serialize
from umafed.errors import ParseError, RouteUnavailable, UmafedError
from umafed.federation import Federation, FederationRegistry
from umafed.policy import Policy

logger = logging.getLogger(__name__)


def now_seconds() -> int:
    return int(time.time())


def _env(body: dict[str, Any], name: str, *, optional: bool = False) -> SignedEnvelope | None:
    value = body.get(name)
    if value is None:
        if optional:
            return None
        raise ParseError(f"missing field {name!r}", location=f"$.{name}")
    try:
        return SignedEnvelope.from_hex(value)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{name}: {exc}", location=f"$.{name}") from exc


def _field(body: dict[str, Any], name: str) -> Any:
    if name not in body:
        raise ParseError(f"missing field {name!r}", location=f"$.{name}")
    return body[name]


def post_json(url: str, body: dict[str, Any], timeout: float = 5.0) -> dict[str, Any]:
    request = urllib.request.Request(
        url, data=canonical_serialize(body), headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(request, timeout=timeout) as resp:
            return canonical_deserialize(resp.read())
    except urllib.error.HTTPError as exc:
        payload = canonical_deserialize(exc.read())
        raise RemoteError(exc.code, payload) from None


class RemoteError(UmafedError):
    code = "remote_error"

    def __init__(self, status: int, payload: dict[str, Any]) -> None:
        super().__init__(f"peer answered {status}: {payload.get('error', '?')}", status=status, payload=payload)
        self.status = status
        self.payload = payload


class HttpTransport:
    """Peer-to-peer sends over HTTP. Messages that cannot be handed over are
    kept in an outbox and retried by ``flush``; none are dropped."""

    def __init__(self, peers: dict[str, str], timeout: float = 5.0) -> None:
        self.peers = dict(peers)
        self.timeout = timeout
        self.outbox: collections.deque[tuple[str, str, dict[str, Any]]] = collections.deque()
        self._lock = threading.Lock()

    def url(self, node: str, path: str) -> str:
        if node not in self.peers:
            raise RouteUnavailable(f"no address configured for {node!r}")
        return self.peers[node].rstrip("/") + path

    def call(self, node: str, path: str, body: dict[str, Any]) -> dict[str, Any]:
        try:
            return post_json(self.url(node, path), body, self.timeout)
        except (OSError, urllib.error.URLError) as exc:
            raise RouteUnavailable(f"{node} unreachable: {exc}") from exc

    def send(self, src: str, dst: str, message: dict[str, Any]) -> None:
        try:
            self.call(dst, "/deliver", {"from": src, "message": message})
        except RouteUnavailable as exc:
            logger.info("queued message for %s: %s", dst, exc)
            with self._lock:
                self.outbox.append((src, dst, message))

    def flush(self) -> int:
        """Retry queued messages once; returns how many went through."""
        with self._lock:
            pending, self.outbox = list(self.outbox), collections.deque()
        sent = 0
        for src, dst, message in pending:
            before = len(self.outbox)
            self.send(src, dst, message)
            sent += len(self.outbox) == before
        return sent

    def pending(self) -> list[dict[str, Any]]:
        with self._lock:
            return [{"src": s, "dst": d, "type": m["type"], "final": m["hops"][-1]} for s, d, m in self.outbox]


class NodeService:
    def __init__(
        self,
        config: Config,
        registry: FederationRegistry | None = None,
        *,
        clock: Callable[[], int] = now_seconds,
        transport: HttpTransport | None = None,
    ) -> None:
        self.config = config
        self.registry = registry or FederationRegistry.load(config.registry)
        self.clock = clock
        self.transport = transport or HttpTransport(config.peers)
        self.federation = Federation(self.registry, self.transport)
        self.emitted: list[dict[str, Any]] = []
        self._commands = threading.Lock()
        as_node = self.registry.as_node(self.registry.domain_of(config.node))
        self.node = open_node(
            config,
            self.registry,
            emit=self._emit,
            ticket_source=lambda key, scopes, now: SignedEnvelope.from_hex(
                self.transport.call(as_node, "/ticket", {"resource": key, "scopes": sorted(scopes)})["ticket"]
            ),
            introspector=lambda env, now: self.transport.call(as_node, "/introspect", {"token": env.to_hex()}),
        )
        self.routes: dict[str, Callable[[dict[str, Any], int], dict[str, Any]]] = {"/deliver": self.deliver}
        self.readonly = {"/introspect", "/access", "/state"}
        self.routes["/state"] = lambda body, now: self.node.state_record()
        if config.role == "idp":
            self.routes.update({"/register_principal": self.register_principal, "/authenticate": self.authenticate})
        elif config.role == "as":
            self.routes.update({
                "/register_resource": self.register_resource,
                "/set_policy": self.set_policy,
                "/retract_policy": self.retract_policy,
                "/refresh": self.refresh,
                "/ticket": self.ticket,
                "/exchange": self.exchange,
                "/introspect": self.introspect,
                "/revoke_token": self.revoke_token,
            })
        elif config.role == "rs":
            self.routes.update({
                "/access": self.access,
                "/install_ticket": self.install_ticket,
                "/install_revocation": self.install_revocation,
            })

    def _emit(self, kind: str, env: SignedEnvelope, now: int) -> None:
        self.emitted.append({"kind": kind, "envelope": env.to_hex()})
        if kind == "policy":
            self.federation.propagate_policy(self.node.node_id, env, now)
        elif kind == "revocation":
            self.federation.propagate_revocation(self.node.node_id, env, now)

    def handle(self, path: str, body: dict[str, Any], now: int | None = None) -> dict[str, Any]:
        """Dispatch one request. Raises UmafedError subclasses for rejections."""
        if path not in self.routes:
            raise ParseError(f"no endpoint {path!r} on a {self.config.role} node", location=path)
        if not isinstance(body, dict):
            raise ParseError("request body must be an object", location="$")
        now = self.clock() if now is None else now
        if path in self.readonly:
            return self.routes[path](body, now)
        with self._commands:
            return self.routes[path](body, now)

    def close(self) -> None:
        if self.node.journal is not None:
            self.node.journal.close()

    # -- shared -------------------------------------------------------------------

    def deliver(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.federation.receive(self.node, _field(body, "message"), now)

    # -- identity provider --------------------------------------------------------------

    def register_principal(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        principal = _field(body, "principal")
        self.node.register_principal(principal, _field(body, "secret").encode(), body.get("roles", ()),
                                     body.get("mls_level"))
        return {"ok": True, "principal": principal}

    def authenticate(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        env = self.node.authenticate(_field(body, "principal"), _field(body, "secret").encode(), now)
        return {"authn_token": env.to_hex(), "expires_at": env.header.expires_at}

    # -- authorization server ----------------------------------------------------------------

    def register_resource(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        try:
            ref = ResourceRef.from_record(_field(body, "resource"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"resource: {exc}", location="$.resource") from exc
        return {"resource": self.node.register_resource(_field(body, "rs"), ref, now)}

    def set_policy(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        policy = Policy.from_record(_field(body, "policy"))
        version = self.node.set_policy(_env(body, "authn"), policy, now)
        return {"policy_id": policy.policy_id, "owner": policy.owner, "version": version}

    def retract_policy(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.node.retract_policy(_env(body, "authn"), _field(body, "policy_id"), now).to_record()

    def refresh(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return {"refreshed": len(self.node.refresh_policies(now))}

    def ticket(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        env = self.node.issue_permission_ticket(_field(body, "resource"), _field(body, "scopes"), now)
        return {"ticket": env.to_hex(), "as_location": self.node.node_id}

    def exchange(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        rqp, client = self.node.exchange(
            _env(body, "ticket"), _env(body, "authn"), _field(body, "client_id"), body.get("active_role"), now
        )
        return {"rqp_token": rqp.to_hex(), "client_token": client.to_hex()}

    def introspect(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.node.introspect(_env(body, "token"), now)

    def revoke_token(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.node.revoke_token(_field(body, "token_id"))

    # -- resource server --------------------------------------------------------------------

    def access(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        request = {
            "resource_id": _field(body, "resource_id"),
            "scopes": _field(body, "scopes"),
            "rqp_token": _env(body, "rqp_token", optional=True),
            "client_token": _env(body, "client_token", optional=True),
        }
        outcome = self.node.handle_request(request, now)
        record = outcome.to_record()
        if outcome.content is not None:
            record["content"] = outcome.content.hex()
        return record

    def install_ticket(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.node.install_policy_ticket(_env(body, "envelope"), now)

    def install_revocation(self, body: dict[str, Any], now: int) -> dict[str, Any]:
        return self.node.install_revocation(_env(body, "envelope"), now)


_STATUS = {"parse_error": 400, "config_error": 400, "route_unavailable": 503}


def _http_status(exc: UmafedError) -> int:
    return _STATUS.get(exc.code, 403)


def make_handler(service: NodeService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            try:
                body = canonical_deserialize(self.rfile.read(length))
                result, status = service.handle(self.path, body), 200
            except UmafedError as exc:
                result, status = exc.to_record(), _http_status(exc)
            except (ValueError, TypeError) as exc:
                result, status = {"error": "parse_error", "message": str(exc)}, 400
            data = canonical_serialize(result)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("%s " + fmt, self.address_string(), *args)

    return Handler


class Server:
    """HTTP front for a NodeService, with a retry loop for the transport outbox."""

    def __init__(self, service: NodeService, retry_interval: float = 2.0) -> None:
        self.service = service
        self.httpd = ThreadingHTTPServer(service.config.host_port, make_handler(service))
        self.retry_interval = retry_interval
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "Server":
        serve = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        retry = threading.Thread(target=self._retry_loop, daemon=True)
        self._threads = [serve, retry]
        for t in self._threads:
            t.start()
        return self

    def _retry_loop(self) -> None:
        while not self._stop.wait(self.retry_interval):
            if self.service.transport.outbox:
                self.service.transport.flush()

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        self.service.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(1.0):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

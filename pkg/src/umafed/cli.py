"""Command-line entry point.

Every node verb opens the configured node from its journal, runs one
operation through the same dispatcher the HTTP service uses, and prints a
canonical record. Exit codes: 0 success, 1 protocol or assertion failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable

from umafed.config import load_config
from umafed.core import Kind, SignedEnvelope, canonical_serialize
from umafed.errors import ConfigError, ParseError, UmafedError
from umafed.federation import ROUTE_KINDS, FederationRegistry, validate_document

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class Output:
    def __init__(self, pretty: bool = False, stream: Any = None) -> None:
        self.pretty = pretty
        self.stream = stream or sys.stdout

    def emit(self, record: dict[str, Any]) -> None:
        if self.pretty:
            text = json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False)
        else:
            text = canonical_serialize(record).decode()
        self.stream.write(text + "\n")


def _read_arg(value: str) -> str:
    """``@path`` reads the value from a file."""
    if value.startswith("@"):
        return Path(value[1:]).read_text().strip()
    return value


def _scopes(value: str) -> list[str]:
    return sorted({s for s in value.split(",") if s})


# -- sim ---------------------------------------------------------------------------------


def _scenario_paths(target: str) -> list[str]:
    from umafed.scenario import bundled_names

    if target == "bundled":
        return bundled_names()
    path = Path(target)
    if not path.is_dir():
        raise ParseError(f"{target}: not a directory", location=target)
    return [str(p) for p in sorted(path.glob("*.json"))]


def cmd_sim_run(args: argparse.Namespace, out: Output) -> int:
    from umafed.scenario import run_scenario

    report = run_scenario(args.scenario, seed=args.seed, route=args.route, data_dir=args.data_dir)
    if args.transcript:
        sink = sys.stdout if args.transcript == "-" else open(args.transcript, "w", encoding="utf-8")
        try:
            for event in report.transcript:
                sink.write(canonical_serialize(event).decode() + "\n")
        finally:
            if sink is not sys.stdout:
                sink.close()
    record = report.to_record()
    if args.figure:
        from umafed.report import scenario_figure

        record["figure"] = str(scenario_figure(report, args.figure))
    out.emit(record)
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_sim_sweep(args: argparse.Namespace, out: Output) -> int:
    from umafed.scenario import run_scenario

    records = []
    for source in _scenario_paths(args.directory):
        for seed in range(args.seeds):
            record = run_scenario(source, seed=seed, route=args.route).to_record()
            records.append(record)
            out.emit(record)
    failed = [r for r in records if not r["passed"]]
    summary = {"runs": len(records), "passed": len(records) - len(failed), "failed": len(failed)}
    if args.figures:
        from umafed.report import sweep_figure

        Path(args.figures).mkdir(parents=True, exist_ok=True)
        summary["figure"] = str(sweep_figure(records, Path(args.figures) / "sweep.png"))
    out.emit(summary)
    return EXIT_OK if not failed else EXIT_FAILURE


# -- node verbs ------------------------------------------------------------------------------


def _service(args: argparse.Namespace, role: str):
    from umafed.service import NodeService

    config = load_config(args.config, role=role, registry=args.registry, node=args.node, data_dir=args.data_dir)
    if config.role != role:
        raise ConfigError(f"configured role {config.role!r} cannot run {role} verbs")
    return NodeService(config)


def _node_verb(role: str, path: str, build: Callable[[argparse.Namespace, Any], dict[str, Any]]):
    def run(args: argparse.Namespace, out: Output) -> int:
        service = _service(args, role)
        try:
            result = service.handle(path, build(args, service), now=args.now)
        finally:
            service.close()
        if service.emitted:
            result["emitted"] = service.emitted
        pending = service.transport.pending()
        if pending:
            result["undelivered"] = pending
        out.emit(result)
        # a denial is a protocol outcome the caller has to act on
        return EXIT_FAILURE if result.get("status") == "denied" else EXIT_OK

    return run


def _policy_body(args: argparse.Namespace, service: Any) -> dict[str, Any]:
    try:
        doc = json.loads(Path(args.policy).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.policy}: {exc.msg}", location=f"line {exc.lineno}") from exc
    validate_document(doc, "policy")
    doc.pop("format_version", None)
    return {"authn": _read_arg(args.authn), "policy": doc}


def cmd_rs_install(args: argparse.Namespace, out: Output) -> int:
    env = SignedEnvelope.from_hex(_read_arg(args.envelope))
    path = "/install_revocation" if env.header.kind is Kind.REVOCATION else "/install_ticket"
    return _node_verb("rs", path, lambda a, _: {"envelope": env.to_hex()})(args, out)


def _resource_body(args: argparse.Namespace, service: Any) -> dict[str, Any]:
    record: dict[str, Any] = {
        "domain": service.registry.domain_of(args.rs),
        "rs": args.rs,
        "resource_id": args.resource_id,
        "owner": args.owner,
        "scopes": _scopes(args.scopes),
    }
    if args.mls_level is not None:
        record["mls_level"] = args.mls_level
    return {"rs": args.rs, "resource": record}


def _access_body(args: argparse.Namespace, service: Any) -> dict[str, Any]:
    body: dict[str, Any] = {"resource_id": args.resource_id, "scopes": _scopes(args.scopes)}
    if args.rqp_token:
        body["rqp_token"] = _read_arg(args.rqp_token)
    if args.client_token:
        body["client_token"] = _read_arg(args.client_token)
    return body


def _idp_register_body(args: argparse.Namespace, service: Any) -> dict[str, Any]:
    body: dict[str, Any] = {"principal": args.principal, "secret": _read_arg(args.secret),
                            "roles": _scopes(args.roles or "")}
    if args.mls_level is not None:
        body["mls_level"] = args.mls_level
    return body


def _exchange_body(args: argparse.Namespace, service: Any) -> dict[str, Any]:
    body = {"ticket": _read_arg(args.ticket), "authn": _read_arg(args.authn), "client_id": args.client}
    if args.role:
        body["active_role"] = args.role
    return body


# -- serve / fed ---------------------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace, out: Output) -> int:
    from umafed.service import NodeService, Server

    config = load_config(args.config, role=args.role, registry=args.registry, node=args.node,
                         data_dir=args.data_dir, listen=args.listen)
    server = Server(NodeService(config))
    out.emit({"serving": config.node, "role": config.role, "address": server.address})
    out.stream.flush()
    server.serve_forever()
    return EXIT_OK


def cmd_fed_validate(args: argparse.Namespace, out: Output) -> int:
    from umafed.scenario import _bundled

    path = Path(args.file)
    if not path.exists():
        path = _bundled("registries", args.file) or path
    registry = FederationRegistry.load(path)
    out.emit({
        "valid": True,
        "federation_id": registry.federation_id,
        "domains": sorted(registry.members),
        "resources": len(registry.resources),
        "digest": registry.digest(),
    })
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------------


def _node_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (default: $UMAFED_CONFIG)")
    p.add_argument("--registry", help="registry file")
    p.add_argument("--node", help="node identifier")
    p.add_argument("--data-dir", help="journal directory")
    p.add_argument("--now", type=int, help="logical time to use instead of the wall clock")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umafed", description="Federated user-managed access toolkit")
    parser.add_argument("--pretty", action="store_true", help="indented human-readable output")
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", metavar="command")

    sim = groups.add_parser("sim", help="run scenarios on the simulated network").add_subparsers(dest="verb")
    p = sim.add_parser("run", help="run one scenario (path or bundled name)")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--route", choices=ROUTE_KINDS)
    p.add_argument("--data-dir", help="journal node state here")
    p.add_argument("--transcript", help="write the event transcript (use - for stdout)")
    p.add_argument("--figure", help="render queue depth and access outcomes to this image")
    p.set_defaults(func=cmd_sim_run)
    p = sim.add_parser("sweep", help="run every scenario in a directory ('bundled' for the shipped set)")
    p.add_argument("directory")
    p.add_argument("--seeds", type=int, default=1, help="run seeds 0..N-1")
    p.add_argument("--route", choices=ROUTE_KINDS)
    p.add_argument("--figures", help="directory for summary figures")
    p.set_defaults(func=cmd_sim_sweep)

    p = groups.add_parser("serve", help="run one node as an HTTP service")
    _node_options(p)
    p.add_argument("--role", choices=("idp", "as", "rs"))
    p.add_argument("--listen", help="host:port")
    p.set_defaults(func=cmd_serve)

    idp = groups.add_parser("idp", help="identity provider operations").add_subparsers(dest="verb")
    p = idp.add_parser("register")
    _node_options(p)
    p.add_argument("--principal", required=True)
    p.add_argument("--secret", required=True, help="secret or @file")
    p.add_argument("--roles", help="comma-separated")
    p.add_argument("--mls-level", type=int, choices=range(4))
    p.set_defaults(func=_node_verb("idp", "/register_principal", _idp_register_body))
    p = idp.add_parser("login")
    _node_options(p)
    p.add_argument("--principal", required=True)
    p.add_argument("--secret", required=True, help="secret or @file")
    p.set_defaults(func=_node_verb("idp", "/authenticate", lambda a, _: {"principal": a.principal,
                                                                     "secret": _read_arg(a.secret)}))

    az = groups.add_parser("as", help="authorization server operations").add_subparsers(dest="verb")
    p = az.add_parser("set-policy")
    _node_options(p)
    p.add_argument("--authn", required=True, help="owner authentication token (hex or @file)")
    p.add_argument("--policy", required=True, help="policy file")
    p.set_defaults(func=_node_verb("as", "/set_policy", _policy_body))
    p = az.add_parser("retract")
    _node_options(p)
    p.add_argument("--authn", required=True)
    p.add_argument("--policy-id", required=True)
    p.set_defaults(func=_node_verb("as", "/retract_policy", lambda a, _: {"authn": _read_arg(a.authn),
                                                                       "policy_id": a.policy_id}))
    p = az.add_parser("refresh")
    _node_options(p)
    p.set_defaults(func=_node_verb("as", "/refresh", lambda a, _: {}))
    p = az.add_parser("ticket")
    _node_options(p)
    p.add_argument("--resource", required=True, help="rs/resource_id")
    p.add_argument("--scopes", required=True, help="comma-separated")
    p.set_defaults(func=_node_verb("as", "/ticket", lambda a, _: {"resource": a.resource, "scopes": _scopes(a.scopes)}))
    p = az.add_parser("exchange")
    _node_options(p)
    p.add_argument("--ticket", required=True)
    p.add_argument("--authn", required=True)
    p.add_argument("--client", required=True)
    p.add_argument("--role", help="active role")
    p.set_defaults(func=_node_verb("as", "/exchange", _exchange_body))
    p = az.add_parser("introspect")
    _node_options(p)
    p.add_argument("--token", required=True)
    p.set_defaults(func=_node_verb("as", "/introspect", lambda a, _: {"token": _read_arg(a.token)}))
    p = az.add_parser("revoke-token")
    _node_options(p)
    p.add_argument("--token-id", required=True)
    p.set_defaults(func=_node_verb("as", "/revoke_token", lambda a, _: {"token_id": a.token_id}))
    p = az.add_parser("register-resource")
    _node_options(p)
    p.add_argument("--rs", required=True)
    p.add_argument("--resource-id", required=True)
    p.add_argument("--owner", required=True)
    p.add_argument("--scopes", required=True)
    p.add_argument("--mls-level", type=int, choices=range(4))
    p.set_defaults(func=_node_verb("as", "/register_resource", _resource_body))

    rs = groups.add_parser("rs", help="resource server operations").add_subparsers(dest="verb")
    p = rs.add_parser("access")
    _node_options(p)
    p.add_argument("--resource-id", required=True)
    p.add_argument("--scopes", required=True)
    p.add_argument("--rqp-token")
    p.add_argument("--client-token")
    p.set_defaults(func=_node_verb("rs", "/access", _access_body))
    p = rs.add_parser("install", help="install a policy ticket or revocation envelope")
    _node_options(p)
    p.add_argument("--envelope", required=True)
    p.set_defaults(func=cmd_rs_install)

    fed = groups.add_parser("fed", help="federation registry tools").add_subparsers(dest="verb")
    reg = fed.add_parser("registry").add_subparsers(dest="action")
    p = reg.add_parser("validate")
    p.add_argument("file", help="registry file or bundled name")
    p.set_defaults(func=cmd_fed_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = getattr(args, "func", None)
    if func is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    out = Output(args.pretty)
    try:
        return func(args, out)
    except UmafedError as exc:
        out.emit(exc.to_record())
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        out.emit({"error": "io_error" if isinstance(exc, OSError) else "invalid_input", "message": str(exc)})
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

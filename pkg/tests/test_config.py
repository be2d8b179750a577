from __future__ import annotations

import json

import pytest

from umafed.config import Config, journal_path, load_config, open_node
from umafed.errors import ConfigError, ParseError
from umafed.scenario import _bundled

TWO_DOMAIN = str(_bundled("registries", "two_domain"))


def test_defaults_and_validation():
    cfg = Config("as", registry=TWO_DOMAIN, node="as1")
    assert cfg.host_port == ("127.0.0.1", 8400)
    assert cfg.ttls.correlation_ticket == 60 and cfg.ttls.access_token == 300
    with pytest.raises(ConfigError):
        Config("pdp")
    with pytest.raises(ConfigError):
        Config("rs", registry=TWO_DOMAIN)
    assert Config("sim").node == ""


def test_file_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({
        "format_version": 1, "role": "rs", "registry": "reg.json", "node": "rs1.1", "data_dir": "state",
        "ttls": {"access_token": 120, "authn_token": 90}, "peers": {"as1": "http://127.0.0.1:9"},
    }))
    cfg = Config.load(tmp_path / "c.json")
    assert cfg.registry == str(tmp_path / "reg.json") and cfg.data_dir == str(tmp_path / "state")
    assert cfg.ttls.access_token == 120 and cfg.authn_ttl == 90
    assert journal_path(cfg) == tmp_path / "state" / "rs1.1.log"


def test_bad_documents(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format_version": 1, "role": "as", "ttls": {"access_token": 0}}))
    with pytest.raises(ParseError) as info:
        Config.load(bad)
    assert info.value.details["location"] == "$.ttls.access_token"
    bad.write_text(json.dumps({"format_version": 1, "role": "as"}))
    with pytest.raises(ConfigError):
        Config.load(bad)
    bad.write_text("{")
    with pytest.raises(ParseError):
        Config.load(bad)
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "missing.json")


def test_env_variable_and_overrides(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"format_version": 1, "role": "as", "registry": TWO_DOMAIN, "node": "as1"}))
    monkeypatch.setenv("UMAFED_CONFIG", str(path))
    assert load_config().node == "as1"
    assert load_config(data_dir=str(tmp_path)).data_dir == str(tmp_path)
    monkeypatch.delenv("UMAFED_CONFIG")
    with pytest.raises(ConfigError):
        load_config()
    assert load_config(role="idp", registry=TWO_DOMAIN, node="idp1").role == "idp"


def test_open_node_checks_role_and_restores(tmp_path):
    with pytest.raises(ConfigError):
        open_node(Config("as", registry=TWO_DOMAIN, node="rs1.1"))
    cfg = Config("idp", registry=TWO_DOMAIN, node="idp1", data_dir=str(tmp_path))
    idp = open_node(cfg)
    idp.register_principal("alice", b"pw")
    idp.journal.close()
    again = open_node(cfg)
    assert "alice" in again.credentials
    again.journal.close()


def test_open_node_hosts_declared_resources():
    rs = open_node(Config("rs", registry=TWO_DOMAIN, node="rs1.1"))
    assert set(rs.hosted) == {"records"}
    as1 = open_node(Config("as", registry=TWO_DOMAIN, node="as1"))
    assert set(as1.resources) == {"rs1.1/records", "rs1.2/notes"}

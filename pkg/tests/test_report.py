from __future__ import annotations

import json

from umafed.cli import main
from umafed.report import scenario_figure, sweep_figure
from umafed.scenario import run_scenario

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def test_scenario_figure(tmp_path):
    report = run_scenario("revocation_partition")
    path = scenario_figure(report, tmp_path / "sub" / "run.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_sweep_figure(tmp_path):
    records = [run_scenario(name).to_record() for name in ("basic_flow", "revocation")]
    path = sweep_figure(records, tmp_path / "sweep.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_cli_figure_flags(tmp_path, capsys):
    assert main(["sim", "run", "basic_flow", "--figure", str(tmp_path / "f.png")]) == 0
    record = json.loads(capsys.readouterr().out)
    assert (tmp_path / "f.png").read_bytes().startswith(PNG_MAGIC) and record["figure"].endswith("f.png")

"""The experiment scripts run end to end on tiny problems."""
import json
import subprocess
import sys
from pathlib import Path

import pytest

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def _run(name, *args, tmp_path):
    out = tmp_path / f"{name}.json"
    proc = subprocess.run([sys.executable, str(SCRIPTS / f"{name}.py"), *args, "--out", str(out)],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    last = json.loads(proc.stdout.strip().splitlines()[-1])
    assert last["output"] == str(out)
    return json.loads(out.read_text())


def test_moment_flatness_script(tmp_path):
    res = _run("moment_flatness", "--L", "16", "--eps", "0.25", "--lam", "1", "0.5", "--replicas", "16", tmp_path=tmp_path)
    assert set(res["spread"]) == {"2", "4"}


def test_derivative_decay_script(tmp_path):
    res = _run("derivative_decay", "--L", "12", "--replicas", "16", "--r-max", "5", tmp_path=tmp_path)
    assert res["first"]["fit"]["exponent"] < 0


@pytest.mark.slow
def test_stein_script(tmp_path):
    res = _run("stein_dominance", "--L", "12", "--eps", "0.5", "0.25", "--replicas", "16", "--R", "2", "--m", "4",
               tmp_path=tmp_path)
    assert len(res["rows"]) == 2

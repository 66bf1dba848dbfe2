import json

import pytest

from nsinflate.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, run
from nsinflate.config import ConfigError, load_config


def _read(path):
    return json.loads(path.read_text())


def test_params_report(tmp_path):
    assert run(["params", "p=12", "regime=thm1", "N=200", f"out={tmp_path}"]) == EXIT_OK
    body = _read(tmp_path / "params.json")
    feas = body["result"]["feasibility"]
    assert feas["pass"] and all(c["slack_float"] > 0 for c in feas["conditions"])
    assert body["result"]["derived"]["CN_log2"] == "25/2"
    assert body["config_hash"] and body["profile_hash"]
    assert "p = 12" in body["config_text"]


def test_params_infeasible_exit_code(tmp_path):
    assert run(["params", "p=12", "eps=1/20", "eps1=1/8", f"out={tmp_path}"]) == EXIT_INFEASIBLE


@pytest.mark.parametrize("args", [["params", "bogus=1"], ["params", "p=abc"], ["params", "N=5:1"],
                                  ["params", "eps=1/20"], ["params", "noequals"]])
def test_malformed_config_exit_code(tmp_path, args):
    assert run(args + [f"out={tmp_path}"]) == EXIT_CONFIG


def test_config_file_sections(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[params]\np = 24\nregime = thm2\n[torus]\nM = 32\n[output]\nprefix = a_\n")
    c = load_config("params", cfg, [f"out={tmp_path}"])
    assert c.get("p") == "24" and c.get("regime") == "THM2" and c.get("M") == 32
    assert run(["params", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "a_params.json").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text("[nowhere]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config("params", bad)


def test_sweep_outputs_and_determinism(tmp_path):
    args = ["sweep", "p=12", "N=40:60:10", "k0=30", "rtol=1e-6"]
    out = tmp_path / "a"
    assert run(args + [f"out={out}", "--plot"]) == EXIT_OK
    first = {name: (out / name).read_bytes() for name in ("sweep.csv", "sweep.json")}
    assert (out / "sweep.png").stat().st_size > 0
    (out / "sweep.png").unlink()
    assert run(args + [f"out={out}"]) == EXIT_OK
    for name, body in first.items():
        assert (out / name).read_bytes() == body
    assert not (out / "sweep.png").exists()
    csv_text = (tmp_path / "a" / "sweep.csv").read_text()
    assert csv_text.startswith("# config_hash: ")
    res = _read(tmp_path / "a" / "sweep.json")["result"]
    assert [r["N"] for r in res["rows"]] == [40, 50, 60]
    assert res["slope"] > 0


def test_build_data_outputs(tmp_path):
    assert run(["build-data", "p=12", "N=40", "k0=30", f"out={tmp_path}"]) == EXIT_OK
    from nsinflate.bump import BumpSum
    text = (tmp_path / "a0.bumps").read_text()
    body = "".join(ln + "\n" for ln in text.splitlines() if not ln.startswith("# config") and
                   not ln.startswith("# profile"))
    assert len(BumpSum.loads(body)) == 22
    cert = _read(tmp_path / "data.json")["result"]["certificate"]
    assert cert["N"] == 40


def test_selftest_command(tmp_path):
    assert run(["selftest", f"out={tmp_path}"]) == EXIT_OK
    checks = _read(tmp_path / "selftest.json")["result"]["checks"]
    assert all(c["passed"] for c in checks)

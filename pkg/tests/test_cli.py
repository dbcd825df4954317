import hashlib
import json
import textwrap

import numpy as np
import pytest

from vexflow.cli import main
from vexflow.errors import ConfigurationError
from vexflow.scenario import load_scenario, parse_scenario

SMALL = textwrap.dedent("""\
    name: small
    seed: 5
    domain:
      extents: [1.0, 1.0]
      resolution: 16
      T: 0.1
    exponent:
      slabs: ["2"]
    stress:
      nu0: 0.1
    solver:
      dt: 0.02
      theta: 0.001
    initial:
      stream: "(sin(pi*x)*sin(pi*y))**2"
    diagnostics:
      energy: true
      pressure: true
      local_energy:
        psi: "bump(x, y, 0.5, 0.5, 0.3)"
        max_fraction: 0.5
      checkpoints: true
    """)


def write(tmp_path, text, name="scenario.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_bundled_scenarios_parse():
    for name in ("newtonian-decay", "powerlaw-switch"):
        scen = load_scenario(name)
        assert scen.domain.shape == (32, 32)
        assert len(scen.config_hash) == 64
    assert load_scenario("powerlaw-switch").theta_list == [0.1, 0.01, 0.001]


def test_sweep_without_theta_list_names_the_line(tmp_path, capsys):
    text = SMALL + "  sweep: true\n"
    with pytest.raises(ConfigurationError) as err:
        parse_scenario(text)
    line = text.splitlines().index("  sweep: true") + 1
    assert err.value.line == line
    assert main(["run", write(tmp_path, text), "--output", str(tmp_path / "out")]) == 2
    msg = capsys.readouterr().err
    assert f"line {line}" in msg and "theta_list" in msg


@pytest.mark.parametrize("edit, fragment", [
    (("  nu0: 0.1", "  nu0: 0.1\n  viscosity: 2"), "viscosity"),
    (('  slabs: ["2"]', '  slabs: ["2 + q"]'), "unknown names"),
    (("  theta: 0.001", "  theta: 0.001\n  theta_list: [0.01, 0.1]"), "strictly decreasing"),
    (("  resolution: 16", "  resolution: [16"), "YAML"),
    (('  slabs: ["2"]', '  slabs: ["2", "3"]'), "time slabs"),
])
def test_invalid_configurations_exit_2(tmp_path, capsys, edit, fragment):
    text = SMALL.replace(*edit)
    assert main(["verify", write(tmp_path, text)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("configuration error: line ") and fragment in err


def test_run_checks_the_step_divides_the_horizon(tmp_path, capsys):
    assert main(["run", write(tmp_path, SMALL.replace("  dt: 0.02", "  dt: 0.03"))]) == 2
    assert "does not divide" in capsys.readouterr().err


def test_verify_reports_the_3d_bound(tmp_path, capsys):
    text = textwrap.dedent("""\
        domain: {extents: [1.0, 1.0, 1.0], resolution: 6}
        exponent: {slabs: ["2"]}
        stress: {nu0: 1.0, nu1: 1.0}
        """)
    assert main(["verify", write(tmp_path, text)]) == 1
    out = capsys.readouterr().out
    a2 = next(l for l in out.splitlines() if l.startswith("FAIL A2"))
    assert "2.2" in a2
    assert out.splitlines()[-1] == "FAIL"


def test_verify_flags_a_decreasing_table(tmp_path, capsys):
    text = SMALL.replace("  nu0: 0.1", "  table:\n    r: [0.0, 1.0, 2.0]\n    phi: [1.0, 0.2, 0.05]")
    assert main(["verify", write(tmp_path, text)]) == 1
    t3 = next(l for l in capsys.readouterr().out.splitlines() if " T3:" in l)
    assert t3.startswith("FAIL T3") and "witness" in t3 and "xi1" in t3


def test_verify_passes_on_a_bundled_scenario(tmp_path, capsys):
    assert main(["verify", "powerlaw-switch", "--output", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1] == "PASS"
    cov = next(l for l in out.splitlines() if l.startswith("PASS covering"))
    assert "balls of radius" in cov and "min lifted exponent" in cov
    assert "PASS covering" in (tmp_path / "verify.txt").read_text()


def test_run_writes_a_complete_manifest(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, SMALL), "--output", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    produced = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(manifest["files"]) == produced
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert manifest["seed"] == 5 and manifest["passed"]
    assert set(manifest["checks"]) == {"assumptions", "energy", "pressure", "local_energy"}
    assert {"numpy", "scipy", "pyyaml", "python"} <= set(manifest["versions"])
    assert "PASS energy" in capsys.readouterr().out


def test_seed_override_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    path = write(tmp_path, SMALL)
    assert main(["run", path, "--output", str(a), "--seed", "9"]) == 0
    assert main(["--threads", "2", "run", path, "--output", str(b), "--seed", "9"]) == 0
    assert json.loads((a / "manifest.json").read_text())["seed"] == 9
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_runtime_failure_names_the_stage(tmp_path, capsys):
    text = SMALL.replace("  checkpoints: true", "  ladder:\n    eps: [0.05]\n    psi: \"bump(x, y, 0.5, 0.5, 0.3)\"")
    assert main(["run", write(tmp_path, text), "--output", str(tmp_path / "out")]) == 1
    assert "stage 'ladder' failed" in capsys.readouterr().err


def test_failed_check_gives_exit_1(tmp_path, capsys):
    text = SMALL.replace("max_fraction: 0.5", "max_fraction: 1.0e-12")
    assert main(["run", write(tmp_path, text), "--output", str(tmp_path / "out")]) == 1
    assert "FAIL local_energy" in capsys.readouterr().out


def test_thread_count_must_be_positive(capsys):
    assert main(["--threads", "0", "verify", "newtonian-decay"]) == 2


def test_missing_scenario_is_a_configuration_error(capsys):
    assert main(["verify", "no-such-scenario"]) == 2
    assert "cannot read scenario" in capsys.readouterr().err


def test_scenario_values_reach_the_solver_config():
    scen = parse_scenario(SMALL)
    cfg = scen.solver_config()
    assert cfg.dt == 0.02 and cfg.theta == 0.001 and cfg.n_steps == 5
    assert np.abs(cfg.grid.D @ np.asarray(cfg.u0)).max() <= 1e-12

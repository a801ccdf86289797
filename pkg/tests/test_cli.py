import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from vpscatter.cli import main
from vpscatter.config import load_config, parse_config
from vpscatter.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).parent / "golden" / "forward_small_extract.json"


def _run(tmp_path, sub, cfg, name="out", extra=()):
    out = tmp_path / name
    code = main([sub, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def _write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def forward_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("fwd")
    a = _run(base, "forward", CONFIGS / "forward_small.yaml", "a")
    b = _run(base, "forward", CONFIGS / "forward_small.yaml", "b", ("--threads", "1"))
    return a, b


def test_verify_trivial_suite_exits_zero(tmp_path, capsys):
    code, out = _run(tmp_path, "verify", CONFIGS / "verify_trivial.yaml")
    assert code == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text and text.count("PASS") == 5
    m = _manifest(out)
    assert m["status"] == "complete" and m["exit_code"] == 0


def test_verify_structural_suite_exits_zero(tmp_path):
    code, out = _run(tmp_path, "verify", CONFIGS / "verify_structural.yaml")
    assert code == 0
    checks = json.loads((out / "verify.json").read_text())["checks"]
    assert {c["name"] for c in checks} >= {"tangent_det", "L2_drift", "bitwise_determinism"}


def test_fields_point_mass_prints_coulomb_table(tmp_path, capsys):
    code, out = _run(tmp_path, "fields", CONFIGS / "fields_point.yaml")
    assert code == 0
    printed = capsys.readouterr().out
    assert printed == (out / "fields.txt").read_text()
    rows = np.loadtxt(out / "fields.txt")
    v, E = rows[:, :3], rows[:, 3:6]
    r = np.linalg.norm(v, axis=1)
    # the table carries 11 significant digits
    np.testing.assert_allclose(E, v / (4 * math.pi * r[:, None] ** 3), rtol=1e-9)
    np.testing.assert_allclose(rows[:, 6], 1 / (4 * math.pi * r**2), rtol=1e-9)
    assert len(rows) == 4**3


def test_forward_reproduces_golden_extract(forward_runs):
    (code, out), _ = forward_runs
    assert code == 0
    got = json.loads((out / "extract.json").read_text())
    ref = json.loads(GOLDEN.read_text())
    assert got["config_hash"] == ref["config_hash"]
    np.testing.assert_allclose(got["E0_probe"], ref["E0_probe"], rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(got["gamma0"]["gamma0"], ref["gamma0"]["gamma0"], rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(got["cauchy"]["sup_diff"], ref["cauchy"]["sup_diff"], rtol=1e-6)
    assert got["rate"]["slope"] == pytest.approx(ref["rate"]["slope"], rel=1e-6)
    assert got["certificates"]["E0_cauchy"]["passed"] and got["certificates"]["nu_cauchy"]["passed"]
    for name, fit in ref["fits"].items():
        assert got["fits"][name]["pass"] == fit["pass"]


def test_forward_outputs_and_determinism(forward_runs):
    (code_a, a), (code_b, b) = forward_runs
    assert code_a == code_b == 0
    assert (a / "extract.json").read_bytes() == (b / "extract.json").read_bytes()
    snaps = sorted(p.name for p in (a / "snapshots").iterdir())
    assert snaps and snaps == sorted(p.name for p in (b / "snapshots").iterdir())
    for name in snaps:
        assert (a / "snapshots" / name).read_bytes() == (b / "snapshots" / name).read_bytes()
    header = (a / "norms.txt").read_text().splitlines()[0]
    assert header == "# s L2 M0 M1 M2 Dq Dp Esup"
    assert (a / "field_probes.txt").read_text().startswith("# s qx qy qz Ex Ey Ez |E|")
    m = _manifest(a)
    assert m["status"] == "complete" and m["config_hash"] == load_config(
        CONFIGS / "forward_small.yaml").model_copy(update={"subcommand": "forward"}).hash
    assert m["config"]["profile"]["family"] == "gaussian"
    assert "extract.json" in m["outputs"]


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = _write(tmp_path, {"subcommand": "verify", "grids": {"s_min": 1e-3, "bogus": 1}})
    code, out = _run(tmp_path, "verify", cfg)
    assert code == 4
    assert not out.exists()


def test_config_errors_exit_four(tmp_path):
    mismatch = _write(tmp_path, {"subcommand": "forward"}, "a.yaml")
    assert _run(tmp_path, "verify", mismatch)[0] == 4
    bad = tmp_path / "b.yaml"
    bad.write_text("profile: [unclosed\n")
    assert _run(tmp_path, "verify", bad)[0] == 4
    unknown_family = _write(tmp_path, {"profile": {"family": "lorentzian"}}, "c.yaml")
    assert _run(tmp_path, "verify", unknown_family)[0] == 4
    assert main(["verify", "--config", str(CONFIGS / "verify_trivial.yaml"), "--seed", "-1",
                 "--out", str(tmp_path / "x")]) == 4


def test_parse_config_is_strict_and_hashable():
    a = parse_config({"lam": -1, "seed": 3})
    b = parse_config(json.loads(a.canonical_json()))
    assert a.hash == b.hash and a.hash != parse_config({"lam": 1, "seed": 3}).hash
    with pytest.raises(ConfigError):
        parse_config({"lam": 2})
    with pytest.raises(ConfigError):
        parse_config([1, 2])


def test_failed_certificate_marks_manifest(tmp_path):
    cfg = _write(tmp_path, {
        "subcommand": "waveop",
        "profile": {"family": "gaussian", "eps": 20.0, "sigma_a": 0.3, "sigma_b": 1.0},
        "sampling": {"n": 2}, "tolerances": {"picard_max_iter": 2},
        "grids": {"T_star": 0.25},
    })
    code, out = _run(tmp_path, "waveop", cfg)
    assert code == 2
    m = _manifest(out)
    assert m["status"] == "failed" and m["exit_code"] == 2 and m["failed_gate"] == "picard"
    assert json.loads((out / "picard.json").read_text())["picard"]["converged"] is False


def test_scatmap_zero_profile(tmp_path):
    cfg = _write(tmp_path, {"subcommand": "scatmap", "grids": {"bridge_dt": 0.01},
                            "sampling": {"n": 2}, "probes": {"n_probe": 3}})
    code, out = _run(tmp_path, "scatmap", cfg)
    assert code == 0
    rep = json.loads((out / "scatter.json").read_text())
    assert rep["passed"] and rep["sup_discrepancy"] == 0.0
    assert rep["tags"]["certificates"]


def test_waveop_writes_picard_report(tmp_path):
    cfg = _write(tmp_path, {
        "subcommand": "waveop",
        "profile": {"family": "gaussian", "eps": 0.1, "sigma_a": 0.3, "sigma_b": 1.0},
        "sampling": {"n": 2}, "grids": {"s_min": 0.01},
    })
    code, out = _run(tmp_path, "waveop", cfg)
    assert code == 0
    rep = json.loads((out / "picard.json").read_text())
    assert rep["picard"]["converged"] and rep["picard"]["extra_sweep"] < 2e-8
    assert {"K_bounds", "theta_norms", "config_hash"} <= set(rep)
    assert (out / "snapshots" / "node_000.txt").exists()

import hashlib
import json

import pytest

from phds import acceptance, cli

SMALL = ["--set", "grid=32", "--set", "basin_grid=32"]


def test_parse_config_comments_and_values():
    cfg = cli.parse_config("# header\nlam = 0.2  # inline\n\nmatrix = 2,1,1,1\ncriteria = 1, 3\n")
    assert cfg["lam"] == 0.2
    assert cfg["matrix"] == ((2, 1), (1, 1))
    assert cfg["criteria"] == (1, 3)
    assert cfg["grid"] == cli.SCHEMA["grid"].default


def test_parse_config_unknown_key_line():
    with pytest.raises(cli.ConfigError, match=r"run\.cfg:3: unknown key 'gird'"):
        cli.parse_config("lam = 0.1\n# ok\ngird = 5\n", "run.cfg")


def test_parse_config_bad_value_line():
    with pytest.raises(cli.ConfigError, match=r"<config>:2: grid"):
        cli.parse_config("lam = 0.1\ngrid = many\n")
    with pytest.raises(cli.ConfigError, match=r":1: expected key = value"):
        cli.parse_config("lam 0.1\n")


def test_lambda_config_error(tmp_path, capsys):
    code = cli.main(["build-calzone", "--set", "lam=0.6", "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "lambda must lie in (0, 1/2)" in capsys.readouterr().err


def test_lambda_from_config_file(tmp_path, capsys):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("# calzone\nlam = 0.6\n", encoding="utf-8")
    assert cli.main(["build-calzone", "--config", str(cfgfile)]) == cli.EXIT_CONFIG
    assert f"{cfgfile}:2" in capsys.readouterr().err


def test_infeasible_combination_is_config_error(tmp_path):
    assert cli.main(["build-calzone", "--set", "C=2", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_build_calzone_artifacts_and_manifest(tmp_path):
    out = tmp_path / "a"
    assert cli.main(["build-calzone", *SMALL, "--out", str(out)]) == 0
    man = _manifest(out)
    names = {a["path"] for a in man["artifacts"]}
    assert names == {"basin.pgm", "basin.csv", "t_plus.csv", "t_minus.csv",
                     "intersection_report.json"}
    assert {p.name for p in out.iterdir()} == names | {"manifest.json"}
    for a in man["artifacts"]:
        data = (out / a["path"]).read_bytes()
        assert a["sha256"] == hashlib.sha256(data).hexdigest() and a["bytes"] == len(data)
    assert man["partial"] is False
    pgm = (out / "basin.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n") and len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32
    assert set(pgm[len(b"P5\n32 32\n255\n"):]) <= {0, 128, 255}


def test_reruns_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["build-calzone", *SMALL, "--out", str(a), "--threads", "1"]) == 0
    assert cli.main(["build-calzone", *SMALL, "--out", str(b), "--threads", "3"]) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_numerical_failure_keeps_partial(tmp_path):
    out = tmp_path / "p"
    code = cli.main(["build-calzone", *SMALL, "--set", "max_iter=1", "--out", str(out)])
    assert code == cli.EXIT_NUMERIC
    man = _manifest(out)
    assert man["partial"] is True and "did not converge" in man["error"]
    assert {"basin.pgm", "basin.csv"} <= {a["path"] for a in man["artifacts"]}


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("PHDS_OUT", str(tmp_path))
    assert cli.main(["fuller-demo", "--seeds", "8", "--N", "15"]) == 0
    assert (tmp_path / "fuller-demo" / "section.csv").exists()


def test_fuller_demo_flags(tmp_path):
    out = tmp_path / "f"
    args = ["fuller-demo", "--flow", "annulus2", "--seeds", "8", "--N", "20",
            "--root-tol", "1e-11", "--out", str(out)]
    assert cli.main(args) == 0
    sec = json.loads((out / "section.json").read_text())
    assert sec["N"] == 20 and sec["root_tol"] == 1e-11
    assert len(set(sec["labels"])) == 2
    assert cli.main(["fuller-demo", "--flow", "nope", "--out", str(out)]) == cli.EXIT_CONFIG


def test_fuller_demo_constant_g_is_sectionless(tmp_path):
    out = tmp_path / "g"
    assert cli.main(["fuller-demo", "--g", "zero", "--seeds", "4", "--N", "10", "--out", str(out)]) == 0
    sec = json.loads((out / "section.json").read_text())
    assert sec["points"] == [] and len(sec["sectionless"]) == 4


def test_phcross_mock(tmp_path):
    out = tmp_path / "m"
    assert cli.main(["phcross-pipeline", "--set", "seed_grid=8", "--set", "pipeline_grid=32",
                     "--out", str(out)]) == 0
    rep = json.loads((out / "pipeline_report.json").read_text())
    assert rep["sup_error_vs_exact"] < 1e-6
    assert (out / "lambda.csv").read_text().startswith("i,j,x1,x2,u\n")


def test_semiconj_check(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["semiconj-check", "--set", "samples=200", "--out", str(out)]) == 0
    rep = json.loads((out / "semiconj_report.json").read_text())
    assert rep["lattice_u"] < 1e-10 and rep["max_|Hu-pi_u|"] <= rep["R_bound"]
    header = (out / "length_volume.csv").read_text().splitlines()[0]
    assert header == "n,length,diameter,pu_extent,ps_extent"


def test_cone_certify_small(tmp_path):
    out = tmp_path / "c"
    assert cli.main(["cone-certify", "--set", "grid=32", "--set", "cells=100", "--out", str(out)]) == 0
    cert = json.loads((out / "certification.json").read_text())
    assert cert["passed"] and cert["iterate_m"] == 6


def test_acceptance_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["acceptance", "--set", "criteria=2", "--out", str(tmp_path / "ok")]) == 0
    failing = [lambda ctx: acceptance.CriterionResult(1, "stub", False, {}, 0.0)]
    monkeypatch.setattr(acceptance, "CRITERIA", failing)
    assert cli.main(["acceptance", "--out", str(tmp_path / "bad")]) == cli.EXIT_ACCEPTANCE
    man = _manifest(tmp_path / "bad")
    assert man["status"] == "failed"

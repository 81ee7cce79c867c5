import json
import math

import numpy as np
import pytest

from netmorph import cli, io, mesh as meshlib, oned


SIM_FAST = """
[mesh]
h = 0.2
[stop]
T = 2e-6
[experiment]
stride = 2
"""


def _cfg_file(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- configuration --------------------------------------------------------------------------


def test_empty_config_gives_defaults():
    cfg = io.parse_config("")
    m = cfg.section("model")
    assert (m["S"], m["r"], m["c"], m["D"], m["gamma"], m["rho"]) == (1.0, 0.1, 50.0, 1e-3, 0.5, 1e-12)
    assert cfg.kind == "simulate"
    assert cfg.section("stationary")["eps"] == [10.0**-k for k in range(1, 7)]


@pytest.mark.parametrize("text, key", [
    ("[model]\ngamma = 0\nrho = 0\n", "rho"),
    ("[model]\nD = -1\n", "model.D"),
    ("[model]\nDD = 1\n", "model.DD"),
    ("[model]\nc = fifty\n", "model.c"),
    ("[bogus]\n", "bogus"),
    ("[stop]\nT = none\n", "stop"),
    ("[mesh]\ngenerator = file\nfile = nowhere.txt\n", "mesh.file"),
    ("[model]\nm_boundary = periodic\n", "model.m_boundary"),
])
def test_config_rejections_name_key(text, key):
    with pytest.raises(io.ConfigError, match=key.replace(".", r"\.")):
        io.parse_config(text)


def test_kind_specific_rejections():
    with pytest.raises(io.ConfigError, match="gamma"):
        io.parse_config("[model]\ngamma = 0.25\n", kind="stationary-variational")
    with pytest.raises(io.ConfigError, match="gamma"):
        io.parse_config("[model]\ngamma = 0.25\n", kind="oned-classify")
    # gamma = 0 with rho = 0 is fine once the extinction monitor is on
    io.parse_config("[model]\ngamma = 0\nrho = 0\nextinction_monitor = true\n")


def test_config_case_sensitive_keys_and_comments():
    cfg = io.parse_config("[model]\nD = 0.5  # diffusion\nS = 2 ; source\n")
    assert cfg.section("model")["D"] == 0.5 and cfg.section("model")["S"] == 2.0


def test_load_config_missing(tmp_path):
    with pytest.raises(io.ConfigError, match="does not exist"):
        io.load_config(tmp_path / "none.ini")


def test_mesh_file_relative_to_config(tmp_path):
    meshlib.write_mesh(meshlib.generate_unit_square(2), tmp_path / "m.txt")
    cfg = io.load_config(_cfg_file(tmp_path, "[mesh]\ngenerator = file\nfile = m.txt\n"))
    assert cfg.section("mesh")["file"] == "m.txt"


def test_canonical_reparses():
    cfg = io.parse_config("[model]\nD = 0.25\n")
    again = io.parse_config(cfg.canonical())
    assert again.values == cfg.values


# -- VTK ---------------------------------------------------------------------------------------


def test_zero_fields_snapshot(tmp_path, square4):
    p = np.zeros(square4.n_vertices)
    m = np.zeros((square4.n_triangles, 2))
    io.write_snapshot(tmp_path / "z.vtk", square4, p, m, 0.1)
    text = (tmp_path / "z.vtk").read_text()
    assert text.startswith("# vtk DataFile Version 3.0\n")
    assert "DATASET UNSTRUCTURED_GRID" in text
    d = io.read_vtk(tmp_path / "z.vtk")
    assert not d["point_data"]["p"].any()
    assert not d["cell_data"]["m"].any() and d["cell_data"]["m"].shape == (square4.n_triangles, 2)
    assert not d["cell_data"]["u_abs"].any()
    assert np.all(d["cell_data"]["log10_u_abs"] == -300)
    np.testing.assert_array_equal(d["triangles"], square4.triangles)


def test_snapshot_roundtrip_byte_identical(tmp_path, diamond_coarse, rng):
    p = rng.standard_normal(diamond_coarse.n_vertices)
    m = rng.standard_normal((diamond_coarse.n_triangles, 2))
    io.write_snapshot(tmp_path / "a.vtk", diamond_coarse, p, m, 0.1)
    io.rewrite_vtk(tmp_path / "a.vtk", tmp_path / "b.vtk")
    assert (tmp_path / "a.vtk").read_bytes() == (tmp_path / "b.vtk").read_bytes()
    d = io.read_vtk(tmp_path / "a.vtk")
    np.testing.assert_array_equal(d["point_data"]["p"], p)
    np.testing.assert_array_equal(d["cell_data"]["m"], m)
    u = d["cell_data"]["u_abs"]
    np.testing.assert_allclose(d["cell_data"]["log10_u_abs"], np.log10(u), rtol=1e-14)


def test_read_vtk_rejects_other(tmp_path):
    (tmp_path / "x.vtk").write_text("hello\n")
    with pytest.raises(ValueError):
        io.read_vtk(tmp_path / "x.vtk")


# -- CSV and JSON ------------------------------------------------------------------------------


def test_csv_full_precision(tmp_path):
    vals = [math.pi, 1 / 3, 1e-300, -2.5e17, 0.1]
    io.write_csv(tmp_path / "f.csv", ("x", "flag", "n", "note", "missing"),
                 [(v, v > 0, i, "a b", None) for i, v in enumerate(vals)])
    header, rows = io.read_csv(tmp_path / "f.csv")
    assert header == ["x", "flag", "n", "note", "missing"]
    assert [float(r[0]) for r in rows] == vals
    assert rows[0][1:] == ["true", "0", "a b", ""]
    assert rows[0][0] == "3.1415926535897931"


def test_json_nonfinite(tmp_path):
    io.write_json(tmp_path / "s.json", {"a": math.inf, "b": np.float64(1.5), "c": [np.nan, 1]})
    assert json.loads((tmp_path / "s.json").read_text()) == {"a": None, "b": 1.5, "c": [None, 1]}


# -- CLI ---------------------------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    bad = _cfg_file(tmp_path, "[model]\nD = -1\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "model.D" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["teleport", "--config", str(bad)])
    ok = _cfg_file(tmp_path, "", "empty.ini")
    assert cli.main(["mesh-gen", "--config", str(ok), "--out", str(tmp_path / "m"), "--threads", "0"]) == 2


def test_cli_runtime_error_exit_1(tmp_path, capsys):
    # an energy increase aborts: a huge dt_min forces the step past stability
    cfg = _cfg_file(tmp_path, "[mesh]\nh = 0.2\n[stop]\nT = 1\n[time]\ndt_min = 1e-2\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "netmorph:" in capsys.readouterr().err


def test_simulate_T0_initial_snapshot_only(tmp_path):
    cfg = _cfg_file(tmp_path, "[mesh]\nh = 0.2\n[stop]\nT = 0\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.vtk")) == ["snapshot_000000.vtk"]
    header, rows = io.read_csv(out / "diagnostics.csv")
    assert len(rows) == 1 and header[0] == "k"
    assert json.loads((out / "summary.json").read_text())["steps"] == 0


def test_simulate_deterministic_and_manifest(tmp_path):
    cfg = _cfg_file(tmp_path, SIM_FAST)
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "diagnostics.csv").read_bytes() == (b / "diagnostics.csv").read_bytes()
    names = sorted(p.name for p in a.glob("snapshot_*.vtk"))
    assert names[0] == "snapshot_000000.vtk" and len(names) >= 2
    man = json.loads((a / "manifest.json").read_text())
    assert man["config_sha256"] == io.load_config(cfg).sha256()
    assert man["seed"] == 3 and man["threads"] == 1
    assert man["mesh"]["triangles"] > 0 and man["version"]
    summ = json.loads((a / "summary.json").read_text())
    for key in ("t", "E_h", "s_k", "reason"):
        assert key in summ


def test_oned_classify_boundary_at_Z(tmp_path):
    cfg = _cfg_file(tmp_path, "[model]\ngamma = 0.5\n[oned]\ncB_min = 0\ncB_max = 4\ncB_count = 9\n")
    out = tmp_path / "o"
    assert cli.main(["oned-classify", "--config", str(cfg), "--out", str(out)]) == 0
    summ = json.loads((out / "summary.json").read_text())
    Z = oned.z_constant(0.5)
    assert summ["Z_gamma"] == Z
    # one point below Z, three at Z, five above
    assert summ["count_changes_at"][0] == Z
    _, rows = io.read_csv(out / "classification.csv")
    counts = {float(r[0]): int(r[1]) for r in rows}
    assert counts[Z] == 3 and counts[1.5] == 1 and counts[2.0] == 5
    assert "stable" in (out / "classification.txt").read_text()


def test_stationary_variational_residual(tmp_path):
    cfg = _cfg_file(tmp_path, "[model]\nr = 1\nc = 50\ngamma = 0.5\n[mesh]\ntriangles = 600\n")
    out = tmp_path / "o"
    assert cli.main(["stationary-variational", "--config", str(cfg), "--out", str(out)]) == 0
    summ = json.loads((out / "summary.json").read_text())
    assert summ["stationarity_residual"] <= 1e-10
    d = io.read_vtk(out / "stationary.vtk")
    assert "active" in d["cell_data"] and "log10_u_abs" in d["cell_data"]


def test_oned_extinction_and_convergence(tmp_path):
    cfg = _cfg_file(tmp_path, "[model]\nc = 1\ngamma = 0.25\nD = 0.1\n[oned]\nn = 50\n")
    out = tmp_path / "e"
    assert cli.main(["oned-extinction", "--config", str(cfg), "--out", str(out)]) == 0
    summ = json.loads((out / "summary.json").read_text())
    assert summ["reason"] == "extinction" and summ["T_ex"] <= summ["T_ex_bound"]
    cfg = _cfg_file(tmp_path, "[convergence]\nlevels = 2\nn0 = 4\n", "c.ini")
    out = tmp_path / "c"
    assert cli.main(["convergence-study", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = io.read_csv(out / "convergence.csv")
    assert len(rows) == 2 and rows[0][-1] == ""


def test_mesh_gen_roundtrip(tmp_path):
    cfg = _cfg_file(tmp_path, "[mesh]\ngenerator = unit_square\nn = 3\n")
    out = tmp_path / "o"
    assert cli.main(["mesh-gen", "--config", str(cfg), "--out", str(out)]) == 0
    m = meshlib.read_mesh(out / "mesh.txt")
    assert m.n_triangles == 18
    assert json.loads((out / "summary.json").read_text())["triangles"] == 18

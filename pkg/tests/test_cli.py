import subprocess
import sys

import pytest

from winfshape.cli import ConfigError, build_mesh, build_run_config, load_config, main, report_tables
from winfshape.io import read_mesh

SMALL = """
[mesh]
resolution = 16
layers = auto

[run]
steps = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def test_defaults_build_reference_setup():
    cp = load_config()
    cfg = build_run_config(cp)
    assert cfg.method == "winf" and cfg.steps == 50 and cfg.sigma0 == 0.3
    assert cfg.admm.eps2 is None and cfg.eps1 is None and cfg.restrict == "vertices"
    assert cfg.flow.nu == 0.02


def test_preset_mesh_counts():
    mesh = build_mesh(load_config(), preset="paper2d")
    assert mesh.n_cells == 17664


@pytest.mark.parametrize("text, message", [
    ("[solver]\nx = 1\n", "unknown section"),
    ("[descent]\nsigmaa = 0.3\n", "unknown key"),
    ("[descent]\nsigma = big\n", "invalid value"),
    ("[descent]\nsigma = 2\n", "invalid configuration"),
    ("[descent]\nrestrict = edges\n", "restrict"),
    ("[mesh]\ntunnel = 0, 1, 2\n", "four numbers"),
    ("[mesh]\nobstacle = 8, 9, 0, 1\n", "geometry"),
    ("not an ini file\n", "small.ini"),
])
def test_config_errors(tmp_path, text, message):
    p = tmp_path / "small.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=message):
        cp = load_config(p)
        build_mesh(cp)
        build_run_config(cp)


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[descent]\nbogus = 1\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "r")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["mesh", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["--threads", "0", "report"]) == 2


def test_mesh_command(tmp_path, small_cfg, capsys):
    assert main(["mesh", "--config", str(small_cfg), "--out", str(tmp_path), "--refine", "1"]) == 0
    mesh = read_mesh(tmp_path / "domain.mesh.txt")
    assert "32 obstacle edges" in capsys.readouterr().out
    assert mesh.n_cells == 4 * build_mesh(load_config(small_cfg)).n_cells
    assert (tmp_path / "domain.vtk").is_file()


def test_run_and_report(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert main(["--threads", "1", "run", "--config", str(small_cfg), "--out", str(out)]) == 0
    for name in ("config.ini", "initial.mesh.txt", "final.mesh.txt", "history.csv", "timing.csv"):
        assert (out / name).is_file(), name
    # the saved configuration reproduces the run settings
    assert build_run_config(load_config(out / "config.ini")).steps == 2
    assert main(["report", str(out), "--out", str(tmp_path / "rep")]) == 0
    table = (tmp_path / "rep" / "J_ratio.csv").read_text().splitlines()
    assert table[0] == "step,run:winf" and table[1] == "0,1.0" and len(table) == 4
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "# edge_length_ratio" in capsys.readouterr().out


def test_report_requires_history(tmp_path):
    with pytest.raises(ConfigError):
        report_tables([tmp_path])
    assert main(["report"]) == 2


def test_numerical_failure_exit_code(tmp_path, small_cfg):
    p = tmp_path / "fail.ini"
    p.write_text(SMALL + "\n[flow]\nnu = 1e-6\nnewton_maxiter = 1\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "r")]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "winfshape", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "report" in res.stdout

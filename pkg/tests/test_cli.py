import json
import subprocess
import sys

import numpy as np
import pytest

from boltzadj.cli import main
from boltzadj.forward import read_log, read_moments_csv

SMALL = """
[simulation]
N = 2000
seed = 4
T = {T}

[objective]
kind = "moment2"
axis = "x"
"""


def _cfg(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_forward_writes_outputs(tmp_path):
    cfg = _cfg(tmp_path, SMALL.format(T=2.0))
    out = tmp_path / "out"
    assert main(["forward", "--config", cfg, "--out", str(out)]) == 0
    hist = read_moments_csv(out / "moments.csv")
    assert hist.shape == (21, 9)
    log = read_log(out / "collisions.log")
    assert log.N == 2000 and log.M == 20
    V = np.load(out / "final_ensemble.npy")
    assert V.shape == (2000, 3)


def test_forward_zero_time_single_row(tmp_path):
    cfg = _cfg(tmp_path, SMALL.format(T=0.0))
    assert main(["forward", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "moments.csv").read_text().strip().splitlines()
    assert len(lines) == 2


def test_forward_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, SMALL.format(T=1.0))
    for d in ("a", "b"):
        assert main(["forward", "--config", cfg, "--out", str(tmp_path / d), "--threads", "1"]) == 0
    for f in ("moments.csv", "collisions.log", "final_ensemble.npy"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_flag_changes_output(tmp_path):
    cfg = _cfg(tmp_path, SMALL.format(T=1.0))
    main(["forward", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["forward", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "99"])
    assert (tmp_path / "a" / "moments.csv").read_bytes() != (tmp_path / "b" / "moments.csv").read_bytes()


def test_gradient_adjoint_json(tmp_path, capsys):
    cfg = _cfg(tmp_path, SMALL.format(T=2.0).replace("N = 2000", "N = 200000"))
    assert main(["gradient", "--config", cfg]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["method"] == "adjoint_dsmc" and data["alpha_names"] == ["Tx0", "Ty0", "Tz0"]
    assert abs(data["values"][0] - 0.5723) < 0.01


def test_gradient_fd_fields(tmp_path, capsys):
    text = SMALL.format(T=2.0) + '\n[method]\nname = "fd"\naxes = ["Tx0"]\nMs = 2\n'
    assert main(["gradient", "--config", _cfg(tmp_path, text)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["method"] == "fd"
    assert len(data["e_FD"]) == 1 and len(data["e_rand"]) == 1


def test_gradient_grid_rejects_non_moment(tmp_path, capsys):
    text = SMALL.format(T=2.0).replace('kind = "moment2"\naxis = "x"', 'kind = "matching"') + '\n[method]\nname = "continuous_grid"\n'
    assert main(["gradient", "--config", _cfg(tmp_path, text)]) == 2
    assert "moment objectives only" in capsys.readouterr().err


def test_optimize_zero_iterations(tmp_path):
    text = SMALL.format(T=1.0) + '\n[optimize]\nfree = ["Ty0"]\nmax_iters = 0\n'
    assert main(["optimize", "--config", _cfg(tmp_path, text), "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "history.csv").read_text().strip().splitlines()
    assert rows[0] == "iter,Ty0,J,gradnorm,step" and len(rows) == 2
    data = json.loads((tmp_path / "o" / "history.json").read_text())
    assert data["iterations"] == 0


def test_malformed_config_exit_2(tmp_path, capsys):
    assert main(["forward", "--config", _cfg(tmp_path, "[simulation]\nbogus = 1\n")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["forward", "--config", str(tmp_path / "none.toml")]) == 2
    assert main(["forward"]) == 2
    assert main(["forward", "--config", _cfg(tmp_path, SMALL.format(T=1.0)), "--threads", "0"]) == 2


def test_validate_missing_and_corrupt_log(tmp_path, capsys):
    cfg = _cfg(tmp_path, "[validate]\nN = 200\nn_seeds = 1\n")
    assert main(["validate", "--config", cfg, "--log", str(tmp_path / "missing.log")]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.log"
    bad.write_bytes(b"garbage")
    assert main(["validate", "--config", cfg, "--log", str(bad)]) == 2


def test_validate_passes_small(tmp_path, capsys):
    text = "[validate]\nN = 500\nn_seeds = 2\nfrozen_particles = 3\nfd_N = 20000\nbridge_N = 20000\n"
    assert main(["validate", "--config", _cfg(tmp_path, text), "--out", str(tmp_path / "v")]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 6
    assert (tmp_path / "v" / "validation.json").is_file()


def test_console_module_entry(tmp_path):
    cfg = _cfg(tmp_path, SMALL.format(T=0.0))
    res = subprocess.run([sys.executable, "-m", "boltzadj.cli", "forward", "--config", cfg, "--out", str(tmp_path / "o")], capture_output=True)
    assert res.returncode == 0, res.stderr

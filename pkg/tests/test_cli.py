import subprocess
import sys

import pytest

from adamshap.cli import main
from adamshap.data import read_csv

FAST = """[dataset]
n_samples = 200
n_features = 4
n_val = 20
n_test = 20
[model]
hidden_sizes = 8
[attribution]
val_size = 20
[experiment]
name = fidelity
seed = 1
steps = 6
batch_size = 8
score_steps = 3, 6
output_dir = {out}
"""


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "adamshap.cli", *args], capture_output=True,
                          text=True)


def test_gen_data_writes_marked_flips(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--n", "2000", "--flip-fraction", "0.15", "--seed", "3",
                 "--out", str(out)]) == 0
    ds = read_csv(out)
    assert ds.flipped.sum() == 300
    assert capsys.readouterr().out.strip() == str(out)


def test_gen_data_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        main(["gen-data", "--kind", "xor_rings", "--n", "50", "--seed", "2",
              "--out", str(tmp_path / name)])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_gen_data_invalid_parameters(tmp_path, capsys):
    assert main(["gen-data", "--n", "5", "--out", str(tmp_path / "x.csv")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: usage:")


def test_unknown_subcommand_exit_code():
    proc = run_cli("frobnicate")
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_fidelity_happy_path(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(FAST.format(out=tmp_path / "out"))
    proc = run_cli("fidelity", "--config", str(cfg))
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.splitlines()
    assert lines[0] == str(tmp_path / "out" / "fidelity.csv")
    assert any(line.startswith("adam_exact: pearson=") for line in lines)
    assert "default" in proc.stderr
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.ini", "out"]


def test_config_error_is_one_line_exit_two(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(FAST.format(out=tmp_path / "out") + "[optimizer]\neta = -1\n")
    assert main(["-q", "fidelity", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["error: config: eta: value '-1' out of range (line 18)"]


def test_runtime_failure_exit_one(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(FAST.format(out=tmp_path / "out").replace(
        "[model]", f"csv_path = {tmp_path / 'missing.csv'}\n[model]"))
    assert main(["-q", "fidelity", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: runtime: FileNotFoundError")


def test_oracle_check_passes(capsys):
    assert main(["oracle-check", "--batch", "6", "--instances", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 8 and all(line.startswith("PASS ") for line in out)
    assert any("surrogate_shapley" in line and "tolerance=1e-09" in line for line in out)


def test_oracle_check_rejects_large_batch(capsys):
    assert main(["oracle-check", "--batch", "13"]) == 2
    assert capsys.readouterr().err.startswith("error: usage:")


@pytest.mark.parametrize("argv", [["fidelity"], ["gen-data"], []])
def test_missing_arguments_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_gen_data_sparse_signal(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["-q", "gen-data", "--n", "40", "--d", "8", "--n-informative", "1",
                 "--out", str(out)]) == 0
    assert read_csv(out).n_features == 8

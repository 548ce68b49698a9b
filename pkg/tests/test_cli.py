import csv
import json
import re

import pytest

from spmpinn.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from spmpinn.network import load_checkpoint, save_checkpoint
from spmpinn.pretrain import HISTORY_COLUMNS

TINY_TRAIN = """
[train]
epochs = {epochs}
n_pde = 32
n_bcc = 4
n_bcs = 4
profiles_per_epoch = 1
eval_every = 0

[train.arch]
branch = [4, 6]
trunk = [3, 6]
head = [6, 5, 1]
"""


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def report(stdout: str) -> dict:
    block = re.search(r"^--- \w+ ---\n(.*?)^---$", stdout, re.S | re.M).group(1)
    return dict(line.split(": ", 1) for line in block.strip().splitlines())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    cfg = d / "train.toml"
    cfg.write_text(TINY_TRAIN.format(epochs=10))
    assert main(["pretrain", "--config", str(cfg), "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def flat_ckpt(tiny_ckpt, tmp_path_factory):
    """The tiny checkpoints with a zero output layer, so c == c0 stays admissible."""
    d = tmp_path_factory.mktemp("flat")
    for side in ("pos", "neg"):
        m = load_checkpoint(tiny_ckpt / f"pinn_{side}.json")
        last = len(m.arch.head) - 2
        m.params.view(f"head.{last}.W").zero_()
        m.params.view(f"head.{last}.b").zero_()
        save_checkpoint(m, d / f"pinn_{side}.json")
    return d


@pytest.fixture(scope="module")
def short_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--duration", "300", "--out", str(d)]) == EXIT_OK
    return d / "voltage.csv"


def test_simulate_charge_ends_at_cutoff(tmp_path, capsys, cell):
    code, out, _ = run(["simulate", "--mode", "charge", "--c-rate", 1, "--out", tmp_path], capsys)
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "voltage.csv")
    assert float(rows[0]["time_s"]) == 0.0
    assert float(rows[-1]["voltage_V"]) == pytest.approx(4.2, abs=1e-6)
    assert report(out)["status"] == "cutoff"
    assert (tmp_path / "voltage.svg").read_text().startswith("<?xml")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 0 and manifest["status"] == "ok"
    assert manifest["params_file"] == "builtin:lg_m50" and manifest["params_sha256"] == ""


def test_simulate_rest_is_flat(tmp_path, capsys):
    code, _, _ = run(["simulate", "--mode", "rest", "--duration", 100, "--soc0", 0.5, "--out", tmp_path], capsys)
    assert code == EXIT_OK
    volts = {r["voltage_V"] for r in read_csv(tmp_path / "voltage.csv")}
    assert len(volts) == 1


def test_simulate_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["simulate", "--duration", 300, "--seed", 3, "--out", tmp_path / d], capsys)[0] == EXIT_OK
    for name in ("voltage.csv", "voltage.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_rest_without_duration_is_input_error(tmp_path, capsys):
    code, _, err = run(["simulate", "--mode", "rest", "--out", tmp_path], capsys)
    assert code == EXIT_INPUT and "duration" in err


def test_bad_params_file_is_input_error(tmp_path, capsys):
    bad = tmp_path / "p.toml"
    bad.write_text("schema_version = 1\n[cell]\n")
    code, _, err = run(["simulate", "--params", bad, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_INPUT and err.startswith("error:")


def test_pretrain_outputs_and_resume(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text(TINY_TRAIN.format(epochs=6))
    code, out, _ = run(["pretrain", "--config", cfg, "--epochs", 4, "--out", tmp_path / "a"], capsys)
    assert code == EXIT_OK and report(out)["epochs"] == "4"
    for name in ("pinn_pos.json", "pinn_neg.json", "history.csv", "history.svg", "validation_voltage.svg", "manifest.json"):
        assert (tmp_path / "a" / name).exists()
    with open(tmp_path / "a" / "history.csv") as fh:
        assert next(csv.reader(fh)) == list(HISTORY_COLUMNS)
    code, out, _ = run(["pretrain", "--config", cfg, "--resume", tmp_path / "a", "--out", tmp_path / "b"], capsys)
    assert code == EXIT_OK and report(out)["epochs"] == "6"
    epochs = sorted({int(r["epoch"]) for r in read_csv(tmp_path / "b" / "history.csv")})
    assert epochs == [4, 5]


def test_pretrain_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text("[train]\nepochz = 3\n")
    code, _, err = run(["pretrain", "--config", cfg, "--out", tmp_path], capsys)
    assert code == EXIT_INPUT and "epochz" in err


def test_estimate_missing_voltage_column(tmp_path, capsys, tiny_ckpt):
    data = tmp_path / "d.csv"
    data.write_text("time_s,current_A\n0,1\n1,1\n")
    code, _, err = run(["estimate", "--checkpoints", tiny_ckpt, "--data", data, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_INPUT and "voltage_V" in err


def test_estimate_single_iteration(tmp_path, capsys, flat_ckpt, short_csv):
    before = short_csv.read_bytes()
    code, out, _ = run(
        ["estimate", "--checkpoints", flat_ckpt, "--data", short_csv, "--max-iters", 1, "--out", tmp_path], capsys
    )
    assert code == EXIT_OK
    assert report(out)["iterations"] == "1"
    assert len(read_csv(tmp_path / "trajectory.csv")) == 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["lam"]) == {"pos", "neg"}
    for name in ("trajectory.svg", "voltage_fit.svg", "manifest.json"):
        assert (tmp_path / name).exists()
    assert short_csv.read_bytes() == before


def test_estimate_singular_surface_exits_numeric(tmp_path, capsys, tiny_ckpt, short_csv):
    code, _, err = run(["estimate", "--checkpoints", tiny_ckpt, "--data", short_csv, "--out", tmp_path], capsys)
    assert code == EXIT_NUMERIC and "stoichiometry" in err
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed"


def test_checkpoint_side_mismatch(tmp_path, capsys, tiny_ckpt, short_csv):
    swapped = tmp_path / "swapped"
    swapped.mkdir()
    (swapped / "pinn_pos.json").write_bytes((tiny_ckpt / "pinn_neg.json").read_bytes())
    (swapped / "pinn_neg.json").write_bytes((tiny_ckpt / "pinn_pos.json").read_bytes())
    code, _, err = run(["estimate", "--checkpoints", swapped, "--data", short_csv, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_INPUT and "electrode" in err


def test_sweep_two_by_two(tmp_path, capsys, flat_ckpt):
    cfg = tmp_path / "sweep.toml"
    cfg.write_text("[sweep]\nlam_pos = [0.0, 0.1]\nlam_neg = [0.05, 0.15]\n[estimate]\nmax_iters = 1\ncounts = [16, 4, 4]\n")
    code, out, _ = run(["sweep", "--checkpoints", flat_ckpt, "--config", cfg, "--out", tmp_path], capsys)
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "sweep.csv")
    assert [(r["lam_pos"], r["lam_neg"]) for r in rows] == [("0.0", "0.05"), ("0.0", "0.15"), ("0.1", "0.05"), ("0.1", "0.15")]
    assert report(out)["cells"] == "4"
    svg = (tmp_path / "sweep_heatmap.svg").read_text()
    for label in ("0", "10", "5", "15"):
        assert f">{label}<" in svg


def test_compare_layout(tmp_path, capsys, flat_ckpt):
    cfg = tmp_path / "cmp.toml"
    cfg.write_text(
        "[compare]\nnm_max_iters = 2\nfree_params = ['eps_pos', 'eps_neg', 'D_pos', 'D_neg']\n"
        "[estimate]\nmax_iters = 1\ncounts = [16, 4, 4]\n"
    )
    code, out, _ = run(["compare", "--checkpoints", flat_ckpt, "--config", cfg, "--out", tmp_path], capsys)
    assert code == EXIT_OK
    lines = (tmp_path / "compare.txt").read_text().splitlines()
    head = lines[0]
    for col in ("Method", "eps_pos | err %", "eps_neg | err %", "D_pos | err %", "D_neg | err %", "time s"):
        assert col in head
    assert [line.split()[0] for line in lines[2:]] == ["Initial", "Target", "PINN", "Nelder-Mead"]
    rows = read_csv(tmp_path / "compare.csv")
    assert {r["method"] for r in rows} == {"PINN", "Nelder-Mead"} and len(rows) == 8

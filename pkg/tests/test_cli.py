import csv
import json
import xml.etree.ElementTree as ET

import pytest

from flowsolve.cli import build_parser, load_config, main, resolve
from flowsolve.tinynet import save_checkpoint

SVG = "{http://www.w3.org/2000/svg}"


def rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, trained_2rf):
    path = tmp_path_factory.mktemp("ckpt") / "model.json"
    save_checkpoint(trained_2rf[1].params, path)
    return path


def test_train_writes_reproducible_checkpoint(tmp_path):
    for name in ("a", "b"):
        run("train", "--iterations", 30, "--batch-size", 32, "--out", tmp_path / name / "nested")
    a, b = tmp_path / "a" / "nested", tmp_path / "b" / "nested"
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    assert (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    loss = rows(a / "loss.csv")
    assert list(loss[0]) == ["iter", "loss"] and len(loss) == 30


def test_train_reflow_pipeline(tmp_path):
    run("train", "--iterations", 20, "--batch-size", 32, "--reflow", "--reflow-pairs", 100, "--out", tmp_path)
    for name in ("checkpoint_1rf.json", "checkpoint.json", "loss_1rf.csv", "loss.csv", "coupling.csv"):
        assert (tmp_path / name).exists()
    assert len(rows(tmp_path / "coupling.csv")) == 100
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "rectified_2" in summary["metrics"]


def test_convergence_report(tmp_path):
    run("convergence", "--steps", "4,8,10,16,32,64,128", "--out", tmp_path)
    table = rows(tmp_path / "order.csv")
    assert list(table[0]) == ["solver", "N", "dt", "error", "nfe"]
    assert sum(r["solver"] == "euler" for r in table) == 7
    ff10 = next(r for r in table if r["solver"] == "fireflow" and r["N"] == "10")
    assert ff10["nfe"] == "11"
    order = json.loads((tmp_path / "summary.json").read_text())["metrics"]["order"]
    assert order["fireflow"]["slope"] == pytest.approx(2.0, abs=0.2)
    assert order["euler"]["slope"] == pytest.approx(1.0, abs=0.15)


def test_convergence_constant_field_degenerate_not_fatal(tmp_path):
    run("convergence", "--field", "constant:1,-2", "--out", tmp_path)
    order = json.loads((tmp_path / "summary.json").read_text())["metrics"]["order"]
    assert all(v["degenerate"] for v in order.values())


def test_reconstruct_constant_field(tmp_path):
    run("reconstruct", "--field", "constant:1,-2", "--steps", "8", "--samples", 50, "--out", tmp_path)
    table = rows(tmp_path / "recon.csv")
    assert list(table[0]) == ["solver", "N", "nfe", "mean_err", "p50_err", "p95_err"]
    assert all(float(r["mean_err"]) <= 1e-12 for r in table)
    assert next(r for r in table if r["solver"] == "fireflow")["nfe"] == "18"


def test_reconstruct_checkpoint_fireflow_beats_euler(tmp_path, checkpoint):
    run("reconstruct", "--checkpoint", checkpoint, "--steps", "8,9", "--samples", 300, "--out", tmp_path)
    table = {(r["solver"], r["nfe"]): float(r["mean_err"]) for r in rows(tmp_path / "recon.csv")}
    assert table[("fireflow", "18")] < table[("euler", "18")]


def test_reconstruct_independent_of_worker_count(tmp_path, checkpoint):
    for w in (1, 3):
        run("reconstruct", "--checkpoint", checkpoint, "--steps", "4", "--samples", 600, "--workers", w,
            "--solver", "fireflow", "--out", tmp_path / f"w{w}")
    assert (tmp_path / "w1" / "recon.csv").read_bytes() == (tmp_path / "w3" / "recon.csv").read_bytes()


def test_velocity_error_two_series_with_reference(tmp_path, checkpoint):
    run("velocity-error", "--checkpoint", checkpoint, "--samples", 200, "--out", tmp_path)
    table = rows(tmp_path / "velocity_error.csv")
    assert {r["steps"] for r in table} == {"10", "20"}
    svg = ET.parse(tmp_path / "velocity_error.svg").getroot()
    lines = svg.findall(f"{SVG}polyline")
    assert len(lines) == 4
    assert sum(1 for p in lines if p.get("stroke-dasharray")) == 2


def test_straightness_collinear_zero(tmp_path):
    run("straightness", "--field", "constant:2,1", "--samples", 20, "--out", tmp_path)
    assert all(float(r["mean_straightness"]) <= 1e-12 for r in rows(tmp_path / "straightness.csv"))


def test_perturb_report(tmp_path):
    run("perturb", "--field", "linear:1", "--x0", 1.0, "--delta", 0.1, "--out", tmp_path)
    rep = json.loads((tmp_path / "summary.json").read_text())["metrics"]["perturbation"]
    assert rep["delta_0"] == pytest.approx(0.03679, abs=1e-5)
    assert rep["satisfied"] is True
    table = rows(tmp_path / "perturb.csv")
    assert float(table[-1]["delta_norm"]) == pytest.approx(rep["delta_0"], rel=1e-15)


def test_perturb_expansive_violation_reported(tmp_path):
    run("perturb", "--field", "linear:-1", "--out", tmp_path)
    rep = json.loads((tmp_path / "summary.json").read_text())["metrics"]["perturbation"]
    assert rep["satisfied"] is False


def test_energy(tmp_path, checkpoint):
    run("energy", "--checkpoint", checkpoint, "--samples", 300, "--out", tmp_path)
    table = rows(tmp_path / "energy.csv")
    assert [r["nfe"] for r in table] == ["20", "20", "20", "20"]
    assert all(float(r["energy_distance"]) >= 0 for r in table)


def test_golden_csv_byte_identical(tmp_path, checkpoint):
    for name in ("a", "b"):
        run("straightness", "--checkpoint", checkpoint, "--samples", 100, "--out", tmp_path / name)
        run("convergence", "--out", tmp_path / name)
    for f in ("straightness.csv", "order.csv", "order.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_svg_valid_and_backed_by_csv(tmp_path):
    run("convergence", "--out", tmp_path)
    root = ET.parse(tmp_path / "order.svg").getroot()
    assert root.tag == f"{SVG}svg"
    table = rows(tmp_path / "order.csv")
    # one polyline per solver, one vertex per CSV row
    pts = [len(p.get("points").split()) for p in root.findall(f"{SVG}polyline")]
    assert pts == [sum(r["solver"] == s for r in table) for s in ("euler", "midpoint", "heun", "fireflow")]
    assert len(root.findall(f"{SVG}circle")) == len(table)


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("# comment\nseed = 7\nsteps = 4,8\nfield = 'linear:-2'\nsamples = 12\n")
    args = build_parser().parse_args(["convergence", "--config", str(cfg_path), "--seed", "9"])
    cfg = resolve(args)
    assert cfg["seed"] == 9 and cfg["steps"] == (4, 8) and cfg["field"] == "linear:-2" and cfg["samples"] == 12


def test_config_echo_round_trips(tmp_path):
    run("perturb", "--seed", 5, "--out", tmp_path)
    echoed = load_config(tmp_path / "config.txt")
    args = build_parser().parse_args(["perturb", "--config", str(tmp_path / "config.txt")])
    assert resolve(args) == echoed
    assert echoed["seed"] == 5


def test_summary_lists_artifacts(tmp_path):
    run("perturb", "--out", tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["csv"] == ["perturb.csv"] and summary["svg"] == ["perturb.svg"]
    assert summary["nfe"] and summary["wall_clock_s"] >= 0


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["energy", "--field", "linear:-1", "--out", str(tmp_path)]) == 1
    assert main(["reconstruct", "--out", str(tmp_path)]) == 1
    assert main(["convergence", "--field", "nope:1", "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["convergence", "--solver", "rk4"])

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cellsearch.cell import Genotype
from cellsearch.cli import ConfigError, main, parse_config_text, read_trajectory

SMALL_CFG = """\
# desk-scale but tiny, for fast tests
task = synthetic
data_n = 160
data_dims = 4
data_classes = 2
data_noise = 0.8
data_seed = 3

cell_nodes = 5
cell_hidden = 4
cell_k = 2

mode = second-order
steps = 5
batch_size = 12
seed = 1
weight_lr = 0.05
eval_steps = 8
eval_batch_size = 32
snapshot_every = 2
"""

TOY_CFG = """\
task = toy
mode = second-order
steps = 40
weight_lr = 0.5
arch_lr = 0.1
arch_optimizer = sgd
anneal = false
momentum = 0.0
weight_decay_weights = 0.0
weight_decay_alpha = 0.0
clip_norm = none
"""


@pytest.fixture()
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return path


def read_tree(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# --- config parsing -----------------------------------------------------------


def test_parse_config_handles_comments_and_blanks():
    cfg = parse_config_text("# hello\n\nsteps = 7 # trailing\nanneal = false\n")
    assert cfg == {"steps": 7, "anneal": False}


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key 'stepz'"):
        parse_config_text("stepz = 7\n")


def test_parse_config_rejects_duplicates_and_bad_values():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("steps = 1\nsteps = 2\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("steps = seven\n")
    with pytest.raises(ConfigError, match="boolean"):
        parse_config_text("anneal = maybe\n")
    with pytest.raises(ConfigError, match="expected one of"):
        parse_config_text("mode = fast\n")


def test_parse_config_optional_floats():
    cfg = parse_config_text("unroll_lr = auto\nclip_norm = none\n")
    assert cfg == {"unroll_lr": None, "clip_norm": None}
    assert parse_config_text("unroll_lr = 0.5\n") == {"unroll_lr": 0.5}


# --- search command -------------------------------------------------------------


def test_search_missing_config_exits_2(tmp_path, capsys):
    code = main(["search", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_search_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("task = toy\nwat = 1\n")
    assert main(["search", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_search_toy_config_writes_trajectory_but_no_genotype(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CFG)
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "trajectory.csv").exists()
    assert (out / "summary.txt").exists()
    assert (out / "manifest.json").exists()
    assert not (out / "genotype.json").exists()
    assert not (out / "alpha").exists()
    body = (out / "trajectory.csv").read_text().splitlines()
    assert body[0] == "iteration,train_loss,val_loss,weight_lr,hvp_epsilon,alpha_snapshot"
    assert len(body) == 41


def test_search_synthetic_writes_valid_genotype_and_snapshots(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["search", "--config", str(small_cfg), "--out", str(out)]) == 0
    genotype = Genotype.from_json((out / "genotype.json").read_text())
    genotype.validate()
    assert (out / "alpha" / "step_000000.tsv").exists()  # cadence 2 from step 0
    assert (out / "alpha" / "step_000002.tsv").exists()
    assert (out / "alpha" / "step_000005.tsv").exists()  # final state
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [1]
    assert manifest["layout"]["trajectory"] == "trajectory.csv"
    rows = (out / "trajectory.csv").read_text().splitlines()[1:]
    assert len(rows) == 5
    assert rows[2].endswith("alpha/step_000002.tsv")


def test_search_rerun_is_byte_identical(small_cfg, tmp_path, capsys):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["search", "--config", str(small_cfg), "--out", str(out1)]) == 0
    assert main(["search", "--config", str(small_cfg), "--out", str(out2)]) == 0
    assert read_tree(out1) == read_tree(out2)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_search_divergence_exits_3(tmp_path, capsys):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text(SMALL_CFG + "\n".join([
        "", "weight_lr = 1e9", "clip_norm = none", "anneal = false",
    ]).replace("weight_lr = 0.05", ""))
    # rewrite cleanly: the original weight_lr line still present would duplicate
    cfg.write_text(SMALL_CFG.replace("weight_lr = 0.05", "weight_lr = 1e9")
                   + "clip_norm = none\nanneal = false\n")
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out)]) == 3
    assert "diverged" in capsys.readouterr().err
    assert (out / "trajectory.csv").exists()  # partial trajectory still written


def test_trajectory_file_round_trips(small_cfg, tmp_path):
    out = tmp_path / "run"
    main(["search", "--config", str(small_cfg), "--out", str(out)])
    records = read_trajectory(out / "trajectory.csv")
    assert [r.iteration for r in records] == list(range(5))
    assert all(np.isfinite(r.train_loss) and np.isfinite(r.val_loss) for r in records)
    assert records[2].snapshot == "alpha/step_000002.tsv"
    assert records[0].hvp_epsilon is not None  # second-order mode logs its step


def test_search_command_routes_random_mode(small_cfg, tmp_path, capsys):
    cfg = tmp_path / "rand.cfg"
    cfg.write_text(SMALL_CFG.replace("mode = second-order", "mode = random")
                   + "n_samples = 3\n")
    out = tmp_path / "rand_run"
    assert main(["search", "--config", str(cfg), "--out", str(out)]) == 0
    Genotype.from_json((out / "genotype.json").read_text()).validate()
    assert len((out / "samples.csv").read_text().splitlines()) == 4


def test_search_command_routes_joint_mode(small_cfg, tmp_path, capsys):
    cfg = tmp_path / "joint.cfg"
    cfg.write_text(SMALL_CFG.replace("mode = second-order", "mode = joint"))
    out = tmp_path / "joint_run"
    assert main(["search", "--config", str(cfg), "--out", str(out)]) == 0
    Genotype.from_json((out / "genotype.json").read_text()).validate()
    assert (out / "alpha" / "step_000002.tsv").exists()
    rows = (out / "trajectory.csv").read_text().splitlines()[1:]
    assert len(rows) == 5


# --- toy-bilevel command ---------------------------------------------------------


def test_toy_bilevel_second_order_reaches_optimum(capsys):
    assert main(["toy-bilevel", "--mode", "second-order", "--steps", "500",
                 "--unroll-lr", "0.5"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("alpha=")
    alpha = float(line.split()[0].split("=")[1])
    w = float(line.split()[1].split("=")[1])
    assert abs(alpha - 1.0) < 1e-3 and abs(w - 1.0) < 1e-3


def test_toy_bilevel_first_order_settles_elsewhere(capsys):
    assert main(["toy-bilevel", "--mode", "first-order", "--steps", "500"]) == 0
    line = capsys.readouterr().out.strip()
    alpha = float(line.split()[0].split("=")[1])
    w = float(line.split()[1].split("=")[1])
    assert abs(alpha - 2.0) < 1e-3 and abs(w - 2.0) < 1e-3


def test_toy_bilevel_zero_steps_prints_start_point(tmp_path, capsys):
    out = tmp_path / "toy"
    assert main(["toy-bilevel", "--steps", "0", "--out", str(out)]) == 0
    line = capsys.readouterr().out.strip()
    assert line == "alpha=2.000000 w=-2.000000"
    assert (out / "trajectory.csv").read_text().splitlines()[0].startswith("iteration")


# --- derive command -------------------------------------------------------------


def test_derive_round_trips_the_search_result(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--config", str(small_cfg), "--out", str(out)])
    derived = tmp_path / "derived.json"
    code = main(["derive", "--alpha", str(out / "alpha" / "step_000005.tsv"),
                 "--config", str(small_cfg), "--out", str(derived)])
    assert code == 0
    assert derived.read_bytes() == (out / "genotype.json").read_bytes()


def test_derive_rejects_mismatched_cell(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--config", str(small_cfg), "--out", str(out)])
    other = tmp_path / "other.cfg"
    other.write_text(SMALL_CFG.replace("cell_nodes = 5", "cell_nodes = 6"))
    code = main(["derive", "--alpha", str(out / "alpha" / "step_000005.tsv"),
                 "--config", str(other), "--out", str(tmp_path / "g.json")])
    assert code == 2
    assert "do not match" in capsys.readouterr().err


def test_derive_missing_snapshot_exits_2(small_cfg, tmp_path, capsys):
    code = main(["derive", "--alpha", str(tmp_path / "missing.tsv"),
                 "--config", str(small_cfg), "--out", str(tmp_path / "g.json")])
    assert code == 2


# --- evaluate command ------------------------------------------------------------


def test_evaluate_reports_deterministic_metrics(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--config", str(small_cfg), "--out", str(out)])
    capsys.readouterr()

    metrics1 = tmp_path / "m1.txt"
    code = main(["evaluate", "--genotype", str(out / "genotype.json"),
                 "--config", str(small_cfg), "--out", str(metrics1)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "val_accuracy" in stdout and "test_accuracy" in stdout

    metrics2 = tmp_path / "m2.txt"
    main(["evaluate", "--genotype", str(out / "genotype.json"),
          "--config", str(small_cfg), "--out", str(metrics2)])
    assert metrics1.read_bytes() == metrics2.read_bytes()


def test_evaluate_rejects_spec_mismatch(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["search", "--config", str(small_cfg), "--out", str(out)])
    other = tmp_path / "other.cfg"
    other.write_text(SMALL_CFG.replace("cell_hidden = 4", "cell_hidden = 8"))
    code = main(["evaluate", "--genotype", str(out / "genotype.json"),
                 "--config", str(other)])
    assert code == 2


def test_evaluate_rejects_toy_task(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CFG)
    code = main(["evaluate", "--genotype", str(tmp_path / "g.json"),
                 "--config", str(cfg)])
    assert code == 2


# --- random-search command --------------------------------------------------------


def test_random_search_writes_scores_and_best(small_cfg, tmp_path, capsys):
    out = tmp_path / "rs"
    code = main(["random-search", "--config", str(small_cfg), "--samples", "3",
                 "--out", str(out)])
    assert code == 0
    Genotype.from_json((out / "genotype.json").read_text()).validate()
    rows = (out / "samples.csv").read_text().splitlines()
    assert rows[0] == "sample,val_accuracy"
    assert len(rows) == 4
    best = max(float(r.split(",")[1]) for r in rows[1:])
    assert f"best_score: {best!r}" in (out / "summary.txt").read_text()


def test_random_search_rerun_byte_identical(small_cfg, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    main(["random-search", "--config", str(small_cfg), "--samples", "2", "--out", str(out1)])
    main(["random-search", "--config", str(small_cfg), "--samples", "2", "--out", str(out2)])
    assert read_tree(out1) == read_tree(out2)


# --- count command ----------------------------------------------------------------


def test_count_reference_values(capsys):
    assert main(["count", "--intermediates", "4", "--ops", "7"]) == 0
    out = capsys.readouterr().out
    assert "edges_per_cell: 14" in out
    assert "discrete_exact: 1037664180" in out
    assert "relaxed_exact: 4398046511104" in out
    assert "discrete_approx: 1.037e9" in out


def test_count_multiplicity_two(capsys):
    assert main(["count", "--intermediates", "4", "--ops", "7",
                 "--multiplicity", "2"]) == 0
    out = capsys.readouterr().out
    assert f"discrete_exact: {1_037_664_180**2}" in out
    assert f"relaxed_exact: {8**28}" in out


def test_count_rejects_unsupported_retained(capsys):
    assert main(["count", "--intermediates", "4", "--ops", "7", "--retained", "3"]) == 2


# --- grad-check command --------------------------------------------------------------


def test_grad_check_small_run_passes(capsys):
    code = main(["grad-check", "--seed", "3", "--cases", "3", "--problems", "1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "grad-check: PASS" in out
    assert "primitive" in out and "fidelity" in out


# --- console entry point ----------------------------------------------------------


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "cellsearch", "count", "--intermediates", "1", "--ops", "2"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "discrete_exact: 4" in proc.stdout  # C(2,2) * 2^2

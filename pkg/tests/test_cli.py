"""Command-line harness: outputs, determinism, exit codes."""
import filecmp
import json
import os

import numpy as np
import pytest

from localrb.cli import EXIT_CONFIG, EXIT_IO, EXIT_NONCONV, EXIT_OK, main, read_csv
from localrb.online import OnlineModel
from localrb.store import load_bundle

SMALL = ["--set", "problem.name=f2", "--set", "problem.grid=21", "--set", "train.lattice=15",
         "--set", "greedy.N=3", "--set", "greedy.tol=1e-2"]
SMALL_CD = ["--set", "problem.name=cd", "--set", "problem.h=0.1", "--set", "train.lattice=9",
            "--set", "greedy.N=3", "--set", "greedy.tol=1e-3"]
CSVS = ("convergence.csv", "samples.csv", "radii.csv", "metric.csv")


def offline(out, *extra):
    return main(["offline", *SMALL, *extra, "--out", str(out)])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert offline(out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def cd_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cd") / "run"
    assert main(["offline", *SMALL_CD, "--out", str(out)]) == EXIT_OK
    return out


def test_offline_writes_every_output(small_run):
    for name in CSVS + ("run.json", "config.txt", "bundle.lrb"):
        assert (small_run / name).exists(), name
    header, rows = read_csv(small_run / "convergence.csv")
    assert header == ["iteration", "K", "max_err", "eta_evals", "train_size"]
    assert float(rows[-1][2]) <= 1e-2
    assert (small_run / "convergence.csv").read_text().startswith("# seed=0\n")
    summary = json.loads((small_run / "run.json").read_text())
    _, samples = read_csv(small_run / "samples.csv")
    assert len(samples) == summary["K"] == int(rows[-1][1])
    _, metric = read_csv(small_run / "metric.csv")
    assert len(metric[0]) == 2 + 4


def test_csv_floats_round_trip(small_run):
    bundle = load_bundle(small_run / "bundle.lrb")
    _, samples = read_csv(small_run / "samples.csv")
    parsed = np.array([[float(v) for v in row[1:]] for row in samples])
    np.testing.assert_array_equal(parsed, bundle.sample_mus)


def test_reruns_are_identical(small_run, tmp_path):
    assert offline(tmp_path / "b") == EXIT_OK
    for name in CSVS + ("config.txt",):
        assert filecmp.cmp(small_run / name, tmp_path / "b" / name, shallow=False), name


def test_seed_flag_recorded(tmp_path):
    assert offline(tmp_path / "s", "--seed", "17", "--set", "greedy.random_start=true") == EXIT_OK
    for name in CSVS:
        assert (tmp_path / "s" / name).read_text().startswith("# seed=17\n")
    assert json.loads((tmp_path / "s" / "run.json").read_text())["seed"] == 17


def test_convergence_max_err_is_recomputable(small_run):
    # at convergence the stored samples and field reproduce the final sweep
    bundle = load_bundle(small_run / "bundle.lrb")
    model = OnlineModel(bundle)
    train = model.backend.domain.lattice(15)
    errs = [model.solve(mu, validate=True).error for mu in train]
    _, rows = read_csv(small_run / "convergence.csv")
    assert max(errs) == pytest.approx(float(rows[-1][2]), rel=1e-10)


def test_config_file_and_override_order(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("problem.name = f2\nproblem.grid = 21\ntrain.lattice = 15\ngreedy.N = 3\ngreedy.tol = 0.5\n")
    assert main(["offline", "--config", str(cfg), "--set", "greedy.tol=1e-2", "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "run.json").read_text())["tol"] == 1e-2


@pytest.mark.parametrize("override", ["greedy.tol=2", "greedy.N=0", "no.such=1", "train.mode=lazy",
                                      "train.Q_M=100", "train.generator=mesh"])
def test_invalid_config_exits_2(tmp_path, override, capsys):
    assert main(["offline", *SMALL, "--set", override, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_non_convergence_exits_3(tmp_path, capsys):
    assert offline(tmp_path / "n", "--set", "greedy.max_samples=5") == EXIT_NONCONV
    assert "non-convergence" in capsys.readouterr().err
    _, rows = read_csv(tmp_path / "n" / "convergence.csv")
    assert rows


def test_existing_outputs_need_force(small_run, capsys):
    assert offline(small_run) == EXIT_IO
    assert "--force" in capsys.readouterr().err


def test_missing_bundle_exits_4(tmp_path):
    assert main(["online", str(tmp_path / "none.lrb"), "--points", "0,0", "--out", str(tmp_path)]) == EXIT_IO
    assert main(["inspect", str(tmp_path / "none.lrb")]) == EXIT_IO


def test_corrupt_bundle_exits_4(small_run, tmp_path):
    data = bytearray((small_run / "bundle.lrb").read_bytes())
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "bad.lrb").write_bytes(bytes(data))
    assert main(["inspect", str(tmp_path / "bad.lrb")]) == EXIT_IO


def test_online_per_query_failures(small_run, tmp_path):
    out = tmp_path / "q"
    rc = main(["online", str(small_run / "bundle.lrb"), "--points", "0,0;0.1,0.2;2,2", "--validate",
               "--no-timings", "--out", str(out)])
    assert rc == EXIT_OK
    header, rows = read_csv(out / "queries.csv")
    assert header == ["mu1", "mu2", "r", "local", "error", "status"]
    assert [r[-1] for r in rows[:2]] == ["ok", "ok"]
    assert rows[2][-1].startswith("error:")
    assert all(len(r[3].split()) == 3 for r in rows[:2])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["failed"] == 1 and summary["queries"] == 3
    assert summary["max_err"] == pytest.approx(max(float(r[4]) for r in rows[:2]))


def test_online_all_queries_failing_is_nonzero(small_run, tmp_path):
    rc = main(["online", str(small_run / "bundle.lrb"), "--points", "2,2;3,3", "--out", str(tmp_path / "f")])
    assert rc != EXIT_OK


def test_online_without_timings_is_deterministic(small_run, tmp_path):
    args = ["online", str(small_run / "bundle.lrb"), "--lattice", "6", "--random", "7", "--seed", "5",
            "--validate", "--no-timings"]
    assert main([*args, "--out", str(tmp_path / "x")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "y")]) == EXIT_OK
    assert filecmp.cmp(tmp_path / "x" / "queries.csv", tmp_path / "y" / "queries.csv", shallow=False)
    header, rows = read_csv(tmp_path / "x" / "queries.csv")
    assert len(rows) == 36 + 7


def test_online_timings_and_box(small_run, tmp_path):
    out = tmp_path / "t"
    rc = main(["online", str(small_run / "bundle.lrb"), "--lattice", "4", "--box=-0.05,-0.05,0.05,0.05",
               "--out", str(out)])
    assert rc == EXIT_OK
    header, rows = read_csv(out / "queries.csv")
    assert header[-4:] == ["search_ms", "ortho_ms", "solve_ms", "status"]
    mus = np.array([[float(r[0]), float(r[1])] for r in rows])
    assert np.abs(mus).max() == pytest.approx(0.05)
    assert set(json.loads((out / "summary.json").read_text())["mean_timings_ms"]) == {
        "search_ms", "ortho_ms", "solve_ms"}


def test_online_without_queries_is_config_error(small_run, tmp_path):
    assert main(["online", str(small_run / "bundle.lrb"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_galerkin_sample_points_reproduced(cd_run, tmp_path):
    _, samples = read_csv(cd_run / "samples.csv")
    pts = ";".join(f"{r[1]},{r[2]}" for r in samples[:10])
    out = tmp_path / "s"
    assert main(["online", str(cd_run / "bundle.lrb"), f"--points={pts}", "--validate", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_err"] <= 1e-8


def test_snapshot_free_bundle_answers_but_cannot_validate(tmp_path, capsys):
    run = tmp_path / "nosnap"
    assert main(["offline", *SMALL_CD, "--set", "out.snapshots=false", "--out", str(run)]) == EXIT_OK
    out = tmp_path / "q"
    assert main(["online", str(run / "bundle.lrb"), "--lattice", "3", "--validate", "--out", str(out)]) == 0
    assert "snapshots unavailable" in capsys.readouterr().out
    summary = json.loads((out / "summary.json").read_text())
    assert summary["validation"] == "snapshots unavailable"
    assert summary["failed"] == 0 and summary["max_err"] is None
    _, rows = read_csv(out / "queries.csv")
    assert all(r[-1] == "snapshots unavailable" and r[4] == "" for r in rows)


def test_compare_same_run_gives_unit_ratios(small_run, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", str(small_run), str(small_run), "--out", str(out)]) == EXIT_OK
    verdict = json.loads((out / "verdict.json").read_text())
    assert verdict["snapshot_ratio"] == 1.0 and verdict["eval_ratio"] == 1.0
    header, rows = read_csv(out / "comparison.csv")
    assert header[0] == "run"
    assert sum(r[0] == "A" for r in rows) == sum(r[0] == "B" for r in rows)


def test_compare_runs_configs(tmp_path):
    cfg_a, cfg_b = tmp_path / "a.txt", tmp_path / "b.txt"
    base = "problem.name = f2\nproblem.grid = 21\ntrain.lattice = 15\ngreedy.N = 3\ngreedy.tol = 1e-2\n"
    cfg_a.write_text(base)
    cfg_b.write_text(base + "metric.mode = isotropic\n")
    out = tmp_path / "cmp"
    assert main(["compare", str(cfg_a), str(cfg_b), "--out", str(out)]) == EXIT_OK
    verdict = json.loads((out / "verdict.json").read_text())
    assert verdict["B"]["metric_mode"] == "isotropic"
    assert verdict["snapshot_ratio"] == verdict["A"]["K"] / verdict["B"]["K"]
    assert os.path.exists(out / "A" / "bundle.lrb") and os.path.exists(out / "B" / "bundle.lrb")


def test_compare_rejects_different_problems(small_run, cd_run, tmp_path, capsys):
    assert main(["compare", str(small_run), str(cd_run), "--out", str(tmp_path / "c")]) == EXIT_CONFIG
    assert "different problems" in capsys.readouterr().err


def test_inspect_prints_metadata(small_run, capsys):
    assert main(["inspect", str(small_run / "bundle.lrb")]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    summary = json.loads((small_run / "run.json").read_text())
    assert info["K"] == summary["K"] and info["N"] == 3 and info["snapshots"] is True
    assert info["descriptor"]["family"] == "f2"
    assert info["last_iteration"]["K"] == summary["K"]

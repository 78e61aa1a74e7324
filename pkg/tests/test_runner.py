import json

import numpy as np
import pytest

from piinn import cli
from piinn.config import ConfigError, ExperimentConfig
from piinn.flow import inn_forward
from piinn.networks import assemble_basis, load_checkpoint, restore_params
from piinn.runner import (Run, StageError, convergence_sweep, noise_sweep, read_table, report,
                          run_experiment, sub_seed)

SMALL_1D = {"n_grid": 51, "n_layers": 4, "inn_hidden": [16], "nb_hidden": [16, 16]}


def tiny_grf(tmp_path, **over):
    doc = {
        "experiment": "diffusion-grf",
        "problem": dict(SMALL_1D),
        "train": {"n_train": 128, "epochs": 3},
        "inversion": {"n_samples": 300, "fit_steps": 30},
        "baseline": {"pilot_steps": 300, "mcmc_steps": 1500, "burn_in": 100, "thin": 2,
                     "compare_burn_in": 50},
        "sweep": {"counts": [20, 50], "seeds": [0, 1]},
        "out": str(tmp_path),
    }
    for k, v in over.items():
        doc[k] = dict(doc.get(k, {}), **v) if isinstance(v, dict) else v
    return ExperimentConfig.from_dict(doc)


@pytest.fixture(scope="module")
def grf_run(tmp_path_factory):
    return run_experiment(tiny_grf(tmp_path_factory.mktemp("grf")))


@pytest.fixture(scope="module")
def kin_run(tmp_path_factory):
    cfg = ExperimentConfig.from_dict({
        "experiment": "kinematics-inn1", "problem": {"n_layers": 2, "hidden": [8]},
        "train": {"n_train": 128, "epochs": 2}, "inversion": {"n_samples": 101},
        "baseline": {"abc_eps": 0.1, "abc_n": 50}, "out": str(tmp_path_factory.mktemp("kin"))})
    return run_experiment(cfg)


# -- configuration ----------------------------------------------------------------


def test_sub_seed_deterministic_and_distinct():
    assert sub_seed(3, "train") == sub_seed(3, "train")
    assert len({sub_seed(3, k) for k in ("train", "data", "mcmc")}) == 3
    assert sub_seed(3, "train") != sub_seed(4, "train")


def test_config_defaults():
    cfg = ExperimentConfig.default("diffusion-grf")
    assert cfg.train["epochs"] == 1000 and cfg.train["lr"] == 1e-3
    assert cfg.observation["sigma"] == 0.01 and cfg.problem["n_sensors"] == 11
    assert cfg.sweep["noise"] == [0.005, 0.01, 0.025, 0.05]
    kin = ExperimentConfig.default("kinematics-inn1")
    assert kin.train["epochs"] == 1200 and kin.train["n_train"] == 4000
    assert kin.baseline["abc_eps"] == 0.035


def test_reduced_presets():
    assert ExperimentConfig.default("darcy", reduced=True).problem["n_grid"] == 32
    tomo = ExperimentConfig.from_dict({"experiment": "tomography", "reduced": True})
    assert tomo.problem["n_fsm"] == 51 and tomo.train["n_train"] == 2000


def test_config_json_round_trip(tmp_path):
    cfg = tiny_grf(tmp_path)
    f = tmp_path / "c.json"
    f.write_text(cfg.dumps())
    assert ExperimentConfig.load(f) == cfg


@pytest.mark.parametrize("doc,msg", [
    ({"experiment": "diffusion-grf", "bogus": 1}, "unknown config fields"),
    ({"experiment": "nope"}, "unknown experiment"),
    ({"train": {}}, "experiment"),
    ({"experiment": "diffusion-grf", "train": {"n_train": 10}}, "batch"),
    ({"experiment": "diffusion-grf", "problem": {"P": 12}}, "P"),
    ({"experiment": "diffusion-grf", "problem": {"widths": 3}}, "bad problem settings"),
])
def test_config_errors(doc, msg):
    with pytest.raises((ConfigError, ValueError), match=msg):
        ExperimentConfig.from_dict(doc)


# -- end-to-end runs ----------------------------------------------------------------


def test_layout(grf_run):
    names = {"config.json", "manifest.json", "loss_history.csv", "samples.csv", "chain.csv",
             "chain_summary.json", "metrics.json", "checkpoint.bin", "train.csv",
             "observations.json", "inversion.json", "tables"}
    assert names <= {f.name for f in grf_run.path.iterdir()}
    assert grf_run.path.parent.name == "diffusion-grf"
    m = json.loads((grf_run.path / "manifest.json").read_text())
    assert set(m["stages"]) == {"gen-data", "train", "invert", "mcmc", "evaluate"}
    assert len(m["stages"]["train"]["checkpoint_sha256"]) == 64


def test_metrics_byte_identical_on_rerun(grf_run, tmp_path):
    again = run_experiment(grf_run.cfg, path=tmp_path / "again")
    for name in ("metrics.json", "samples.csv", "chain.csv", "loss_history.csv"):
        assert (again.path / name).read_bytes() == (grf_run.path / name).read_bytes()


def test_metrics_recomputed_from_samples(grf_run):
    """Every number in metrics.json follows from the stored CSVs and checkpoint."""
    path, p = grf_run.path, grf_run.cfg.build_problem()
    metrics = json.loads((path / "metrics.json").read_text())
    header, rows = read_table(path / "samples.csv")
    arr = np.array(rows, dtype=float)
    lam = arr[:, [header.index("lam%d" % j) for j in range(p.F)]]
    z = arr[:, [header.index("z%d" % j) for j in range(p.model.ndim_z)]]
    summ = json.loads((path / "chain_summary.json").read_text())
    chain = np.loadtxt(path / "chain.csv", delimiter=",", skiprows=1)[:, 1:-1]
    ref = chain[1 + summ["burn_in"]::summ["thin"]]
    obs = json.loads((path / "observations.json").read_text())

    f, rf = p.field_grid(lam), p.field_grid(ref)
    got = metrics["posterior"]
    assert got["n_samples"] == len(lam)
    assert np.isclose(got["mean_pointwise_err_mean"], np.mean(np.abs(f.mean(0) - rf.mean(0))), rtol=1e-12)
    assert np.isclose(got["mean_pointwise_err_std"], np.mean(np.abs(f.std(0) - rf.std(0))), rtol=1e-12)
    lm, rm = lam.mean(0), ref.mean(0)
    assert np.isclose(got["rel_l2_lam_mean_vs_mcmc"], np.linalg.norm(lm - rm) / np.linalg.norm(rm), rtol=1e-12)
    tf = p.field_grid(np.array(obs["lam_true"]))
    assert np.isclose(got["rel_l2_field_mean_vs_truth"],
                      np.linalg.norm(f.mean(0) - tf) / np.linalg.norm(tf), rtol=1e-12)
    assert metrics["mcmc"]["n_samples"] == len(ref)

    restore_params(p.params, load_checkpoint(path / "checkpoint.bin"))
    c_back, z_back, _ = inn_forward(p.model, lam)
    inv = json.loads((path / "inversion.json").read_text())
    # the CSV stores 17 significant digits, so the round trip is exact to rounding
    assert np.isclose(np.max(np.abs(c_back - inv["c"])), metrics["inversion"]["fiber_max_err"],
                      rtol=0, atol=1e-12)
    assert np.allclose(z_back, z, atol=1e-9)
    Phi = np.asarray(assemble_basis(p.basis, np.array(obs["sensors"])))
    resid = np.linalg.norm(np.array(obs["values"]) - Phi @ np.array(inv["c"]))
    assert np.isclose(metrics["inversion"]["residual"], resid, rtol=1e-10)


def test_fiber_property_in_run(grf_run):
    assert json.loads((grf_run.path / "metrics.json").read_text())["inversion"]["fiber_max_err"] <= 1e-9


def test_square_noiseless_inversion_residual(tmp_path):
    cfg = tiny_grf(tmp_path, problem={"n_sensors": 5}, observation={"sigma": 0.0},
                   inversion={"rho": 0.0})
    run = run_experiment(cfg, stages=["gen-data", "train", "invert", "evaluate"])
    metrics = json.loads((run.path / "metrics.json").read_text())
    assert metrics["inversion"]["residual"] <= 1e-6 and "mcmc" not in metrics
    with pytest.raises(StageError, match="sigma > 0"):
        run_experiment(cfg, stages=["mcmc"], path=run.path)


def test_noise_sweep_table(grf_run):
    rows = noise_sweep(grf_run)
    header, stored = read_table(grf_run.path / "tables" / "noise_sweep.csv")
    assert header[0] == "sigma" and len(rows) == len(stored) == 4
    assert [float(r[0]) for r in stored] == [0.005, 0.01, 0.025, 0.05]


def test_convergence_table(grf_run):
    rows = convergence_sweep(grf_run)
    assert len(rows) == 4
    header, stored = read_table(grf_run.path / "tables" / "convergence.csv")
    assert header == ["seed", "n_samples", "pi_inn_rel_l2", "mcmc_rel_l2"]
    assert all(float(r[2]) >= 0 and float(r[3]) >= 0 for r in stored)


def test_kinematics_boxplot_matches_order_statistics(kin_run):
    header, rows = read_table(kin_run.path / "samples.csv")
    arr = np.array(rows, dtype=float)
    _, box = read_table(kin_run.path / "tables" / "boxplot.csv")
    inn_rows = [r for r in box if r[0] == "inn"]
    assert len(inn_rows) == 2 and any(r[0] == "abc" for r in box)
    for r in inn_rows:
        err = np.sort(arr[arr[:, 0] == int(r[1]), header.index("rel_err")])
        n = len(err)
        assert float(r[2]) == err[0] and float(r[6]) == err[-1]
        assert float(r[4]) == err[n // 2]  # 101 samples: the median is an order statistic
        assert float(r[3]) == err[25] and float(r[5]) == err[75]


def test_kinematics_samples_map_to_test_points(kin_run):
    header, rows = read_table(kin_run.path / "samples.csv")
    inv = json.loads((kin_run.path / "inversion.json").read_text())
    assert max(inv.values()) <= 1e-9


def test_stage_error_names_stage(tmp_path):
    run = Run(tiny_grf(tmp_path))
    with pytest.raises(StageError, match="'invert'.*train stage first"):
        run.stage("invert", __import__("piinn.runner").runner.invert, run)


def test_report_collects_runs(grf_run, kin_run, tmp_path):
    rows = report(grf_run.path.parent.parent)
    assert any(r[1] == "posterior.mean_pointwise_err_mean" for r in rows)
    assert (grf_run.path.parent.parent / "report.csv").exists()


# -- CLI -----------------------------------------------------------------------------------


def test_cli_show_config(capsys):
    assert cli.main(["run", "--experiment", "darcy", "--reduced", "--show-config"]) == 0
    assert json.loads(capsys.readouterr().out)["problem"]["n_grid"] == 32


def test_cli_stages(tmp_path, capsys):
    cfg = tiny_grf(tmp_path)
    f = tmp_path / "cfg.json"
    f.write_text(cfg.dumps())
    for cmd in ("gen-data", "train", "invert", "mcmc", "evaluate"):
        assert cli.main([cmd, "--config", str(f), "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(set(out)) == 1 and "seed3-" in out[0]
    assert cli.main(["report", "--out", str(tmp_path / "o")]) == 0


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["train"]) == 2
    assert "give --config or --experiment" in capsys.readouterr().err
    f = tmp_path / "bad.json"
    f.write_text(json.dumps({"experiment": "diffusion-grf", "bogus": 1}))
    assert cli.main(["train", "--config", str(f)]) == 2
    cfg = tiny_grf(tmp_path)
    g = tmp_path / "ok.json"
    g.write_text(cfg.dumps())
    assert cli.main(["invert", "--config", str(g), "--out", str(tmp_path / "x")]) == 2
    assert "stage 'invert' failed" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])

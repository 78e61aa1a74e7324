"""Stage orchestration: gen-data -> train -> invert -> baselines -> evaluate.

Every stage reads and writes files inside one run directory, so stages can
be run separately from the CLI or chained by ``run_experiment``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import zlib
from pathlib import Path

import numpy as np

from .baselines import (abc_rejection, effective_sample_size, metropolis_sample, write_chain)
from .config import ExperimentConfig
from .engine import fit_coefficients, importance_reweight, sample_posterior, train
from .flow import inn_forward
from .metrics import (boxplot_quantiles, mean_pointwise_error, posterior_field_stats,
                      relative_l2, relative_l2_rows, z_diagnostics)
from .networks import config_hash, load_checkpoint, restore_params, save_checkpoint
from .oracles import read_dataset, with_noise, write_dataset


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__("stage %r failed: %s: %s" % (stage, type(cause).__name__, cause))
        self.stage = stage


def sub_seed(seed, name):
    """Independent integer seed for a named purpose."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def run_dir(cfg: ExperimentConfig):
    return Path(cfg.out) / cfg.experiment / ("seed%d-%s" % (cfg.seed, config_hash(cfg.to_dict())))


def _fmt(v):
    return "%.17g" % v


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_table(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [r for r in rd]
    return header, rows


class Run:
    """A run directory bound to its config and problem instance."""

    def __init__(self, cfg: ExperimentConfig, path=None):
        self.cfg = cfg
        self.path = Path(path) if path is not None else run_dir(cfg)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "tables").mkdir(exist_ok=True)
        self.problem = cfg.build_problem()
        self._manifest_path = self.path / "manifest.json"
        cfg_file = self.path / "config.json"
        cfg_file.write_text(cfg.dumps() + "\n")

    # -- bookkeeping -------------------------------------------------------

    def manifest(self):
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text())
        return {"experiment": self.cfg.experiment, "seed": self.cfg.seed,
                "config_hash": config_hash(self.cfg.to_dict()), "stages": {}}

    def record(self, stage, info):
        m = self.manifest()
        m["stages"][stage] = info
        _write_json(self._manifest_path, m)

    def stage(self, name, fn, *args):
        t0 = time.perf_counter()
        try:
            out = fn(*args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        info = {"seconds": round(time.perf_counter() - t0, 3)}
        if isinstance(out, dict):
            info.update(out)
        self.record(name, info)
        return out

    @property
    def seeds(self):
        s = self.cfg.seed
        return {k: sub_seed(s, k) for k in ("data", "train", "sample", "mcmc", "abc", "fit")}

    # -- stage helpers -----------------------------------------------------

    def load_params(self):
        ck = self.path / "checkpoint.bin"
        if not ck.exists():
            raise FileNotFoundError("no checkpoint in %s; run the train stage first" % self.path)
        restore_params(self.problem.params, load_checkpoint(ck))

    def load_observations(self):
        f = self.path / "observations.json"
        if not f.exists():
            raise FileNotFoundError("no observations in %s; run gen-data first" % self.path)
        return json.loads(f.read_text())


# ---------------------------------------------------------------------------
# stages


def gen_data(run: Run):
    cfg, p = run.cfg, run.problem
    n = cfg.train["n_train"]
    data = p.training_data(n, run.seeds["data"])
    if "y" in data:
        sensor_vals = data["y"]
    else:
        sensor_vals = np.array([p.forward(lam) for lam in data["lam"]])
    manifest = {"experiment": cfg.experiment, "n": n, "seed": run.seeds["data"],
                "sensors": getattr(p, "sensors", None)}
    write_dataset(run.path / "train.csv", data["lam"], sensor_vals, manifest)
    obs = {}
    if cfg.kind == "kinematics":
        x = np.asarray(cfg.observation["test_points"], dtype=np.float64)
        obs = {"test_x": x, "test_y": p.forward(x)}
    else:
        o = cfg.observation
        lam_true = p.prior.sample(seed=o["truth_seed"])
        ob = p.observe_truth(lam_true, o["sigma"], o["noise_seed"])
        obs = {"lam_true": lam_true, "sensors": ob.sensors, "clean": ob.clean,
               "values": ob.values, "sigma": ob.sigma, "noise_seed": ob.seed,
               "truth_seed": o["truth_seed"]}
    _write_json(run.path / "observations.json", obs)
    return {"n_train": n, "data_seed": run.seeds["data"]}


def train_stage(run: Run):
    cfg, p = run.cfg, run.problem
    lam, sens = read_dataset(run.path / "train.csv")
    data = {"lam": lam}
    if cfg.kind == "kinematics":
        data["y"] = sens
    tc = cfg.train_config()
    tc.seed = run.seeds["train"]
    res = train(p.model, p.basis, p.prior, p, tc, data)
    keys = [k for k in res.history[0] if k not in ("epoch", "lr")]
    _write_table(run.path / "loss_history.csv", ["epoch", "lr", *keys],
                 [[h["epoch"], h["lr"], *(h[k] for k in keys)] for h in res.history])
    ck = save_checkpoint(p.params, run.path / "checkpoint.bin", tc.seed, cfg.to_dict())
    return {"n_steps": res.n_steps, "checkpoint_sha256": ck["sha256"],
            "loss_history": "loss_history.csv",
            "final_total": res.history[-1]["total"]}


def posterior_samples(p, obs, cfg, seed, sigma_values=None):
    """Fit c~ to the observations and sample the fiber; returns (fit, draws)."""
    inv = cfg.inversion
    values = np.asarray(obs["values"] if sigma_values is None else sigma_values)
    w = p.params.arrays()
    fit = fit_coefficients(p.basis, np.asarray(obs["sensors"]), values, p.model, p.prior,
                           rho=inv.get("rho", 1e-3), steps=inv.get("fit_steps", 2000),
                           lr=inv.get("fit_lr", 1e-2), scale=p.obs_scale, S=inv.get("S", 16),
                           seed=sub_seed(seed, "fit"), w=w)
    draws = sample_posterior(p.model, fit.c, inv["n_samples"], seed=seed, w=w)
    return fit, draws


def fiber_error(model, draws, w=None):
    c, _, _ = inn_forward(model, draws.samples, w)
    return float(np.max(np.abs(np.asarray(c) - draws.c)))


def invert(run: Run):
    cfg, p = run.cfg, run.problem
    run.load_params()
    obs = run.load_observations()
    w = p.params.arrays()
    if cfg.kind == "kinematics":
        rows, info = [], {}
        for k, y in enumerate(np.asarray(obs["test_y"])):
            draws = sample_posterior(p.model, y, cfg.inversion["n_samples"],
                                     seed=sub_seed(run.seeds["sample"], "test%d" % k), w=w)
            err = relative_l2_rows(p.forward(draws.samples), y)
            info["test%d_fiber_max_err" % k] = fiber_error(p.model, draws, w)
            for i, (lam, zz, e) in enumerate(zip(draws.samples, draws.z, err)):
                rows.append([k, i, *lam, *zz, e])
        header = ["test", "sample_id", *("lam%d" % j for j in range(p.F)),
                  *("z%d" % j for j in range(p.model.ndim_z)), "rel_err"]
        _write_table(run.path / "samples.csv", header, rows)
        _write_json(run.path / "inversion.json", info)
        return info
    fit, draws = posterior_samples(p, obs, cfg, run.seeds["sample"])
    if cfg.inversion.get("importance"):
        draws = importance_reweight(draws, p.exact_posterior(_obs_set(obs)), p.model, p.prior, w)
    weights = draws.weights if draws.weights is not None else np.full(len(draws), 1.0 / len(draws))
    header = ["sample_id", *("lam%d" % j for j in range(p.F)),
              *("z%d" % j for j in range(p.model.ndim_z)), "weight"]
    _write_table(run.path / "samples.csv", header,
                 [[i, *lam, *zz, wt] for i, (lam, zz, wt) in enumerate(zip(draws.samples, draws.z, weights))])
    info = {"c": fit.c, "c_ols": fit.c_ols, "residual": fit.residual, "ridge": fit.ridge,
            "fiber_max_err": fiber_error(p.model, draws, w), "ess": draws.ess,
            "n_samples": len(draws)}
    _write_json(run.path / "inversion.json", info)
    return {k: v for k, v in info.items() if k in ("residual", "fiber_max_err", "ess")}


def _obs_set(obs):
    from .oracles import ObservationSet
    return ObservationSet(np.asarray(obs["sensors"]), np.asarray(obs["clean"]),
                          np.asarray(obs["values"]), float(obs["sigma"]), obs.get("noise_seed"))


def reference_chain(p, obs_set, baseline, seed, init=None):
    """Pilot random-walk chain, then a long chain with the pilot's scaled covariance."""
    target = p.exact_posterior(obs_set)
    x0 = p.prior.mean.copy() if init is None else init
    pilot = metropolis_sample(target, x0, baseline.get("proposal_std", 0.01),
                              baseline["pilot_steps"], seed=sub_seed(seed, "pilot"))
    half = pilot.states[len(pilot.states) // 2:]
    d = p.F
    cov = np.cov(half.T) * (2.38 ** 2 / d) + 1e-10 * np.eye(d)
    chain = metropolis_sample(target, pilot.states[-1], n_steps=baseline["mcmc_steps"],
                              seed=sub_seed(seed, "main"), proposal_cov=cov,
                              burn_in=baseline.get("burn_in", 0), thin=baseline.get("thin", 1))
    chain.meta.update({"pilot_acceptance": pilot.acceptance_rate})
    return chain


def mcmc(run: Run):
    cfg, p = run.cfg, run.problem
    if cfg.kind == "kinematics":
        raise ValueError("kinematics observations are noise-free; use the abc stage")
    obs = run.load_observations()
    if not obs["sigma"] > 0:
        raise ValueError("the exact posterior needs sigma > 0 (got %g)" % obs["sigma"])
    chain = reference_chain(p, _obs_set(obs), cfg.baseline, run.seeds["mcmc"])
    summary = write_chain(run.path / "chain.csv", chain, run.path / "chain_summary.json")
    return {"acceptance_rate": summary["acceptance_rate"], "n_steps": summary["n_steps"]}


def abc(run: Run):
    cfg, p = run.cfg, run.problem
    if cfg.kind != "kinematics":
        raise ValueError("the abc stage applies to the kinematics experiment")
    obs = run.load_observations()
    rows, info = [], {}
    for k, y in enumerate(np.asarray(obs["test_y"])):
        res = abc_rejection(lambda n, rng: p.prior.sample(n, rng=rng), p.forward, y,
                            cfg.baseline["abc_eps"], cfg.baseline["abc_n"],
                            seed=sub_seed(run.seeds["abc"], "test%d" % k))
        err = relative_l2_rows(p.forward(res.samples), y)
        info["test%d_acceptance" % k] = res.acceptance_fraction
        rows += [[k, i, *lam, e] for i, (lam, e) in enumerate(zip(res.samples, err))]
    _write_table(run.path / "tables" / "abc_samples.csv",
                 ["test", "sample_id", *("lam%d" % j for j in range(p.F)), "rel_err"], rows)
    return info


# ---------------------------------------------------------------------------
# evaluation


def load_samples(run: Run):
    header, rows = read_table(run.path / "samples.csv")
    arr = np.array(rows, dtype=np.float64)
    cols = {h: i for i, h in enumerate(header)}
    lam = arr[:, [cols["lam%d" % j] for j in range(run.problem.F)]]
    return header, arr, cols, lam


def load_chain(run: Run):
    f = run.path / "chain.csv"
    if not f.exists():
        return None
    summary = json.loads((run.path / "chain_summary.json").read_text())
    arr = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
    states = arr[:, 1:-1]
    return states[1 + summary["burn_in"]::summary["thin"]]


def evaluate_samples(problem, lam, weights=None, ref=None, truth=None):
    """Field statistics of posterior samples against references; pure function of inputs."""
    fields = problem.field_grid(lam)
    mean, std = posterior_field_stats(fields, weights)
    out = {"n_samples": int(len(lam))}
    lam_mean = lam.mean(0) if weights is None else weights @ lam / weights.sum()
    if ref is not None:
        rf = problem.field_grid(ref)
        rmean, rstd = posterior_field_stats(rf)
        out["mean_pointwise_err_mean"] = mean_pointwise_error(mean, rmean)
        out["mean_pointwise_err_std"] = mean_pointwise_error(std, rstd)
        out["rel_l2_lam_mean_vs_mcmc"] = relative_l2(lam_mean, ref.mean(0))
        out["rel_l2_field_mean_vs_mcmc"] = relative_l2(mean, rmean)
    if truth is not None:
        out["rel_l2_field_mean_vs_truth"] = relative_l2(mean, problem.field_grid(truth))
    return out


def evaluate(run: Run):
    cfg, p = run.cfg, run.problem
    header, arr, cols, lam = load_samples(run)
    metrics = {"experiment": cfg.experiment}
    if cfg.kind == "kinematics":
        abc_file = run.path / "tables" / "abc_samples.csv"
        abc_err = None
        if abc_file.exists():
            _, ar = read_table(abc_file)
            ar = np.array(ar, dtype=np.float64)
            abc_err = ar
        rows = []
        for k in np.unique(arr[:, cols["test"]]).astype(int):
            err = arr[arr[:, cols["test"]] == k, cols["rel_err"]]
            q = boxplot_quantiles(err)
            metrics["test%d" % k] = {"median_rel_err": q["median"], "mean_rel_err": float(err.mean()),
                                     "quantiles": q}
            rows.append(["inn", k, *q.values()])
            if abc_err is not None:
                e = abc_err[abc_err[:, 0] == k, -1]
                qa = boxplot_quantiles(e)
                metrics["test%d" % k]["abc_median_rel_err"] = qa["median"]
                rows.append(["abc", k, *qa.values()])
        _write_table(run.path / "tables" / "boxplot.csv",
                     ["method", "test", "min", "q1", "median", "q3", "max"], rows)
    else:
        obs = run.load_observations()
        wts = arr[:, cols["weight"]]
        ref = load_chain(run)
        truth = np.asarray(obs["lam_true"])
        metrics["posterior"] = evaluate_samples(p, lam, None, ref, truth)
        if not np.allclose(wts, wts[0]):
            metrics["posterior_weighted"] = evaluate_samples(p, lam, wts, ref, truth)
        if ref is not None:
            metrics["mcmc"] = {"n_samples": int(len(ref)),
                               "min_ess": float(effective_sample_size(ref).min())}
        inv = json.loads((run.path / "inversion.json").read_text())
        metrics["inversion"] = {k: inv[k] for k in ("residual", "ridge", "fiber_max_err")}
    _write_json(run.path / "metrics.json", metrics)
    return {"metrics": "metrics.json"}


# ---------------------------------------------------------------------------
# sweeps


def _chain_prefix_errors(chain_states, ref_mean, counts, burn_in):
    post = chain_states[1 + burn_in:]
    return [relative_l2(post[:n].mean(0), ref_mean) if n <= len(post) else float("nan")
            for n in counts]


def noise_sweep(run: Run, levels=None):
    """Posterior-mean discrepancy PI-INN vs reference MCMC across noise levels.

    The noise direction is held fixed (common random numbers) and scaled by
    each sigma, so only the noise magnitude changes between rows.
    """
    cfg, p = run.cfg, run.problem
    run.load_params()
    obs = run.load_observations()
    levels = cfg.sweep["noise"] if levels is None else levels
    base = _obs_set(obs)
    rows = []
    for sigma in levels:
        ob = with_noise(base, sigma, cfg.observation["noise_seed"])
        fit, draws = posterior_samples(p, {"sensors": ob.sensors, "values": ob.values}, cfg,
                                       run.seeds["sample"])
        chain = reference_chain(p, ob, cfg.baseline, sub_seed(run.seeds["mcmc"], "sigma%g" % sigma))
        ev = evaluate_samples(p, draws.samples, None, chain.samples)
        rows.append([sigma, ev["mean_pointwise_err_mean"], ev["mean_pointwise_err_std"],
                     ev["rel_l2_lam_mean_vs_mcmc"], chain.acceptance_rate])
    _write_table(run.path / "tables" / "noise_sweep.csv",
                 ["sigma", "mean_err", "std_err", "rel_l2_lam_mean", "mcmc_acceptance"], rows)
    return rows


def convergence_sweep(run: Run, seeds=None, counts=None):
    """Relative L2 error of the sample mean vs sample count, PI-INN against MCMC.

    Each seed draws a new truth, noise realization, PI-INN sample set and
    MCMC chain; the reference mean comes from a separate long adapted chain.
    MCMC chains use the fixed isotropic proposal from the prior mean.
    """
    cfg, p = run.cfg, run.problem
    run.load_params()
    seeds = cfg.sweep["seeds"] if seeds is None else seeds
    counts = cfg.sweep["counts"] if counts is None else counts
    o, b = cfg.observation, cfg.baseline
    rows = []
    for s in seeds:
        lam_true = p.prior.sample(seed=sub_seed(o["truth_seed"], "seed%d" % s))
        ob = p.observe_truth(lam_true, o["sigma"], sub_seed(o["noise_seed"], "seed%d" % s))
        ref = reference_chain(p, ob, b, sub_seed(run.seeds["mcmc"], "ref%d" % s))
        ref_mean = ref.samples.mean(0)
        _, draws = posterior_samples(p, {"sensors": ob.sensors, "values": ob.values},
                                     cfg, sub_seed(run.seeds["sample"], "seed%d" % s))
        burn = b.get("compare_burn_in", 1000)
        cmp_chain = metropolis_sample(p.exact_posterior(ob), p.prior.mean.copy(),
                                      b.get("proposal_std", 0.01), burn + max(counts),
                                      seed=sub_seed(run.seeds["mcmc"], "cmp%d" % s))
        mc_err = _chain_prefix_errors(cmp_chain.states, ref_mean, counts, burn)
        for n, me in zip(counts, mc_err):
            pi = relative_l2(draws.samples[:n].mean(0), ref_mean) if n <= len(draws) else float("nan")
            rows.append([s, n, pi, me])
    _write_table(run.path / "tables" / "convergence.csv",
                 ["seed", "n_samples", "pi_inn_rel_l2", "mcmc_rel_l2"], rows)
    return rows


def diagnostics(run: Run, n=10000):
    """Latent-independence diagnostic over prior pushforwards."""
    p = run.problem
    run.load_params()
    lam = p.prior.sample(n, seed=sub_seed(run.cfg.seed, "diag"))
    c, z, _ = inn_forward(p.model, lam, p.params.arrays())
    out = z_diagnostics(np.asarray(c), np.asarray(z))
    _write_json(run.path / "tables" / "diagnostics.json", out)
    return out


# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, stages=None, path=None):
    run = Run(cfg, path)
    default = ["gen-data", "train", "invert"]
    default.append("abc" if cfg.kind == "kinematics" else "mcmc")
    default.append("evaluate")
    for name in stages or default:
        run.stage(name, STAGES[name], run)
    return run


def report(out_dir):
    """Collect every metrics.json below ``out_dir`` into one CSV."""
    rows = []
    for f in sorted(Path(out_dir).rglob("metrics.json")):
        flat = _flatten(json.loads(f.read_text()))
        for k, v in sorted(flat.items()):
            rows.append([str(f.parent.relative_to(out_dir)), k, v])
    _write_table(Path(out_dir) / "report.csv", ["run", "metric", "value"], rows)
    return rows


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = prefix + str(k)
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


STAGES = {
    "gen-data": gen_data,
    "train": train_stage,
    "invert": invert,
    "mcmc": mcmc,
    "abc": abc,
    "evaluate": evaluate,
    "sweep": lambda run: {"noise_rows": len(noise_sweep(run)),
                          "convergence_rows": len(convergence_sweep(run))},
    "diagnostics": diagnostics,
}

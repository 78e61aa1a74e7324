"""Experiment configuration: defaults per experiment, JSON load/merge, validation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .engine import TrainConfig
from .losses import LossWeights
from .problems import Darcy2D, Diffusion1D, Kinematics, Tomography

EXPERIMENTS = ("kinematics-inn1", "kinematics-inn2", "diffusion-grf", "diffusion-mixed",
               "darcy", "tomography")


class ConfigError(ValueError):
    pass


_PDE_INVERSION = {"rho": 1e-3, "n_samples": 10000, "fit_steps": 2000, "fit_lr": 1e-2,
                  "S": 16, "importance": False}

_DEFAULTS = {
    "kinematics-inn1": {
        "problem": {"n_layers": 8, "hidden": [48, 48]},
        "train": {"n_train": 4000, "epochs": 1200, "batch_size": 64, "lr": 5e-4,
                  "milestones": [400, 600, 1000], "decay": 0.8,
                  "weights": {"alpha": 1.0, "beta": 1.0}},
        "observation": {"test_points": [[0.2, -0.3, 0.4, 0.6], [-0.3, 0.5, -0.2, -0.5]]},
        "inversion": {"n_samples": 2000},
        "baseline": {"abc_eps": 0.035, "abc_n": 2000},
    },
    "diffusion-grf": {
        "problem": {"n_grid": 201, "n_kle": 10, "P": 5, "n_layers": 8, "inn_hidden": [100],
                    "nb_hidden": [64] * 6, "n_boxes": 32, "box_r": 0.1, "n_sensors": 11},
        "train": {"n_train": 4000, "epochs": 1000, "batch_size": 64, "lr": 1e-3,
                  "milestones": [600, 900], "decay": 0.8,
                  "weights": {"alpha": 1.0, "beta": 10.0, "gamma": 1.0}},
        "observation": {"sigma": 0.01, "truth_seed": 101, "noise_seed": 202},
        "inversion": dict(_PDE_INVERSION),
        "baseline": {"pilot_steps": 20000, "mcmc_steps": 200000, "proposal_std": 0.01,
                     "burn_in": 20000, "thin": 10, "compare_burn_in": 1000},
        "sweep": {"noise": [0.005, 0.01, 0.025, 0.05], "counts": [100, 300, 1000, 3000, 10000],
                  "seeds": [0, 1, 2, 3, 4]},
    },
    "darcy": {
        "problem": {"n_grid": 64, "n_kle": 15, "P": 10, "n_layers": 8, "inn_hidden": [100],
                    "nb_hidden": [128] * 5, "n_boxes": 32, "box_r": 0.1, "n_sensors": 22},
        "train": {"n_train": 8000, "steps": 5000, "batch_size": 64, "lr": 5e-4,
                  "decay_every": 800, "decay": 0.8,
                  "weights": {"alpha": 1.0, "beta": 10.0, "gamma": 1.0}},
        "observation": {"sigma": 0.01, "truth_seed": 101, "noise_seed": 202},
        "inversion": dict(_PDE_INVERSION, n_samples=2000),
        "baseline": {"pilot_steps": 2000, "mcmc_steps": 20000, "proposal_std": 0.01,
                     "burn_in": 2000, "thin": 10},
    },
    "tomography": {
        "problem": {"n_fsm": 101, "P": 4, "n_layers": 8, "inn_hidden": [100],
                    "nb_hidden": [128] * 6, "n_colloc": 64, "n_sensors": 6},
        "train": {"n_train": 4000, "epochs": 100, "batch_size": 64, "lr": 5e-4,
                  "weights": {"alpha": 1.0, "beta": 0.0, "gamma": 1.0}},
        "observation": {"sigma": 0.1, "truth_seed": 101, "noise_seed": 202},
        "inversion": dict(_PDE_INVERSION, n_samples=2000),
        "baseline": {"pilot_steps": 2000, "mcmc_steps": 20000, "proposal_std": 0.01,
                     "burn_in": 2000, "thin": 10},
    },
}
_DEFAULTS["kinematics-inn2"] = copy.deepcopy(_DEFAULTS["kinematics-inn1"])
_DEFAULTS["kinematics-inn2"]["train"]["weights"] = {"alpha": 1.0, "beta": 50.0, "gamma": 50.0}
_DEFAULTS["diffusion-mixed"] = copy.deepcopy(_DEFAULTS["diffusion-grf"])
_DEFAULTS["diffusion-mixed"]["train"].update(
    {"epochs": None, "steps": 2400, "milestones": [], "decay_every": 400})

# reduced-scale presets used for end-to-end checks
REDUCED = {
    "darcy": {"problem": {"n_grid": 32}, "train": {"n_train": 2000}},
    "tomography": {"problem": {"n_fsm": 51}, "train": {"n_train": 2000}},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "weights":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    problem: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    observation: dict = field(default_factory=dict)
    inversion: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "runs"

    @classmethod
    def default(cls, experiment, reduced=False, **overrides):
        if experiment not in _DEFAULTS:
            raise ConfigError("unknown experiment %r; choose from %s" % (experiment, ", ".join(EXPERIMENTS)))
        doc = copy.deepcopy(_DEFAULTS[experiment])
        if reduced:
            doc = _merge(doc, REDUCED.get(experiment, {}))
        doc = _merge(doc, overrides)
        return cls.from_dict(dict(doc, experiment=experiment))

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        reduced = doc.pop("reduced", False)
        if "experiment" not in doc:
            raise ConfigError("config needs an 'experiment' field")
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError("unknown config fields: %s" % ", ".join(sorted(unknown)))
        base = copy.deepcopy(_DEFAULTS.get(doc["experiment"], {}))
        if reduced:
            base = _merge(base, REDUCED.get(doc["experiment"], {}))
        merged = _merge(base, {k: v for k, v in doc.items() if isinstance(v, dict)})
        merged.update({k: v for k, v in doc.items() if not isinstance(v, dict)})
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("unknown experiment %r" % self.experiment)
        problem = self.build_problem()
        obs = self.observation
        if "sigma" in obs and obs["sigma"] < 0:
            raise ConfigError("noise sigma must be nonnegative")
        n_train = self.train.get("n_train", 0)
        if n_train < self.train.get("batch_size", 64):
            raise ConfigError("n_train smaller than one batch")
        if problem.F != problem.P + problem.model.ndim_z:
            raise ConfigError("F != P + ndim_z")
        self.train_config()
        return problem

    @property
    def kind(self):
        return self.experiment.split("-")[0]

    def build_problem(self, seed=None):
        seed = self.seed if seed is None else seed
        p = dict(self.problem)
        for k in ("inn_hidden", "nb_hidden", "hidden"):
            if k in p:
                p[k] = tuple(p[k])
        try:
            if self.kind == "kinematics":
                return Kinematics(self.experiment.split("-")[1], seed=seed, **p)
            if self.kind == "diffusion":
                return Diffusion1D(self.experiment.split("-")[1], seed=seed, **p)
            if self.kind == "darcy":
                return Darcy2D(seed=seed, **p)
            return Tomography(seed=seed, **p)
        except TypeError as exc:
            raise ConfigError("bad problem settings for %s: %s" % (self.experiment, exc)) from None

    def train_config(self):
        t = dict(self.train)
        t.pop("n_train", None)
        w = t.pop("weights", {})
        t["milestones"] = tuple(t.get("milestones", ()))
        if t.get("steps") is not None:
            t["epochs"] = None
        return TrainConfig(weights=LossWeights(**w), seed=self.seed, **t)

"""Experiment definitions: model, basis, prior, loss terms and oracle forward maps."""

from __future__ import annotations

import numpy as np

from . import fields
from .baselines import ExactPosterior
from .fields import (KinematicsPrior, KlePrior, MixedPrior, TomographyPrior, interp_matrix,
                     uniform_grid_1d)
from .flow import InnModel, inn_forward, inn_inverse
from .losses import (boundary_loss, darcy_boundary, data_loss, diffusion_1d_boundary,
                     equation_loss_darcy_2d, equation_loss_diffusion_1d, equation_loss_eikonal,
                     independence_loss, mmd, sample_boxes, sample_collocation, sample_pairs)
from .networks import NeuralBasis, ParamSet
from .oracles import (Grid2D, darcy_extended, darcy_solve_2d, fast_sweep_eikonal,
                      fem_diffusion_1d, kinematics_forward, observe, uniform_sensors)


class Problem:
    """Common surface used by the engine and the CLI."""

    name = "problem"
    roles = None
    basis = None
    obs_scale = None

    def _build(self, F, P, inn_hidden, n_layers, seed, nb=None):
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.model = InnModel.build(self.params, "inn", F, P, inn_hidden, n_layers, rng)
        if nb is not None:
            dim, hidden, lower, upper = nb
            self.basis = NeuralBasis.build(self.params, "nb", dim, P, hidden, rng, lower, upper)
        self.params.freeze()

    @property
    def F(self):
        return self.model.F

    @property
    def P(self):
        return self.model.P

    def training_data(self, n, seed):
        return {"lam": self.prior.sample(n, seed=seed)}

    def _c_and_ind(self, w, lam, z, skip):
        """Forward coefficients plus the independence term unless it is skipped."""
        if "ind" in skip:
            return inn_forward(self.model, lam, w)[0], {}
        ind, (c, _, _) = independence_loss(self.model, self.prior, lam, z, w, return_parts=True)
        return c, {"ind": ind}

    def exact_posterior(self, obs):
        return ExactPosterior(self.prior.log_density, self.forward, obs.values, obs.sigma)

    def observe_truth(self, lam_true, sigma, seed):
        return observe(self.solution_grid(lam_true), self.obs_grid, self.sensors, sigma, seed)

    def forward(self, lam):
        """Noise-free sensor predictions from the reference solver."""
        return self.obs_matrix @ self.solution_grid(lam).ravel()

    def field_grid(self, lam):
        raise NotImplementedError


# ---------------------------------------------------------------------------


class Diffusion1D(Problem):
    """-(D u')' = f on [0, 1], u(0) = 0, u(1) = 1, D log-normal (or mixed)."""

    def __init__(self, kind="grf", n_grid=201, n_kle=10, P=5, n_layers=8, inn_hidden=(100,),
                 nb_hidden=(64,) * 6, n_boxes=32, box_r=0.1, n_sensors=11, source=5.0, seed=0):
        if kind == "grf":
            self.prior = KlePrior(fields.grf_1d_basis(n_grid, n_kle))
        elif kind == "mixed":
            self.prior = MixedPrior(fields.mixed_1d_basis(n_grid, n_kle))
        else:
            raise ValueError("unknown 1-d prior kind %r" % kind)
        self.kind = kind
        self.name = "diffusion-" + kind
        self._build(self.prior.dim, P, list(inn_hidden), n_layers, seed,
                    nb=(1, list(nb_hidden), [0.0], [1.0]))
        self.grid = uniform_grid_1d(n_grid)
        self.x = self.grid.axes[0]
        self.n_boxes, self.box_r, self.source = n_boxes, box_r, source
        self.bspec = diffusion_1d_boundary()
        self.sensors = uniform_sensors(n_sensors)
        self.obs_grid = self.grid
        self.obs_matrix = interp_matrix(self.grid, self.sensors)

    def terms(self, w, batch, z, rng, skip=()):
        lam = batch["lam"]
        c, out = self._c_and_ind(w, lam, z, skip)
        boxes = sample_boxes(rng, self.n_boxes, self.box_r, [0.0], [1.0])
        pairs = sample_pairs(rng, boxes)
        if "equ" not in skip:
            out["equ"] = equation_loss_diffusion_1d(
                self.basis, c, lambda p: self.prior.field_eval(lam, p[:, 0]), self.source, boxes,
                pairs, w)
        if "bound" not in skip:
            out["bound"] = boundary_loss(self.basis, c, self.bspec, w)
        return out

    def field_grid(self, lam):
        return self.prior.field_grid(lam)

    def solution_grid(self, lam):
        return fem_diffusion_1d(self.field_grid(lam), self.source)


class Darcy2D(Problem):
    """-div(K grad u) = 0 on the unit square with the side-to-side pressure drop."""

    name = "darcy"

    def __init__(self, n_grid=64, n_kle=15, P=10, n_layers=8, inn_hidden=(100,),
                 nb_hidden=(128,) * 5, n_boxes=32, box_r=0.1, n_sensors=22, n_bound=16, seed=0):
        self.prior = KlePrior(fields.darcy_basis(n_grid, n_kle), kind="grf-2d-darcy")
        self._build(self.prior.dim, P, list(inn_hidden), n_layers, seed,
                    nb=(2, list(nb_hidden), [0.0, 0.0], [1.0, 1.0]))
        self.n = n_grid
        self.n_boxes, self.box_r, self.n_bound = n_boxes, box_r, n_bound
        self.sensors = uniform_sensors(n_sensors, dim=2)
        self.obs_grid, _ = darcy_extended(np.zeros((n_grid, n_grid)))
        self.obs_matrix = interp_matrix(self.obs_grid, self.sensors)

    def terms(self, w, batch, z, rng, skip=()):
        lam = batch["lam"]
        c, out = self._c_and_ind(w, lam, z, skip)
        boxes = sample_boxes(rng, self.n_boxes, self.box_r, [0.0, 0.0], [1.0, 1.0])
        pairs = sample_pairs(rng, boxes)
        bspec = darcy_boundary(rng, self.n_bound)
        if "equ" not in skip:
            out["equ"] = equation_loss_darcy_2d(self.basis, c, lambda p: self.prior.field_eval(lam, p),
                                                0.0, boxes, pairs, w)
        if "bound" not in skip:
            out["bound"] = boundary_loss(self.basis, c, bspec, w)
        return out

    def field_grid(self, lam):
        return self.prior.field_grid(lam)

    def solution_grid(self, lam):
        u = darcy_solve_2d(self.field_grid(lam).reshape(self.n, self.n))
        return darcy_extended(u)[1]


class Tomography(Problem):
    """First-arrival traveltimes from a surface source through a layered medium."""

    name = "tomography"
    roles = {"factored": "alpha", "source": "alpha", "ind": "gamma"}

    def __init__(self, n_fsm=101, P=4, n_layers=8, inn_hidden=(100,), nb_hidden=(128,) * 6,
                 n_colloc=64, exclude=0.1, n_sensors=6, source=(2.0, 0.0), v0=2.0, seed=0):
        self.prior = TomographyPrior(v0=v0)
        self._build(self.prior.dim, P, list(inn_hidden), n_layers, seed,
                    nb=(2, list(nb_hidden), [0.0, 0.0], [4.0, 4.0]))
        self.fsm = Grid2D(n_fsm)
        self.source = np.asarray(source, dtype=np.float64)
        self.n_colloc, self.exclude = n_colloc, exclude
        self.sensors = uniform_sensors(n_sensors, 0.0, 4.0, dim=2)
        self.obs_grid = self.fsm.quad()
        self.obs_matrix = interp_matrix(self.obs_grid, self.sensors)
        self.depths = np.linspace(0.0, 4.0, 101)
        # T = T0 * tau with T0 = |x - x_s| / v(x_s); v(x_s) = v0 at zero depth
        self.obs_scale = np.linalg.norm(self.sensors - self.source, axis=1) / v0

    def exact_posterior(self, obs):
        def log_prior(lam):
            return self.prior.log_density(lam) if self.prior.admissible(lam) else -np.inf
        return ExactPosterior(log_prior, self.forward, obs.values, obs.sigma)

    def v_eval(self, lam):
        return lambda p: self.prior.velocity(lam, p)

    def terms(self, w, batch, z, rng, skip=()):
        lam = batch["lam"]
        c, out = self._c_and_ind(w, lam, z, skip)
        pts = sample_collocation(rng, self.n_colloc, [0.0, 0.0], [4.0, 4.0], self.source,
                                 self.exclude)
        fac, src = equation_loss_eikonal(self.basis, c, self.v_eval(lam), pts, self.source, w)
        out.update({k: v for k, v in (("factored", fac), ("source", src)) if k not in skip})
        return out

    def field_grid(self, lam):
        """Velocity-depth profile on ``self.depths``."""
        return self.prior.profile(lam, self.depths)

    def velocity_nodes(self, lam):
        vy = self.prior.profile(lam, self.fsm.axes[1])
        return np.tile(vy, (self.fsm.n, 1))

    def solution_grid(self, lam):
        return fast_sweep_eikonal(self.velocity_nodes(lam), self.source, self.fsm)


class Kinematics(Problem):
    """Rail-mounted three-link arm; labelled training pairs (x, y)."""

    TEST_X = np.array([[0.2, -0.3, 0.4, 0.6],
                       [-0.3, 0.5, -0.2, -0.5]])

    def __init__(self, variant="inn1", n_layers=8, hidden=(48, 48), seed=0):
        if variant not in ("inn1", "inn2"):
            raise ValueError("variant must be inn1 or inn2")
        self.variant = variant
        self.name = "kinematics-" + variant
        self.prior = KinematicsPrior()
        self._build(4, 2, list(hidden), n_layers, seed)
        if variant == "inn1":
            self.roles = {"data": "alpha", "ind": "beta"}
        else:
            self.roles = {"data": "alpha", "mmd_fwd": "beta", "mmd_rev": "gamma"}

    @staticmethod
    def test_points():
        return kinematics_forward(Kinematics.TEST_X)

    def training_data(self, n, seed):
        x = self.prior.sample(n, seed=seed)
        return {"lam": x, "y": kinematics_forward(x)}

    def terms(self, w, batch, z, rng, skip=()):
        x, y = batch["lam"], batch["y"]
        if self.variant == "inn1":
            c, out = self._c_and_ind(w, x, z, skip)
            out["data"] = data_loss(c, y)
            return out
        c, zh, _ = inn_forward(self.model, x, w)
        out = {"data": data_loss(c, y)}
        # the reverse draw is taken unconditionally so skipping never shifts the stream
        z2 = rng.standard_normal(z.shape)
        if "mmd_fwd" not in skip:
            out["mmd_fwd"] = mmd(np.concatenate([y, z], 1), _cat(c, zh))
        if "mmd_rev" not in skip:
            out["mmd_rev"] = mmd(x, inn_inverse(self.model, c, z2, w))
        return out

    def forward(self, lam):
        return kinematics_forward(lam)

    def field_grid(self, lam):
        return np.asarray(lam)


def _cat(a, b):
    from .autodiff import concat
    return concat([a, b], axis=-1)

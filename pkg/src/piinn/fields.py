"""Priors on lambda-space and their physical field realizations.

All priors are diagonal Gaussians in lambda-space; non-Gaussian physics
(log-normal fields, sign mixtures, bounded layer depths) is pushed into the
deterministic map from lambda to the field.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.special import ndtr, ndtri

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quadrature grids and interpolation


@dataclass
class QuadGrid:
    """Tensor grid with quadrature weights; ``axes`` holds per-axis coordinates."""

    axes: list
    weights: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    cell_centered: bool = False

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def __len__(self):
        return int(np.prod(self.shape))


def uniform_grid_1d(n=201, a=0.0, b=1.0):
    """Uniform nodes with trapezoid weights."""
    x = np.linspace(a, b, n)
    w = np.full(n, (b - a) / (n - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return QuadGrid([x], w, np.array([a]), np.array([b]))


def cell_center_grid(n=64, lower=(0.0, 0.0), upper=(1.0, 1.0)):
    """Cell centers of an n^d uniform mesh with midpoint weights."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    h = (upper - lower) / n
    axes = [lower[k] + h[k] * (np.arange(n) + 0.5) for k in range(len(lower))]
    w = np.full(n ** len(lower), float(np.prod(h)))
    return QuadGrid(axes, w, lower, upper, cell_centered=True)


def _axis_weights(axis, x):
    """Linear interpolation indices/weights along one axis, clamped at the ends."""
    n = len(axis)
    x = np.clip(x, axis[0], axis[-1])
    j = np.searchsorted(axis, x, side="right") - 1
    j = np.clip(j, 0, n - 2)
    t = (x - axis[j]) / (axis[j + 1] - axis[j])
    return j, t


def interp_matrix(grid: QuadGrid, points, tol=1e-12):
    """Sparse (M, n_grid) matrix of linear/bilinear interpolation weights."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if grid.dim == 1 and pts.shape[0] == 1 and pts.shape[1] != 1:
        pts = pts.T
    if pts.shape[1] != grid.dim:
        raise ValueError("points have dimension %d, grid has %d" % (pts.shape[1], grid.dim))
    if np.any(pts < grid.lower - tol) or np.any(pts > grid.upper + tol):
        raise DomainError("point outside domain [%s, %s]" % (grid.lower, grid.upper))
    M = pts.shape[0]
    shape = grid.shape
    rows, cols, vals = [], [], []
    if grid.dim == 1:
        j, t = _axis_weights(grid.axes[0], pts[:, 0])
        r = np.arange(M)
        rows = [r, r]
        cols = [j, j + 1]
        vals = [1.0 - t, t]
    else:
        j0, t0 = _axis_weights(grid.axes[0], pts[:, 0])
        j1, t1 = _axis_weights(grid.axes[1], pts[:, 1])
        r = np.arange(M)
        for a, wa in ((j0, 1.0 - t0), (j0 + 1, t0)):
            for b, wb in ((j1, 1.0 - t1), (j1 + 1, t1)):
                rows.append(r)
                cols.append(a * shape[1] + b)
                vals.append(wa * wb)
    return scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(M, len(grid)))


# ---------------------------------------------------------------------------
# Karhunen-Loeve expansion


def exponential_kernel(variance, length):
    """k(x, y) = variance * exp(-|x - y|_2 / length)."""

    def k(X, Y):
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        d = np.sqrt(np.maximum(
            (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T, 0.0))
        return variance * np.exp(-d / length)

    return k


@dataclass
class KleBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mean: np.ndarray
    grid: QuadGrid
    mean_fn: Callable = field(repr=False)
    spectrum: np.ndarray = field(repr=False, default=None)

    @property
    def n_kle(self):
        return len(self.eigenvalues)

    @property
    def scaled_modes(self):
        """Grid values of sqrt(eigenvalue_i) * e_i; shape (n_grid, n_kle)."""
        return self.eigenvectors * np.sqrt(self.eigenvalues)[None, :]


def kle_build(kernel, mean_fn, grid: QuadGrid, n_kle, full_spectrum=None):
    """Nystrom discretization of the covariance operator on ``grid``.

    Large grids compute only the leading ``n_kle + 5`` pairs unless
    ``full_spectrum`` is set; ``spectrum`` then holds just those.
    """
    X = grid.nodes
    K = kernel(X, X)
    sw = np.sqrt(grid.weights)
    A = sw[:, None] * K * sw[None, :]
    m = len(A)
    full = m <= 1500 if full_spectrum is None else full_spectrum
    if full or n_kle + 5 >= m:
        vals, vecs = scipy.linalg.eigh(A)
    else:
        vals, vecs = scipy.linalg.eigh(A, subset_by_index=[m - n_kle - 5, m - 1], driver="evr")
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    pos = vals > 1e-14 * max(vals[0], 1e-300)
    if pos.sum() < n_kle:
        raise ValueError("only %d positive eigenvalues, %d requested" % (pos.sum(), n_kle))
    E = vecs[:, :n_kle] / sw[:, None]
    # fix sign so the largest-magnitude grid value of each mode is positive
    idx = np.argmax(np.abs(E), axis=0)
    E = E * np.sign(E[idx, np.arange(n_kle)])[None, :]
    return KleBasis(vals[:n_kle].copy(), E, mean_fn(X), grid, mean_fn, spectrum=vals)


def log_field_grid(basis: KleBasis, lam):
    """Gaussian field values (before exponentiation) on the KLE grid."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != basis.n_kle:
        raise ValueError("expected %d KLE coefficients, got %d" % (basis.n_kle, lam.shape[-1]))
    return basis.mean + lam @ basis.scaled_modes.T


def log_field_at(basis: KleBasis, lam, x):
    """Gaussian field at arbitrary points (mean exact, modes interpolated)."""
    pts = _as_points(x, basis.grid.dim)
    S = interp_matrix(basis.grid, pts)
    modes = S @ basis.scaled_modes
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != basis.n_kle:
        raise ValueError("expected %d KLE coefficients, got %d" % (basis.n_kle, lam.shape[-1]))
    return basis.mean_fn(pts) + lam @ modes.T


def _as_points(x, dim):
    pts = np.asarray(x, dtype=np.float64)
    if dim == 1:
        return pts.reshape(-1, 1)
    return np.atleast_2d(pts)


def grf_field_eval(basis: KleBasis, lam, x):
    """exp of the KLE Gaussian field at ``x``; scalar ``x`` gives a scalar."""
    out = np.exp(log_field_at(basis, lam, x))
    if np.ndim(x) == 0 or (basis.grid.dim > 1 and np.ndim(x) == 1):
        return out.reshape(out.shape[:-1]) if out.shape[-1] == 1 else out
    return out


def mixed_field_eval(basis: KleBasis, lam, sign, x):
    """exp(G(x) + 0.75 * sign * sin(pi x / 2)) for the sign-mixture prior."""
    if np.any((np.asarray(sign) != 1) & (np.asarray(sign) != -1)):
        raise ValueError("sign must be +1 or -1")
    xs = np.asarray(x, dtype=np.float64)
    g = log_field_at(basis, lam, xs)
    m = np.sin(0.5 * np.pi * xs.reshape(-1))
    out = np.exp(g + 0.75 * np.asarray(sign, dtype=np.float64)[..., None] * m)
    if np.ndim(x) == 0:
        return out.reshape(out.shape[:-1])
    return out


# ---------------------------------------------------------------------------
# priors


class FieldPrior:
    """Diagonal Gaussian prior on lambda-space."""

    kind = "gaussian"

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")
        self._lognorm = float(np.sum(np.log(self.std)) + 0.5 * len(self.std) * LOG_2PI)

    @property
    def dim(self):
        return len(self.mean)

    def log_density(self, lam):
        """Row-wise log p(lambda); works on arrays and tape variables."""
        if np.shape(ad.value(lam))[-1] != self.dim:
            raise ValueError("lambda has dimension %d, prior expects %d"
                             % (np.shape(ad.value(lam))[-1], self.dim))
        if np.all(self.mean == 0.0) and np.all(self.std == 1.0):
            r = lam
        else:
            r = (lam - self.mean) * (1.0 / self.std)
        return -0.5 * ad.sum(ad.square(r), axis=-1) - self._lognorm

    def sample(self, n=None, seed=None, rng=None):
        rng = np.random.default_rng(seed) if rng is None else rng
        size = (self.dim,) if n is None else (n, self.dim)
        return self.mean + self.std * rng.standard_normal(size)


class KlePrior(FieldPrior):
    """lambda ~ N(0, I) are KLE coefficients of a log-normal field."""

    def __init__(self, basis: KleBasis, kind="grf-1d"):
        super().__init__(np.zeros(basis.n_kle), np.ones(basis.n_kle))
        self.basis = basis
        self.kind = kind

    def log_field_grid(self, lam):
        return log_field_grid(self.basis, lam)

    def field_grid(self, lam):
        return np.exp(self.log_field_grid(lam))

    def log_field_at(self, lam, x):
        return log_field_at(self.basis, lam, x)

    def field_eval(self, lam, x):
        return np.exp(self.log_field_at(lam, x))


class MixedPrior(FieldPrior):
    """KLE coefficients plus one extra N(0,1) coordinate whose sign picks m = +-sin."""

    kind = "mixed-1d"

    def __init__(self, basis: KleBasis):
        k = basis.n_kle + 1
        super().__init__(np.zeros(k), np.ones(k))
        self.basis = basis

    @staticmethod
    def sign(lam):
        return np.where(np.asarray(lam)[..., -1] >= 0.0, 1.0, -1.0)

    def _shift(self, lam, x):
        xs = np.asarray(x, dtype=np.float64).reshape(-1)
        return 0.75 * self.sign(lam)[..., None] * np.sin(0.5 * np.pi * xs)

    def log_field_grid(self, lam):
        lam = np.asarray(lam)
        return log_field_grid(self.basis, lam[..., :-1]) + self._shift(lam, self.basis.grid.axes[0])

    def field_grid(self, lam):
        return np.exp(self.log_field_grid(lam))

    def log_field_at(self, lam, x):
        lam = np.asarray(lam)
        return log_field_at(self.basis, lam[..., :-1], x) + self._shift(lam, x)

    def field_eval(self, lam, x):
        return np.exp(self.log_field_at(lam, x))


@functools.lru_cache(maxsize=8)
def grf_1d_basis(n_grid=201, n_kle=10):
    """KLE of GP(x/2, (9/25) exp(-|x-x'|/2)) on [0, 1]."""
    return kle_build(exponential_kernel(9.0 / 25.0, 2.0), lambda X: 0.5 * X[:, 0],
                     uniform_grid_1d(n_grid), n_kle)


@functools.lru_cache(maxsize=8)
def mixed_1d_basis(n_grid=201, n_kle=10):
    """KLE of GP(2x(1-x), (9/25) exp(-|x-x'|/2)) on [0, 1]."""
    return kle_build(exponential_kernel(9.0 / 25.0, 2.0), lambda X: 2.0 * X[:, 0] * (1.0 - X[:, 0]),
                     uniform_grid_1d(n_grid), n_kle)


@functools.lru_cache(maxsize=4)
def darcy_basis(n=64, n_kle=15):
    """KLE of GP(0, exp(-5 |x-x'|_2)) on the cell centers of [0,1]^2."""
    return kle_build(exponential_kernel(1.0, 0.2), lambda X: np.zeros(len(X)),
                     cell_center_grid(n), n_kle)


KINEMATICS_STD = np.array([0.25, 0.5, 0.5, 0.5])


class KinematicsPrior(FieldPrior):
    kind = "kinematics"

    def __init__(self):
        super().__init__(np.zeros(4), KINEMATICS_STD)


def kinematics_prior_sample(seed, n=None):
    return KinematicsPrior().sample(n, seed=seed)


# tomography: lambda = (g_Y^1..g_Y^4, a_1..a_3), h_i = 0.75 + 0.5 * Phi(a_i)
TOMO_G_MEAN = np.array([0.2, 0.4, 0.5, 1.0])
TOMO_G_STD = np.array([0.25, 0.25, 0.25, 1.0])
DEPTH = 4.0


class TomographyPrior(FieldPrior):
    kind = "tomography"

    def __init__(self, v0=2.0, v_min=0.5):
        super().__init__(np.concatenate([TOMO_G_MEAN, np.zeros(3)]),
                         np.concatenate([TOMO_G_STD, np.ones(3)]))
        self.v0 = float(v0)
        self.v_min = float(v_min)

    @staticmethod
    def physical(lam):
        lam = np.asarray(lam, dtype=np.float64)
        g = lam[..., :4]
        h3 = 0.75 + 0.5 * ndtr(lam[..., 4:7])
        h4 = DEPTH - h3.sum(-1, keepdims=True)
        return g, np.concatenate([h3, h4], axis=-1)

    @staticmethod
    def unconstrained(g, h):
        h = np.asarray(h, dtype=np.float64)
        a = ndtri((h[..., :3] - 0.75) / 0.5)
        return np.concatenate([np.asarray(g, dtype=np.float64), a], axis=-1)

    def velocity(self, lam, points):
        g, h = self.physical(lam)
        return velocity_eval(g, h, points, self.v0)

    def profile(self, lam, depths):
        g, h = self.physical(lam)
        return velocity_depth(g, h, depths, self.v0)

    def admissible(self, lam):
        """Minimum velocity over depth stays above ``v_min``."""
        g, h = self.physical(lam)
        vel = self.v0 + np.concatenate(
            [np.zeros(h.shape[:-1] + (1,)), np.cumsum(g * h, -1)], -1)
        return vel.min(-1) > self.v_min

    def sample(self, n=None, seed=None, rng=None):
        """Prior draws restricted to admissible velocity models (rejection)."""
        rng = np.random.default_rng(seed) if rng is None else rng
        if n is None:
            return self.sample(1, rng=rng)[0]
        out = np.empty((0, self.dim))
        while len(out) < n:
            cand = self.mean + self.std * rng.standard_normal((n, self.dim))
            out = np.concatenate([out, cand[self.admissible(cand)]])
        return out[:n]


def tomography_prior(seed):
    """One prior draw: ``(lam, {'g': g, 'h': h})``."""
    p = TomographyPrior()
    lam = p.sample(seed=seed)
    g, h = p.physical(lam)
    return lam, {"g": g, "h": h}


def velocity_depth(g, h, depth, v0=2.0):
    """v0 + integral_0^Y g(y) dy with layerwise-constant gradients.

    ``g``, ``h`` may carry leading batch dims; the result has shape
    batch + depth.shape.
    """
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(h <= 0):
        raise ValueError("layer thicknesses must be positive")
    if np.any(np.abs(h.sum(-1) - DEPTH) > 1e-9):
        raise ValueError("layer thicknesses must sum to %g" % DEPTH)
    Y = np.asarray(depth, dtype=np.float64)
    if np.any(Y < -1e-12) or np.any(Y > DEPTH + 1e-12):
        raise DomainError("depth outside [0, %g]" % DEPTH)
    tops = np.cumsum(h, -1) - h
    flat = Y.reshape(-1)
    seg = np.clip(flat[..., None] - tops[..., None, :], 0.0, None)
    seg = np.minimum(seg, h[..., None, :])
    out = v0 + (seg * g[..., None, :]).sum(-1)
    return out.reshape(out.shape[:-1] + Y.shape)


def velocity_eval(g, h, points, v0=2.0):
    """Velocity at points (X, Y); horizontal gradient is zero."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return velocity_depth(g, h, pts[:, 1], v0)


def dump_fields_csv(path, coords, values):
    """CSV rows (sample, x[, y], value) for each sample and coordinate."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    values = np.atleast_2d(values)
    names = ["x", "y"][: coords.shape[1]]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", *names, "value"])
        for s, row in enumerate(values):
            for p, v in zip(coords, row):
                wr.writerow([s, *("%.10g" % c for c in p), "%.10g" % v])

"""Reference forward solvers and the observation model."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .fields import QuadGrid, interp_matrix


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grids


@dataclass
class Grid1D:
    n: int = 201
    a: float = 0.0
    b: float = 1.0

    @property
    def h(self):
        return (self.b - self.a) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.a, self.b, self.n)


@dataclass
class Grid2D:
    """Uniform node grid on a square; arrays are indexed ``[i_x, i_y]``."""

    n: int = 101
    lower: tuple = (0.0, 0.0)
    upper: tuple = (4.0, 4.0)

    @property
    def h(self):
        return (self.upper[0] - self.lower[0]) / (self.n - 1)

    @property
    def axes(self):
        return [np.linspace(self.lower[k], self.upper[k], self.n) for k in range(2)]

    @property
    def nodes(self):
        X, Y = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], 1)

    def index_of(self, point, tol=1e-9):
        idx = []
        for k in range(2):
            t = (point[k] - self.lower[k]) / self.h
            j = int(round(t))
            if abs(t - j) > tol or not 0 <= j < self.n:
                raise SolverError("point %s is not a grid node" % (point,))
            idx.append(j)
        return tuple(idx)

    def quad(self):
        return QuadGrid(self.axes, np.full(self.n ** 2, self.h ** 2),
                        np.asarray(self.lower, float), np.asarray(self.upper, float))


# ---------------------------------------------------------------------------
# 1-d diffusion


def fem_diffusion_1d(D, f=5.0, bc=(0.0, 1.0), nodes=None):
    """Linear finite elements for -(D u')' = f with Dirichlet ends.

    ``D`` holds nodal values; each element uses the mean of its two nodal
    values.  ``f`` is a constant or nodal array (lumped load).
    """
    D = np.asarray(D, dtype=np.float64)
    n = len(D)
    if n < 3:
        raise ValueError("need at least 3 nodes")
    if np.any(D <= 0):
        raise ValueError("diffusion coefficient must be positive")
    x = np.linspace(0.0, 1.0, n) if nodes is None else np.asarray(nodes, dtype=np.float64)
    h = np.diff(x)
    k = 0.5 * (D[:-1] + D[1:]) / h
    fv = np.full(n, float(f)) if np.ndim(f) == 0 else np.asarray(f, dtype=np.float64)
    hw = np.zeros(n)
    hw[:-1] += 0.5 * h
    hw[1:] += 0.5 * h
    rhs = fv * hw
    # interior unknowns 1..n-2
    diag = k[:-1] + k[1:]
    off = -k[1:-1]
    b = rhs[1:-1].copy()
    b[0] += k[0] * bc[0]
    b[-1] += k[-1] * bc[1]
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    u = np.empty(n)
    u[0], u[-1] = bc
    u[1:-1] = scipy.linalg.solve_banded((1, 1), ab, b)
    return u


# ---------------------------------------------------------------------------
# 2-d Darcy


def _darcy_system(K):
    n = K.shape[0]
    inv = 1.0 / K
    tx = 2.0 / (inv[:-1, :] + inv[1:, :])   # faces between (i, j) and (i+1, j)
    ty = 2.0 / (inv[:, :-1] + inv[:, 1:])
    idx = np.arange(n * n).reshape(n, n)
    diag = np.zeros((n, n))
    diag[:-1, :] += tx
    diag[1:, :] += tx
    diag[:, :-1] += ty
    diag[:, 1:] += ty
    bl = 2.0 * K[0, :]
    br = 2.0 * K[-1, :]
    diag[0, :] += bl
    diag[-1, :] += br
    rows = [idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel(),
            idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols = [idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel(),
            idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals = [diag.ravel(), -tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()]
    A = scipy.sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(n * n, n * n))
    b = np.zeros((n, n))
    b[0, :] = bl * 1.0
    return A, b.ravel()


def darcy_solve_2d(K, tol=1e-10, maxiter=20000):
    """Cell-centered finite volumes for -div(K grad u) = 0 on the unit square.

    ``K`` has shape (n, n) indexed ``[i_x1, i_x2]`` at cell centers; u = 1 on
    x1 = 0, u = 0 on x1 = 1, zero flux on the x2 faces.  Returns u with the
    same layout.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be a square cell array")
    if np.any(K <= 0) or not np.all(np.isfinite(K)):
        raise ValueError("permeability must be positive and finite")
    n = K.shape[0]
    A, b = _darcy_system(K)
    M = scipy.sparse.diags(1.0 / A.diagonal())
    u, info = scipy.sparse.linalg.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        res = np.linalg.norm(b - A @ u) / np.linalg.norm(b)
        raise SolverError("CG did not converge in %d iterations (relative residual %.3e)"
                          % (maxiter, res))
    return u.reshape(n, n)


def darcy_flux_imbalance(K, u):
    """Per-cell net outflow of the discrete fluxes (zero for an exact solve)."""
    A, b = _darcy_system(np.asarray(K, dtype=np.float64))
    return (A @ np.asarray(u).ravel() - b).reshape(np.shape(u))


def darcy_extended(u):
    """Add boundary nodes: Dirichlet values on x1 faces, copied values on x2 faces.

    Returns ``(QuadGrid, values)`` suitable for linear interpolation up to
    the boundary.
    """
    n = u.shape[0]
    c = (np.arange(n) + 0.5) / n
    ax = np.concatenate([[0.0], c, [1.0]])
    ext = np.empty((n + 2, n + 2))
    ext[1:-1, 1:-1] = u
    ext[1:-1, 0] = u[:, 0]
    ext[1:-1, -1] = u[:, -1]
    ext[0, :] = 1.0
    ext[-1, :] = 0.0
    grid = QuadGrid([ax, ax], np.ones((n + 2) ** 2), np.zeros(2), np.ones(2))
    return grid, ext.ravel()


# ---------------------------------------------------------------------------
# eikonal


@numba.njit(cache=True)
def _fsm_update(T, fixed, slow, h, i, j, n):
    if fixed[i, j]:
        return 0.0
    a = min(T[i - 1, j] if i > 0 else np.inf, T[i + 1, j] if i < n - 1 else np.inf)
    b = min(T[i, j - 1] if j > 0 else np.inf, T[i, j + 1] if j < n - 1 else np.inf)
    if a == np.inf and b == np.inf:
        return 0.0
    f = slow[i, j] * h
    if abs(a - b) >= f:
        t = min(a, b) + f
    else:
        t = 0.5 * (a + b + np.sqrt(2.0 * f * f - (a - b) ** 2))
    old = T[i, j]
    if t < old:
        T[i, j] = t
        if old == np.inf:
            return np.inf
        return old - t
    return 0.0


@numba.njit(cache=True)
def _fsm_run(T, fixed, slow, h, tol, max_iter):
    n = T.shape[0]
    for it in range(max_iter):
        change = 0.0
        for order in range(4):
            for ii in range(n):
                i = ii if order == 0 or order == 1 else n - 1 - ii
                for jj in range(n):
                    j = jj if order == 0 or order == 2 else n - 1 - jj
                    d = _fsm_update(T, fixed, slow, h, i, j, n)
                    if d > change:
                        change = d
        if change < tol:
            return it + 1
    return -1


def fast_sweep_eikonal(v, source=(2.0, 0.0), grid=None, tol=1e-8, max_iter=200):
    """First-arrival traveltime for |grad T| = 1/v by Godunov fast sweeping.

    ``v`` is an (n, n) node array indexed ``[i_x, i_y]``.  The source node is
    pinned at 0 and its 8 neighbours at the straight-ray time using the mean
    slowness of the two endpoints.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("velocity must be positive and finite")
    grid = Grid2D(v.shape[0]) if grid is None else grid
    n, h = grid.n, grid.h
    si, sj = grid.index_of(source)
    slow = 1.0 / v
    T = np.full((n, n), np.inf)
    fixed = np.zeros((n, n), dtype=np.bool_)
    T[si, sj] = 0.0
    fixed[si, sj] = True
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            i, j = si + di, sj + dj
            if (di or dj) and 0 <= i < n and 0 <= j < n:
                T[i, j] = h * np.hypot(di, dj) * 0.5 * (slow[si, sj] + slow[i, j])
                fixed[i, j] = True
    it = _fsm_run(T, fixed, slow, h, tol, max_iter)
    if it < 0:
        raise SolverError("fast sweeping did not converge in %d iterations" % max_iter)
    return T


# ---------------------------------------------------------------------------
# kinematics

ARM_LENGTHS = (0.5, 0.5, 1.0)


def kinematics_forward(x):
    """Endpoint of the rail-mounted three-link arm; accepts (4,) or (N, 4)."""
    x = np.asarray(x, dtype=np.float64)
    l1, l2, l3 = ARM_LENGTHS
    x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    a2 = x3 - x2
    a3 = x4 - x2 - x3
    y1 = l1 * np.cos(x2) + l2 * np.cos(a2) + l3 * np.cos(a3)
    y2 = x1 + l1 * np.sin(x2) + l2 * np.sin(a2) + l3 * np.sin(a3)
    return np.stack([y1, y2], axis=-1)


# ---------------------------------------------------------------------------
# observations


@dataclass
class ObservationSet:
    sensors: np.ndarray
    clean: np.ndarray
    values: np.ndarray
    sigma: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.values)


def uniform_sensors(n, lower=0.0, upper=1.0, dim=1):
    ax = np.linspace(lower, upper, n)
    if dim == 1:
        return ax[:, None]
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], 1)


def observe(values, grid: QuadGrid, sensors, sigma, seed=None):
    """Linear interpolation of grid values at sensors plus N(0, sigma^2) noise."""
    S = interp_matrix(grid, sensors)
    clean = S @ np.asarray(values, dtype=np.float64).ravel()
    if sigma < 0:
        raise ValueError("noise scale must be nonnegative")
    noise = np.random.default_rng(seed).standard_normal(len(clean)) * sigma if sigma > 0 else 0.0
    return ObservationSet(np.atleast_2d(np.asarray(sensors, dtype=np.float64)), clean,
                          clean + noise, float(sigma), seed)


def with_noise(obs: ObservationSet, sigma, seed):
    """Same clean data, fresh noise."""
    noise = np.random.default_rng(seed).standard_normal(obs.count) * sigma
    return ObservationSet(obs.sensors, obs.clean, obs.clean + noise, float(sigma), seed, dict(obs.meta))


def write_dataset(path, lam, data, manifest):
    """CSV (sample_id, lambda..., sensor values...) and ``<path>.json`` manifest."""
    lam = np.atleast_2d(lam)
    data = np.atleast_2d(data)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", *("lam%d" % k for k in range(lam.shape[1])),
                     *("obs%d" % k for k in range(data.shape[1]))])
        for i, (a, b) in enumerate(zip(lam, data)):
            wr.writerow([i, *("%.17g" % v for v in a), *("%.17g" % v for v in b)])
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))


def read_dataset(path):
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    nl = sum(h.startswith("lam") for h in header)
    return raw[:, 1:1 + nl], raw[:, 1 + nl:]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))

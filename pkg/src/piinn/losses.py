"""Training losses.

Every loss accepts plain arrays or tape variables for the coefficient batch
and the network weights, so the same code serves evaluation and training.
Field callables (``K_eval``, ``v_eval``) map an ``(M, d)`` point array to an
``(N, M)`` array of per-sample values; fields never depend on trainable
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .flow import inn_forward, log_q_joint, std_normal_logpdf


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 1.0
    rho: float = 1e-3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.gamma, self.rho, *self.extra.values()]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


@dataclass
class TestBox:
    """Axis-aligned box {x : |x - center|_inf <= r/2}."""

    __test__ = False  # not a pytest class

    center: np.ndarray
    r: float

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        if not self.r > 0:
            raise ValueError("box radius must be positive")

    @property
    def dim(self):
        return len(self.center)

    def check(self, lower, upper, tol=1e-12):
        lo = self.center - 0.5 * self.r
        hi = self.center + 0.5 * self.r
        if np.any(lo < np.asarray(lower) - tol) or np.any(hi > np.asarray(upper) + tol):
            raise LossError("test box at %s (r=%g) leaves the domain" % (self.center, self.r))
        return self


def sample_boxes(rng, n, r, lower, upper):
    """``n`` boxes with centers uniform on the shrunken domain."""
    lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
    upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
    if np.any(upper - lower < r):
        raise LossError("box radius %g exceeds the domain" % r)
    centers = rng.uniform(lower + 0.5 * r, upper - 0.5 * r, size=(n, len(lower)))
    return [TestBox(c, r) for c in centers]


def sample_pairs(rng, boxes):
    """Two independent uniform points per box; shape (n, 2, d)."""
    C = np.stack([b.center for b in boxes])
    R = np.array([b.r for b in boxes])[:, None, None]
    return C[:, None, :] + R * (rng.random((len(boxes), 2, C.shape[1])) - 0.5)


def _box_arrays(boxes, lower, upper):
    if len(boxes) == 0:
        raise LossError("no test boxes")
    for b in boxes:
        b.check(lower, upper)
    r = boxes[0].r
    if any(b.r != r for b in boxes):
        raise LossError("all boxes in one estimate must share a radius")
    return np.stack([b.center for b in boxes]), r


def _source_values(f, pts):
    if callable(f):
        return np.asarray(f(pts), dtype=np.float64).reshape(len(pts))
    return np.full(len(pts), float(f))


def _directional(basis, pts, axis, w):
    """Basis values and derivative along one axis; both (M, P)."""
    e = np.zeros_like(pts)
    e[:, axis] = 1.0
    out = basis(ad.Dual(pts, [e]), w)
    return out.primal, out.tangents[0]


def _combine(c, mat):
    """c (N, P) times mat (M, P)^T -> (N, M)."""
    return c @ ad.transpose(mat)


# ---------------------------------------------------------------------------
# equation losses


def equation_loss_diffusion_1d(basis, c_batch, K_eval, f, boxes, pairs, w=None,
                               lower=0.0, upper=1.0):
    """Unbiased estimate of the squared weak residual of -(K u')' = f.

    ``pairs`` holds two independent uniform draws per box, shape (n, 2) or
    (n, 2, 1).
    """
    C, r = _box_arrays(boxes, [lower], [upper])
    zeta = C[:, 0]
    n = len(zeta)
    pts = np.concatenate([zeta - 0.5 * r, zeta + 0.5 * r])[:, None]
    _, dphi = _directional(basis, pts, 0, w)
    du = _combine(c_batch, dphi)
    flux = du * K_eval(pts)
    A = (flux[:, :n] - flux[:, n:]) * (1.0 / r)
    xp = np.asarray(pairs, dtype=np.float64).reshape(n, 2)
    f1 = _source_values(f, xp[:, :1])
    f2 = _source_values(f, xp[:, 1:])
    return ad.mean((A - f1) * (A - f2))


def _darcy_e(basis, c_batch, K_eval, f, C, r, x1, x2, w):
    n = len(C)
    h = 0.5 * r
    px = np.concatenate([np.stack([C[:, 0] - h, x2], 1), np.stack([C[:, 0] + h, x2], 1)])
    py = np.concatenate([np.stack([x1, C[:, 1] - h], 1), np.stack([x1, C[:, 1] + h], 1)])
    _, d1 = _directional(basis, px, 0, w)
    _, d2 = _directional(basis, py, 1, w)
    fx = _combine(c_batch, d1) * K_eval(px)
    fy = _combine(c_batch, d2) * K_eval(py)
    flux = (fx[:, :n] - fx[:, n:]) + (fy[:, :n] - fy[:, n:])
    return flux * (1.0 / r) - _source_values(f, np.stack([x1, x2], 1))


def equation_loss_darcy_2d(basis, c_batch, K_eval, f, boxes, pairs, w=None,
                           lower=(0.0, 0.0), upper=(1.0, 1.0)):
    """Unbiased weak-residual estimate for -div(K grad u) = f on a 2-d box.

    ``pairs[i, 0]`` is ``(x1, x2)`` and ``pairs[i, 1]`` is ``(x1', x2')``.
    """
    C, r = _box_arrays(boxes, lower, upper)
    xp = np.asarray(pairs, dtype=np.float64)
    if xp.shape != (len(C), 2, 2):
        raise LossError("expected pair samples of shape (n, 2, 2), got %s" % (xp.shape,))
    e1 = _darcy_e(basis, c_batch, K_eval, f, C, r, xp[:, 0, 0], xp[:, 0, 1], w)
    e2 = _darcy_e(basis, c_batch, K_eval, f, C, r, xp[:, 1, 0], xp[:, 1, 1], w)
    return ad.mean(e1 * e2)


def sample_collocation(rng, n, lower, upper, source, exclude=0.1):
    """Uniform points in the box with a disc around ``source`` removed."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    out = np.empty((0, len(lower)))
    while len(out) < n:
        cand = rng.uniform(lower, upper, size=(2 * n, len(lower)))
        keep = np.linalg.norm(cand - source, axis=1) > exclude
        out = np.concatenate([out, cand[keep]])
    return out[:n]


def eikonal_reference(points, source, v_source):
    """T0 = |x - x_s| / v_s and its gradient; ``v_source`` has shape (N,)."""
    d = points - np.asarray(source, dtype=np.float64)
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0):
        raise LossError("collocation point coincides with the source")
    vs = np.asarray(v_source, dtype=np.float64).reshape(-1, 1)
    T0 = dist[None, :] / vs
    G = d / dist[:, None]
    return T0, [G[None, :, k] / vs for k in range(d.shape[1])]


def equation_loss_eikonal(basis, c_batch, v_eval, points, source, w=None):
    """Factored eikonal residual with T = T0 * tau; returns (L_factored, L_source)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    src = np.asarray(source, dtype=np.float64).reshape(1, -1)
    v = np.asarray(v_eval(pts), dtype=np.float64)
    v_s = np.asarray(v_eval(src), dtype=np.float64)[:, 0]
    if np.any(v <= 0) or np.any(v_s <= 0):
        raise LossError("velocity must be positive")
    T0, gT0 = eikonal_reference(pts, src[0], v_s)
    d = pts.shape[1]
    tangents = []
    for k in range(d):
        e = np.zeros_like(pts)
        e[:, k] = 1.0
        tangents.append(e)
    out = basis(ad.Dual(pts, tangents), w)
    tau = _combine(c_batch, out.primal)
    grads = [_combine(c_batch, t) for t in out.tangents]
    grad_sq = ad.square(grads[0])
    cross = grads[0] * gT0[0]
    g0sq = np.square(gT0[0])
    for k in range(1, d):
        grad_sq = grad_sq + ad.square(grads[k])
        cross = cross + grads[k] * gT0[k]
        g0sq = g0sq + np.square(gT0[k])
    res = (np.square(T0) * grad_sq + ad.square(tau) * g0sq
           + 2.0 * T0 * (tau * cross) - 1.0 / np.square(v))
    tau_s = _combine(c_batch, basis(src, w))
    return ad.mean(ad.square(res)), ad.mean(ad.square(tau_s - 1.0))


# ---------------------------------------------------------------------------
# boundary and data terms


@dataclass
class BoundarySpec:
    """Dirichlet points/values and homogeneous Neumann points/normals."""

    dirichlet_points: np.ndarray
    dirichlet_values: np.ndarray
    neumann_points: np.ndarray = None
    neumann_normals: np.ndarray = None

    def __post_init__(self):
        self.dirichlet_points = np.atleast_2d(np.asarray(self.dirichlet_points, dtype=np.float64))
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=np.float64).reshape(-1)
        if len(self.dirichlet_points) != len(self.dirichlet_values):
            raise ValueError("Dirichlet points and values differ in length")
        if self.neumann_points is not None:
            self.neumann_points = np.atleast_2d(np.asarray(self.neumann_points, dtype=np.float64))
            self.neumann_normals = np.atleast_2d(np.asarray(self.neumann_normals, dtype=np.float64))

    @property
    def count(self):
        n = len(self.dirichlet_values)
        return n + (0 if self.neumann_points is None else len(self.neumann_points))


def diffusion_1d_boundary(u0=0.0, u1=1.0):
    return BoundarySpec([[0.0], [1.0]], [u0, u1])


def darcy_boundary(rng=None, n_side=16):
    """u = 1 on x1 = 0, u = 0 on x1 = 1, zero normal flux on x2 = 0 and x2 = 1."""
    if rng is None:
        s = (np.arange(n_side) + 0.5) / n_side
    else:
        s = rng.random(n_side)
    dp = np.concatenate([np.stack([np.zeros(n_side), s], 1), np.stack([np.ones(n_side), s], 1)])
    dv = np.concatenate([np.ones(n_side), np.zeros(n_side)])
    npnt = np.concatenate([np.stack([s, np.zeros(n_side)], 1), np.stack([s, np.ones(n_side)], 1)])
    nn = np.concatenate([np.tile([0.0, -1.0], (n_side, 1)), np.tile([0.0, 1.0], (n_side, 1))])
    return BoundarySpec(dp, dv, npnt, nn)


def boundary_loss(basis, c_batch, spec: BoundarySpec, w=None):
    """Mean squared Dirichlet and Neumann violation over samples and points."""
    total = ad.sum(ad.square(_combine(c_batch, basis(spec.dirichlet_points, w))
                             - spec.dirichlet_values))
    if spec.neumann_points is not None and len(spec.neumann_points):
        pts, nrm = spec.neumann_points, spec.neumann_normals
        out = basis(ad.Dual(pts, [nrm]), w)
        total = total + ad.sum(ad.square(_combine(c_batch, out.tangents[0])))
    n = np.shape(ad.value(c_batch))[0]
    return total * (1.0 / (n * spec.count))


def data_loss(u_pred, u_label):
    """(1/N) sum_i |u_i - u_hat_i|^2."""
    sp = np.shape(ad.value(u_pred))
    sl = np.shape(ad.value(u_label))
    if sp != sl:
        raise LossError("prediction shape %s != label shape %s" % (sp, sl))
    n = sp[0] if len(sp) > 1 else 1
    return ad.sum(ad.square(u_pred - u_label)) * (1.0 / n)


# ---------------------------------------------------------------------------
# distribution terms


def independence_loss(model, prior, lam_batch, z_batch, w=None, return_parts=False):
    """Squared mismatch between the joint log-density ratio and the latent one.

    Zero exactly when q(c, z) factorizes as q(c) p(z).  ``log q(c_hat, z_hat)``
    comes from the forward pass alone; ``log q(c_hat, z)`` needs one inverse.
    """
    c_hat, z_hat, logdet = inn_forward(model, lam_batch, w)
    zs = np.shape(ad.value(z_batch))
    if zs != np.shape(ad.value(z_hat)):
        raise LossError("z batch shape %s != latent shape %s" % (zs, np.shape(ad.value(z_hat))))
    lq_hat = prior.log_density(lam_batch) - logdet
    lq_mix = log_q_joint(model, prior, c_hat, z_batch, w)
    for name, lq in (("log q(c_hat, z_hat)", lq_hat), ("log q(c_hat, z)", lq_mix)):
        bad = ~np.isfinite(np.asarray(ad.value(lq)))
        if np.any(bad):
            raise LossError("%s is not finite for sample %d" % (name, int(np.argmax(bad))))
    diff = lq_hat - lq_mix - (std_normal_logpdf(z_hat) - std_normal_logpdf(z_batch))
    loss = ad.mean(ad.square(diff))
    if return_parts:
        return loss, (c_hat, z_hat, logdet)
    return loss


def _pairwise_kernel(X, Y, h):
    n, d = np.shape(ad.value(X))
    m, dy = np.shape(ad.value(Y))
    if d != dy:
        raise LossError("sample dimensions differ: %d vs %d" % (d, dy))
    diff = ad.reshape(X, (n, 1, d)) - ad.reshape(Y, (1, m, d))
    sq = ad.sum(ad.square(diff), axis=-1) * (1.0 / (h * h))
    return ad.reciprocal(sq + 1.0)


def mmd(X, Y, h=1.2):
    """V-statistic MMD with the inverse multiquadratic kernel."""
    if np.shape(ad.value(X))[0] < 1 or np.shape(ad.value(Y))[0] < 1:
        raise LossError("empty sample set")
    kxx = ad.mean(_pairwise_kernel(X, X, h))
    kxy = ad.mean(_pairwise_kernel(X, Y, h))
    kyy = ad.mean(_pairwise_kernel(Y, Y, h))
    return kxx - 2.0 * kxy + kyy


# ---------------------------------------------------------------------------

DEFAULT_ROLES = {"equ": "alpha", "bound": "beta", "ind": "gamma"}


def term_weight(name, weights: LossWeights, roles=None):
    roles = DEFAULT_ROLES if roles is None else roles
    return getattr(weights, roles[name]) if name in roles else weights.extra.get(name, 1.0)


def total_loss(terms, weights: LossWeights, roles=None):
    """Weighted sum of named terms.

    ``roles`` maps term names to weight attributes (``alpha``, ``beta``,
    ``gamma``); names not listed take their weight from ``weights.extra``
    and default to 1.
    """
    roles = DEFAULT_ROLES if roles is None else roles
    out = 0.0
    for name in terms:
        v = np.asarray(ad.value(terms[name]))
        if not np.all(np.isfinite(v)):
            raise LossError("loss term %r is not finite (%s)" % (name, v))
    for name, term in terms.items():
        wt = term_weight(name, weights, roles)
        if wt == 0:
            continue
        out = out + wt * term
    return out

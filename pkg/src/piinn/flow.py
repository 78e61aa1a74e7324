"""Affine coupling layers and the invertible map g: lambda -> (c, z)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import MlpSpec, ParamSet, mlp_forward

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(RuntimeError):
    pass


@dataclass
class CouplingLayer:
    """v1 = h1;  v2 = h2 * exp(s(h1)) + t(h1).

    The translation net reads the untouched block h1; that is what keeps the
    Jacobian lower triangular and makes the inverse closed form.  ``st_net``
    stacks the two independent subnets s and t (copy 0 and copy 1) so both
    are evaluated in one pass.
    """

    F: int
    f: int
    st_net: MlpSpec
    index: int = 0

    def __post_init__(self):
        if not 1 <= self.f < self.F:
            raise ValueError("split size must satisfy 1 <= f < F")
        if self.st_net.copies != 2:
            raise ValueError("st_net must stack exactly two subnets")

    def scale_shift(self, h1, w=None):
        """(s(h1), t(h1)) for a batch of rows h1."""
        w = self.st_net.params.arrays() if w is None else w
        out = mlp_forward(self.st_net, h1, w)
        s, t = out[0], out[1]
        if not np.all(np.isfinite(ad.value(s))):
            raise FlowError("non-finite scale output in coupling layer %d" % self.index)
        return s, t


def _rows(x):
    return (x[None, :], True) if np.ndim(ad.value(x)) == 1 else (x, False)


def coupling_forward(layer: CouplingLayer, h, w=None):
    """Returns ``(v, logdet)``; logdet has one entry per row for batched input."""
    h, single = _rows(h)
    f = layer.f
    h1 = h[:, :f]
    s, t = layer.scale_shift(h1, w)
    v2 = h[:, f:] * ad.exp(s) + t
    v, ld = ad.concat([h1, v2], axis=-1), ad.sum(s, axis=-1)
    return (v[0], ld[0]) if single else (v, ld)


def coupling_inverse(layer: CouplingLayer, v, w=None, with_logdet=False):
    """Inverse of :func:`coupling_forward`; optionally with log|det| of the inverse."""
    v, single = _rows(v)
    f = layer.f
    v1 = v[:, :f]
    s, t = layer.scale_shift(v1, w)
    h2 = (v[:, f:] - t) * ad.exp(-s)
    h = ad.concat([v1, h2], axis=-1)
    ld = -ad.sum(s, axis=-1)
    if single:
        h, ld = h[0], ld[0]
    if with_logdet:
        return h, ld
    return h


@dataclass
class InnModel:
    """Stack of permutation + coupling blocks realizing a bijection of R^F."""

    layers: list
    perms: list
    F: int
    P: int
    params: ParamSet

    @property
    def ndim_z(self):
        return self.F - self.P

    @classmethod
    def build(cls, params, prefix, F, P, hidden, n_layers, rng, zero_init=True):
        """Random permutations and subnets; zero output layers make each block the identity."""
        if not 0 < P < F:
            raise ValueError("need 0 < P < F (got P=%d, F=%d)" % (P, F))
        f = F // 2
        layers, perms = [], []
        for k in range(n_layers):
            perms.append(rng.permutation(F))
            st = MlpSpec.build(params, f"{prefix}.{k}.st", [f, *hidden, F - f], rng,
                               zero_last=zero_init, copies=2)
            layers.append(CouplingLayer(F, f, st, index=k))
        return cls(layers, perms, F, P, params)

    def weights(self, w=None):
        return self.params.arrays() if w is None else w


def _as_batch(x):
    return x[None, :] if np.ndim(ad.value(x)) == 1 else x


def inn_forward(model: InnModel, lam, w=None, per_layer=False):
    """Returns ``(c, z, logdet)``; with ``per_layer`` also the list of layer logdets."""
    w = model.weights(w)
    single = np.ndim(ad.value(lam)) == 1
    lam = _as_batch(lam)
    if np.shape(ad.value(lam))[-1] != model.F:
        raise ValueError("lambda has dimension %d, model expects %d"
                         % (np.shape(ad.value(lam))[-1], model.F))
    h = lam
    logdet = 0.0
    parts = []
    for perm, layer in zip(model.perms, model.layers):
        h = ad.permute(h, perm)
        h, ld = coupling_forward(layer, h, w)
        parts.append(ld)
        logdet = ld if isinstance(logdet, float) else logdet + ld
    if isinstance(logdet, float):
        logdet = np.zeros(np.shape(ad.value(lam))[0])
    c = h[:, :model.P]
    z = h[:, model.P:]
    if single:
        c, z, logdet = c[0], z[0], logdet[0]
    if per_layer:
        return c, z, logdet, parts
    return c, z, logdet


def inn_inverse(model: InnModel, c, z, w=None, with_logdet=False):
    """lambda = g^{-1}(c, z); optionally with log|det| of the inverse map."""
    w = model.weights(w)
    single = np.ndim(ad.value(c)) == 1 and np.ndim(ad.value(z)) == 1
    c = _as_batch(c)
    z = _as_batch(z)
    if np.shape(ad.value(c))[-1] != model.P or np.shape(ad.value(z))[-1] != model.ndim_z:
        raise ValueError("expected c of length %d and z of length %d" % (model.P, model.ndim_z))
    nc, nz = np.shape(ad.value(c))[0], np.shape(ad.value(z))[0]
    if nc != nz:
        if nc == 1:
            c = c + np.zeros((nz, model.P))
        elif nz == 1:
            z = z + np.zeros((nc, model.ndim_z))
        else:
            raise ValueError("batch sizes of c and z differ")
    h = ad.concat([c, z], axis=-1)
    logdet = 0.0
    for perm, layer in zip(reversed(model.perms), reversed(model.layers)):
        h, ld = coupling_inverse(layer, h, w, with_logdet=True)
        logdet = ld if isinstance(logdet, float) else logdet + ld
        h = ad.permute(h, np.argsort(perm))
    if isinstance(logdet, float):
        logdet = np.zeros(np.shape(ad.value(h))[0])
    if single:
        h, logdet = h[0], logdet[0]
    if with_logdet:
        return h, logdet
    return h


def std_normal_logpdf(x):
    """Row-wise standard-normal log density."""
    k = np.shape(ad.value(x))[-1]
    return -0.5 * ad.sum(ad.square(x), axis=-1) - 0.5 * k * LOG_2PI


def log_q_joint(model: InnModel, prior, c, z, w=None):
    """Log density of (c, z) induced by pushing the prior through g.

    log q(c, z) = log p(g^{-1}(c, z)) + log|det d g^{-1} / d(c, z)|.
    """
    lam, logdet_inv = inn_inverse(model, c, z, w, with_logdet=True)
    return prior.log_density(lam) + logdet_inv

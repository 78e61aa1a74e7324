import numpy as np
import pytest

from piinn.flow import InnModel
from piinn.networks import ParamSet


def make_model(F, P, n_layers=8, hidden=(16,), seed=0, zero_init=False, scale=0.7):
    """Random INN whose scale nets are active (not the identity start).

    Weights are shrunk by ``scale``: at full init scale eight stacked layers
    reach exp-growth of 1e13 and the map is numerically degenerate.
    """
    rng = np.random.default_rng(seed)
    params = ParamSet()
    model = InnModel.build(params, "inn", F, P, list(hidden), n_layers, rng, zero_init=zero_init)
    params.freeze()
    if scale != 1.0:
        params.flat *= scale
    return model


def numeric_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class PolyBasis:
    """Fixed analytic basis built from tape primitives; stands in for an NB-Net."""

    def __init__(self, funcs, dim=1):
        self.funcs = funcs
        self.dim = dim
        self.P = len(funcs)

    def __call__(self, x, w=None):
        from piinn import autodiff as ad
        return ad.concat([f(x) for f in self.funcs], axis=-1)


def shear_rotation_model(theta):
    """2-d flow equal to the rotation by ``theta``: three exact shears and a swap.

    Each shear is a coupling with s = 0 and t(h) = a*relu(h) - a*relu(-h) = a*h.
    Output order is (c, z) = R (lam1, lam2).
    """
    from piinn.flow import CouplingLayer, InnModel
    from piinn.networks import MlpSpec, ParamSet

    alpha = -np.tan(theta / 2)
    beta = np.sin(theta)
    params = ParamSet()
    rng = np.random.default_rng(0)
    layers = []
    for k in range(4):
        net = MlpSpec.build(params, f"rot.{k}", [1, 2, 1], rng, copies=2)
        layers.append(CouplingLayer(2, 1, net, index=k))
    params.freeze()
    params.flat[:] = 0.0
    for k, a in enumerate([alpha, beta, alpha, 0.0]):
        params[f"rot.{k}.W0"][1] = [[1.0, -1.0]]
        params[f"rot.{k}.W1"][1] = [[a], [-a]]
    swap = np.array([1, 0])
    return InnModel(layers, [swap] * 4, 2, 1, params)


def check_param_grad(loss_of_w, params, rng, n_coords=20, h=1e-6):
    """Max relative error between tape gradient and central differences."""
    from piinn import autodiff as ad
    tape = ad.Tape()
    w = params.bind(tape)
    out = loss_of_w(w)
    g = params.flat_grad(ad.backward(tape, out), w)
    flat0 = params.flat.copy()
    idx = rng.choice(len(flat0), min(n_coords, len(flat0)), replace=False)
    fd = np.empty(len(idx))
    for j, k in enumerate(idx):
        for sgn in (1, -1):
            params.flat[:] = flat0
            params.flat[k] += sgn * h
            val = float(ad.value(loss_of_w(params.arrays())))
            fd[j] = val if sgn == 1 else (fd[j] - val) / (2 * h)
    params.flat[:] = flat0
    return float(np.max(np.abs(g[idx] - fd)) / max(np.max(np.abs(fd)), 1e-12))

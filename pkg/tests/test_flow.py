import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piinn import autodiff as ad
from piinn.fields import FieldPrior
from piinn.flow import (CouplingLayer, FlowError, InnModel, coupling_forward, coupling_inverse,
                        inn_forward, inn_inverse, log_q_joint)
from piinn.networks import MlpSpec, ParamSet

from conftest import make_model, numeric_jacobian


def closed_form_layer(s_val=np.log(2.0), t_val=1.0):
    """F=2, f=1 layer with constant s and t (no hidden layer, zero weights)."""
    params = ParamSet()
    st_net = MlpSpec.build(params, "cf", [1, 1], np.random.default_rng(0), zero_last=True, copies=2)
    params.freeze()
    params["cf.b0"][0] = s_val
    params["cf.b0"][1] = t_val
    return CouplingLayer(2, 1, st_net)


def identity_model(F, P, n_layers=3):
    return make_model(F, P, n_layers, zero_init=True)


def test_identity_coupling():
    layer = closed_form_layer(0.0, 0.0)
    h = np.array([0.7, -1.3])
    v, ld = coupling_forward(layer, h)
    assert np.array_equal(v, h) and ld == 0.0
    assert np.array_equal(coupling_inverse(layer, h), h)


def test_closed_form_coupling():
    layer = closed_form_layer()
    a, b = 0.4, -2.5
    v, ld = coupling_forward(layer, np.array([a, b]))
    assert np.allclose(v, [a, 2 * b + 1], rtol=0, atol=1e-15)
    assert np.isclose(ld, np.log(2.0), rtol=0, atol=1e-15)
    assert np.allclose(coupling_inverse(layer, v), [a, b], rtol=0, atol=1e-15)


def test_coupling_round_trip_and_jacobian():
    model = make_model(4, 2, n_layers=1, seed=3)
    layer = model.layers[0]
    rng = np.random.default_rng(4)
    for _ in range(20):
        h = rng.normal(size=4)
        v, ld = coupling_forward(layer, h)
        assert np.max(np.abs(coupling_inverse(layer, v) - h)) <= 1e-12
        J = numeric_jacobian(lambda x: coupling_forward(layer, x)[0], h)
        det = np.linalg.det(J)
        assert abs(det - np.exp(ld)) <= 1e-5 * abs(det)
        # lower-triangular block structure: v1 does not depend on h2
        assert np.all(J[:2, 2:] == 0)


def test_non_finite_scale_names_layer():
    layer = closed_form_layer(np.inf, 0.0)
    layer.index = 5
    with pytest.raises(FlowError, match="layer 5"):
        coupling_forward(layer, np.array([0.0, 1.0]))


def test_split_size_validation():
    params = ParamSet()
    net = MlpSpec.build(params, "x", [2, 2], np.random.default_rng(0), copies=2)
    with pytest.raises(ValueError):
        CouplingLayer(2, 2, net)


def test_identity_model_output_is_permuted_input():
    model = identity_model(5, 2)
    lam = np.arange(5.0)
    c, z, ld = inn_forward(model, lam)
    perm = np.arange(5)
    for p in model.perms:
        perm = perm[p]
    assert np.array_equal(np.concatenate([c, z]), lam[perm])
    assert ld == 0.0
    back = inn_inverse(model, c, z)
    assert np.array_equal(back, lam)


def test_single_layer_model_matches_coupling():
    model = make_model(4, 2, n_layers=1, seed=5)
    lam = np.random.default_rng(6).normal(size=4)
    c, z, ld = inn_forward(model, lam)
    v, ld2 = coupling_forward(model.layers[0], lam[model.perms[0]])
    assert np.array_equal(np.concatenate([c, z]), v) and ld == ld2


def test_round_trip_eight_layers():
    model = make_model(10, 5, seed=7)
    lam = np.random.default_rng(8).normal(size=(1000, 10))
    c, z, _ = inn_forward(model, lam)
    assert np.max(np.abs(inn_inverse(model, c, z) - lam)) <= 1e-9
    x = np.random.default_rng(9).normal(size=(1000, 10))
    cc, zz, _ = inn_forward(model, inn_inverse(model, x[:, :5], x[:, 5:]))
    assert np.max(np.abs(np.concatenate([cc, zz], 1) - x)) <= 1e-9


@pytest.mark.parametrize("F,P", [(4, 2), (10, 5)])
def test_logdet_matches_numeric_jacobian(F, P):
    model = make_model(F, P, seed=F)
    rng = np.random.default_rng(F + 1)
    for _ in range(10):
        lam = rng.normal(size=F)
        _, _, ld = inn_forward(model, lam)
        J = numeric_jacobian(lambda x: np.concatenate(inn_forward(model, x)[:2]), lam)
        sign, logabs = np.linalg.slogdet(J)
        assert abs(np.exp(logabs - ld) - 1.0) <= 1e-4


def test_logdet_additivity():
    model = make_model(6, 3, seed=11)
    lam = np.random.default_rng(12).normal(size=(5, 6))
    _, _, ld, parts = inn_forward(model, lam, per_layer=True)
    assert np.allclose(ld, np.sum(parts, axis=0), rtol=0, atol=1e-13)


def test_inverse_logdet_is_negative_forward():
    model = make_model(6, 3, seed=13)
    lam = np.random.default_rng(14).normal(size=(5, 6))
    c, z, ld = inn_forward(model, lam)
    _, ldi = inn_inverse(model, c, z, with_logdet=True)
    assert np.allclose(ldi, -ld, rtol=0, atol=1e-12)


def test_fiber_non_degenerate_and_consistent():
    model = make_model(6, 2, seed=15)
    c = np.array([0.3, -0.8])
    z = np.random.default_rng(16).normal(size=(50, 4))
    lam = inn_inverse(model, c, z)
    assert len(np.unique(lam.round(12), axis=0)) == 50
    cc, _, _ = inn_forward(model, lam)
    assert np.max(np.abs(cc - c)) <= 1e-9


def test_shape_errors():
    model = make_model(6, 2, seed=1)
    with pytest.raises(ValueError):
        inn_forward(model, np.ones(5))
    with pytest.raises(ValueError):
        inn_inverse(model, np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        make_model(3, 3)


def test_log_q_identity_at_mode():
    model = identity_model(10, 4)
    prior = FieldPrior(np.zeros(10), np.ones(10))
    val = log_q_joint(model, prior, np.zeros(4), np.zeros(6))
    assert np.isclose(val, -5 * np.log(2 * np.pi), rtol=0, atol=1e-12)


def test_log_q_constant_scale_shift():
    prior = FieldPrior(np.zeros(2), np.ones(2))
    layer = closed_form_layer(np.log(2.0), 0.0)
    model = InnModel([layer], [np.arange(2)], 2, 1, layer.st_net.params)
    ident = InnModel([closed_form_layer(0.0, 0.0)], [np.arange(2)], 2, 1, ParamSet())
    ident.params = ident.layers[0].st_net.params
    c, z = np.array([0.3]), np.array([0.8])
    # compare log p(lambda) - log q at the same lambda: shift equals -(F-f) log 2
    lam = np.array([0.3, 0.4])
    v, _ = coupling_forward(layer, lam)
    q_scaled = log_q_joint(model, prior, v[:1], v[1:])
    q_ident = log_q_joint(ident, prior, lam[:1], lam[1:])
    assert np.isclose(q_scaled - q_ident, -np.log(2.0), rtol=0, atol=1e-14)
    assert np.isfinite(log_q_joint(model, prior, c, z))


def test_log_q_normalizes_in_two_dims():
    model = make_model(2, 1, n_layers=4, hidden=(8,), seed=17, scale=0.5)
    prior = FieldPrior(np.array([0.2, -0.1]), np.array([0.8, 1.3]))
    g = np.linspace(-12, 12, 601)
    C, Z = np.meshgrid(g, g, indexing="ij")
    lq = log_q_joint(model, prior, C.reshape(-1, 1), Z.reshape(-1, 1))
    mass = np.trapezoid(np.trapezoid(np.exp(lq).reshape(C.shape), g, axis=1), g)
    assert abs(mass - 1.0) <= 0.01


def test_log_q_is_differentiable_in_parameters():
    model = make_model(4, 2, n_layers=2, hidden=(5,), seed=18, scale=0.5)
    prior = FieldPrior(np.zeros(4), np.ones(4))
    params = model.params
    c = np.array([[0.1, -0.4]])
    z = np.array([[0.7, 0.2]])
    tape = ad.Tape()
    w = params.bind(tape)
    g = params.flat_grad(ad.backward(tape, ad.sum(log_q_joint(model, prior, c, z, w))), w)
    flat0 = params.flat.copy()
    h = 1e-6
    for k in np.random.default_rng(19).choice(len(flat0), 10, replace=False):
        e = np.zeros_like(flat0)
        e[k] = h
        params.set_flat(flat0 + e)
        fp = float(log_q_joint(model, prior, c, z)[0])
        params.set_flat(flat0 - e)
        fm = float(log_q_joint(model, prior, c, z)[0])
        assert abs((fp - fm) / (2 * h) - g[k]) <= 1e-6 * max(1.0, abs(g[k]))
    params.set_flat(flat0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_bijection_property(seed):
    model = make_model(6, 3, n_layers=4, seed=seed % 5)
    x = np.random.default_rng(seed).normal(scale=2.0, size=(8, 6))
    c, z, _ = inn_forward(model, x)
    assert np.max(np.abs(inn_inverse(model, c, z) - x)) <= 1e-9

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piinn import autodiff as ad


def grad_of(fn, *arrays):
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    g = ad.backward(tape, out)
    return float(ad.value(out)), [g[x] for x in leaves]


def fd_grad(fn, arrays, k, h=1e-5):
    x = np.array(arrays[k], dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        a = list(arrays)
        a[k] = xp
        fp = fn(*a)
        a[k] = xm
        fm = fn(*a)
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_square_derivative():
    _, (g,) = grad_of(lambda x: ad.square(x), np.array(3.0))
    assert g == 6.0


def test_exp_times_y():
    _, (gx, gy) = grad_of(lambda x, y: ad.exp(x) * y, np.array(0.0), np.array(2.0))
    assert (gx, gy) == (2.0, 1.0)


def test_unused_nodes_have_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.full(2, 5.0))
    out = ad.sum(ad.square(x))
    g = ad.backward(tape, out)
    assert np.all(g[y] == 0)
    assert y not in g


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, x * 2.0)


def test_output_must_belong_to_tape():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.leaf(1.0)
    with pytest.raises(ValueError):
        ad.backward(t2, x * 2.0)


UNARY = {
    "exp": (ad.exp, lambda r, n: r.normal(size=n)),
    "log": (ad.log, lambda r, n: r.uniform(0.5, 3.0, n)),
    "sin": (ad.sin, lambda r, n: r.normal(size=n)),
    "cos": (ad.cos, lambda r, n: r.normal(size=n)),
    "square": (ad.square, lambda r, n: r.normal(size=n)),
    "reciprocal": (ad.reciprocal, lambda r, n: r.uniform(0.5, 2.0, n) * r.choice([-1, 1], n)),
    # keep away from the kink
    "relu": (ad.relu, lambda r, n: r.uniform(0.1, 1.0, n) * r.choice([-1, 1], n)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    op, gen = UNARY[name]
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = gen(rng, 4)
        wts = rng.normal(size=4)
        f = lambda v: ad.sum(op(v) * wts)
        _, (g,) = grad_of(f, x)
        ref = fd_grad(lambda v: float(np.sum(ad.value(op(v)) * wts)), [x], 0)
        worst = max(worst, rel_err(g, ref))
    assert worst <= 1e-6


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients_with_broadcast(name):
    op = BINARY[name]
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(1, 4))
        wts = rng.normal(size=(3, 4))
        f = lambda x, y: ad.sum(op(x, y) * wts)
        _, (ga, gb) = grad_of(f, a, b)
        fn = lambda x, y: float(np.sum(op(x, y) * wts))
        assert rel_err(ga, fd_grad(fn, [a, b], 0)) <= 1e-6
        assert rel_err(gb, fd_grad(fn, [a, b], 1)) <= 1e-6


def test_matmul_and_structural_gradients():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 5))
    perm = rng.permutation(5)

    def f(a, b):
        m = ad.permute(a @ b, perm)
        m = ad.concat([m[:, :2], ad.transpose(ad.reshape(m[:, 2:], (3, 3)))], axis=1)
        return ad.sum(ad.square(m)) + ad.mean(m, axis=0)[1]

    _, (ga, gb) = grad_of(f, A, B)
    fn = lambda a, b: float(ad.value(f(a, b)))
    assert rel_err(ga, fd_grad(fn, [A, B], 0)) <= 1e-6
    assert rel_err(gb, fd_grad(fn, [A, B], 1)) <= 1e-6


def _mlp(params, x):
    h = x
    for k, (W, b) in enumerate(params):
        h = h @ W + b
        if k < len(params) - 1:
            h = ad.relu(h)
    return h


def test_random_mlp_parameter_gradients():
    rng = np.random.default_rng(4)
    widths = [3, 7, 6, 2]
    flat = [rng.normal(size=s) * 0.7 for i in range(3)
            for s in ((widths[i], widths[i + 1]), (1, widths[i + 1]))]
    x = rng.normal(size=(5, 3))

    def f(*ps):
        pairs = list(zip(ps[::2], ps[1::2]))
        return ad.sum(ad.square(_mlp(pairs, x)))

    _, grads = grad_of(f, *flat)
    fn = lambda *ps: float(ad.value(f(*ps)))
    for k in range(len(flat)):
        assert rel_err(grads[k], fd_grad(fn, flat, k)) <= 1e-6


def test_directional_derivative_of_norm_squared():
    d = ad.directional_derivative(lambda v: ad.sum(ad.square(v)), np.array([1.0, 2.0]),
                                  np.array([1.0, 0.0]))
    assert float(d) == 2.0


def test_directional_derivative_shape_mismatch():
    with pytest.raises(ValueError, match="direction"):
        ad.directional_derivative(lambda v: ad.sum(v), np.ones(3), np.ones(2))


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_directional_derivative_of_linear_map_is_constant(x):
    w = np.array([0.5, -2.0, 3.0])
    d = ad.directional_derivative(lambda v: ad.sum(v * w), np.array(x), np.array([0.0, 1.0, 0.0]))
    assert float(d) == -2.0


def test_directional_derivative_of_relu_mlp_matches_fd():
    rng = np.random.default_rng(5)
    params = [(rng.normal(size=(2, 8)), rng.normal(size=(1, 8))),
              (rng.normal(size=(8, 1)), rng.normal(size=(1, 1)))]
    x = rng.normal(size=(1, 2))
    e = np.array([[0.6, 0.8]])
    d = float(np.asarray(ad.directional_derivative(lambda v: _mlp(params, v), x, e)).ravel()[0])
    h = 1e-6
    f = lambda v: float(_mlp(params, v).ravel()[0])
    ref = (f(x + h * e) - f(x - h * e)) / (2 * h)
    assert abs(d - ref) <= 1e-6 * max(1.0, abs(ref))


def test_forward_over_reverse_consistency():
    rng = np.random.default_rng(6)
    W0 = rng.normal(size=(2, 6))
    b0 = rng.normal(size=(1, 6))
    W1 = rng.normal(size=(6, 1))
    x = rng.normal(size=(4, 2))
    e = np.tile([[1.0, 0.0]], (4, 1))

    def dd(w0):
        f = lambda v: ad.sin(v @ w0 + b0) @ W1
        return ad.sum(ad.square(ad.directional_derivative(f, x, e)))

    tape = ad.Tape()
    w = tape.leaf(W0)
    g = ad.backward(tape, dd(w))[w]
    ref = fd_grad(lambda w0: float(dd(w0)), [W0], 0)
    assert rel_err(g, ref) <= 1e-5


def test_relu_derivative_at_zero_is_zero():
    _, (g,) = grad_of(lambda x: ad.sum(ad.relu(x)), np.zeros(3))
    assert np.all(g == 0)


def test_tape_is_topological_and_replays_exactly():
    rng = np.random.default_rng(7)
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(4, 3)))
    W = tape.leaf(rng.normal(size=(3, 2)))
    y = ad.sum(ad.exp(ad.sin(x @ W)) * 0.3 + ad.log(ad.square(x @ W) + 1.0))
    for i, par in enumerate(tape.parents):
        assert all(p < i for p in par)
    fresh = tape.replay()
    for a, b in zip(fresh, tape.values):
        assert np.array_equal(a, b)
    assert float(ad.value(y)) == float(fresh[-1])


def test_identical_inputs_build_identical_tapes():
    def build():
        rng = np.random.default_rng(8)
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(5, 2)))
        ad.sum(ad.relu(x @ rng.normal(size=(2, 3))))
        return tape

    t1, t2 = build(), build()
    assert t1.ops == t2.ops and t1.parents == t2.parents
    assert all(np.array_equal(a, b) for a, b in zip(t1.values, t2.values))


def test_dual_product_rule():
    x = ad.Dual(np.array(2.0), [np.array(1.0)])
    y = x * x * ad.sin(x)
    expected = 2 * 2.0 * np.sin(2.0) + 4.0 * np.cos(2.0)
    assert np.isclose(y.tangents[0], expected, rtol=0, atol=1e-14)

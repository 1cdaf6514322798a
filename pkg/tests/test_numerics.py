import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contraflow.mlp import Mlp
from contraflow.numerics import (AdamState, ContractViolation, DimensionError, NumericError, ParamGraph, ParamStore,
                                 Var, adam_step, eig_sym, eigh_batch, finite_diff_jacobian, grad, make_rng,
                                 quadrature_nodes, split, sym_part)
from contraflow.numerics import autodiff as ad

from conftest import rel_err


# --- sym_part / eig_sym ---------------------------------------------------------

def test_sym_part_examples():
    np.testing.assert_array_equal(sym_part(np.eye(2)), np.eye(2))
    np.testing.assert_array_equal(sym_part([[0.0, -1.0], [1.0, 0.0]]), np.zeros((2, 2)))
    np.testing.assert_array_equal(sym_part([[-1.0, 4.0], [0.0, -1.0]]), [[-1.0, 2.0], [2.0, -1.0]])


def test_sym_part_rejects_non_square():
    with pytest.raises(DimensionError):
        sym_part(np.ones((2, 3)))


def test_eig_sym_examples():
    w, _ = eig_sym(np.diag([-1.0, -3.0]))
    np.testing.assert_allclose(w, [-3.0, -1.0], atol=1e-15)
    w, _ = eig_sym(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [1.0, 3.0], atol=1e-14)
    w, V = eig_sym(np.eye(5))
    np.testing.assert_allclose(w, np.ones(5), atol=1e-15)
    np.testing.assert_allclose(V.T @ V, np.eye(5), atol=1e-12)


def test_eig_sym_rejects_asymmetric_and_nonfinite():
    with pytest.raises(ContractViolation):
        eig_sym(np.array([[1.0, 1e-6], [0.0, 1.0]]))
    with pytest.raises(ContractViolation):
        eig_sym(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        eigh_batch(np.eye(17))


@pytest.mark.parametrize("D", [2, 3, 6, 8])
def test_eig_reconstruction_property(D):
    rng = np.random.default_rng(D)
    S = rng.standard_normal((1000, D, D))
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = eigh_batch(S)
    R = V @ (w[..., None] * np.swapaxes(V, -1, -2))
    norms = np.linalg.norm(S, axis=(-2, -1))
    err = np.linalg.norm(R - S, axis=(-2, -1)) / norms
    assert err.max() <= 1e-8
    assert np.all(np.diff(w, axis=-1) >= 0)
    orth = np.abs(np.swapaxes(V, -1, -2) @ V - np.eye(D)).max()
    assert orth <= 1e-9
    # eigen-equation residual, relative to ‖S‖
    res = np.linalg.norm(S @ V - V * w[..., None, :], axis=-2).max(axis=-1) / norms
    assert res.max() <= 1e-9


def test_eig_repeated_eigenvalues_reconstruct():
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    S = Q @ np.diag([1.0, 1.0, 1.0, -2.0]) @ Q.T
    S = 0.5 * (S + S.T)
    w, V = eig_sym(S)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, S, atol=1e-12)
    np.testing.assert_allclose(w, [-2.0, 1.0, 1.0, 1.0], atol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_eig_2x2_closed_form_property(v):
    a, b, c = v
    S = np.array([[a, b], [b, c]])
    w, V = eig_sym(S)
    scale = max(np.abs(S).max(), 1e-300)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, S, atol=1e-12 * scale + 1e-300)
    ref = np.linalg.eigvalsh(S)
    np.testing.assert_allclose(w, ref, atol=1e-12 * scale + 1e-300)


# --- autodiff -------------------------------------------------------------------

def test_grad_quadratic_and_constant():
    store = ParamStore()
    p = np.array([1.0, -2.0, 0.5])
    store.add("p", p)
    g = ParamGraph(store)
    P = g.params["p"]
    np.testing.assert_allclose(grad(g, ad.vsum(P * P)), 2 * p)
    g = ParamGraph(store)
    np.testing.assert_array_equal(grad(g, 3.0), np.zeros(3))


def _fd_grad(store, loss_fn, h=1e-5):
    base = store.values.copy()
    out = np.zeros_like(base)
    for i in range(base.size):
        store.values[:] = base
        store.values[i] += h
        fp = loss_fn(store.arrays())
        store.values[:] = base
        store.values[i] -= h
        fm = loss_fn(store.arrays())
        out[i] = (fp - fm) / (2 * h)
    store.values[:] = base
    return out


@pytest.mark.parametrize("act", ["tanh", "softplus", "sigmoid"])
def test_grad_matches_finite_differences_on_mlp_velocity_loss(act):
    rng = np.random.default_rng(1)
    store = ParamStore()
    net = Mlp("f", (2, 8, 8, 2), act)
    net.register(store, rng)
    X = rng.standard_normal((20, 2))
    Y = rng.standard_normal((20, 2))

    def loss_fn(P):
        r = net(X, P) - Y
        return ad.vmean(ad.vsum(ad.square(r), axis=-1))

    g = ParamGraph(store)
    got = grad(g, loss_fn(g.params))
    ref = _fd_grad(store, lambda P: float(loss_fn(P)))
    rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-6)
    assert rel.max() <= 1e-4


def test_grad_matches_fd_on_random_graphs():
    # many small random MLP graphs with different widths and seeds
    for seed in range(100):
        rng = np.random.default_rng(seed)
        widths = (3, int(rng.integers(2, 6)), 2)
        store = ParamStore()
        net = Mlp("n", widths, "tanh")
        net.register(store, rng)
        X = rng.standard_normal((5, 3))

        def loss_fn(P):
            return ad.vsum(ad.square(net(X, P)))

        g = ParamGraph(store)
        got = grad(g, loss_fn(g.params))
        ref = _fd_grad(store, lambda P: float(loss_fn(P)))
        assert rel_err(got, ref) <= 1e-4


def test_ops_gradients_against_fd():
    rng = np.random.default_rng(3)
    a0 = rng.uniform(0.5, 1.5, (3, 4))
    b0 = rng.uniform(0.5, 1.5, (4,))
    fns = {
        "div_broadcast": lambda a, b: ad.vsum(a / b),
        "power": lambda a, b: ad.vsum(ad.power(a, 1.7) * b),
        "log_exp": lambda a, b: ad.vsum(ad.log(a) + ad.exp(b)),
        "sqrt": lambda a, b: ad.vsum(ad.sqrt(a)),
        "matmul": lambda a, b: ad.vsum(ad.square(a @ b)),
        "concat": lambda a, b: ad.vsum(ad.square(ad.concat([a, ad.reshape(b, (1, 4))], axis=0))),
        "stack": lambda a, b: ad.vsum(ad.stack([a[0], b]) * 2.0),
        "amax": lambda a, b: ad.vsum(ad.amax(a * b, axis=-1)),
        "cumsum": lambda a, b: ad.vsum(ad.square(ad.cumsum(a, axis=-1))),
        "mean": lambda a, b: ad.vmean(a, axis=0) @ b,
        "getitem_fancy": lambda a, b: ad.vsum(ad.getitem(a, (slice(None), np.array([0, 0, 2])))),
        "take": lambda a, b: ad.vsum(ad.take_along_axis(a, np.array([[1], [0], [3]]), axis=-1) ** 2),
        "where": lambda a, b: ad.vsum(ad.where(a.value > 1.0, a * a, -a)),
        "clip": lambda a, b: ad.vsum(ad.clip(a, 0.7, 1.2) * 3.0),
        "softplus_sigmoid": lambda a, b: ad.vsum(ad.softplus(a) + ad.sigmoid(b)),
        "swap": lambda a, b: ad.vsum(ad.swap_last(ad.reshape(a, (3, 4))) @ a),
    }
    for name, fn in fns.items():
        A, B = Var(a0.copy()), Var(b0.copy())
        out = fn(A, B)
        ad.backward(out)
        for leaf, base, which in ((A, a0, 0), (B, b0, 1)):
            ref = np.zeros_like(base)
            it = np.nditer(base, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                hi, lo = base.copy(), base.copy()
                hi[i] += 1e-6
                lo[i] -= 1e-6
                args_hi = (hi, b0) if which == 0 else (a0, hi)
                args_lo = (lo, b0) if which == 0 else (a0, lo)
                ref[i] = (float(ad.value_of(fn(Var(args_hi[0]), Var(args_hi[1]))))
                          - float(ad.value_of(fn(Var(args_lo[0]), Var(args_lo[1]))))) / 2e-6
            got = np.zeros_like(base) if leaf.grad is None else leaf.grad
            np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6, err_msg=name)


def test_eigvalsh_gradient_matches_fd():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((3, 3))
    S0 = 0.5 * (M + M.T)
    w = rng.standard_normal(3)

    def f(S):
        return ad.vsum(ad.eigvalsh(0.5 * (S + ad.swap_last(S))) * w)

    S = Var(S0.copy())
    ad.backward(f(S))
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            hi, lo = S0.copy(), S0.copy()
            hi[i, j] += 1e-6
            lo[i, j] -= 1e-6
            ref[i, j] = (f(hi) - f(lo)) / 2e-6
    np.testing.assert_allclose(S.grad, ref, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_nan_reports_node():
    x = Var(np.array([-1.0, 1.0]))
    y = ad.vsum(ad.sqrt(x * 0.0))  # derivative of sqrt at 0 is infinite
    with pytest.raises(NumericError, match="node"):
        ad.backward(y)


def test_replay_reproduces_forward_bit_for_bit():
    rng = np.random.default_rng(7)
    store = ParamStore()
    net = Mlp("n", (2, 16, 4), "tanh")
    net.register(store, rng)
    g = ParamGraph(store)
    out = ad.vsum(ad.square(net(rng.standard_normal((10, 2)), g.params)))
    assert np.array_equal(ad.replay(out), out.value)


def test_ops_on_plain_arrays_return_arrays():
    a = np.array([1.0, 2.0])
    assert isinstance(ad.tanh(a), np.ndarray)
    assert isinstance(ad.vsum(a), (np.ndarray, float, np.floating))


# --- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    st0 = AdamState.init(2, lr=0.1)
    new, st1 = adam_step(p, np.zeros(2), st0)
    np.testing.assert_array_equal(new, p)
    assert st1.step == 1


def test_adam_first_step_is_lr_sign():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -3.0, 0.0])
    new, _ = adam_step(p, g, AdamState.init(3, lr=0.01))
    # m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
    expected = p - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=0, atol=1e-15)


def test_adam_is_pure_and_deterministic():
    p = np.array([1.0, 2.0])
    g = np.array([0.3, -0.1])
    s = AdamState.init(2)
    a = adam_step(p, g, s)
    b = adam_step(p, g, s)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(s.m, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_step_counter_increases():
    s = AdamState.init(1)
    p = np.zeros(1)
    steps = []
    for _ in range(3):
        p, s = adam_step(p, np.ones(1), s)
        steps.append(s.step)
    assert steps == [1, 2, 3]


def test_adam_length_mismatch():
    with pytest.raises(DimensionError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.init(2))


# --- quadrature -----------------------------------------------------------------

def test_quadrature_examples():
    t, w = quadrature_nodes("midpoint", 1)
    np.testing.assert_array_equal(t, [0.5])
    np.testing.assert_array_equal(w, [1.0])
    t, w = quadrature_nodes("gauss_legendre", 2)
    np.testing.assert_allclose(t, [0.5 - 1 / (2 * np.sqrt(3)), 0.5 + 1 / (2 * np.sqrt(3))], atol=1e-15)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
    assert abs(np.sum(w * t**3) - 0.25) <= 1e-15
    with pytest.raises(ValueError):
        quadrature_nodes("gauss_legendre", 0)
    with pytest.raises(ValueError):
        quadrature_nodes("simpson", 3)


@pytest.mark.parametrize("n", [1, 2, 5, 16])
def test_gauss_legendre_exactness(n):
    t, w = quadrature_nodes("gauss_legendre", n)
    assert abs(w.sum() - 1.0) <= 1e-12
    for deg in range(2 * n):
        assert abs(np.sum(w * t**deg) - 1.0 / (deg + 1)) <= 1e-13


# --- finite differences ---------------------------------------------------------

def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_jacobian(lambda x: x, np.zeros(3)), np.eye(3), atol=1e-10)
    A = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]])
    np.testing.assert_allclose(finite_diff_jacobian(lambda x: A @ x, np.array([0.3, -1.0])), A, atol=1e-10)
    J = finite_diff_jacobian(lambda x: np.array([np.sin(x[0]), x[0] * x[1]]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(J, [[1.0, 0.0], [1.0, 0.0]], atol=1e-8)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nan_raises():
    with pytest.raises(NumericError):
        finite_diff_jacobian(lambda x: np.sqrt(x - 1.0), np.array([0.0]))


# --- rng --------------------------------------------------------------------------

def test_rng_same_seed_same_stream_and_split_independent():
    a = make_rng(3).standard_normal(5)
    b = make_rng(3).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    s1, s2 = split(3, 2)
    x, y = s1.standard_normal(1000), s2.standard_normal(1000)
    assert not np.array_equal(x, y)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.1

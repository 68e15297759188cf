import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simgap import lipnet
from simgap.dynamics import Box, DomainError
from simgap.lipnet import LambdaParams, LipMLP


def random_net(rng, widths, L1=1.0, hidden="tanh", output="softplus"):
    W = [rng.standard_normal((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    b = [rng.standard_normal(o) for o in widths[1:]]
    return LipMLP(W, b, hidden, output, L1)


def hand_forward(z, W, b):
    # straightforward loop version used as a reference
    a = list(z)
    for k in range(len(W)):
        pre = [sum(W[k][r][c] * a[c] for c in range(len(a))) + b[k][r] for r in range(len(W[k]))]
        a = [math.tanh(v) for v in pre] if k < len(W) - 1 else [math.log1p(math.exp(v)) for v in pre]
    return a[0]


def flat_params(net):
    return np.concatenate([p.ravel() for p in net.weights + net.biases])


def set_params(net, theta):
    k = 0
    for p in net.weights + net.biases:
        p[...] = theta[k:k + p.size].reshape(p.shape)
        k += p.size


def fd_param_grad(net, z, upstream, h=1e-6):
    theta = flat_params(net)
    g = np.zeros_like(theta)
    for k in range(theta.size):
        for s in (1, -1):
            t = theta.copy()
            t[k] += s * h
            set_params(net, t)
            g[k] += s * np.dot(upstream, net(z)) / (2 * h)
    set_params(net, theta)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_constant_network_is_ln2():
    net = LipMLP([np.zeros((4, 3)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)])
    np.testing.assert_allclose(net(np.random.default_rng(0).standard_normal((5, 3))), math.log(2.0))
    assert lipnet.forward(net, [0.1, 0.2], [0.3]) == pytest.approx(math.log(2.0))


def test_one_one_one_hand_rolled():
    net = LipMLP([[[1.0]], [[1.0]]], [[0.0], [0.0]])
    # tanh(0) = 0, softplus(0) = ln 2
    assert net(np.zeros((1, 1)))[0] == pytest.approx(math.log(2.0), abs=0)
    rng = np.random.default_rng(3)
    net = random_net(rng, [3, 4, 2, 1])
    z = rng.standard_normal((6, 3))
    ref = [hand_forward(row, [w.tolist() for w in net.weights], [b.tolist() for b in net.biases]) for row in z]
    np.testing.assert_allclose(net(z), ref, rtol=1e-13)


def test_forward_dimension_check():
    net = LipMLP([np.zeros((2, 3)), np.zeros((1, 2))], [np.zeros(2), np.zeros(1)])
    with pytest.raises(DomainError):
        lipnet.forward(net, [0.0], [0.0])


def test_output_nonnegative(rng):
    net = random_net(rng, [3, 8, 8, 1])
    assert np.all(net(5 * rng.standard_normal((10_000, 3))) >= 0)


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [2, 4, 1])
    z = rng.standard_normal((7, 2))
    up = rng.standard_normal(7)
    dW, db = lipnet.backprop(net, z, up)
    g = np.concatenate([p.ravel() for p in dW + db])
    assert rel_err(g, fd_param_grad(net, z, up)) <= 1e-5


def test_backprop_batch_linearity(rng):
    net = random_net(rng, [3, 5, 5, 1])
    z = rng.standard_normal((4, 3))
    total = lipnet.backprop(net, z, np.ones(4))
    parts = [lipnet.backprop(net, z[k:k + 1], np.ones(1)) for k in range(4)]
    for j in range(len(net.weights)):
        np.testing.assert_allclose(total[0][j], sum(p[0][j] for p in parts), atol=1e-12)
        np.testing.assert_allclose(total[1][j], sum(p[1][j] for p in parts), atol=1e-12)


def test_backprop_dead_paths_zero():
    net = LipMLP([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)])
    dW, db = lipnet.backprop(net, np.ones((2, 2)), np.ones(2))
    assert np.all(dW[0] == 0) and np.all(db[0] == 0)


def test_input_gradient_fd(rng):
    net = random_net(rng, [3, 6, 1])
    z = rng.standard_normal((4, 3))
    g = lipnet.input_gradient(net, z)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        np.testing.assert_allclose(g[:, k], (net(z + e) - net(z - e)) / (2 * h), rtol=1e-6, atol=1e-9)


def test_zero_weight_matrix_is_block_diagonal():
    net = LipMLP([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], L1=0.5)
    M = lipnet.build_cert_matrix(net, LambdaParams([np.ones(3)])).matrix
    np.testing.assert_array_equal(M, np.diag([0.25, 0.25, 2, 2, 2, 1]))
    assert lipnet.cert_check(M).psd


def test_matrix_symmetric(rng):
    net = random_net(rng, [3, 4, 5, 1])
    lam = LambdaParams([rng.uniform(0.1, 2, 4), rng.uniform(0.1, 2, 5)])
    M = lipnet.build_cert_matrix(net, lam).matrix
    assert np.max(np.abs(M - M.T)) == 0.0
    assert M.shape == (3 + 4 + 5 + 1,) * 2


def test_multiplier_width_mismatch():
    net = LipMLP([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], L1=1.0)
    with pytest.raises(DomainError):
        lipnet.build_cert_matrix(net, LambdaParams([np.ones(2)]))
    with pytest.raises(DomainError):
        LambdaParams([-np.ones(2)])


@settings(max_examples=80, deadline=None)
@given(w0=st.floats(-3, 3), w1=st.floats(-3, 3), lam=st.floats(0.01, 5), L1=st.floats(0.1, 4))
def test_scalar_chain_psd_against_eigenvalues(w0, w1, lam, L1):
    net = LipMLP([[[w0]], [[w1]]], [[0.0], [0.0]], L1=L1)
    M = lipnet.build_cert_matrix(net, LambdaParams([[lam]])).matrix
    ref = np.array([[L1 * L1, -lam * w0, 0.0], [-lam * w0, 2 * lam, -w1], [0.0, -w1, 1.0]])
    np.testing.assert_array_equal(M, ref)
    eig = np.linalg.eigvalsh(ref)
    if abs(eig[0]) > 1e-9:
        assert lipnet.cert_check(M).psd == (eig[0] > 0)


def test_cert_check_examples():
    assert lipnet.cert_check(np.eye(3)) == (True, 0.0)
    assert not lipnet.cert_check(np.diag([1.0, -1.0])).psd
    assert lipnet.cert_check(np.diag([1.0, -1.0])).logdet == -np.inf
    assert lipnet.cert_check(np.diag([2.0, 3.0])).logdet == pytest.approx(math.log(6.0), abs=1e-14)


def test_rho_conventions():
    net = LipMLP([np.zeros((2, 2)), np.zeros((1, 2))], [np.zeros(2), np.zeros(1)], L1=3.0)
    lam = LambdaParams([np.ones(2)])
    assert lipnet.build_cert_matrix(net, lam).rho == 9.0
    assert lipnet.build_cert_matrix(net, lam, rho_convention="linear").rho == 3.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), L1=st.floats(0.2, 5))
def test_single_layer_psd_iff_norm_below_bound(seed, L1):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((1, 3))
    net = LipMLP([W], [np.zeros(1)], output="identity", L1=L1)
    norm = np.linalg.norm(W)
    if abs(norm - L1) > 1e-9:
        assert lipnet.cert_check(lipnet.build_cert_matrix(net, LambdaParams([]))).psd == (norm < L1)


def fd_cert(fun, net, lam, h=1e-6):
    """Finite-difference gradient of a scalar function of the certificate matrix."""
    gW = []
    for w in net.weights:
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            up = fun(lipnet.build_cert_matrix(net, lam).matrix)
            w[idx] = old - h
            dn = fun(lipnet.build_cert_matrix(net, lam).matrix)
            w[idx] = old
            g[idx] = (up - dn) / (2 * h)
        gW.append(g)
    gl = []
    for d in lam.diags:
        g = np.zeros_like(d)
        for k in range(d.size):
            old = d[k]
            d[k] = old + h
            up = fun(lipnet.build_cert_matrix(net, lam).matrix)
            d[k] = old - h
            dn = fun(lipnet.build_cert_matrix(net, lam).matrix)
            d[k] = old
            g[k] = (up - dn) / (2 * h)
        gl.append(g)
    return gW, gl


@pytest.mark.parametrize("widths", [[3, 4, 1], [2, 3, 4, 1]])
def test_logdet_gradient_fd(widths):
    rng = np.random.default_rng(len(widths))
    net, lam = lipnet.init_certified(widths, 2.0, rng)
    lam = LambdaParams([d * rng.uniform(0.8, 1.2, d.size) for d in lam.diags])
    assert lipnet.cert_check(lipnet.build_cert_matrix(net, lam)).psd
    _, dW, dl = lipnet.logdet_grad(net, lam)
    fW, fl = fd_cert(lambda M: np.linalg.slogdet(M)[1], net, lam)
    for a, b in zip(dW + dl, fW + fl):
        assert rel_err(a, b) <= 1e-5


def test_min_eig_gradient_fd(rng):
    net = random_net(rng, [3, 4, 1], L1=0.1)
    lam = LambdaParams([rng.uniform(0.5, 1.5, 4)])
    val, dW, dl = lipnet.min_eig_grad(net, lam)
    assert val < 0
    fW, fl = fd_cert(lambda M: np.linalg.eigvalsh(M)[0], net, lam)
    for a, b in zip(dW + dl, fW + fl):
        assert rel_err(a, b) <= 1e-5


def test_empirical_constant_and_linear():
    X, U = Box([0.0], [1.0]), Box([0.0], [1.0])
    const = LipMLP([np.zeros((1, 2))], [np.ones(1)], output="identity")
    assert lipnet.empirical_lipschitz(const, X, U, trials=1000) == 0.0
    lin = LipMLP([[[3.0, 4.0]]], [[0.0]], output="identity")
    est = lipnet.empirical_lipschitz(lin, X, U, trials=100_000)
    assert 4.95 <= est <= 5.0 + 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_certified_networks_respect_bound(seed):
    rng = np.random.default_rng(seed)
    L1 = [0.05, 0.5, 2.0, 10.0][seed]
    net, lam = lipnet.init_certified([4, 8, 6, 1], L1, rng)
    # push weights toward the boundary while the certificate still holds
    for _ in range(40):
        trial = net.copy()
        for w in trial.weights:
            w *= 1.05
        if not lipnet.cert_check(lipnet.build_cert_matrix(trial, lam)).psd:
            break
        net = trial
    assert lipnet.cert_check(lipnet.build_cert_matrix(net, lam)).psd
    X, U = Box([-1, -1], [1, 1]), Box([-1, -1], [1, 1])
    assert lipnet.empirical_lipschitz(net, X, U, trials=100_000, seed=seed) <= L1


def test_init_certified_range():
    rng = np.random.default_rng(0)
    for L1 in (1e-3, 0.02, 1.0, 10.0):
        net, lam = lipnet.init_certified([3, 16, 1], L1, rng, out_bias=0.3)
        assert lipnet.cert_check(lipnet.build_cert_matrix(net, lam)).psd
        assert net.biases[-1][0] == 0.3


def test_serialization_roundtrip(tmp_path, rng):
    net = random_net(rng, [3, 5, 4, 1], L1=0.123456789)
    lam = LambdaParams([rng.uniform(0, 1, 5), rng.uniform(0, 1, 4)])
    lipnet.save_net(tmp_path / "g.net", net, lam)
    back, blam = lipnet.load_net(tmp_path / "g.net")
    for a, b in zip(net.weights + net.biases + lam.diags, back.weights + back.biases + blam.diags):
        assert a.tobytes() == b.tobytes()
    assert back.L1 == net.L1 and back.rho_convention == net.rho_convention
    z = rng.standard_normal((50, 3))
    assert net(z).tobytes() == back(z).tobytes()
    assert lipnet.dumps_net(back, blam) == lipnet.dumps_net(net, lam)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from latentinf.estimation import estimate_rho, fit
from latentinf.inference import (
    InferenceUnavailable,
    ci_individual,
    ci_link_probability,
    confidence_ellipse,
    covariance_bundle,
    ellipse_from_covariance,
    normal_quantile,
    omega_hat,
    omega_individual,
    sigma_hat,
    var_sandwich,
)
from latentinf.model import Family, LatentState, ModelSpec, Network, loglik_derivs, network_from_pairs
from latentinf.simulation import SimSetting, gen_replication_stream

from conftest import random_network, random_state


def test_sigma_two_nodes():
    state = LatentState([[0.4], [-0.3]], [0.2, 0.1])
    net = network_from_pairs(2, [(0, 1)])
    spec = ModelSpec(r=1)
    _, l2, _ = loglik_derivs(spec, 1, 0.4 * -0.3 + 0.3)
    h2 = np.array([-0.3, 1.0])
    np.testing.assert_allclose(sigma_hat(net, state, spec, 0), 0.5 * l2 * np.outer(h2, h2))


def test_sigma_gaussian_constant_curvature(rng):
    state = random_state(rng, 7, 2)
    net = random_network(rng, 7, Family.GAUSSIAN, state)
    H = state.H
    ref = -sum(np.outer(H[j], H[j]) for j in range(7) if j != 3) / 7
    np.testing.assert_allclose(sigma_hat(net, state, ModelSpec(Family.GAUSSIAN, r=2), 3), ref)


def test_sigma_bernoulli_at_zero_predictor(rng):
    n = 6
    Z = 0.1 * rng.standard_normal((n, 1))
    # choose alpha so every off-diagonal predictor is exactly zero is impossible with
    # Z != 0; use Z = 0 and alpha = 0 instead
    state = LatentState(np.zeros((n, 1)), np.zeros(n))
    net = random_network(rng, n)
    H = state.H
    ref = -sum(np.outer(H[j], H[j]) for j in range(n) if j != 0) / (4 * n)
    np.testing.assert_allclose(sigma_hat(net, state, ModelSpec(r=1), 0), ref)
    assert Z.shape == (n, 1)


def test_omega_individual_two_nodes():
    state = LatentState([[0.4], [-0.3]], [0.2, 0.1])
    net = network_from_pairs(2, [(0, 1)])
    spec = ModelSpec(r=1)
    l1, _, _ = loglik_derivs(spec, 1, 0.4 * -0.3 + 0.3)
    h2 = np.array([-0.3, 1.0])
    expected = 0.5 * l1**2 * np.outer(h2, h2)
    np.testing.assert_allclose(omega_individual(net, state, spec, 0), expected)
    np.testing.assert_allclose(omega_hat(net, state, spec, [0]), expected)


def test_omega_zero_for_exact_gaussian(rng):
    state = random_state(rng, 6, 2)
    P = state.linear_predictor()
    P = (P + P.T) / 2
    np.fill_diagonal(P, 0)
    net = Network(P, Family.GAUSSIAN)
    np.testing.assert_allclose(omega_hat(net, state, ModelSpec(Family.GAUSSIAN, r=2), [0, 2, 4]),
                               0.0, atol=1e-20)


def omega_oracle(net, state, spec, nodes, w_n=1.0):
    """E[S_i S_j^T] with independent edges: keep score products sharing one edge."""
    n, H = net.n, state.H
    p = H.shape[1]
    P = state.linear_predictor()
    out = np.zeros((len(nodes) * p, len(nodes) * p))
    for a, i in enumerate(nodes):
        for b, j in enumerate(nodes):
            blk = np.zeros((p, p))
            for k in range(n):
                if k == i:
                    continue
                for m in range(n):
                    if m == j or {i, k} != {j, m}:
                        continue
                    la = loglik_derivs(spec, net.edges[i, k], P[i, k])[0]
                    lb = loglik_derivs(spec, net.edges[j, m], P[j, m])[0]
                    blk += la * lb * np.outer(H[k], H[m])
            out[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk / (w_n * n)
    return out


@pytest.mark.parametrize("family", [Family.BERNOULLI, Family.GAUSSIAN])
def test_omega_matches_double_loop(rng, family):
    state = random_state(rng, 8, 2, rho=-0.5)
    net = random_network(rng, 8, family, state)
    spec = ModelSpec(family, r=2)
    for nodes in ([1, 5], [0, 3, 7]):
        np.testing.assert_allclose(omega_hat(net, state, spec, nodes, w_n=0.7),
                                   omega_oracle(net, state, spec, nodes, w_n=0.7), rtol=1e-12,
                                   atol=1e-15)


def test_omega_block_transpose_symmetry(rng):
    state = random_state(rng, 10, 2)
    net = random_network(rng, 10, state=state)
    O = omega_hat(net, state, ModelSpec(r=2), [0, 4, 9])
    np.testing.assert_allclose(O, O.T)


def test_omega_outer_vanishes_at_fit():
    net, _ = gen_replication_stream(SimSetting("bounded", n=200, seed=1), 0)
    spec = ModelSpec(r=2)
    res = fit(net, spec)
    O = omega_hat(net, res.state, spec, [0, 1], form="outer")
    E = omega_hat(net, res.state, spec, [0, 1])
    assert np.abs(O).max() < 1e-4 * np.abs(E).max()


def test_sandwich_information_equality():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    sig = -(A @ A.T + 3 * np.eye(3))
    np.testing.assert_allclose(var_sandwich([sig], -sig), -np.linalg.inv(sig), rtol=1e-12)


def test_sandwich_scalar():
    assert var_sandwich([np.array([[-2.0]])], np.array([[3.0]]))[0, 0] == pytest.approx(0.75)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 1000), m=st.integers(1, 3))
def test_sandwich_symmetric_psd(seed, m):
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(m):
        A = rng.standard_normal((3, 3))
        blocks.append(-(A @ A.T + 0.5 * np.eye(3)))
    B = rng.standard_normal((3 * m, 3 * m))
    V = var_sandwich(blocks, B @ B.T)
    np.testing.assert_allclose(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= -1e-9 * np.abs(V).max()


def test_singular_curvature_raises():
    with pytest.raises(InferenceUnavailable):
        var_sandwich([np.zeros((2, 2))], np.eye(2))
    with pytest.raises(InferenceUnavailable):
        var_sandwich([-np.diag([1.0, 1e-14])], np.eye(2))


def test_normal_half_width():
    v = 2.3
    half = normal_quantile(0.95) * np.sqrt(v / 100)
    assert half == pytest.approx(1.959963984540054 * np.sqrt(v / 100), rel=1e-12)


def test_ci_matches_direct_formula():
    net, _ = gen_replication_stream(SimSetting("bounded", n=200, seed=2), 0)
    spec = ModelSpec(r=2)
    st = fit(net, spec).state
    bundle = covariance_bundle(net, st, spec, (3,))
    iv, region = ci_individual(bundle, 3, 0.9)
    sig = sigma_hat(net, st, spec, 3)
    om = omega_individual(net, st, spec, 3)
    V = np.linalg.inv(sig) @ om @ np.linalg.inv(sig) / 200
    q = stats.norm.ppf(0.95)
    np.testing.assert_allclose(iv[:, 1] - iv[:, 0], 2 * q * np.sqrt(np.diag(V)), rtol=1e-9)
    assert region.contains(st.phi[3])
    assert region.chi2_quantile == pytest.approx(stats.chi2.ppf(0.9, 3))
    with pytest.raises(ValueError):
        ci_individual(bundle, 3, 1.0)


def test_ellipse_isotropic_and_axis_aligned():
    el = ellipse_from_covariance([0, 0], np.eye(2) * 1e-2)
    np.testing.assert_allclose(el.semi_axes, np.sqrt(5.991464547107979 * 0.01), rtol=1e-10)
    el = ellipse_from_covariance([1, 2], np.diag([4.0, 1.0]))
    assert el.angle == pytest.approx(0.0)
    assert el.semi_axes[0] > el.semi_axes[1]
    el = ellipse_from_covariance([1, 2], np.diag([1.0, 4.0]))
    assert el.angle == pytest.approx(np.pi / 2)


def test_ellipse_requires_two_dimensions():
    net, _ = gen_replication_stream(SimSetting("bounded", n=100, r=1, seed=2), 0)
    spec = ModelSpec(r=1)
    st = fit(net, spec).state
    with pytest.raises(ValueError):
        confidence_ellipse(covariance_bundle(net, st, spec, (0,)), 0)


def test_sparse_wn_invariance():
    net, _ = gen_replication_stream(SimSetting("sparse", n=200, seed=4), 0)
    spec = ModelSpec(r=2, sparse_mode=True)
    st = fit(net, spec).state
    w = np.exp(st.rho)
    a, _ = ci_individual(covariance_bundle(net, st, spec, (0,), w_n=w), 0)
    b, _ = ci_individual(covariance_bundle(net, st, spec, (0,), w_n=1.0), 0)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
    la = ci_link_probability(net, st, spec, 0, 1, w_n=w)
    lb = ci_link_probability(net, st, spec, 0, 1, w_n=1.0)
    assert abs(la.lower - lb.lower) < 1e-10 and abs(la.upper - lb.upper) < 1e-10


def test_link_interval_properties():
    net, _ = gen_replication_stream(SimSetting("bounded", n=200, seed=5), 0)
    spec = ModelSpec(r=2)
    st = fit(net, spec).state
    li = ci_link_probability(net, st, spec, 0, 1)
    assert 0.0 <= li.lower <= li.theta_hat <= li.upper <= 1.0
    with pytest.raises(ValueError):
        ci_link_probability(net, st, spec, 2, 2)
    with pytest.raises(ValueError):
        ci_link_probability(net, st, ModelSpec(Family.GAUSSIAN, r=2), 0, 1)


def test_link_interval_leading_factor_at_half():
    # theta_hat = 1/2: the delta-method variance is g^T V g / 16
    n = 30
    rng = np.random.default_rng(8)
    Z = 0.3 * rng.standard_normal((n, 2))
    alpha = 0.2 * rng.standard_normal(n)
    alpha[0] = 0.0
    alpha[1] = -Z[0] @ Z[1]
    st = LatentState(Z, alpha)
    net = random_network(rng, n, state=st)
    spec = ModelSpec(r=2)
    li = ci_link_probability(net, st, spec, 0, 1)
    assert li.theta_hat == pytest.approx(0.5)
    bundle = covariance_bundle(net, st, spec, (0, 1))
    g = np.concatenate([st.H[1], st.H[0]])
    assert li.variance == pytest.approx(g @ bundle.var_sandwich @ g / 16)


def test_rho_estimate_in_sparse_fit():
    s = SimSetting("sparse", n=300, seed=0)
    net, truth = gen_replication_stream(s, 0)
    st = fit(net, s.model_spec()).state
    rho_hat, _ = estimate_rho(st)
    assert abs(rho_hat - s.rho) < 0.5

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg, stats

from crossed_eb.model import (Dataset, FeatureMap, InputError, NumericalError, Observation,
                              Priors, VarianceComponents, assemble_dense_system,
                              build_design_rows, builtin_feature_map, dense_posterior,
                              design_matrix, expected_complete_data_loglik,
                              expected_sq_residuals, marginal_log_likelihood,
                              prior_posterior, read_observation_table,
                              read_observations_csv, write_observations_csv)
from crossed_eb.simulate import random_instance

from conftest import random_priors, random_vc, tiny_dataset

# ----------------------------------------------------------------- features


def test_interaction_map_rows():
    fm = builtin_feature_map("interaction")
    z, zu, zv = build_design_rows(fm, Observation(1, 1, [0.5], 1, 0.0))
    np.testing.assert_array_equal(z, [1.0, 0.5])
    z, _, _ = build_design_rows(fm, Observation(1, 1, [0.5], 0, 0.0))
    np.testing.assert_array_equal(z, [1.0, 0.0])


def test_feature_map_dimension_errors():
    fm = builtin_feature_map("interaction", 2)
    with pytest.raises(InputError):
        fm([0.1, 0.2, 0.3], 1)
    bad = FeatureMap(2, 1, 1, lambda x, a: (np.ones(3), np.ones(1), np.ones(1)), name="bad")
    with pytest.raises(InputError):
        bad([0.0], 0)
    with pytest.raises(InputError):
        builtin_feature_map("nope")


@given(st.integers(0, 2**32 - 1))
def test_batch_rows_match_row_map(seed):
    rng = np.random.default_rng(seed)
    for name in ("intercept", "interaction", "linear"):
        fm = builtin_feature_map(name, 2)
        X = rng.uniform(size=(10, 2))
        A = rng.integers(0, 2, 10)
        Z, Zu, Zv = fm.rows(X, A)
        for k in range(10):
            z, zu, zv = fm(X[k], A[k])
            np.testing.assert_array_equal(Z[k], z)
            np.testing.assert_array_equal(Zu[k], zu)
            np.testing.assert_array_equal(Zv[k], zv)


# --------------------------------------------------------------- validation


def test_observation_and_dataset_validation():
    with pytest.raises(InputError):
        Observation(0, 1, [0.0], 0, 1.0)
    with pytest.raises(InputError):
        Observation(1, 1, [0.0], 0, np.nan)
    with pytest.raises(InputError):
        Dataset([0, 3], [0, 0], np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1)), [0, 0], 3, 1)
    with pytest.raises(InputError):
        Dataset([], [], np.ones((0, 1)), np.ones((0, 1)), np.ones((0, 1)), [], 1, 1)


def test_variance_components_must_be_pd():
    with pytest.raises(NumericalError, match="Sigma_u"):
        VarianceComponents(1.0, np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(1))
    with pytest.raises(NumericalError):
        VarianceComponents(0.0, np.eye(1), np.eye(1))
    with pytest.raises(NumericalError, match="Sigma_beta"):
        Priors(np.zeros(2), -np.eye(2))


def test_vc_dict_roundtrip(rng):
    vc = random_vc(rng, 2, 1)
    back = VarianceComponents.from_dict(vc.to_dict())
    assert back.components() == vc.components()


# ---------------------------------------------------------------------- CSV


def test_csv_roundtrip(tmp_path, rng):
    obs = [Observation(i + 1, t + 1, rng.uniform(size=2), int(rng.integers(2)), float(rng.normal()), r + 1)
           for i in range(3) for t in range(2) for r in range(2)]
    path = tmp_path / "d.csv"
    write_observations_csv(path, obs)
    back = read_observations_csv(path)
    assert len(back) == len(obs)
    for a, b in zip(obs, back):
        assert (a.user, a.time, a.action, a.replicate) == (b.user, b.time, b.action, b.replicate)
        assert a.reward == b.reward
        np.testing.assert_array_equal(a.context, b.context)


def test_csv_errors_name_the_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("user,time,replicate,action,reward,x1\n1,1,1,0,0.5,0.1\n1,2,1,0,abc,0.2\n")
    with pytest.raises(InputError, match="row 3"):
        read_observations_csv(p)
    p.write_text("user,time,replicate,action,x1\n1,1,1,0,0.1\n")
    with pytest.raises(InputError, match="reward"):
        read_observations_csv(p)
    p.write_text("user,time,replicate,action,reward\n0,1,1,0,0.1\n")
    with pytest.raises(InputError, match="row 2"):
        read_observations_csv(p)
    p.write_text("user,time,replicate,action,reward\n")
    with pytest.raises(InputError):
        read_observations_csv(p)
    assert len(read_observation_table(p, allow_empty=True)) == 0


# ------------------------------------------------------------- dense system


def test_all_ones_system():
    d = Dataset([0], [0], [[1.0]], [[1.0]], [[1.0]], [0.0], 1, 1)
    s = assemble_dense_system(d, Priors(np.zeros(1), np.eye(1)), VarianceComponents.identity(1, 1))
    np.testing.assert_array_equal(s.C, [[1.0, 1.0, 1.0]])
    np.testing.assert_array_equal(s.D, np.eye(3))
    np.testing.assert_array_equal(s.o, np.zeros(3))


def test_sparsity_pattern_is_arrow():
    rng = np.random.default_rng(0)
    d = tiny_dataset(rng, m=3, t=3, n=1)
    A = assemble_dense_system(d, Priors.default(1), VarianceComponents.identity(1, 1)).precision
    nz = np.abs(A) > 0
    # u-u block diagonal, v-v block diagonal, everything touches beta
    assert not np.any(nz[1:4, 1:4] & ~np.eye(3, dtype=bool))
    assert not np.any(nz[4:7, 4:7] & ~np.eye(3, dtype=bool))
    assert nz[0].all() and nz[1:4, 4:7].all()


def test_prior_precision_is_kronecker(rng):
    d = tiny_dataset(rng, m=3, t=2, p=2, qu=2, qv=1)
    pr, vc = random_priors(rng, 2), random_vc(rng, 2, 1)
    D = assemble_dense_system(d, pr, vc).D
    expect = linalg.block_diag(np.linalg.inv(pr.Sigma_beta),
                               np.kron(np.eye(3), np.linalg.inv(vc.Sigma_u)),
                               np.kron(np.eye(2), np.linalg.inv(vc.Sigma_v)))
    np.testing.assert_allclose(D, expect, rtol=1e-10, atol=1e-12)


def test_scalar_conjugate_update():
    d = Dataset([0], [0], [[1.0]], [[0.0]], [[0.0]], [2.0], 1, 1)
    post = dense_posterior(assemble_dense_system(d, Priors(np.zeros(1), np.eye(1)),
                                                 VarianceComponents.identity(1, 1)))
    assert post.mu_beta[0] == pytest.approx(1.0)
    assert post.Sigma_beta[0, 0] == pytest.approx(0.5)


def test_zero_design_returns_prior(rng):
    pr, vc = random_priors(rng, 2), random_vc(rng, 2, 2)
    d = Dataset([0], [0], np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), [1.3], 1, 1)
    post = dense_posterior(assemble_dense_system(d, pr, vc))
    ref = prior_posterior(pr, vc, 1, 1)
    for k, v in ref.blocks().items():
        np.testing.assert_allclose(getattr(post, k), v, atol=1e-12, err_msg=k)


@given(st.integers(0, 2**32 - 1))
def test_dense_posterior_matches_full_inverse(seed):
    rng = np.random.default_rng(seed)
    d = tiny_dataset(rng, m=4, t=3, p=2, qu=2, qv=2, n=1)
    pr, vc = random_priors(rng, 2), random_vc(rng, 2, 2)
    s = assemble_dense_system(d, pr, vc)
    C = design_matrix(d)
    Sigma = np.linalg.inv(C.T @ C / vc.sigma_eps_sq + s.D)
    mu = Sigma @ (C.T @ d.y / vc.sigma_eps_sq + s.o)
    post = dense_posterior(s)
    np.testing.assert_allclose(post.theta_mean(), mu, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(post.Sigma_beta, Sigma[:2, :2], rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(post.Cov_u_v[1, 2], Sigma[2 + 2:2 + 4, 2 + 8 + 4:2 + 8 + 6],
                               rtol=1e-9, atol=1e-11)
    # stationarity of the normal equations
    res = (C.T @ C / vc.sigma_eps_sq + s.D) @ post.theta_mean() - (C.T @ d.y / vc.sigma_eps_sq + s.o)
    assert np.abs(res).max() <= 1e-8


@given(st.integers(0, 2**32 - 1))
def test_posterior_blocks_symmetric_psd(seed):
    d, pr = random_instance(seed)
    vc = random_vc(np.random.default_rng(seed), d.q_u, d.q_v)
    post = dense_posterior(assemble_dense_system(d, pr, vc))
    for i in range(d.m):
        for tau in range(d.t):
            _, J = post.joint(i, tau)
            assert np.linalg.eigvalsh(J).min() >= -1e-10
    for S in (post.Sigma_beta, *post.Sigma_u, *post.Sigma_v):
        np.testing.assert_allclose(S, S.T, atol=1e-12)


def test_order_invariance(rng):
    d, pr = random_instance(11)
    vc = random_vc(rng, d.q_u, d.q_v)
    perm = rng.permutation(d.N)
    a = dense_posterior(assemble_dense_system(d, pr, vc))
    b = dense_posterior(assemble_dense_system(d.take(perm), pr, vc))
    for k, v in a.blocks().items():
        np.testing.assert_allclose(getattr(b, k), v, rtol=1e-10, atol=1e-12)


# --------------------------------------------------------------- likelihood


def test_mll_standard_normal_at_zero():
    d = Dataset([0], [0], [[0.0]], [[0.0]], [[0.0]], [0.0], 1, 1)
    val = marginal_log_likelihood(d, Priors.default(1), VarianceComponents.identity(1, 1))
    assert val == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_mll_matches_dense_gaussian_density(seed):
    d, pr = random_instance(seed)
    rng = np.random.default_rng(seed + 1)
    vc = random_vc(rng, d.q_u, d.q_v)
    C = design_matrix(d)
    P = linalg.block_diag(pr.Sigma_beta, *([vc.Sigma_u] * d.m), *([vc.Sigma_v] * d.t))
    cov = C @ P @ C.T + vc.sigma_eps_sq * np.eye(d.N)
    ref = stats.multivariate_normal(d.Z @ pr.mu_beta, cov).logpdf(d.y)
    assert marginal_log_likelihood(d, pr, vc) == pytest.approx(ref, rel=1e-10, abs=1e-9)


def _dense_ecll(d, pr, vc, post_full):
    mu, Sigma = post_full
    C = design_matrix(d)
    r = d.y - C @ mu
    s2 = vc.sigma_eps_sq
    ll_y = -0.5 * (d.N * np.log(2 * np.pi * s2) + (r @ r + np.trace(C @ Sigma @ C.T)) / s2)
    P = linalg.block_diag(pr.Sigma_beta, *([vc.Sigma_u] * d.m), *([vc.Sigma_v] * d.t))
    m0 = np.concatenate([pr.mu_beta, np.zeros(len(mu) - d.p)])
    dm = mu - m0
    Pinv = np.linalg.inv(P)
    ll_t = -0.5 * (len(mu) * np.log(2 * np.pi) + np.linalg.slogdet(P)[1]
                   + dm @ Pinv @ dm + np.trace(Pinv @ Sigma))
    return ll_y + ll_t


@given(st.integers(0, 2**32 - 1))
def test_ecll_matches_dense_closed_form(seed):
    d, pr = random_instance(seed)
    rng = np.random.default_rng(seed + 7)
    vc = random_vc(rng, d.q_u, d.q_v)
    s = assemble_dense_system(d, pr, vc)
    Sigma = np.linalg.inv(s.precision)
    mu = Sigma @ s.rhs
    post = dense_posterior(s, vc)
    got = expected_complete_data_loglik(d, pr, vc, post)
    assert got == pytest.approx(_dense_ecll(d, pr, vc, (mu, Sigma)), rel=1e-10)


def test_ecll_monte_carlo_oracle():
    d, pr = random_instance(5, m_max=3, t_max=3)
    vc = random_vc(np.random.default_rng(1), d.q_u, d.q_v)
    s = assemble_dense_system(d, pr, vc)
    post = dense_posterior(s, vc)
    Sigma = np.linalg.inv(s.precision)
    mu = Sigma @ s.rhs
    rng = np.random.default_rng(2)
    n = 1_000_000
    theta = mu + rng.standard_normal((n, len(mu))) @ np.linalg.cholesky(Sigma).T
    C = design_matrix(d)
    R = d.y - theta @ C.T
    ll_y = -0.5 * (d.N * np.log(2 * np.pi * vc.sigma_eps_sq) + (R * R).sum(1) / vc.sigma_eps_sq)
    P = linalg.block_diag(pr.Sigma_beta, *([vc.Sigma_u] * d.m), *([vc.Sigma_v] * d.t))
    m0 = np.concatenate([pr.mu_beta, np.zeros(len(mu) - d.p)])
    ll_t = stats.multivariate_normal(m0, P).logpdf(theta)
    vals = ll_y + ll_t
    se = vals.std() / np.sqrt(n)
    assert abs(vals.mean() - expected_complete_data_loglik(d, pr, vc, post)) < 3 * se


def test_ecll_zero_covariance_is_plugin(rng):
    d = tiny_dataset(rng)
    pr, vc = Priors.default(1), random_vc(rng, 1, 1)
    post = prior_posterior(pr, vc, d.m, d.t)
    zero = type(post)(post.mu_beta, 0 * post.Sigma_beta, rng.normal(size=(d.m, 1)),
                      0 * post.Sigma_u, post.Cov_beta_u, rng.normal(size=(d.t, 1)),
                      0 * post.Sigma_v, post.Cov_beta_v, post.Cov_u_v)
    r = d.y - d.Z[:, 0] * zero.mu_beta[0] - d.Zu[:, 0] * zero.mu_u[d.user, 0] - d.Zv[:, 0] * zero.mu_v[d.time, 0]
    plug = (stats.norm(0, np.sqrt(vc.sigma_eps_sq)).logpdf(r).sum()
            + stats.norm(pr.mu_beta[0], 1).logpdf(zero.mu_beta[0])
            + stats.norm(0, np.sqrt(vc.Sigma_u[0, 0])).logpdf(zero.mu_u).sum()
            + stats.norm(0, np.sqrt(vc.Sigma_v[0, 0])).logpdf(zero.mu_v).sum())
    assert expected_complete_data_loglik(d, pr, vc, zero) == pytest.approx(plug, rel=1e-12)
    np.testing.assert_allclose(expected_sq_residuals(d, zero), r * r, rtol=1e-12)


def test_expected_sq_residuals_match_dense(rng):
    d, pr = random_instance(21)
    vc = random_vc(rng, d.q_u, d.q_v)
    s = assemble_dense_system(d, pr, vc)
    Sigma = np.linalg.inv(s.precision)
    mu = Sigma @ s.rhs
    C = design_matrix(d)
    ref = (d.y - C @ mu) ** 2 + np.einsum("np,pq,nq->n", C, Sigma, C)
    np.testing.assert_allclose(expected_sq_residuals(d, dense_posterior(s)), ref, rtol=1e-10)

import numpy as np
import pytest
from scipy.special import betaln

from idvae.data import gen_gmvae_synthetic, gmvae_truth, gmvae_warp
from idvae.oracles import (GmmModel, PpcaModel, SWEEP_W, gauss_legendre, gmm_alpha_posterior, gmm_scenario,
                           gmm_scenario_data, gmvae_cluster_posterior, gmvae_fit_single_cluster, gmvae_log_evidence,
                           ppca_grid_posterior, ppca_log_marginal_points, ppca_mean_kl, ppca_mle, ppca_noise_sweep,
                           ppca_one_dim_truth, ppca_padded_maximizer, ppca_posterior, ppca_two_dim_truth, ppca_vae,
                           total_variation_from_uniform)


# PPCA

def test_posterior_matches_grid_quadrature():
    m = ppca_two_dim_truth()
    x = m.sample(3, seed=4).x
    mean, cov = ppca_posterior(m, x)
    for i in range(3):
        gm, gc = ppca_grid_posterior(m, x[i])
        np.testing.assert_allclose(gm, mean[i], atol=1e-6)
        np.testing.assert_allclose(gc, cov, atol=1e-6)


def test_log_marginal_matches_monte_carlo():
    m = ppca_two_dim_truth()
    x = m.sample(1, seed=0).x[0]
    rng = np.random.default_rng(1)
    z = rng.normal(size=(400_000, 2))
    r = x - z @ m.w
    lik = np.exp(-0.5 * (r**2).sum(1) / m.sigma2 - 0.5 * m.D * np.log(2 * np.pi * m.sigma2))
    est, se = lik.mean(), lik.std(ddof=1) / np.sqrt(len(lik))
    ref = np.exp(ppca_log_marginal_points(m, x)[0])
    assert abs(est - ref) < 4 * se


def test_padded_maximizer_collapses_first_dimension_exactly():
    fit = ppca_padded_maximizer(ppca_one_dim_truth())
    x = ppca_one_dim_truth().sample(50, seed=0).x
    mean, cov = ppca_posterior(fit, x)
    assert np.all(mean[:, 0] == 0.0) and cov[0, 0] == 1.0 and cov[0, 1] == 0.0
    # the padded model has the same marginal as the one-factor truth
    np.testing.assert_allclose(ppca_log_marginal_points(fit, x), ppca_log_marginal_points(ppca_one_dim_truth(), x))


def test_mle_recovers_covariance():
    m = ppca_two_dim_truth()
    X = m.sample(200_000, seed=0).x
    fit = ppca_mle(X, 2)
    np.testing.assert_allclose(fit.w.T @ fit.w, m.w.T @ m.w, atol=0.05)
    np.testing.assert_allclose(fit.sigma2, m.sigma2, atol=0.01)
    fixed = ppca_mle(X, 2, sigma2=0.5)
    assert fixed.sigma2 == 0.5


def test_mle_pads_with_zero_row_on_one_factor_data():
    truth = ppca_one_dim_truth()
    X = truth.sample(500, seed=0).x
    S = np.linalg.eigvalsh(X.T @ X / 500)
    fit = ppca_mle(X, 2, sigma2=float(S[-2]) + 1e-9)
    assert np.linalg.norm(fit.w[1]) < 1e-3


def test_noise_sweep_kl_closed_form():
    rows = ppca_noise_sweep(n=200)
    for r in rows:
        m = PpcaModel(SWEEP_W, r.sigma**2)
        _, cov = ppca_posterior(m, np.zeros((1, 5)))
        # E_x KL = 0.5 log det(I + w w^T / s^2) since E[mean mean^T] = I - cov
        expected = -0.5 * np.linalg.slogdet(cov)[1]
        assert abs(r.kl - expected) < 0.25 * expected + 0.02
    assert [r.flatness for r in rows] == sorted([r.flatness for r in rows], reverse=True)


def test_vae_wiring_requires_orthogonal_rows():
    with pytest.raises(ValueError, match="orthogonal"):
        ppca_vae(PpcaModel(np.array([[1.0, 1.0], [1.0, 0.0]]), 0.5))


# mixture weight

def test_gauss_legendre_exact_on_polynomials():
    t, w = gauss_legendre(8, 0.0, 1.0)
    for k in range(16):
        np.testing.assert_allclose(np.sum(w * t**k), 1.0 / (k + 1), rtol=1e-13)


def test_beta_prior_normalized():
    t, w = gauss_legendre(256)
    assert abs(np.sum(w * np.exp(GmmModel(0, 0).log_prior(t))) - 1.0) < 1e-13
    assert betaln(5, 5) < 0


@pytest.mark.parametrize("scenario", [2, 3])
def test_alpha_posterior_integrates_and_is_node_stable(scenario):
    ds = gmm_scenario_data(scenario, n=20_000, seed=1)
    from idvae.oracles import GMM_SCENARIOS
    m = GmmModel(*GMM_SCENARIOS[scenario]["theta"])
    a = gmm_alpha_posterior(m, ds, 2048)
    b = gmm_alpha_posterior(m, ds, 4096)
    assert abs(a.kl - b.kl) < 1e-8
    t, w = gauss_legendre(8192)
    assert abs(np.sum(w * a.density(t)) - 1.0) < 1e-10
    assert abs(np.sum(a.weights * a.posterior) - 1.0) < 1e-12


def test_alpha_posterior_needs_nodes():
    with pytest.raises(ValueError):
        gmm_alpha_posterior(GmmModel(0, 1), np.zeros(3), 100)


def test_scenario_three_is_exactly_flat():
    r = gmm_scenario(3, n=5000)
    assert r.probe.flatness == 0.0 and r.kl < 1e-12 and r.verdict == "collapsed"


def test_scenario_one_small_is_identifiable():
    r = gmm_scenario(1, n=5000, seed=0)
    assert r.kl > 0.5 and abs(r.posterior.mode - 0.15) < 0.03
    assert r.probe.equivalence_holds


# synthetic mixture

def test_gmvae_evidence_matches_monte_carlo():
    truth = gmvae_truth(4.0)
    x = np.array([[1.3, -0.4]])
    le = gmvae_log_evidence(truth, x)
    rng = np.random.default_rng(0)
    for k in range(2):
        w = truth.means[k] + rng.normal(size=(400_000, 2))
        r = x - gmvae_warp(w)
        lik = np.exp(-0.5 * (r**2).sum(1) / truth.noise_std**2) / (2 * np.pi * truth.noise_std**2)
        est, se = lik.mean(), lik.std(ddof=1) / np.sqrt(len(lik))
        assert abs(est - np.exp(le[0, k])) < 4 * se


def test_single_cluster_fit_near_origin_and_uniform_posterior():
    ds = gen_gmvae_synthetic(1000, separation=0.0, seed=0)
    truth = gmvae_truth(0.0)
    mu = gmvae_fit_single_cluster(truth, ds.x)
    assert np.all(np.abs(mu) < 0.2)
    probs = gmvae_cluster_posterior(truth, ds.x, np.vstack([mu, mu]))
    assert total_variation_from_uniform(probs).max() == 0.0


def test_total_variation():
    np.testing.assert_allclose(total_variation_from_uniform(np.array([[1.0, 0.0], [0.5, 0.5]])), [0.5, 0.0])

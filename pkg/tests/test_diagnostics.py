import numpy as np
import pytest

from idvae.data import gen_pinwheel
from idvae.diagnostics import (CategoricalPosterior, DiagnosticsReport, GaussianPosterior, active_units, diagnose,
                               kl_per_point, mutual_information, standard_normal_prior, collapse_probe,
                               uniform_prior, verdict)
from idvae.models import ModelSpec, build_model, prior_encoder
from idvae.oracles import gauss_legendre


def test_active_units_uses_unbiased_variance():
    means = np.array([[0.0, 0.0], [0.2, 0.0]])  # column 0: var (ddof=1) = 0.02
    assert active_units(means) == 0.5
    assert active_units(means, eps=0.03) == 0.0
    with pytest.raises(ValueError):
        active_units(np.zeros((1, 3)))


def test_gaussian_kl_against_quadrature():
    post = GaussianPosterior(np.array([[0.7]]), np.log(np.array([[0.4]])))
    z = np.linspace(-10, 10, 200001)
    q = np.exp(-0.5 * (z - 0.7) ** 2 / 0.4) / np.sqrt(2 * np.pi * 0.4)
    p = np.exp(-0.5 * z**2) / np.sqrt(2 * np.pi)
    ref = np.sum(q * np.log(q / p)) * (z[1] - z[0])
    np.testing.assert_allclose(kl_per_point(post, standard_normal_prior(1)), [ref], rtol=1e-8)


def test_categorical_kl_and_type_errors():
    q = CategoricalPosterior(np.array([[0.5, 0.5], [1.0, 0.0]]))
    np.testing.assert_allclose(kl_per_point(q, uniform_prior(2)), [0.0, np.log(2)])
    with pytest.raises(TypeError):
        kl_per_point(q, standard_normal_prior(2))


def test_mutual_information_limits():
    same = GaussianPosterior(np.zeros((50, 2)), np.zeros((50, 2)))
    mi, _ = mutual_information(same, 5, seed=0)
    assert abs(mi) < 1e-12
    apart = GaussianPosterior(np.arange(40.0)[:, None] * 100, np.zeros((40, 1)))
    mi, _ = mutual_information(apart, 5, seed=0)
    np.testing.assert_allclose(mi, np.log(40), rtol=1e-9)
    onehot = CategoricalPosterior(np.eye(4)[[0, 1, 2, 3] * 5])
    np.testing.assert_allclose(mutual_information(onehot)[0], np.log(4))


def test_verdict_thresholds():
    assert verdict(0.005, 0.0) == "collapsed"
    assert verdict(0.005, 0.5) == "near-collapsed"
    assert verdict(0.05, 0.0) == "near-collapsed"
    assert verdict(0.5, 1.0) == "active"


def test_report_validation():
    with pytest.raises(ValueError):
        DiagnosticsReport(1.5, 0.0, 0.0, 0.0, np.zeros(1), ["z0"])
    rep = DiagnosticsReport(0.5, 0.2, 0.1, 0.0, np.array([0.1, 0.001, 0.2]), ["c0", "w0", "w1"])
    assert rep.au_latent == 1.0 and rep.au_of("w") == 0.5
    assert "verdict" in rep.summary()


def test_prior_only_model_is_collapsed():
    ds = gen_pinwheel(200, seed=0)
    for variant in ("IDVAE", "IDGMVAE"):
        model = build_model(ModelSpec(variant, K=2, D=2), 0)
        rep = diagnose(model, prior_encoder(model), ds)
        assert rep.au == 0.0 and rep.verdict == "collapsed"
        assert rep.kl < 1e-2


def test_probe_constant_likelihood_gives_prior_exactly():
    nodes, weights = gauss_legendre(512)
    log_prior = lambda a: 4 * np.log(a) + 4 * np.log1p(-a)
    rep = collapse_probe(lambda a: np.full_like(a, -123.4), log_prior, nodes, weights)
    assert rep.flatness == 0.0 and rep.kl == 0.0
    np.testing.assert_array_equal(rep.posterior, rep.prior)
    assert rep.verdict == "collapsed, non-identifiable" and rep.equivalence_holds


def test_probe_informative_likelihood():
    nodes, weights = gauss_legendre(512)
    rep = collapse_probe(lambda a: 50 * np.log(a), lambda a: np.zeros_like(a), nodes, weights)
    assert rep.kl > 1.0 and rep.verdict == "active, identifiable" and rep.equivalence_holds

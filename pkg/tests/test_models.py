import numpy as np
import pytest

from idvae import diffcore as dc
from idvae.data import Dataset
from idvae.models import (ModelSpec, NonFiniteError, RankError, build_encoder, build_model, categorical_elbo,
                          component_log_densities, elbo, gaussian_kl, generate, latent_posterior, log_lik,
                          log_prior, matched_hidden, prior_encoder, _icnn_count, _mlp_count)
from idvae.oracles import ppca_elbo_points, ppca_log_marginal_points, ppca_posterior, ppca_two_dim_truth, ppca_vae


def test_spec_validation():
    with pytest.raises(RankError, match="full row rank"):
        ModelSpec("IDVAE", K=3, D=2)
    with pytest.raises(RankError):
        ModelSpec("IDGMVAE", K=3, D=5, M=2)
    with pytest.raises(RankError):
        ModelSpec("IDSVAE", K=2, D=5, family="categorical")  # D < M + H
    with pytest.raises(ValueError, match="M == K"):
        ModelSpec("IDVAE", K=2, D=5, M=3)
    with pytest.raises(ValueError, match="token"):
        ModelSpec("BaselineVAE", K=2, D=5, H=2)
    with pytest.raises(ValueError):
        ModelSpec("NotAModel", K=2, D=5)
    spec = ModelSpec("BaselineGMVAE", K=2, D=2)
    assert spec.mixture and not spec.is_id
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_gaussian_kl_closed_form():
    kl = gaussian_kl(np.array([[1.0]]), np.array([[0.0]]))
    np.testing.assert_allclose(kl, [0.5])
    kl2 = gaussian_kl(np.array([[0.0, 1.0]]), np.log(np.array([[2.0, 0.5]])), np.array([0.0, 0.0]),
                      np.log(np.array([1.0, 2.0])))
    ref = 0.5 * (2 - 1 - np.log(2)) + 0.5 * (0.5 / 2 + 1 / 2 - 1 + np.log(2 / 0.5))
    np.testing.assert_allclose(kl2, [ref])


def test_categorical_elbo_matches_monte_carlo():
    rng = np.random.default_rng(0)
    log_joint = rng.normal(size=(1, 4)) - 3.0
    q = np.array([[0.1, 0.2, 0.3, 0.4]])
    exact = categorical_elbo(log_joint, np.log(q))[0]
    ks = rng.choice(4, size=20000, p=q[0])
    vals = log_joint[0, ks] - np.log(q[0, ks])
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - exact) < 3 * se


def test_mixture_prior_is_normalized():
    model = build_model(ModelSpec("IDGMVAE", K=2, D=2), 0)
    model.params["mix.logvar"][:] = np.log(0.3)
    g = np.linspace(-6, 7, 521)
    U = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    total = np.exp(log_prior(model, U)).sum() * (g[1] - g[0]) ** 2
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    lc = component_log_densities(model, U[:3])
    assert lc.shape == (3, 2)


def test_sequence_likelihood_sums_to_one():
    model = build_model(ModelSpec("IDSVAE", K=2, D=12, H=3, family="categorical", widths=(4,)), 0)
    U = np.random.default_rng(0).normal(size=(1, 2))
    tokens = np.arange(12)[:, None]
    p = np.exp(log_lik(model, tokens, np.repeat(U, 12, axis=0)))
    np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)


def test_prior_only_model_has_zero_kl():
    model = build_model(ModelSpec("IDVAE", K=2, D=4), 0)
    enc = prior_encoder(model)
    X = np.random.default_rng(0).normal(size=(20, 4))
    res = elbo(model, enc, X)
    assert res.kl == 0.0


def test_ppca_wiring_equals_marginal_pointwise():
    m = ppca_two_dim_truth()
    ds = m.sample(200, seed=1)
    model, enc = ppca_vae(m)
    res = elbo(model, enc, ds, kl="sampled", seed=2)
    np.testing.assert_allclose(res.per_point, ppca_log_marginal_points(m, ds.x), rtol=0, atol=1e-10)


def test_closed_kl_elbo_matches_closed_form_in_expectation():
    m = ppca_two_dim_truth()
    ds = m.sample(40, seed=1)
    model, enc = ppca_vae(m)
    res = elbo(model, enc, ds, n_mc=4000, seed=3)
    ref = ppca_elbo_points(m, ds.x, *ppca_posterior(m, ds.x))
    np.testing.assert_allclose(res.per_point, ref, atol=0.05)


def test_nonfinite_elbo_names_datapoint():
    model = build_model(ModelSpec("IDVAE", K=2, D=3), 0)
    X = np.zeros((5, 3))
    X[3, 1] = np.inf
    with pytest.raises(NonFiniteError) as e:
        elbo(model, build_encoder(model, 0), X)
    assert e.value.index == 3


def test_baseline_matches_id_parameter_count():
    spec = ModelSpec("BaselineVAE", K=2, D=5, widths=(16,))
    h = matched_hidden(spec)
    target = _icnn_count(2, (16,)) + _icnn_count(5, (16,))
    assert abs(_mlp_count([2, *h, 5]) - target) <= 2 * h[0] + 2


def test_id_decoder_starts_feasible_and_generates():
    model = build_model(ModelSpec("IDGMVAE", K=2, D=3, M=2), 1)
    model.decoder.validate()
    ds = generate(model, 30, seed=0)
    assert ds.x.shape == (30, 3) and set(np.unique(ds.labels)) <= {0, 1}
    kind, probs = latent_posterior(model, build_encoder(model, 0), ds.x, 8)
    assert kind == "categorical"
    np.testing.assert_allclose(probs.sum(1), 1.0)


def test_generate_sequences():
    model = build_model(ModelSpec("IDSVAE", K=2, D=12, H=3, family="categorical", widths=(4,)), 0)
    ds = generate(model, 5, seed=0, length=4)
    assert ds.x.shape == (5, 4) and ds.vocab == 12


def test_tape_gradient_through_elbo_terms():
    from idvae.models import elbo_terms
    model = build_model(ModelSpec("IDGMVAE", K=2, D=2), 0)
    enc = build_encoder(model, 0, hidden=(4,))
    X = np.random.default_rng(0).normal(size=(6, 2))
    eps = np.random.default_rng(1).normal(size=(1, 6, 2))

    def f(p):
        named = {**model.params, **{k: v for k, v in p.items() if not k.startswith("enc.")}}
        enc_named = {k: v for k, v in p.items() if k.startswith("enc.")}
        r, kl = elbo_terms(model, enc, X, eps, named, enc_named)
        return dc.sum_(dc.sub(r, kl))

    params = {**{k: model.params[k] for k in ("mix.logvar", "dec.g1.A0")}, **enc.params}
    _, g = dc.value_and_grad(f, params)
    h = 1e-6
    for key in ("mix.logvar", "dec.g1.A0", "enc.W1"):
        e = np.zeros_like(params[key])
        e.flat[0] = h
        up = float(dc.value_of(f({**params, key: params[key] + e})))
        dn = float(dc.value_of(f({**params, key: params[key] - e})))
        np.testing.assert_allclose(g[key].flat[0], (up - dn) / (2 * h), rtol=1e-4, atol=1e-6)

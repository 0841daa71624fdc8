"""Reference models with exact inference.

* PPCA with known noise: the posterior and marginal are gaussian in closed
  form.
* A two-component 1-D mixture whose weight alpha is the latent, with a
  Beta(5, 5) prior: the posterior over alpha is computed by Gauss-Legendre
  quadrature.
* The synthetic mixture of :func:`idvae.data.gen_gmvae_synthetic`: the cluster
  posterior is computed by grid quadrature over the continuous layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import betaln, roots_legendre

from .data import Dataset, GmvaeTruth, gmvae_warp
from .decoder import LOG_2PI
from .diagnostics import ProbeReport, collapse_probe, verdict

# ---------------------------------------------------------------------------
# PPCA


@dataclass
class PpcaModel:
    """x = z^T w + noise, z ~ N(0, I_K), noise ~ N(0, sigma2 I_D); w is (K, D)."""

    w: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if not self.sigma2 > 0:
            raise ValueError("noise variance must be positive")

    @property
    def K(self) -> int:
        return self.w.shape[0]

    @property
    def D(self) -> int:
        return self.w.shape[1]

    def marginal_cov(self) -> np.ndarray:
        return self.w.T @ self.w + self.sigma2 * np.eye(self.D)

    def sample(self, n: int, seed=0) -> Dataset:
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, self.K))
        x = z @ self.w + np.sqrt(self.sigma2) * rng.normal(size=(n, self.D))
        prov = {"generator": "ppca", "n": n, "seed": seed, "w": self.w, "sigma2": self.sigma2}
        return Dataset(x, None, z, prov)


def ppca_posterior(m: PpcaModel, x):
    """Exact posterior of z: (means (n, K) or (K,), covariance (K, K))."""
    x = np.asarray(x, dtype=float)
    prec = np.eye(m.K) + m.w @ m.w.T / m.sigma2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = x @ (m.w.T @ cov) / m.sigma2  # cov is symmetric
    return mean, cov


def ppca_log_marginal_points(m: PpcaModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    C = m.marginal_cov()
    L = np.linalg.cholesky(C)
    sol = np.linalg.solve(L, X.T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (np.sum(sol * sol, axis=0) + logdet + m.D * LOG_2PI)


def ppca_log_marginal(m: PpcaModel, dataset) -> float:
    """Sum over datapoints of log N(x; 0, w^T w + sigma2 I)."""
    X = dataset.x if isinstance(dataset, Dataset) else dataset
    return float(ppca_log_marginal_points(m, X).sum())


def ppca_elbo_points(m: PpcaModel, X, q_mean, q_cov) -> np.ndarray:
    """Closed-form ELBO of a gaussian q(z | x_i) = N(q_mean_i, q_cov)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q_mean = np.atleast_2d(q_mean)
    resid = X - q_mean @ m.w
    # E_q |x - z^T w|^2 = |x - m^T w|^2 + tr(w^T S w)
    e_sq = np.sum(resid**2, axis=1) + np.trace(m.w.T @ q_cov @ m.w)
    recon = -0.5 * (e_sq / m.sigma2 + m.D * (LOG_2PI + np.log(m.sigma2)))
    _, logdet = np.linalg.slogdet(q_cov)
    kl = 0.5 * (np.trace(q_cov) + np.sum(q_mean**2, axis=1) - m.K - logdet)
    return recon - kl


def ppca_mean_kl(m: PpcaModel, X) -> float:
    """Dataset mean of KL(exact posterior || prior)."""
    mean, cov = ppca_posterior(m, X)
    _, logdet = np.linalg.slogdet(cov)
    return float(np.mean(0.5 * (np.trace(cov) + np.sum(mean**2, axis=1) - m.K - logdet)))


def ppca_mle(X, K: int = 2, sigma2: float | None = None) -> PpcaModel:
    """Zero-mean maximum-likelihood PPCA from the eigendecomposition of X^T X / n.

    With ``sigma2`` given the noise is held fixed; otherwise it is the mean of
    the discarded eigenvalues.  Rows of the returned loading are orthogonal
    and ordered by decreasing norm.
    """
    X = np.asarray(X, dtype=float)
    S = X.T @ X / X.shape[0]
    evals, evecs = np.linalg.eigh(S)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if sigma2 is None:
        sigma2 = float(evals[K:].mean())
    scale = np.sqrt(np.maximum(evals[:K] - sigma2, 0.0))
    w = (evecs[:, :K] * scale).T
    return PpcaModel(w, sigma2)


# defaults for the collapse-by-dimension construction
PPCA_W1_NORM = 2.0
PPCA_SIGMA1 = 0.5


def ppca_one_dim_truth(norm: float = PPCA_W1_NORM, sigma1: float = PPCA_SIGMA1) -> PpcaModel:
    """One-factor PPCA in 5 dimensions; ``sigma1`` multiplies I_5 as the noise covariance."""
    direction = np.array([1.0, -1.0, 1.0, 1.0, -1.0]) / np.sqrt(5.0)
    return PpcaModel(norm * direction[None, :], sigma1)


def ppca_padded_maximizer(truth: PpcaModel) -> PpcaModel:
    """Two-factor model whose first loading row is zero and second is the truth."""
    return PpcaModel(np.vstack([np.zeros(truth.D), truth.w[0]]), truth.sigma2)


def ppca_two_dim_truth(sigma2: float = PPCA_SIGMA1) -> PpcaModel:
    w = np.array([[1.5, 0.5, -0.5, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0, -1.5]])
    return PpcaModel(w, sigma2)


def ppca_vae(m: PpcaModel):
    """PPCA as a linear BaselineVAE plus an encoder equal to the exact posterior.

    Needs orthogonal loading rows so the exact posterior covariance is
    diagonal and representable by a mean-field encoder.
    """
    from .models import ModelSpec, build_model, linear_encoder

    gram = m.w @ m.w.T
    if np.any(np.abs(gram - np.diag(np.diag(gram))) > 1e-12 * max(1.0, np.abs(gram).max())):
        raise ValueError("loading rows must be orthogonal for a mean-field exact posterior")
    spec = ModelSpec("BaselineVAE", K=m.K, D=m.D, hidden=(), logvar=float(np.log(m.sigma2)),
                     learn_logvar=False)
    model = build_model(spec)
    model.params["mlp.W0"] = m.w.copy()
    model.params["mlp.b0"] = np.zeros(m.D)
    _, cov = ppca_posterior(m, np.zeros((1, m.D)))
    enc = linear_encoder(m.w.T @ cov / m.sigma2, np.zeros(m.K), np.log(np.diag(cov)))
    return model, enc


# loading for the noise sweep: orthogonal rows with squared norms 0.12 and 0.16
SWEEP_W = 0.2 * np.array([[1.0, 1.0, 0.0, 0.0, 1.0], [0.0, 1.0, -1.0, 1.0, -1.0]])
SWEEP_SIGMAS = (0.2, 0.5, 1.0, 1.5)


def ppca_log_lik_grid(m: PpcaModel, x, z1, z2) -> np.ndarray:
    """log p(x | z) on the grid z1 x z2 (K = 2) -> (len(z1), len(z2))."""
    Z = np.stack(np.meshgrid(z1, z2, indexing="ij"), axis=-1)
    resid = np.asarray(x)[None, None, :] - Z @ m.w
    return -0.5 * (np.sum(resid**2, axis=-1) / m.sigma2 + m.D * (LOG_2PI + np.log(m.sigma2)))


def ppca_grid_posterior(m: PpcaModel, x, half_width: float = 8.0, n: int = 801):
    """Posterior mean and covariance of z by dense 2-D grid quadrature."""
    g = np.linspace(-half_width, half_width, n)
    ll = ppca_log_lik_grid(m, x, g, g)
    Z1, Z2 = np.meshgrid(g, g, indexing="ij")
    lp = ll - 0.5 * (Z1**2 + Z2**2)
    p = np.exp(lp - lp.max())
    p /= p.sum()
    mean = np.array([(p * Z1).sum(), (p * Z2).sum()])
    c11 = (p * (Z1 - mean[0]) ** 2).sum()
    c22 = (p * (Z2 - mean[1]) ** 2).sum()
    c12 = (p * (Z1 - mean[0]) * (Z2 - mean[1])).sum()
    return mean, np.array([[c11, c12], [c12, c22]])


@dataclass
class SweepRow:
    sigma: float
    kl: float
    flatness: float


def ppca_noise_sweep(w=SWEEP_W, sigmas=SWEEP_SIGMAS, n: int = 500, seed=0, grid_half_width: float = 3.0,
                     grid_n: int = 61) -> list[SweepRow]:
    """Mean posterior KL and likelihood flatness for data generated at each noise level.

    Flatness is the mean over datapoints of max - min of log p(x | z) on a
    square z-grid.
    """
    rows = []
    g = np.linspace(-grid_half_width, grid_half_width, grid_n)
    for j, s in enumerate(sigmas):
        m = PpcaModel(w, s * s)
        X = m.sample(n, seed=seed + j).x
        flat = np.mean([np.ptp(ppca_log_lik_grid(m, x, g, g)) for x in X])
        rows.append(SweepRow(float(s), ppca_mean_kl(m, X), float(flat)))
    return rows


# ---------------------------------------------------------------------------
# mixture weight with a Beta(5, 5) prior


def _normal_logpdf(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI


@dataclass
class GmmModel:
    mu1: float
    mu2: float
    sigma1: float = 1.0
    sigma2: float = 1.0
    a: float = 5.0
    b: float = 5.0

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("component scales must be positive")

    def log_prior(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return (self.a - 1) * np.log(alpha) + (self.b - 1) * np.log1p(-alpha) - betaln(self.a, self.b)

    def component_logpdfs(self, x):
        x = np.asarray(x, dtype=float)
        return _normal_logpdf(x, self.mu1, self.sigma1), _normal_logpdf(x, self.mu2, self.sigma2)

    def log_lik(self, x, alpha, chunk: int = 64) -> np.ndarray:
        """sum_i log(alpha N(x_i | mu1, s1^2) + (1 - alpha) N(x_i | mu2, s2^2)) per alpha."""
        return MixtureLogLik(self, x)(alpha, chunk)


class MixtureLogLik:
    """Log-likelihood in alpha with the per-point densities computed once.

    Each point contributes ``top + log(alpha e1 + (1 - alpha) e2)`` where
    ``top`` is the larger component log-density and ``e1``, ``e2`` are the
    densities rescaled by it.
    """

    def __init__(self, m: GmmModel, x):
        l1, l2 = m.component_logpdfs(np.asarray(x, dtype=float).reshape(-1))
        top = np.maximum(l1, l2)
        self.e1 = np.exp(l1 - top)
        self.e2 = np.exp(l2 - top)
        self.offset = float(top.sum())

    def __call__(self, alpha, chunk: int = 64) -> np.ndarray:
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        flat = alpha.reshape(-1)
        out = np.empty(flat.shape)
        for lo in range(0, flat.size, chunk):
            a = flat[lo:lo + chunk, None]
            with np.errstate(divide="ignore"):
                out[lo:lo + chunk] = np.log(a * self.e1 + (1.0 - a) * self.e2).sum(axis=1)
        return (out + self.offset).reshape(alpha.shape)


@lru_cache(maxsize=16)
def _legendre_rule(n: int):
    t, w = roots_legendre(n)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def gauss_legendre(n: int, lo: float = 0.0, hi: float = 1.0):
    """n-point Gauss-Legendre nodes and weights on [lo, hi]."""
    t, w = _legendre_rule(int(n))
    return 0.5 * (hi - lo) * t + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def _panels(edges, counts):
    nodes, weights = [], []
    for (lo, hi), c in zip(zip(edges[:-1], edges[1:]), counts):
        if hi > lo and c > 0:
            t, w = gauss_legendre(c, lo, hi)
            nodes.append(t)
            weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


@dataclass
class AlphaPosterior:
    nodes: np.ndarray
    weights: np.ndarray
    log_lik: np.ndarray  # unshifted
    log_prior: np.ndarray
    posterior: np.ndarray  # normalized density at the nodes
    log_norm: float  # log of the normalizer of exp(log_lik - max) * prior
    mode: float
    kl: float
    model: GmmModel = field(repr=False)
    lik: MixtureLogLik = field(repr=False)

    def density(self, alpha) -> np.ndarray:
        """Posterior density at arbitrary points, with this grid's normalizer."""
        alpha = np.asarray(alpha, dtype=float)
        ll = self.lik(alpha)
        return np.exp(ll - self.log_lik.max() + self.model.log_prior(alpha) - self.log_norm)

    def prior_density(self) -> np.ndarray:
        return np.exp(self.log_prior)




def gmm_alpha_posterior(m: GmmModel, dataset, n_nodes: int = 2048) -> AlphaPosterior:
    """Quadrature posterior of alpha and its KL to the Beta prior.

    When the posterior is narrow the grid becomes three Gauss-Legendre panels,
    half of the nodes spanning +-12 standard deviations around the mode.
    """
    if n_nodes < 256:
        raise ValueError("need at least 256 quadrature nodes")
    x = dataset.x if isinstance(dataset, Dataset) else dataset
    lik = MixtureLogLik(m, x)

    def log_post(a):
        return float(lik(a)[0] + m.log_prior(a))

    res = minimize_scalar(lambda a: -log_post(a), bounds=(1e-9, 1 - 1e-9), method="bounded",
                          options={"xatol": 1e-12})
    mode = float(res.x)
    h = 1e-5 * max(min(mode, 1 - mode), 1e-3)
    lo_a, hi_a = max(mode - h, 1e-12), min(mode + h, 1 - 1e-12)
    curv = (log_post(hi_a) - 2 * log_post(mode) + log_post(lo_a)) / ((hi_a - lo_a) / 2) ** 2
    sd = 1.0 / np.sqrt(-curv) if curv < 0 else np.inf
    if sd < 0.02:
        lo, hi = max(mode - 12 * sd, 0.0), min(mode + 12 * sd, 1.0)
        quarter = n_nodes // 4
        nodes, weights = _panels([0.0, lo, hi, 1.0], [quarter, n_nodes - 2 * quarter, quarter])
    else:
        nodes, weights = gauss_legendre(n_nodes)
    ll = lik(nodes)
    if not np.any(np.isfinite(ll)):
        raise FloatingPointError("log-likelihood is -inf at every node")
    lp = m.log_prior(nodes)
    un = np.exp(ll - ll.max() + lp)
    Z = float(np.sum(weights * un))
    post = un / Z
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(post > 0, post * (np.log(post) - lp), 0.0)
    kl = max(float(np.sum(weights * integrand)), 0.0)
    return AlphaPosterior(nodes, weights, ll, lp, post, float(np.log(Z)), mode, kl, m, lik)


GMM_SCENARIOS = {
    1: {"name": "separated", "weights": (0.15, 0.85), "means": (-10.0, 10.0), "theta": (-10.0, 10.0, 1.0, 1.0)},
    2: {"name": "overlapping", "weights": (0.15, 0.85), "means": (-0.5, 0.5), "theta": (-0.5, 0.5, 1.0, 1.0)},
    3: {"name": "single", "weights": (1.0, 0.0), "means": (-1.0, -1.0), "theta": (-1.0, -1.0, 1.0, 1.0)},
}


def gmm_scenario_data(scenario: int, n: int = 100_000, seed=0) -> Dataset:
    cfg = GMM_SCENARIOS[scenario]
    rng = np.random.default_rng(seed)
    comp = (rng.uniform(size=n) >= cfg["weights"][0]).astype(int)
    x = np.asarray(cfg["means"])[comp] + rng.normal(size=n)
    prov = {"generator": "gmm_scenario", "scenario": scenario, "n": n, "seed": seed}
    return Dataset(x[:, None], comp, None, prov)


@dataclass
class ScenarioResult:
    scenario: int
    name: str
    posterior: AlphaPosterior
    probe: ProbeReport
    verdict: str

    @property
    def kl(self) -> float:
        return self.posterior.kl


def gmm_scenario(scenario: int, n: int = 100_000, seed=0, n_nodes: int = 2048) -> ScenarioResult:
    """Posterior of the mixture weight at the data-generating parameters.

    The verdict uses the collapse thresholds on the KL alone: alpha is a
    single global latent, so there are no per-datapoint active units.
    """
    cfg = GMM_SCENARIOS[scenario]
    m = GmmModel(*cfg["theta"])
    ds = gmm_scenario_data(scenario, n, seed)
    post = gmm_alpha_posterior(m, ds, n_nodes)
    probe = collapse_probe(lambda a: post.log_lik, m.log_prior, post.nodes, post.weights)
    return ScenarioResult(scenario, cfg["name"], post, probe, verdict(post.kl, 0.0))


def gmm_scenarios(seed=0, n: int = 100_000, n_nodes: int = 2048) -> list[ScenarioResult]:
    return [gmm_scenario(s, n, seed, n_nodes) for s in (1, 2, 3)]


# ---------------------------------------------------------------------------
# synthetic mixture with a warped continuous layer


def gmvae_log_evidence(truth: GmvaeTruth, X, means=None, span: float = 12.0, n_grid: int = 2401) -> np.ndarray:
    """log p(x | z = k) per row and component -> (n, K).

    The warp acts coordinatewise and all covariances are diagonal, so the
    integral over w factorizes into 1-D integrals, each done on a uniform grid
    of +-``span`` standard deviations around the component mean.
    """
    X = np.asarray(X, dtype=float)
    means = truth.means if means is None else np.asarray(means, dtype=float)
    K, d = means.shape
    out = np.zeros((X.shape[0], K))
    t = np.linspace(-span, span, n_grid)
    dt = t[1] - t[0]
    log_prior_w = -0.5 * t**2 - 0.5 * LOG_2PI + np.log(dt)
    s = truth.noise_std
    for k in range(K):
        for j in range(d):
            w = means[k, j] + truth.w_std * t
            fw = gmvae_warp(w)
            ll = -0.5 * ((X[:, j, None] - fw[None, :]) / s) ** 2 - np.log(s) - 0.5 * LOG_2PI
            lj = ll + log_prior_w[None, :]
            top = lj.max(axis=1)
            out[:, k] += top + np.log(np.exp(lj - top[:, None]).sum(axis=1))
    return out


def gmvae_cluster_posterior(truth: GmvaeTruth, X, means=None, **kw) -> np.ndarray:
    """Exact p(z = k | x) under a uniform cluster prior -> (n, K)."""
    le = gmvae_log_evidence(truth, X, means, **kw)
    le -= le.max(axis=1, keepdims=True)
    p = np.exp(le)
    return p / p.sum(axis=1, keepdims=True)


def gmvae_fit_single_cluster(truth: GmvaeTruth, X) -> np.ndarray:
    """Maximum-likelihood mean of a one-cluster model, coordinate by coordinate."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    mu = np.zeros(d)
    for j in range(d):
        def nll(m, j=j):
            return -gmvae_log_evidence(truth, X[:, [j]], np.array([[m]])).sum()
        lo, hi = float(X[:, j].min()), float(X[:, j].max())
        mu[j] = minimize_scalar(nll, bounds=(lo, hi), method="bounded", options={"xatol": 1e-8}).x
    return mu


def total_variation_from_uniform(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return 0.5 * np.abs(probs - 1.0 / probs.shape[1]).sum(axis=1)

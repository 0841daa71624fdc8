"""Posterior-collapse metrics and the flat-likelihood / collapsed-posterior probe."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .decoder import LOG_2PI
from .models import Encoder, Model, encode, latent_posterior

AU_EPS = 0.01
KL_COLLAPSED = 0.01
AU_COLLAPSED = 0.05
KL_NEAR = 0.1


def active_units(posterior_means, eps: float = AU_EPS) -> float:
    """Fraction of columns whose sample variance across rows is at least ``eps``."""
    means = np.asarray(posterior_means, dtype=float)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ValueError("active units need at least two datapoints")
    return float(np.mean(means.var(axis=0, ddof=1) >= eps))


@dataclass(frozen=True)
class GaussianPosterior:
    """Diagonal gaussians, one per row."""

    mean: np.ndarray
    logvar: np.ndarray


@dataclass(frozen=True)
class CategoricalPosterior:
    probs: np.ndarray  # (n, K)


def standard_normal_prior(dim: int) -> GaussianPosterior:
    return GaussianPosterior(np.zeros((1, dim)), np.zeros((1, dim)))


def uniform_prior(K: int) -> CategoricalPosterior:
    return CategoricalPosterior(np.full((1, K), 1.0 / K))


def kl_per_point(posterior, prior) -> np.ndarray:
    """Closed-form KL(posterior_i || prior) for every row."""
    if isinstance(posterior, GaussianPosterior) and isinstance(prior, GaussianPosterior):
        m, lv = posterior.mean, posterior.logvar
        pm, plv = prior.mean, prior.logvar
        return 0.5 * np.sum(plv - lv + (np.exp(lv) + (m - pm) ** 2) / np.exp(plv) - 1.0, axis=1)
    if isinstance(posterior, CategoricalPosterior) and isinstance(prior, CategoricalPosterior):
        q, p = posterior.probs, prior.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, q * (np.log(q) - np.log(p)), 0.0)
        return np.maximum(terms.sum(axis=1), 0.0)
    raise TypeError(f"no closed-form KL between {type(posterior).__name__} and {type(prior).__name__}")


def kl_to_prior(posterior, prior) -> float:
    """Dataset average of the closed-form KL."""
    return float(kl_per_point(posterior, prior).mean())


def _gauss_logpdf(z, mean, logvar):
    return -0.5 * np.sum((z - mean) ** 2 / np.exp(logvar) + logvar + LOG_2PI, axis=-1)


def mutual_information(posterior, n_samples: int = 10, seed=0, chunk: int = 256) -> tuple[float, float]:
    """I(x; z) under the aggregate posterior (1/n) sum_j q(z | x_j).

    Gaussian posteriors use a Monte-Carlo estimate over all n mixture
    components; categorical ones are computed exactly.  Returns
    ``(estimate, standard error)``.
    """
    if isinstance(posterior, CategoricalPosterior):
        q = posterior.probs
        agg = q.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, q * (np.log(q) - np.log(agg)), 0.0)
        return float(terms.sum(axis=1).mean()), 0.0
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    mean, logvar = posterior.mean, posterior.logvar
    n = mean.shape[0]
    vals = []
    for lo in range(0, n, chunk):
        m, lv = mean[lo:lo + chunk], logvar[lo:lo + chunk]
        z = m[:, None, :] + np.exp(0.5 * lv)[:, None, :] * rng.normal(size=(m.shape[0], n_samples, m.shape[1]))
        own = _gauss_logpdf(z, m[:, None, :], lv[:, None, :])
        # log (1/n) sum_j q(z | x_j) against all n components
        comp = _gauss_logpdf(z[:, :, None, :], mean[None, None], logvar[None, None])
        top = comp.max(axis=2)
        agg = top + np.log(np.exp(comp - top[..., None]).sum(axis=2)) - np.log(n)
        vals.append((own - agg).mean(axis=1))
    per = np.concatenate(vals)
    return float(per.mean()), float(per.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def verdict(kl: float, au: float, kl_collapsed: float = KL_COLLAPSED, au_collapsed: float = AU_COLLAPSED,
            kl_near: float = KL_NEAR) -> str:
    if kl < kl_collapsed and au < au_collapsed:
        return "collapsed"
    if kl < kl_near:
        return "near-collapsed"
    return "active"


@dataclass
class DiagnosticsReport:
    """Collapse metrics for the latent of interest z.

    ``dims`` names the columns behind ``variances``: ``c<k>`` are categorical
    posterior probabilities, ``w<d>`` the means of q(w | x), ``z<d>`` the means
    of a continuous z.  ``au`` covers every listed column.
    """

    au: float
    kl: float
    mi: float
    mi_se: float
    variances: np.ndarray
    dims: list
    iw_ll: float | None = None
    eps: float = AU_EPS
    thresholds: dict = field(default_factory=lambda: {"kl_collapsed": KL_COLLAPSED,
                                                      "au_collapsed": AU_COLLAPSED, "kl_near": KL_NEAR})
    verdict: str = ""

    def __post_init__(self):
        if not 0.0 <= self.au <= 1.0 or self.kl < 0 or np.any(self.variances < 0):
            raise ValueError("invalid diagnostics values")
        if not self.verdict:
            self.verdict = verdict(self.kl, self.au_latent, **self.thresholds)

    def au_of(self, prefix: str) -> float:
        sel = [v for v, d in zip(self.variances, self.dims) if d.startswith(prefix)]
        if not sel:
            raise KeyError(f"no dimensions named {prefix}*")
        return float(np.mean(np.asarray(sel) >= self.eps))

    @property
    def au_latent(self) -> float:
        """Active-unit fraction of z alone (categorical or continuous)."""
        prefix = "c" if any(d.startswith("c") for d in self.dims) else "z"
        return self.au_of(prefix)

    def rows(self) -> list[tuple[str, object]]:
        out = [("au", self.au), ("au_latent", self.au_latent), ("kl", self.kl), ("mi", self.mi),
               ("mi_se", self.mi_se), ("iw_ll", self.iw_ll), ("verdict", self.verdict), ("eps", self.eps)]
        out += [(f"threshold_{k}", v) for k, v in sorted(self.thresholds.items())]
        out += [(f"var_{d}", float(v)) for d, v in zip(self.dims, self.variances)]
        return out

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict}", f"active units: {self.au:.3f} (z only: {self.au_latent:.3f})",
                 f"KL(q(z|x) || p(z)): {self.kl:.6g} nats", f"MI: {self.mi:.6g} (se {self.mi_se:.2g}) nats"]
        if self.iw_ll is not None:
            lines.append(f"IW log-likelihood: {self.iw_ll:.6g}")
        return "\n".join(lines)


def diagnose(model: Model, encoder: Encoder, dataset, n_samples: int = 64, mi_samples: int = 10,
             seed=0, iw_k: int | None = None) -> DiagnosticsReport:
    """All collapse metrics of a trained model on a dataset."""
    X = dataset.x if isinstance(dataset, Dataset) else np.asarray(dataset)
    post = latent_posterior(model, encoder, X, n_samples, seed)
    cols, dims = [], []
    if post[0] == "categorical":
        probs = post[1]
        posterior = CategoricalPosterior(probs)
        prior = uniform_prior(model.spec.K)
        cols.append(probs)
        dims += [f"c{k}" for k in range(model.spec.K)]
        mu, _ = encode(encoder, X)
        cols.append(mu)
        dims += [f"w{d}" for d in range(mu.shape[1])]
    else:
        posterior = GaussianPosterior(post[1], post[2])
        prior = standard_normal_prior(model.spec.K)
        cols.append(post[1])
        dims += [f"z{d}" for d in range(post[1].shape[1])]
    means = np.hstack(cols)
    variances = means.var(axis=0, ddof=1) if means.shape[0] > 1 else np.zeros(means.shape[1])
    au = active_units(means)
    kl = kl_to_prior(posterior, prior)
    mi, mi_se = mutual_information(posterior, mi_samples, seed)
    iw = None
    if iw_k:
        from .inference import iw_log_likelihood
        iw = iw_log_likelihood(model, encoder, X, iw_k, seed)
    return DiagnosticsReport(au, kl, mi, mi_se, variances, dims, iw)


# ---------------------------------------------------------------------------
# flat likelihood <=> collapsed posterior

@dataclass
class ProbeReport:
    flatness: float  # max - min of the log-likelihood over the grid
    kl: float  # KL(posterior || prior) by quadrature
    verdict: str
    equivalence_holds: bool
    nodes: np.ndarray = field(repr=False)
    log_lik: np.ndarray = field(repr=False)
    prior: np.ndarray = field(repr=False)
    posterior: np.ndarray = field(repr=False)


def collapse_probe(log_likelihood: Callable, log_prior: Callable, nodes, weights,
                   flat_tol: float = 1e-8, kl_tol: float = 1e-6) -> ProbeReport:
    """Check that a flat likelihood and a posterior equal to the prior go together.

    The posterior is formed on the quadrature grid by Bayes' rule and
    normalized with the same weights as the prior, so a constant likelihood
    gives a posterior bit-identical to the normalized prior.
    """
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    ll = np.asarray(log_likelihood(nodes), dtype=float)
    lp = np.asarray(log_prior(nodes), dtype=float)
    if np.any(np.isnan(ll)) or np.any(np.isnan(lp)):
        raise FloatingPointError("likelihood or prior is NaN on the grid")
    flat = float(ll.max() - ll.min())
    prior = np.exp(lp - lp.max())
    prior = prior / np.sum(weights * prior)
    post = np.exp(lp - lp.max() + (ll - ll.max()))
    post = post / np.sum(weights * post)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(post > 0, post * (np.log(post) - np.log(prior)), 0.0)
    kl = max(float(np.sum(weights * integrand)), 0.0)
    is_flat = flat <= flat_tol
    is_collapsed = kl <= kl_tol
    text = "collapsed, non-identifiable" if is_collapsed else "active, identifiable"
    return ProbeReport(flat, kl, text, is_flat == is_collapsed, nodes, ll, prior, post)

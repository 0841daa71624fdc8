"""Generative-model variants, amortized encoders and the evidence lower bound.

Every model has the layered form::

    z ~ p(z)                                  continuous N(0, I_K) or Categorical(1/K)
    w | z ~ point mass at z, or N(beta1^T z, diag v)
    x_t | w, x_<t ~ EF(decoder([w, f(x_<t)]))

The identifiable variants use an :class:`InjectiveDecoder`; the baselines use
an unconstrained leaky-ReLU network.  ``f`` is a recurrent history embedder,
present only for token sequences (H > 0).

The encoder is a diagonal Gaussian over ``w`` (which equals ``z`` for point
masses).  For categorical ``z`` the conditional ``q(z | w, x)`` is set to the
exact ``p(z | w)``, so the K-term sum is enumerated and no discrete sample is
ever drawn.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .data import Dataset
from .decoder import LOG_2PI, ExpFamilyHead, InjectiveDecoder, log_likelihood
from .icnn import IcnnParams

ID_VARIANTS = ("IDVAE", "IDGMVAE", "IDSVAE", "GeneralIDVAE")
BASELINES = ("BaselineVAE", "BaselineGMVAE")
# variant -> (latent kind, w family)
_DEFAULTS = {
    "IDVAE": ("continuous", "point"),
    "IDGMVAE": ("categorical", "gaussian"),
    "IDSVAE": ("continuous", "point"),
    "GeneralIDVAE": ("continuous", "point"),
    "BaselineVAE": ("continuous", "point"),
    "BaselineGMVAE": ("categorical", "gaussian"),
}


class RankError(ValueError):
    """Embedding dimensions that cannot give a full-rank padding matrix."""


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, index: int):
        super().__init__(f"non-finite {what} at datapoint {index}")
        self.index = index


@dataclass
class ModelSpec:
    variant: str
    K: int
    D: int
    M: int | None = None
    H: int | None = None
    family: str = "gaussian"
    latent: str | None = None
    w_family: str | None = None
    widths: tuple = (16,)
    quad: float = 1.0
    hidden: tuple | None = None  # baseline hidden widths; None matches the ID parameter count
    logvar: float = 0.0  # initial gaussian emission log-variance
    learn_logvar: bool = True

    def __post_init__(self):
        if self.variant not in _DEFAULTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        latent, wfam = _DEFAULTS[self.variant]
        self.latent = self.latent or latent
        self.w_family = self.w_family or wfam
        if self.M is None:
            self.M = self.K
        if self.H is None:
            self.H = 8 if self.variant == "IDSVAE" else 0
        self.widths = tuple(self.widths)
        if self.hidden is not None:
            self.hidden = tuple(self.hidden)
        if self.latent not in ("continuous", "categorical"):
            raise ValueError(f"unknown latent kind {self.latent!r}")
        if self.w_family not in ("point", "gaussian"):
            raise ValueError(f"unknown w family {self.w_family!r}")
        if self.latent == "categorical" and self.w_family != "gaussian":
            raise ValueError("categorical latents need a gaussian w layer")
        if self.w_family == "point" and self.M != self.K:
            raise ValueError("a point-mass w layer needs M == K")
        if self.M < self.K:
            raise RankError(f"beta1 needs M >= K for full row rank, got K={self.K}, M={self.M}")
        if self.is_id and self.D < self.M + self.H:
            raise RankError(
                f"beta2 needs D >= M + H for full row rank, got D={self.D}, M+H={self.M + self.H}"
            )
        if self.H > 0 and self.family != "categorical":
            raise ValueError("a history embedder needs token data (categorical family)")

    @property
    def is_id(self) -> bool:
        return self.variant in ID_VARIANTS

    @property
    def mixture(self) -> bool:
        return self.latent == "categorical"

    @property
    def sequential(self) -> bool:
        return self.H > 0

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["widths"] = list(self.widths)
        out["hidden"] = None if self.hidden is None else list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    decoder: InjectiveDecoder | None = None  # structure only; arrays live in params
    frozen: set = field(default_factory=set)

    @property
    def head(self) -> ExpFamilyHead:
        return ExpFamilyHead(self.spec.family, float(self.params.get("head.logvar", 0.0)))

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def copy(self) -> "Model":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, frozen=set(self.frozen))

    def sync(self) -> None:
        """Copy the flat parameters back into the decoder structure."""
        if self.decoder is not None:
            self.decoder = self.decoder.update_from(self.params)

    def component_means(self, named=None):
        """Means of w | z = k, one row per k (mixture models)."""
        named = self.params if named is None else named
        if "mix.mu" in named:
            return named["mix.mu"]
        return np.eye(self.spec.K, self.spec.M)


# ---------------------------------------------------------------------------
# construction

def _icnn_count(dim, widths) -> int:
    sizes = list(widths) + [1]
    total, prev = 0, dim
    for l, w in enumerate(sizes):
        total += w * dim + w + (w * prev if l > 0 else 0)
        prev = w
    return total


def _mlp_count(sizes) -> int:
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def matched_hidden(spec: ModelSpec) -> tuple:
    """Two equal hidden widths giving the closest count to the ID decoder's."""
    target = _icnn_count(spec.M + spec.H, spec.widths) + _icnn_count(spec.D, spec.widths)
    din = spec.M + spec.H
    best = min(range(1, 513), key=lambda h: abs(_mlp_count([din, h, h, spec.D]) - target))
    return (best, best)


def build_model(spec: ModelSpec, seed=0) -> Model:
    """Feasible initial parameters, deterministic in ``seed``.

    ID decoders start near the identity: small random networks on top of the
    fixed quadratic term.  Baseline cluster means start at the same points as
    the fixed ID cluster means.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    decoder = None
    head = ExpFamilyHead(spec.family, spec.logvar)
    if spec.is_id:
        g1 = IcnnParams.init(spec.M + spec.H, spec.widths, rng, quad=spec.quad)
        g2 = IcnnParams.init(spec.D, spec.widths, rng, quad=spec.quad)
        decoder = InjectiveDecoder.two_stage(g1, g2, head)
        params.update(decoder.to_dict("dec"))
    else:
        hidden = spec.hidden if spec.hidden is not None else matched_hidden(spec)
        sizes = [spec.M + spec.H] + list(hidden) + [spec.D]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"mlp.W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(a), (a, b))
            params[f"mlp.b{i}"] = np.zeros(b)
    frozen = set()
    if spec.family == "gaussian":
        params["head.logvar"] = np.array(float(spec.logvar))
        if not spec.learn_logvar:
            frozen.add("head.logvar")
    if spec.w_family == "gaussian":
        if spec.mixture:
            params["mix.logvar"] = np.zeros((spec.K, spec.M))
            if not spec.is_id:
                params["mix.mu"] = np.eye(spec.K, spec.M)
        else:
            params["mix.logvar"] = np.zeros(spec.M)
    if spec.sequential:
        H, V = spec.H, spec.D
        params["hist.Ws"] = rng.normal(0.0, 0.1, (H, H))
        params["hist.Us"] = rng.normal(0.0, 0.1, (V, H))
        params["hist.c"] = np.zeros(H)
    return Model(spec, params, decoder, frozen)


@dataclass
class Encoder:
    """Diagonal Gaussian q(w | x): a tanh network emitting [mean, log-variance]."""

    params: dict[str, np.ndarray]
    in_dim: int
    latent_dim: int
    hidden: tuple = (32,)
    vocab: int | None = None  # token inputs are one-hot encoded and flattened

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def copy(self) -> "Encoder":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def features(self, X):
        X = np.asarray(X)
        if self.vocab is None:
            return X.astype(float)
        return np.eye(self.vocab)[X.astype(np.int64)].reshape(X.shape[0], -1)

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "latent_dim": self.latent_dim, "hidden": list(self.hidden),
                "vocab": self.vocab}


def build_encoder(model: Model, seed=0, hidden=(32,), in_dim: int | None = None,
                  seq_len: int | None = None) -> Encoder:
    spec = model.spec
    vocab = None
    if spec.sequential:
        if seq_len is None:
            raise ValueError("sequence encoders need seq_len")
        vocab = spec.D
        in_dim = seq_len * spec.D
    elif in_dim is None:
        in_dim = spec.D
    rng = np.random.default_rng(seed)
    sizes = [in_dim] + list(hidden) + [2 * spec.M]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        params[f"enc.W{i}"] = rng.normal(0.0, (0.1 if last else 1.0) / np.sqrt(a), (a, b))
        params[f"enc.b{i}"] = np.zeros(b)
    return Encoder(params, in_dim, spec.M, tuple(hidden), vocab)


def prior_encoder(model: Model, in_dim: int | None = None) -> Encoder:
    """Encoder whose output is the standard normal for every input."""
    enc = build_encoder(model, 0, hidden=(), in_dim=in_dim,
                        seq_len=None if not model.spec.sequential else 1)
    for v in enc.params.values():
        v[...] = 0.0
    return enc


def linear_encoder(W_mean, b_mean, logvar) -> Encoder:
    """Affine mean ``x W_mean + b_mean`` with input-independent log-variances."""
    W_mean = np.asarray(W_mean, float)
    D, L = W_mean.shape
    W = np.hstack([W_mean, np.zeros((D, L))])
    b = np.concatenate([np.asarray(b_mean, float), np.asarray(logvar, float)])
    return Encoder({"enc.W0": W, "enc.b0": b}, D, L, ())


def encode(encoder: Encoder, X, named=None):
    """(mean, log-variance) of q(w | x) for a batch; ``named`` may hold Vars."""
    named = encoder.params if named is None else named
    h = encoder.features(X)
    for i in range(encoder.n_layers):
        h = dc.add_rowvec(dc.matmul(h, named[f"enc.W{i}"]), named[f"enc.b{i}"])
        if i < encoder.n_layers - 1:
            h = dc.tanh(h)
    L = encoder.latent_dim
    return h[:, :L], h[:, L:]


# ---------------------------------------------------------------------------
# densities

def _tile_row(v, n):
    """A vector (d,) repeated as n rows -> (n, d)."""
    return dc.matmul(np.ones((n, 1)), dc.reshape(v, (1, -1)))


def gaussian_kl(mu, logvar, prior_mu=None, prior_logvar=None):
    """Per-row KL(N(mu, e^logvar) || N(prior_mu, e^prior_logvar)), diagonal -> (n,).

    Priors default to the standard normal; they may be rows (d,) shared by
    all datapoints.
    """
    n = dc.value_of(mu).shape[0]
    if prior_mu is None and prior_logvar is None:
        inner = dc.sub(dc.add(dc.exp(logvar), dc.square(mu)), dc.add(logvar, 1.0))
        return dc.mul(dc.row_sum(inner), 0.5)
    d = dc.value_of(mu).shape[1]
    pm = _tile_row(prior_mu if prior_mu is not None else np.zeros(d), n)
    plv = _tile_row(prior_logvar if prior_logvar is not None else np.zeros(d), n)
    ratio = dc.mul(dc.add(dc.exp(logvar), dc.square(dc.sub(mu, pm))), dc.exp(dc.mul(plv, -1.0)))
    inner = dc.sub(dc.add(dc.sub(plv, logvar), ratio), 1.0)
    return dc.mul(dc.row_sum(inner), 0.5)


def _diag_normal_logpdf(U, mean_row, logvar_row):
    n = dc.value_of(U).shape[0]
    d = dc.value_of(U).shape[1]
    diff = dc.sub(U, _tile_row(mean_row, n))
    quad = dc.row_sum(dc.mul(dc.square(diff), _tile_row(dc.exp(dc.mul(logvar_row, -1.0)), n)))
    return dc.sub(dc.mul(quad, -0.5), dc.add(dc.mul(dc.sum_(logvar_row), 0.5), 0.5 * d * LOG_2PI))


def component_log_densities(model: Model, U, named=None):
    """log(1/K) + log N(w; m_k, diag v_k) for every row and component -> (n, K)."""
    named = model.params if named is None else named
    means = model.component_means(named)
    cols = []
    for k in range(model.spec.K):
        lp = _diag_normal_logpdf(U, means[k], named["mix.logvar"][k])
        cols.append(dc.reshape(dc.sub(lp, float(np.log(model.spec.K))), (-1, 1)))
    return dc.concat(cols, axis=1)


def log_prior(model: Model, U, named=None):
    """log p(w) per row, with z summed out exactly."""
    named = model.params if named is None else named
    spec = model.spec
    if spec.mixture:
        return dc.logsumexp_rows(component_log_densities(model, U, named))
    if spec.w_family == "point":
        d = dc.value_of(U).shape[1]
        return dc.sub(dc.mul(dc.row_sum(dc.square(U)), -0.5), 0.5 * d * LOG_2PI)
    return _diag_normal_logpdf(U, np.zeros(spec.M), _marginal_logvar(model, named))


def _marginal_logvar(model: Model, named):
    # continuous z with gaussian w: w ~ N(0, diag(pad + v)) with pad = 1 on the first K dims
    pad = np.concatenate([np.ones(model.spec.K), np.zeros(model.spec.M - model.spec.K)])
    return dc.log(dc.add(dc.exp(named["mix.logvar"]), pad))


def categorical_posterior(model: Model, U, named=None) -> np.ndarray:
    """p(z = k | w) per row -> (n, K) probabilities."""
    lc = dc.value_of(component_log_densities(model, U, named))
    lc = lc - lc.max(axis=1, keepdims=True)
    p = np.exp(lc)
    return p / p.sum(axis=1, keepdims=True)


def history_states(model: Model, tokens, named=None) -> list:
    """f(x_<t) for t = 1..T; the first state is exactly zero."""
    named = model.params if named is None else named
    tokens = np.asarray(tokens, dtype=np.int64)
    n, T = tokens.shape
    eye = np.eye(model.spec.D)
    states = [np.zeros((n, model.spec.H))]
    for t in range(T - 1):
        pre = dc.add(dc.matmul(states[-1], named["hist.Ws"]), dc.matmul(eye[tokens[:, t]], named["hist.Us"]))
        states.append(dc.tanh(dc.add_rowvec(pre, named["hist.c"])))
    return states


def _mlp(model: Model, Y, named):
    n_layers = sum(1 for k in named if k.startswith("mlp.W"))
    h = Y
    for i in range(n_layers):
        h = dc.add_rowvec(dc.matmul(h, named[f"mlp.W{i}"]), named[f"mlp.b{i}"])
        if i < n_layers - 1:
            h = dc.leaky_relu(h)
    return h


def natural_params(model: Model, Y, named=None):
    """Decoder output for inputs Y = [w, f(x_<t)] (n, M + H) -> (n, D)."""
    named = model.params if named is None else named
    if model.spec.is_id:
        return model.decoder.forward(Y, named)
    return _mlp(model, Y, named)


def log_lik(model: Model, X, U, named=None, states=None):
    """log p(x | w) per row; X rows align with U rows.

    For sequences ``states`` are the history states of X (computed when
    omitted) and the result sums over positions.
    """
    named = model.params if named is None else named
    head = ExpFamilyHead(model.spec.family)
    lv = named.get("head.logvar")
    if not model.spec.sequential:
        eta = natural_params(model, U, named)
        return log_likelihood(head, eta, X, logvar=lv)
    tokens = np.asarray(X, dtype=np.int64)
    n, T = tokens.shape
    if states is None:
        states = history_states(model, tokens, named)
    Y = dc.concat([dc.concat([U, s], axis=1) for s in states], axis=0)
    eta = natural_params(model, Y, named)
    onehot = np.eye(model.spec.D)[tokens.T.reshape(-1)]
    ll = log_likelihood(head, eta, onehot)
    return dc.sum_(dc.reshape(ll, (T, n)), axis=0)


def log_q(mu, logvar, eps):
    """log q(w | x) at w = mu + exp(logvar / 2) * eps -> (n,)."""
    d = eps.shape[1]
    const = 0.5 * (eps * eps).sum(axis=1) + 0.5 * d * LOG_2PI
    return dc.sub(dc.mul(dc.row_sum(logvar), -0.5), const)


# ---------------------------------------------------------------------------
# evidence lower bound

@dataclass
class ElboResult:
    value: float  # batch mean
    recon: float
    kl: float
    per_point: np.ndarray = field(repr=False)


def categorical_elbo(log_joint, log_q_probs) -> np.ndarray:
    """sum_k q_k (log p(x, z=k) - log q_k) per row, by enumeration -> (n,)."""
    log_joint = np.asarray(log_joint, float)
    log_q_probs = np.asarray(log_q_probs, float)
    q = np.exp(log_q_probs)
    terms = np.where(q > 0, q * (log_joint - log_q_probs), 0.0)
    return terms.sum(axis=1)


def _mean_over_samples(v, S, n):
    if S == 1:
        return v
    return dc.mul(dc.sum_(dc.reshape(v, (S, n)), axis=0), 1.0 / S)


def elbo_terms(model: Model, encoder: Encoder, X, eps, named=None, enc_named=None, kl: str = "closed"):
    """Per-point (reconstruction, KL) with noise ``eps`` (S, n, M); tape-aware.

    ``kl="closed"`` uses the analytic KL for gaussian priors; for mixture
    priors it uses the analytic entropy of q plus a sampled cross-entropy.
    ``kl="sampled"`` uses log q - log p at the samples, which is exact
    pointwise when q is the exact posterior.
    """
    named = model.params if named is None else named
    mu, logvar = encode(encoder, X, enc_named)
    S, n = eps.shape[0], eps.shape[1]
    std = dc.exp(dc.mul(logvar, 0.5))
    samples = [dc.add(mu, dc.mul(std, eps[s])) for s in range(S)]
    U = samples[0] if S == 1 else dc.concat(samples, axis=0)
    Xr = X if S == 1 else np.concatenate([X] * S, axis=0)
    states = None
    if model.spec.sequential:
        states = history_states(model, X, named)
        if S > 1:
            states = [dc.concat([s] * S, axis=0) for s in states]
    recon = _mean_over_samples(log_lik(model, Xr, U, named, states), S, n)
    if kl == "closed" and not model.spec.mixture:
        if model.spec.w_family == "point":
            kl_term = gaussian_kl(mu, logvar)
        else:
            kl_term = gaussian_kl(mu, logvar, np.zeros(model.spec.M), _marginal_logvar(model, named))
        return recon, kl_term
    if kl not in ("closed", "sampled"):
        raise ValueError(f"unknown KL mode {kl!r}")
    lp = _mean_over_samples(log_prior(model, U, named), S, n)
    if kl == "closed":
        neg_entropy = dc.mul(dc.row_sum(dc.add(logvar, 1.0 + LOG_2PI)), -0.5)
        return recon, dc.sub(neg_entropy, lp)
    lq = [log_q(mu, logvar, eps[s]) for s in range(S)]
    lq = lq[0] if S == 1 else dc.mul(dc.sum_(dc.reshape(dc.concat(lq, axis=0), (S, n)), axis=0), 1.0 / S)
    return recon, dc.sub(lq, lp)


def check_finite(values, what: str):
    v = np.asarray(dc.value_of(values))
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise NonFiniteError(what, int(bad[0]))


def elbo(model: Model, encoder: Encoder, batch, beta_weight: float = 1.0, n_mc: int = 1, seed=0,
         kl: str = "closed") -> ElboResult:
    """E_q[log p(x | w)] - beta_weight * KL(q || p), averaged over the batch."""
    if beta_weight <= 0:
        raise ValueError("beta_weight must be positive")
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    X = batch.x if isinstance(batch, Dataset) else np.asarray(batch)
    rng = np.random.default_rng(seed)
    eps = rng.normal(size=(n_mc, X.shape[0], model.spec.M))
    recon, kl_term = elbo_terms(model, encoder, X, eps, kl=kl)
    check_finite(recon, "reconstruction term")
    check_finite(kl_term, "KL term")
    per = recon - beta_weight * kl_term
    return ElboResult(float(per.mean()), float(recon.mean()), float(kl_term.mean()), per)


# ---------------------------------------------------------------------------
# posterior summaries and sampling

def latent_posterior(model: Model, encoder: Encoder, X, n_samples: int = 64, seed=0):
    """Posterior of z given x under the encoder.

    Returns ``("gaussian", mean, logvar)`` for continuous z and
    ``("categorical", probs)`` for categorical z, where the probabilities
    average p(z | w) over ``n_samples`` draws of q(w | x).
    """
    mu, logvar = encode(encoder, X)
    spec = model.spec
    if spec.mixture:
        rng = np.random.default_rng(seed)
        std = np.exp(0.5 * logvar)
        probs = np.zeros((mu.shape[0], spec.K))
        for _ in range(n_samples):
            probs += categorical_posterior(model, mu + std * rng.normal(size=mu.shape))
        return "categorical", probs / n_samples
    if spec.w_family == "point":
        return "gaussian", mu, logvar
    # z | w ~ N(w_k / (1 + v_k), v_k / (1 + v_k)) on the first K coordinates
    v = np.exp(model.params["mix.logvar"][: spec.K])
    shrink = 1.0 / (1.0 + v)
    mean = mu[:, : spec.K] * shrink
    var = shrink**2 * np.exp(logvar[:, : spec.K]) + v * shrink
    return "gaussian", mean, np.log(var)


def _sample_head(model: Model, eta, rng):
    fam = model.spec.family
    if fam == "gaussian":
        std = np.exp(0.5 * float(model.params["head.logvar"]))
        return eta + std * rng.normal(size=eta.shape)
    if fam == "bernoulli":
        return (rng.uniform(size=eta.shape) < dc.sigmoid(eta)).astype(float)
    p = np.exp(eta - dc.logsumexp_rows(eta)[:, None])
    u = rng.uniform(size=(eta.shape[0], 1))
    return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), eta.shape[1] - 1)


def generate(model: Model, n: int, seed=0, length: int = 10) -> Dataset:
    """Ancestral samples; ``latents`` holds w (= z for point masses), ``labels`` categorical z."""
    rng = np.random.default_rng(seed)
    spec = model.spec
    labels = None
    if spec.mixture:
        labels = rng.integers(0, spec.K, n)
        means = model.component_means()
        std = np.exp(0.5 * model.params["mix.logvar"])
        W = means[labels] + std[labels] * rng.normal(size=(n, spec.M))
    elif spec.w_family == "point":
        W = rng.normal(size=(n, spec.K))
    else:
        z = rng.normal(size=(n, spec.K))
        std = np.exp(0.5 * model.params["mix.logvar"])
        W = np.hstack([z, np.zeros((n, spec.M - spec.K))]) + std * rng.normal(size=(n, spec.M))
    prov = {"generator": "model", "variant": spec.variant, "n": n, "seed": seed}
    if not spec.sequential:
        eta = natural_params(model, W)
        x = _sample_head(model, eta, rng)
        if spec.family == "categorical":
            x = np.eye(spec.D)[x]
        return Dataset(x, labels, W, prov)
    tokens = np.zeros((n, length), dtype=np.int64)
    state = np.zeros((n, spec.H))
    eye = np.eye(spec.D)
    for t in range(length):
        eta = natural_params(model, np.hstack([W, state]))
        tokens[:, t] = _sample_head(model, eta, rng)
        pre = state @ model.params["hist.Ws"] + eye[tokens[:, t]] @ model.params["hist.Us"]
        state = np.tanh(pre + model.params["hist.c"])
    prov["length"] = length
    return Dataset(tokens, labels, W, prov, vocab=spec.D)

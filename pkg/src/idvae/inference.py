"""Projected Adam training of the ELBO and importance-weighted likelihood."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Dataset
from .icnn import project_named
from .models import (Encoder, Model, NonFiniteError, check_finite, elbo_terms, encode, log_lik,
                     log_prior, log_q, history_states)


class Adam:
    """Adaptive moment estimation; :meth:`step` descends on the given gradients."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=float) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=float) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of the arrays in ``params`` named in ``grads``."""
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t,
                "m": self.m, "v": self.v}

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls({}, state["lr"], state["betas"], state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.array(v, dtype=float) for k, v in state["m"].items()}
        opt.v = {k: np.array(v, dtype=float) for k, v in state["v"].items()}
        return opt


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 128
    lr: float = 1e-3
    beta_weight: float = 1.0
    seed: int = 0
    n_mc: int = 1
    clip: float = 10.0
    kl: str = "closed"

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0 or self.beta_weight <= 0 or self.n_mc < 1:
            raise ValueError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainTrace:
    """One record per epoch; wall-clock is kept but ignored by equality."""

    seed: int
    config_hash: str
    epoch: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    seconds: list = field(default_factory=list, compare=False)

    def append(self, epoch, elbo, kl, recon, seconds):
        if self.epoch and epoch <= self.epoch[-1]:
            raise ValueError("epoch index must increase")
        self.epoch.append(int(epoch))
        self.elbo.append(float(elbo))
        self.kl.append(float(kl))
        self.recon.append(float(recon))
        self.seconds.append(float(seconds))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "epoch": self.epoch,
                "elbo": self.elbo, "kl": self.kl, "recon": self.recon}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainTrace":
        tr = cls(d["seed"], d["config_hash"], list(d["epoch"]), list(d["elbo"]), list(d["kl"]),
                 list(d["recon"]))
        tr.seconds = [0.0] * len(tr.epoch)
        return tr


@dataclass
class TrainedModel:
    model: Model
    encoder: Encoder
    optimizer: Adam
    rng_state: dict


class DivergenceError(RuntimeError):
    """Training produced a non-finite objective; carries the last finite state."""

    def __init__(self, message: str, last_good: TrainedModel, trace: TrainTrace):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


def _split_named(model: Model, encoder: Encoder, bound):
    named = {k: bound.get(k, v) for k, v in model.params.items()}
    enc_named = {k: bound[k] for k in encoder.params}
    return named, enc_named


def train(model: Model, encoder: Encoder, dataset: Dataset, config: TrainConfig | None = None,
          callback=None) -> tuple[TrainedModel, TrainTrace]:
    """Maximize the ELBO with Adam, projecting every ICNN after each step.

    Inputs are copied, never modified.  Deterministic in ``config.seed``.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    encoder = encoder.copy()
    rng = np.random.default_rng(config.seed)
    trainable = model.trainable() + list(encoder.params)
    params = {**{k: model.params[k] for k in model.trainable()}, **encoder.params}
    opt = Adam(params, lr=config.lr)
    trace = TrainTrace(config.seed, config.digest())
    X = dataset.x
    n = X.shape[0]
    M = model.spec.M

    def snapshot():
        return TrainedModel(model.copy(), encoder.copy(), _copy_opt(opt), rng.bit_generator.state)

    last_good = snapshot()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        tot = np.zeros(3)
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            xb = X[idx]
            eps = rng.normal(size=(config.n_mc, len(idx), M))
            tape = dc.Tape()
            bound = {k: tape.input(k, params[k]) for k in trainable}
            named, enc_named = _split_named(model, encoder, bound)
            recon, kl = elbo_terms(model, encoder, xb, eps, named, enc_named, kl=config.kl)
            per = dc.sub(recon, dc.mul(kl, config.beta_weight))
            try:
                check_finite(per, "ELBO")
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"epoch {epoch}: non-finite ELBO at datapoint {int(idx[exc.index])}", last_good, trace
                ) from None
            loss = dc.mul(dc.sum_(per), -1.0 / len(idx))
            grads = dc.gradient(tape, loss, trainable)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"epoch {epoch}: non-finite gradient", last_good, trace)
            clip_by_global_norm(grads, config.clip)
            opt.step(params, grads)
            project_named(params)
            tot += len(idx) * np.array([per.value.mean(), kl.value.mean(), recon.value.mean()])
        tot /= n
        trace.append(epoch, *tot, time.perf_counter() - start)
        if callback is not None:
            callback(epoch, tot)
        last_good = snapshot()
    model.sync()
    return TrainedModel(model, encoder, opt, rng.bit_generator.state), trace


def _copy_opt(opt: Adam) -> Adam:
    out = Adam({}, opt.lr, opt.betas, opt.eps)
    out.t = opt.t
    out.m = {k: v.copy() for k, v in opt.m.items()}
    out.v = {k: v.copy() for k, v in opt.v.items()}
    return out


def iw_log_weights(model: Model, encoder: Encoder, X, k: int, rng) -> np.ndarray:
    """log p(x, w_j) - log q(w_j | x) for j = 1..k -> (k, n)."""
    X = np.asarray(X)
    n = X.shape[0]
    mu, logvar = encode(encoder, X)
    std = np.exp(0.5 * logvar)
    eps = rng.normal(size=(k, n, model.spec.M))
    U = (mu[None] + std[None] * eps).reshape(k * n, -1)
    Xr = np.concatenate([X] * k, axis=0)
    states = None
    if model.spec.sequential:
        states = [np.concatenate([s] * k, axis=0) for s in history_states(model, X)]
    lp = log_lik(model, Xr, U, states=states) + log_prior(model, U)
    lq = log_q(np.tile(mu, (k, 1)), np.tile(logvar, (k, 1)), eps.reshape(k * n, -1))
    return (lp - lq).reshape(k, n)


def iw_log_likelihood_points(model: Model, encoder: Encoder, dataset, k: int = 100, seed=0,
                             max_rows: int = 200_000) -> np.ndarray:
    """Per-datapoint log-mean-exp of k importance weights."""
    if k < 1:
        raise ValueError("k must be at least 1")
    X = dataset.x if isinstance(dataset, Dataset) else np.asarray(dataset)
    rng = np.random.default_rng(seed)
    chunk = max(1, max_rows // k)
    out = []
    for lo in range(0, X.shape[0], chunk):
        lw = iw_log_weights(model, encoder, X[lo:lo + chunk], k, rng)
        bad = np.flatnonzero(~np.all(np.isfinite(lw), axis=0))
        if bad.size:
            raise NonFiniteError("importance weight", lo + int(bad[0]))
        m = lw.max(axis=0)
        out.append(m + np.log(np.mean(np.exp(lw - m), axis=0)))
    return np.concatenate(out)


def iw_log_likelihood(model: Model, encoder: Encoder, dataset, k: int = 100, seed=0) -> float:
    """Importance-weighted log-likelihood estimate, averaged over datapoints."""
    return float(iw_log_likelihood_points(model, encoder, dataset, k, seed).mean())

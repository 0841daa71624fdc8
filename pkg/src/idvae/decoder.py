"""Injective likelihood maps ``g_2(beta^T g_1(z))`` and exponential-family heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .icnn import IcnnParams

LOG_2PI = float(np.log(2.0 * np.pi))
FAMILIES = ("gaussian", "bernoulli", "categorical")


class SupportError(ValueError):
    pass


@dataclass(frozen=True)
class TruncatedIdentity:
    """The K x D zero-one matrix with ones on the main diagonal (D >= K)."""

    K: int
    D: int

    def __post_init__(self):
        if self.D < self.K:
            raise ValueError(f"truncated identity needs D >= K (full column rank), got K={self.K}, D={self.D}")

    @property
    def matrix(self) -> np.ndarray:
        return np.eye(self.K, self.D)

    def embed(self, z):
        """beta^T z for each row: pad with D - K zeros."""
        if self.D == self.K:
            return z
        n = dc.value_of(z).shape[0]
        return dc.concat([z, np.zeros((n, self.D - self.K))], axis=1)

    def project(self, y):
        """First K coordinates; the left inverse of :meth:`embed`."""
        return y[:, : self.K]


@dataclass
class ExpFamilyHead:
    family: str = "gaussian"
    logvar: float = 0.0  # gaussian only, one global value

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


def log_likelihood(head: ExpFamilyHead, eta, x, logvar=None):
    """Per-row log density of ``x`` given natural parameters ``eta`` (n, D) -> (n,).

    The link is identity (gaussian mean), sigmoid (bernoulli) or log-softmax
    (categorical; ``x`` one-hot).  ``logvar`` overrides ``head.logvar`` and
    may be a tape Var.
    """
    xv = np.asarray(x, dtype=float)
    single = xv.ndim == 1
    if single:
        xv = xv[None, :]
        eta = dc.reshape(eta, (1, -1))
    D = xv.shape[1]
    if head.family == "gaussian":
        lv = head.logvar if logvar is None else logvar
        sq = dc.row_sum(dc.square(dc.sub(eta, xv)))
        if isinstance(lv, dc.Var):
            inv = dc.exp(dc.mul(lv, -1.0))
            out = dc.sub(dc.mul(sq, dc.mul(inv, -0.5)), dc.mul(lv, 0.5 * D))
            out = dc.sub(out, 0.5 * D * LOG_2PI)
        else:
            lv = float(lv)
            out = dc.mul(sq, -0.5 * np.exp(-lv))
            out = dc.sub(out, 0.5 * D * (LOG_2PI + lv))
    elif head.family == "bernoulli":
        if np.any((xv != 0.0) & (xv != 1.0)):
            raise SupportError("bernoulli observations must be 0 or 1")
        out = dc.row_sum(dc.sub(dc.mul(eta, xv), dc.softplus(eta)))
    else:
        if np.any((xv != 0.0) & (xv != 1.0)) or np.any(xv.sum(axis=1) != 1.0):
            raise SupportError("categorical observations must be one-hot rows")
        out = dc.sub(dc.row_sum(dc.mul(eta, xv)), dc.logsumexp_rows(eta))
    return out[0] if single and not isinstance(out, dc.Var) else out


@dataclass
class InjectiveDecoder:
    """Alternating Brenier maps and zero-padding embeddings.

    ``maps[0]`` acts on the input dimension; ``betas[k]`` embeds the output of
    ``maps[k]`` into the input dimension of ``maps[k + 1]``.  The two-stage
    form is ``maps = [g1, g2]``, ``betas = [beta]``.
    """

    maps: list[IcnnParams]
    betas: list[TruncatedIdentity]
    head: ExpFamilyHead

    def __post_init__(self):
        if len(self.betas) != len(self.maps) - 1:
            raise ValueError("need exactly one embedding between consecutive maps")
        for k, beta in enumerate(self.betas):
            if beta.K != self.maps[k].dim or beta.D != self.maps[k + 1].dim:
                raise ValueError(
                    f"stage {k}: embedding {beta.K}->{beta.D} does not chain "
                    f"{self.maps[k].dim}->{self.maps[k + 1].dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.maps[0].dim

    @property
    def out_dim(self) -> int:
        return self.maps[-1].dim

    @classmethod
    def two_stage(cls, g1: IcnnParams, g2: IcnnParams, head: ExpFamilyHead | None = None):
        return cls([g1, g2], [TruncatedIdentity(g1.dim, g2.dim)], head or ExpFamilyHead())

    def validate(self):
        for g in self.maps:
            g.validate()

    def to_dict(self, prefix: str = "dec") -> dict[str, np.ndarray]:
        out = {}
        for k, g in enumerate(self.maps):
            out.update(g.to_dict(f"{prefix}.g{k + 1}"))
        return out

    def update_from(self, named, prefix: str = "dec") -> "InjectiveDecoder":
        maps = [g.update_from(f"{prefix}.g{k + 1}", named) for k, g in enumerate(self.maps)]
        return InjectiveDecoder(maps, list(self.betas), self.head)

    def forward(self, Z, named=None, prefix: str = "dec"):
        """Natural parameters for a batch of inputs; ``named`` may hold tape Vars."""
        out = Z
        for k, g in enumerate(self.maps):
            net = g.bind(f"{prefix}.g{k + 1}", named if named is not None else g.to_dict(f"{prefix}.g{k + 1}"))
            out = net.gradient(out)
            if k < len(self.betas):
                out = self.betas[k].embed(out)
        return out


def decode(dec: InjectiveDecoder, z):
    """eta(z) for a vector z (-> vector) or a batch (n, K) (-> (n, D))."""
    dec.validate()
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if Z.shape[1] != dec.in_dim:
        raise ValueError(f"latent has dimension {Z.shape[1]}, decoder expects {dec.in_dim}")
    out = dec.forward(Z)
    return out[0] if single else out


@dataclass
class InjectivityReport:
    n_pairs: int
    delta: float
    min_separation: float
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def check_injectivity(dec: InjectiveDecoder | Callable, n_pairs: int = 10_000, delta: float = 0.1,
                      rng=None, scale: float = 2.0, in_dim: int | None = None) -> InjectivityReport:
    """Minimum ``|eta(z1) - eta(z2)|`` over sampled pairs with ``|z1 - z2| >= delta``.

    ``dec`` may also be any batch map (n, K) -> (n, D); pass ``in_dim`` then.
    """
    rng = np.random.default_rng(rng)
    if isinstance(dec, InjectiveDecoder):
        fn, K = (lambda Z: decode(dec, Z)), dec.in_dim
    else:
        fn, K = dec, in_dim
    z1 = rng.normal(0.0, scale, (n_pairs, K))
    direction = rng.normal(size=(n_pairs, K))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = delta * (1.0 + rng.exponential(1.0, (n_pairs, 1)))
    z2 = z1 + radius * direction
    sep = np.linalg.norm(fn(z1) - fn(z2), axis=1)
    return InjectivityReport(n_pairs, delta, float(sep.min()), int(np.sum(sep <= 1e-12)))

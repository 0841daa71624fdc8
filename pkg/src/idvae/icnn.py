"""Input-convex networks and their input gradients (Brenier maps).

Layer recursion, for an input batch ``U`` of shape (n, d)::

    Z_0 = U
    Z_{l+1} = h_l(Z_l W_l^T + U A_l^T + b_l),   l = 0 .. L-1

with ``W_0 = 0``, ``W_l >= 0`` for ``l >= 1``, ``h_0(x) = max(a x, x)^2`` and
``h_l`` the leaky ReLU with slope ``a = 0.2``.  The final width is 1.

The potential also carries a fixed, non-trained quadratic term
``quad/2 * |u|^2`` (``quad >= 0``).  It leaves the potential convex, makes it
strongly convex when ``quad > 0`` (so the map is a bijection), and with all
network weights at zero gives the identity map exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc

SLOPE = 0.2


class ConvexityConstraintError(ValueError):
    pass


@dataclass
class IcnnParams:
    W: list[np.ndarray]
    A: list[np.ndarray]
    b: list[np.ndarray]
    alpha: float = SLOPE
    quad: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.A)

    @property
    def dim(self) -> int:
        return self.A[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [a.shape[0] for a in self.A]

    def copy(self) -> "IcnnParams":
        return replace(
            self,
            W=[w.copy() for w in self.W],
            A=[a.copy() for a in self.A],
            b=[v.copy() for v in self.b],
        )

    def validate(self):
        if not (len(self.W) == len(self.A) == len(self.b)) or not self.A:
            raise ValueError("W, A and b need one entry per layer")
        d = self.dim
        prev = d
        for l, (w, a, bias) in enumerate(zip(self.W, self.A, self.b)):
            width = a.shape[0]
            if a.shape != (width, d) or w.shape != (width, prev) or bias.shape != (width,):
                raise ValueError(f"layer {l}: inconsistent shapes W{w.shape} A{a.shape} b{bias.shape}")
            prev = width
        if prev != 1:
            raise ValueError(f"last layer must be scalar, has width {prev}")
        if np.any(self.W[0] != 0.0):
            raise ConvexityConstraintError("W_0 must be identically zero")
        for l in range(1, len(self.W)):
            if np.any(self.W[l] < 0.0):
                raise ConvexityConstraintError(f"W_{l} has negative entries")
        if self.quad < 0:
            raise ConvexityConstraintError("quadratic weight must be non-negative")

    # flat named arrays, used for training and checkpoints
    def to_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for l in range(self.n_layers):
            if l > 0:
                out[f"{prefix}.W{l}"] = self.W[l]
            out[f"{prefix}.A{l}"] = self.A[l]
            out[f"{prefix}.b{l}"] = self.b[l]
        return out

    def bind(self, prefix: str, named) -> "BoundIcnn":
        """Same network with arrays looked up (or taken as tape Vars) from ``named``."""
        W = [self.W[0]] + [named[f"{prefix}.W{l}"] for l in range(1, self.n_layers)]
        A = [named[f"{prefix}.A{l}"] for l in range(self.n_layers)]
        b = [named[f"{prefix}.b{l}"] for l in range(self.n_layers)]
        return BoundIcnn(W, A, b, self.alpha, self.quad)

    def update_from(self, prefix: str, named) -> "IcnnParams":
        out = self.copy()
        for l in range(self.n_layers):
            if l > 0:
                out.W[l] = np.array(named[f"{prefix}.W{l}"], dtype=float)
            out.A[l] = np.array(named[f"{prefix}.A{l}"], dtype=float)
            out.b[l] = np.array(named[f"{prefix}.b{l}"], dtype=float)
        return out

    @classmethod
    def init(cls, dim: int, widths=(32, 32), rng=None, scale: float = 0.1, quad: float = 0.0):
        """Random feasible parameters; ``widths`` are the hidden widths."""
        rng = np.random.default_rng(rng)
        sizes = list(widths) + [1]
        W, A, b = [], [], []
        prev = dim
        for l, width in enumerate(sizes):
            W.append(np.zeros((width, prev)) if l == 0 else np.abs(rng.normal(0.0, scale, (width, prev))))
            A.append(rng.normal(0.0, scale, (width, dim)))
            b.append(rng.normal(0.0, scale, width))
            prev = width
        return cls(W, A, b, quad=quad)

    @classmethod
    def identity(cls, dim: int, widths=(4,)):
        """Zero network plus the unit quadratic: the map is exactly u -> u."""
        sizes = list(widths) + [1]
        W, A, b = [], [], []
        prev = dim
        for width in sizes:
            W.append(np.zeros((width, prev)))
            A.append(np.zeros((width, dim)))
            b.append(np.zeros(width))
            prev = width
        return cls(W, A, b, quad=1.0)

    @classmethod
    def half_square_norm(cls, dim: int, alpha: float = SLOPE):
        """Two-layer network computing |u|^2 / 2 without the quadratic term.

        Layer 0 uses the rows +e_i and -e_i, whose squared leaky units add to
        (1 + a^2) u_i^2; layer 1 sums them with weight 1 / (2 (1 + a^2)).
        """
        A0 = np.vstack([np.eye(dim), -np.eye(dim)])
        c = 1.0 / (2.0 * (1.0 + alpha**2))
        W = [np.zeros((2 * dim, dim)), np.full((1, 2 * dim), c)]
        A = [A0, np.zeros((1, dim))]
        b = [np.zeros(2 * dim), np.zeros(1)]
        return cls(W, A, b, alpha=alpha)


@dataclass
class BoundIcnn:
    """Layer arrays that may be numpy arrays or tape Vars."""

    W: list
    A: list
    b: list
    alpha: float = SLOPE
    quad: float = 0.0

    def preactivations(self, U):
        pres = []
        Z = U
        for l in range(len(self.A)):
            pre = dc.add_rowvec(dc.matmul(U, dc.transpose(self.A[l])), self.b[l])
            if l > 0:
                pre = dc.add(pre, dc.matmul(Z, dc.transpose(self.W[l])))
            Z = dc.elementwise("sq_leaky_relu" if l == 0 else "leaky_relu", pre, self.alpha)
            pres.append(pre)
        return pres, Z

    def potential(self, U):
        """Scalar potential per row of U -> (n,)."""
        _, Z = self.preactivations(U)
        out = dc.reshape(Z, (-1,))
        if self.quad:
            out = dc.add(out, dc.row_sum(dc.square(U)) * (0.5 * self.quad))
        return out

    def gradient(self, U):
        """d potential / d u per row, layerwise chain rule -> (n, d)."""
        pres, _ = self.preactivations(U)
        n = dc.value_of(U).shape[0]
        D = np.ones((n, 1))
        grad = None
        for l in range(len(self.A) - 1, -1, -1):
            if l == 0:
                dh = dc.elementwise("sq_leaky_relu_grad", pres[0], self.alpha)
            else:
                dh = dc.elementwise("leaky_slope", pres[l], self.alpha)
            G = dc.mul(D, dh)
            term = dc.matmul(G, self.A[l])
            grad = term if grad is None else dc.add(grad, term)
            if l > 0:
                D = dc.matmul(G, self.W[l])
        if self.quad:
            grad = dc.add(grad, dc.mul(U, float(self.quad)))
        return grad


def _bound(params: IcnnParams, check: bool) -> BoundIcnn:
    if check:
        params.validate()
    return BoundIcnn(params.W, params.A, params.b, params.alpha, params.quad)


def _batch(params: IcnnParams, u):
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    U = u[None, :] if single else u
    if U.ndim != 2 or U.shape[1] != params.dim:
        raise ValueError(f"input has dimension {U.shape[-1]}, network expects {params.dim}")
    return U, single


def icnn_eval(params: IcnnParams, u, check: bool = True):
    """Potential at ``u`` (vector -> float, or batch (n, d) -> (n,))."""
    U, single = _batch(params, u)
    out = _bound(params, check).potential(U)
    return float(out[0]) if single else out


def brenier_map(params: IcnnParams, u, check: bool = True):
    """Input gradient of the potential at ``u`` (vector or batch)."""
    U, single = _batch(params, u)
    out = _bound(params, check).gradient(U)
    return out[0] if single else out


def project_convex(params: IcnnParams) -> IcnnParams:
    out = params.copy()
    out.W[0] = np.zeros_like(out.W[0])
    for l in range(1, len(out.W)):
        out.W[l] = np.maximum(out.W[l], 0.0)
    return out


def project_named(named: dict[str, np.ndarray], prefix: str = "dec.") -> None:
    """Clamp every ``<prefix>*.W<l>`` (l >= 1) array of a flat parameter dict in place.

    Only names under ``prefix`` belong to ICNNs; other weights are left alone.
    """
    for key, arr in named.items():
        if not key.startswith(prefix):
            continue
        tail = key.rsplit(".", 1)[-1]
        if tail.startswith("W") and tail[1:].isdigit() and int(tail[1:]) >= 1:
            np.maximum(arr, 0.0, out=arr)


@dataclass
class CheckReport:
    n_pairs: int
    violations: int
    worst_gap: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def check_convexity(params: IcnnParams, n_pairs: int = 10_000, tol: float = 1e-9,
                    rng=None, scale: float = 2.0, check: bool = True) -> CheckReport:
    """Sampled Jensen test; ``worst_gap`` is the max of T(tu+(1-t)v) - tT(u) - (1-t)T(v)."""
    rng = np.random.default_rng(rng)
    d = params.dim
    u = rng.normal(0.0, scale, (n_pairs, d))
    v = rng.normal(0.0, scale, (n_pairs, d))
    t = rng.uniform(0.0, 1.0, (n_pairs, 1))
    net = _bound(params, check)
    mid = net.potential(t * u + (1 - t) * v)
    chord = t[:, 0] * net.potential(u) + (1 - t[:, 0]) * net.potential(v)
    gap = mid - chord
    return CheckReport(n_pairs, int(np.sum(gap > tol)), float(gap.max()))


def check_monotone(params: IcnnParams, n_pairs: int = 10_000, tol: float = 1e-9,
                   rng=None, scale: float = 2.0, check: bool = True) -> CheckReport:
    """Sampled monotonicity test; ``worst_gap`` is the minimum of <g(u)-g(v), u-v>."""
    rng = np.random.default_rng(rng)
    d = params.dim
    u = rng.normal(0.0, scale, (n_pairs, d))
    v = rng.normal(0.0, scale, (n_pairs, d))
    net = _bound(params, check)
    inner = np.sum((net.gradient(u) - net.gradient(v)) * (u - v), axis=1)
    return CheckReport(n_pairs, int(np.sum(inner < -tol)), float(inner.min()))


def min_kink_distance(params: IcnnParams, U) -> float:
    """Smallest |pre-activation| over all units and rows of U."""
    U, _ = _batch(params, U)
    pres, _ = _bound(params, False).preactivations(U)
    return float(min(np.abs(p).min() for p in pres))


def fit_potential(target, dim: int, widths=(32, 32), n_train: int = 2048, steps: int = 3000,
                  lr: float = 1e-2, rng=None, scale: float = 1.5):
    """Least-squares fit of an ICNN potential to ``target`` (batch -> values).

    Projected Adam on randomly drawn inputs; returns the fitted parameters and
    the final RMS residual.
    """
    from .inference import Adam

    rng = np.random.default_rng(rng)
    params = IcnnParams.init(dim, widths, rng)
    U = rng.normal(0.0, scale, (n_train, dim))
    y = np.asarray(target(U), dtype=float)
    named = params.to_dict("T")
    opt = Adam(named, lr=lr)

    def loss(bound):
        net = params.bind("T", bound)
        r = dc.sub(net.potential(U), y)
        return dc.sum_(dc.square(r)) * (1.0 / n_train)

    for _ in range(steps):
        _, grads = dc.value_and_grad(loss, named)
        opt.step(named, grads)
        project_named(named, "T.")
    params = params.update_from("T", named)
    resid = icnn_eval(params, U) - y
    return params, float(np.sqrt(np.mean(resid**2)))

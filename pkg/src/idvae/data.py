"""Synthetic generators, IDX ingestion and CSV export of datasets."""
from __future__ import annotations

import csv
import gzip
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    """Design matrix plus optional ground truth and a provenance record.

    ``x`` is (n, D) real for vector data, or (n, T) integer tokens for
    sequence data (``vocab`` set).
    """

    x: np.ndarray
    labels: np.ndarray | None = None
    latents: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    vocab: int | None = None

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("dataset needs a non-empty (n, D) design matrix")
        if not self.provenance:
            raise ValueError("dataset provenance must be populated")

    def __len__(self):
        return self.x.shape[0]

    @property
    def is_sequence(self) -> bool:
        return self.vocab is not None

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        prov = dict(self.provenance, subset=len(np.arange(len(self))[idx]))
        return Dataset(self.x[idx], pick(self.labels), pick(self.latents), prov, self.vocab)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))

    def standardized(self) -> tuple["Dataset", np.ndarray, np.ndarray]:
        """Column-standardized copy plus the (mean, std) used."""
        mean = self.x.mean(axis=0)
        std = self.x.std(axis=0)
        std[std == 0] = 1.0
        prov = dict(self.provenance, standardized=True)
        return Dataset((self.x - mean) / std, self.labels, self.latents, prov, self.vocab), mean, std


def provenance_header(prov: dict) -> str:
    return "# " + json.dumps(prov, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_csv(ds: Dataset, path) -> None:
    """CSV with one provenance comment line, then columns x0.., label, z0.."""
    x = ds.x
    cols = [f"x{j}" for j in range(x.shape[1])]
    extra = []
    if ds.labels is not None:
        cols.append("label")
        extra.append(ds.labels.reshape(len(ds), -1))
    if ds.latents is not None:
        lat = ds.latents.reshape(len(ds), -1)
        cols += [f"z{j}" for j in range(lat.shape[1])]
        extra.append(lat)
    prov = dict(ds.provenance, artifact_version=__version__)
    if ds.vocab is not None:
        prov["vocab"] = ds.vocab
    with open(path, "w", newline="") as fh:
        fh.write(provenance_header(prov))
        w = csv.writer(fh)
        w.writerow(cols)
        rows = np.hstack([x.astype(float)] + [e.astype(float) for e in extra])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing provenance header")
        prov = json.loads(first[2:])
        prov.pop("artifact_version", None)
        reader = csv.reader(fh)
        cols = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader if r])
    xs = [j for j, c in enumerate(cols) if c.startswith("x")]
    zs = [j for j, c in enumerate(cols) if c.startswith("z")]
    x = rows[:, xs]
    vocab = prov.pop("vocab", None)
    if vocab is not None:
        x = x.astype(np.int64)
    labels = rows[:, cols.index("label")].astype(np.int64) if "label" in cols else None
    latents = rows[:, zs] if zs else None
    return Dataset(x, labels, latents, prov, vocab)


# ---------------------------------------------------------------------------
# generators

def gen_pinwheel(n: int = 2500, arms: int = 5, radial_std: float = 0.3, tangential_std: float = 0.05,
                 rate: float = 0.25, seed: int = 0, scale: float = 10.0) -> Dataset:
    """Spiral arms: per-arm Gaussians rotated by an angle growing with radius.

    Arm sizes differ by at most one point; rows are shuffled.
    """
    if arms < 2:
        raise ValueError("pinwheel needs at least two arms")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % arms
    feats = rng.normal(size=(n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    base = np.linspace(0, 2 * np.pi, arms, endpoint=False)
    angles = base[labels] + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    x = np.stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]], axis=1)
    perm = rng.permutation(n)
    prov = {"generator": "pinwheel", "n": n, "arms": arms, "radial_std": radial_std,
            "tangential_std": tangential_std, "rate": rate, "seed": seed, "scale": scale}
    return Dataset(scale * x[perm], labels[perm], None, prov)


def gmvae_warp(w):
    """Fixed smooth injective warp used by the synthetic mixture data."""
    return w + 0.5 * np.sin(w)


@dataclass(frozen=True)
class GmvaeTruth:
    """Generating parameters of :func:`gen_gmvae_synthetic`."""

    means: np.ndarray  # (K, d)
    noise_std: float
    w_std: float = 1.0

    def log_lik_given_w(self, x, w):
        """log N(x | warp(w), noise^2 I) for x (n, d), w (m, d) -> (n, m)."""
        fw = gmvae_warp(w)
        d = x.shape[1]
        sq = ((x[:, None, :] - fw[None, :, :]) ** 2).sum(-1)
        return -0.5 * sq / self.noise_std**2 - 0.5 * d * np.log(2 * np.pi * self.noise_std**2)


def gmvae_truth(separation: float, K: int = 2, dim: int = 2, noise_std: float = 0.5) -> GmvaeTruth:
    if K != 2:
        means = np.linspace(-separation / 2, separation / 2, K)[:, None] * np.ones((1, dim))
    else:
        means = np.array([[-separation / 2] * dim, [separation / 2] * dim])
    return GmvaeTruth(means, noise_std)


def gen_gmvae_synthetic(n: int = 5000, K: int = 2, separation: float = 10.0, seed: int = 0,
                        dim: int = 2, noise_std: float = 0.5) -> Dataset:
    """Mixture-of-Gaussians latent pushed through a fixed warp plus noise.

    Cluster means sit at -separation/2 and +separation/2 in every coordinate;
    separation 0 gives a single cluster.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    truth = gmvae_truth(separation, K, dim, noise_std)
    rng = np.random.default_rng(seed)
    z = rng.integers(0, K, n)
    w = truth.means[z] + truth.w_std * rng.normal(size=(n, dim))
    x = gmvae_warp(w) + noise_std * rng.normal(size=(n, dim))
    prov = {"generator": "gmvae_synthetic", "n": n, "K": K, "separation": separation, "seed": seed,
            "dim": dim, "noise_std": noise_std}
    return Dataset(x, z, w, prov)


def gen_sequences(n: int = 1000, length: int = 10, latent_dim: int = 5, vocab: int = 16,
                  hidden: int = 16, seed: int = 0) -> Dataset:
    """Token sequences from a small two-layer sequential VAE.

    z ~ N(0, I); a tanh recurrent state runs over the emitted tokens and the
    logits of token t are a two-layer network of [z, state_t].  Generator
    weights are drawn from ``seed`` as well.
    """
    if vocab < 2:
        raise ValueError("vocabulary needs at least two symbols")
    rng = np.random.default_rng(seed)
    Ws = rng.normal(0, 0.5, (hidden, hidden)) / np.sqrt(hidden)
    Us = rng.normal(0, 1.0, (vocab, hidden))
    V1 = rng.normal(0, 1.0, (latent_dim + hidden, hidden)) / np.sqrt(latent_dim + hidden)
    c1 = rng.normal(0, 0.1, hidden)
    V2 = rng.normal(0, 3.0, (hidden, vocab)) / np.sqrt(hidden)
    z = rng.normal(size=(n, latent_dim))
    state = np.zeros((n, hidden))
    tokens = np.zeros((n, length), dtype=np.int64)
    for t in range(length):
        hid = np.tanh(np.hstack([z, state]) @ V1 + c1)
        logits = hid @ V2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.uniform(size=(n, 1))
        tok = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), vocab - 1)
        tokens[:, t] = tok
        state = np.tanh(state @ Ws + Us[tok])
    prov = {"generator": "sequences", "n": n, "length": length, "latent_dim": latent_dim,
            "vocab": vocab, "hidden": hidden, "seed": seed}
    return Dataset(tokens, None, z, prov, vocab=vocab)


# ---------------------------------------------------------------------------
# IDX

class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(raw: bytes) -> tuple[int, np.ndarray]:
    """Parse big-endian IDX bytes into (magic, uint8 array shaped by the header)."""
    if len(raw) < 4:
        raise IdxFormatError("truncated magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxFormatError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxFormatError(f"truncated data: expected {count} bytes", len(raw))
    if len(raw) > header + count:
        raise IdxFormatError("trailing bytes after data", header + count)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return magic, data


def load_idx(path) -> Dataset:
    """Images become (n, rows*cols) in [0, 1]; label files become (n, 1) with labels."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    magic, data = parse_idx(raw)
    prov = {"generator": "idx", "path": str(path)}
    if magic == IDX_IMAGES:
        x = data.reshape(data.shape[0], -1).astype(np.float64) / 255.0
        return Dataset(x, None, None, prov)
    labels = data.astype(np.int64)
    return Dataset(labels[:, None].astype(np.float64), labels, None, prov)


def idx_bytes(array: np.ndarray) -> bytes:
    """Serialize a uint8 array of rank 1 (labels) or 3 (images) as IDX."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}[array.ndim]
    buf = io.BytesIO()
    buf.write(struct.pack(">I", magic))
    buf.write(struct.pack(f">{array.ndim}I", *array.shape))
    buf.write(array.tobytes())
    return buf.getvalue()

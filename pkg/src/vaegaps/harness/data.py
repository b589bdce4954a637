"""Datasets: IDX image files, static binarization, and synthetic sources.

``synthesize_gauss`` builds data from a linear-Gaussian model together with
its closed-form marginal, posterior and KL quantities; most numerical
checks in the package are run against it.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..diffnet import Mlp, zero_mlp
from ..model import LOG_2PI, FfgParams, Likelihood, VaeModel

IDX_UBYTE_3D = 0x00000803


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class DataSource(str, Enum):
    IDX_FILE = "idx_file"
    SYNTHETIC_GAUSS = "synthetic_gauss"
    SYNTHETIC_GRID = "synthetic_grid"


@dataclass
class Dataset:
    """``images`` is ``(N, D)``; binary except for the Gaussian source.

    ``splits`` maps split names to row indices; ``binarization`` records how
    pixels were binarized so reports can echo it.
    """

    images: np.ndarray
    source: DataSource
    splits: dict = field(default_factory=dict)
    binarization: dict = field(default_factory=dict)
    oracle: object = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 2 or 0 in self.images.shape:
            raise ValueError("images must be a non-empty (N, D) array")
        if not self.splits:
            self.splits = {"train": np.arange(len(self.images))}

    def __len__(self):
        return len(self.images)

    @property
    def dim(self):
        return self.images.shape[1]

    def split(self, name):
        return self.images[self.splits[name]]


# --- IDX -------------------------------------------------------------------

def _open_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_raw(path):
    """Unsigned-byte image tensor ``(N, rows, cols)`` from an IDX file (gzip optional)."""
    raw = _open_bytes(path)
    if len(raw) < 16:
        raise IdxFormatError("truncated header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_UBYTE_3D:
        raise IdxFormatError(f"bad magic 0x{magic:08x}", 0)
    n, rows, cols = struct.unpack(">III", raw[4:16])
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise IdxFormatError(f"truncated pixel data (expected {need} bytes)", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def write_idx(path, images, compress=False):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("expected a uint8 (N, rows, cols) array")
    payload = struct.pack(">IIII", IDX_UBYTE_3D, *images.shape) + images.tobytes()
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def load_idx(path):
    """Images as ``(N, rows * cols)`` floats in ``[0, 1]``."""
    raw = read_idx_raw(path)
    return raw.reshape(raw.shape[0], -1).astype(float) / 255.0


def binarize(images, method="threshold", threshold=0.5, seed=0, source=DataSource.IDX_FILE,
             splits=None):
    """Static binarization.

    ``"threshold"`` sets a pixel to 1 iff it exceeds ``threshold``;
    ``"bernoulli_once"`` draws each pixel once with a seeded generator.
    """
    images = np.asarray(images, dtype=float)
    if method == "threshold":
        out = (images > threshold).astype(float)
        record = {"method": "threshold", "threshold": float(threshold)}
    elif method == "bernoulli_once":
        rng = np.random.default_rng(seed)
        out = (rng.random(images.shape) < images).astype(float)
        record = {"method": "bernoulli_once", "seed": int(seed)}
    else:
        raise ValueError(f"unknown binarization {method!r}")
    return Dataset(out, DataSource(source), splits or {}, record)


# --- synthetic sources -----------------------------------------------------

@dataclass
class LinearGaussianOracle:
    """``z ~ N(0, I)``, ``x | z ~ N(A z + b, diag(noise_var))`` in closed form."""

    a: np.ndarray
    b: np.ndarray
    noise_var: np.ndarray

    @property
    def latent_dim(self):
        return self.a.shape[1]

    @property
    def data_dim(self):
        return self.a.shape[0]

    def marginal_cov(self):
        return self.a @ self.a.T + np.diag(self.noise_var)

    def log_marginal(self, x):
        cov = self.marginal_cov()
        chol = np.linalg.cholesky(cov)
        diff = np.atleast_2d(x) - self.b
        sol = np.linalg.solve(chol, diff.T)
        out = (-0.5 * self.data_dim * LOG_2PI - np.sum(np.log(np.diag(chol)))
               - 0.5 * np.sum(sol * sol, axis=0))
        return out if np.ndim(x) > 1 else float(out[0])

    def posterior_precision(self):
        return np.eye(self.latent_dim) + self.a.T @ (self.a / self.noise_var[:, None])

    def posterior_cov(self):
        return np.linalg.inv(self.posterior_precision())

    def posterior_mean_map(self):
        """``(W, c)`` with posterior mean ``W x + c``."""
        w = self.posterior_cov() @ (self.a.T / self.noise_var[None, :])
        return w, -w @ self.b

    def posterior(self, x):
        w, c = self.posterior_mean_map()
        return np.asarray(x) @ w.T + c, self.posterior_cov()

    def optimal_ffg(self, x):
        """Reverse-KL optimal diagonal Gaussian: exact mean, variances ``1 / Lambda_ii``."""
        mean, _ = self.posterior(x)
        lv = -np.log(np.diag(self.posterior_precision()))
        return FfgParams(mean, np.broadcast_to(lv, np.shape(mean)).copy())

    def kl_to_posterior(self, q, x):
        """``KL(q || p(z|x))`` for a diagonal Gaussian ``q``."""
        mean, cov = self.posterior(x)
        prec = self.posterior_precision()
        var = q.var
        diff = q.mu - mean
        quad = np.einsum("...i,ij,...j->...", diff, prec, diff)
        _, logdet_cov = np.linalg.slogdet(cov)
        return 0.5 * (np.sum(np.diag(prec) * var, axis=-1) + quad - self.latent_dim
                      + logdet_cov - np.sum(q.logvar, axis=-1))

    def kl_optimal_ffg(self):
        prec = self.posterior_precision()
        _, logdet = np.linalg.slogdet(prec)
        return 0.5 * (np.sum(np.log(np.diag(prec))) - logdet)

    def model(self, encoder="optimal_ffg"):
        """:class:`VaeModel` whose decoder is exactly this linear-Gaussian map.

        ``encoder="optimal_ffg"`` gives the linear encoder producing
        :meth:`optimal_ffg`; ``"prior"`` outputs ``N(0, I)`` for every ``x``.
        """
        d, dd = self.latent_dim, self.data_dim
        dec = Mlp([np.vstack([self.a, np.zeros((dd, d))])],
                  [np.concatenate([self.b, np.log(self.noise_var)])], "identity", "identity")
        if encoder == "optimal_ffg":
            w, c = self.posterior_mean_map()
            lv = -np.log(np.diag(self.posterior_precision()))
            enc = Mlp([np.vstack([w, np.zeros((d, dd))])], [np.concatenate([c, lv])],
                      "identity", "identity")
        elif encoder == "prior":
            enc = zero_mlp([dd, 2 * d], "identity")
        else:
            raise ValueError(f"unknown encoder {encoder!r}")
        return VaeModel(d, dec, enc, Likelihood.DIAGONAL_GAUSSIAN)

    def sample(self, n, rng):
        z = rng.standard_normal((n, self.latent_dim))
        x = z @ self.a.T + self.b + np.sqrt(self.noise_var) * rng.standard_normal((n, self.data_dim))
        return z, x


def synthesize_gauss(n=100, latent_dim=2, data_dim=4, noise_var=0.5, seed=0, a=None, b=None,
                     scale=1.0):
    """Linear-Gaussian data plus its :class:`LinearGaussianOracle`."""
    rng = np.random.default_rng(seed)
    a = scale * rng.standard_normal((data_dim, latent_dim)) if a is None else np.asarray(a, float)
    b = rng.standard_normal(a.shape[0]) if b is None else np.asarray(b, float)
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (a.shape[0],)).copy()
    oracle = LinearGaussianOracle(a, b, nv)
    _, x = oracle.sample(n, rng)
    return Dataset(x, DataSource.SYNTHETIC_GAUSS, {}, {"method": "none"}, oracle)


def synthesize_grid(n=500, side=5, seed=0, sharpness=4.0, radius=1.0, n_val=0, n_blobs=1):
    """Binary ``side x side`` images of blobs whose positions are 2-D latents.

    Each blob has its own ``z ~ N(0, I_2)`` placing its centre at
    ``(side - 1)/2 + (side/3) tanh(z)``; a pixel is on with probability
    ``sigmoid(sharpness * (radius - dist))`` for the nearest blob, sampled
    once.  The last ``n_val`` rows form a ``"val"`` split.
    """
    rng = np.random.default_rng(seed)
    total = n + n_val
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dist = np.full((total, side, side), np.inf)
    for _ in range(n_blobs):
        z = rng.standard_normal((total, 2))
        centre = (side - 1) / 2.0 + (side / 3.0) * np.tanh(z)
        d = np.sqrt((ii[None] - centre[:, 0, None, None]) ** 2
                    + (jj[None] - centre[:, 1, None, None]) ** 2)
        dist = np.minimum(dist, d)
    p = 1.0 / (1.0 + np.exp(-sharpness * (radius - dist)))
    images = (rng.random(p.shape) < p).astype(float).reshape(total, -1)
    splits = {"train": np.arange(n)}
    if n_val:
        splits["val"] = np.arange(n, total)
    return Dataset(images, DataSource.SYNTHETIC_GRID, splits,
                   {"method": "bernoulli_once", "seed": int(seed)})

"""Seeded synthetic data: Gaussian batches, low-rank embeddings, sinusoid
sequences and matrices of known latent rank.

Every generator is a pure function of its config. Randomness comes from
numpy's ``default_rng`` (PCG64); shards derive child seeds through
``SeedSequence`` so parallel generation stays deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import precision_name, resolve_dtype

PRNG_IDENTITY = "numpy.random.PCG64"


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def shard_seed(seed: int, shard: int) -> int:
    """Deterministic child seed for shard ``shard`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, shard]).generate_state(1, np.uint64)[0])


def _check_dims(**dims):
    for name, v in dims.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class GaussianConfig:
    """``N`` samples in ``m`` dimensions, optionally confined to a random
    ``latent_rank``-dimensional subspace.

    ``std`` is a scalar (isotropic) or a length-``m`` sequence (diagonal).
    """

    N: int
    m: int
    mean: float | tuple = 0.0
    std: float | tuple = 1.0
    latent_rank: int | None = None
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        _check_dims(N=self.N, m=self.m)
        std = np.atleast_1d(np.asarray(self.std, dtype=float))
        if std.size not in (1, self.m):
            raise ValueError(f"std must be a scalar or have {self.m} entries")
        if np.any(std <= 0):
            raise ValueError("std must be positive")
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.size not in (1, self.m):
            raise ValueError(f"mean must be a scalar or have {self.m} entries")
        if self.latent_rank is not None:
            _check_dims(latent_rank=self.latent_rank)
            if self.latent_rank > self.m:
                raise ValueError(f"latent_rank {self.latent_rank} exceeds m = {self.m}")
        resolve_dtype(self.precision)


def gaussian_batch(cfg: GaussianConfig) -> np.ndarray:
    """An (N, m) batch. With a latent rank r < m the sample is
    ``(N x r Gaussian) @ (r x m Gaussian)``, scaled and shifted per feature."""
    rng = _rng(cfg.seed)
    std = np.asarray(cfg.std, dtype=float)
    if cfg.latent_rank is None or cfg.latent_rank == cfg.m:
        X = rng.standard_normal((cfg.N, cfg.m)) * std
    else:
        r = cfg.latent_rank
        X = rng.standard_normal((cfg.N, r)) @ rng.standard_normal((r, cfg.m)) / np.sqrt(r)
        X = X * std
    # a nonzero mean adds at most one to the rank; it is left to the caller
    X = X + np.asarray(cfg.mean, dtype=float)
    return X.astype(resolve_dtype(cfg.precision))


@dataclass(frozen=True)
class SinusoidConfig:
    """Sequences ``x[i, j, t] = a sin(b t) + c`` on T points in [-2pi, 2pi],
    with a, b, c drawn independently per (sample, feature)."""

    N: int
    m: int
    T: int
    mu_a: float = 1.0
    sigma_a: float = 0.25
    mu_b: float = 1.0
    sigma_b: float = 0.25
    mu_c: float = 0.0
    sigma_c: float = 0.25
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        _check_dims(N=self.N, m=self.m, T=self.T)
        for name in ("sigma_a", "sigma_b", "sigma_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        resolve_dtype(self.precision)


def time_grid(T: int) -> np.ndarray:
    if T == 1:
        # a single point cannot span the interval; use its left end
        return np.array([-2 * np.pi])
    return np.linspace(-2 * np.pi, 2 * np.pi, T)


def sinusoid_batch(cfg: SinusoidConfig) -> np.ndarray:
    """An (N, m, T) tensor of sinusoids."""
    rng = _rng(cfg.seed)
    shape = (cfg.N, cfg.m, 1)
    a = rng.normal(cfg.mu_a, cfg.sigma_a, shape)
    b = rng.normal(cfg.mu_b, cfg.sigma_b, shape)
    c = rng.normal(cfg.mu_c, cfg.sigma_c, shape)
    t = time_grid(cfg.T)
    return (a * np.sin(b * t) + c).astype(resolve_dtype(cfg.precision))


@dataclass(frozen=True)
class LatentRankMatrixConfig:
    M: int
    k: int
    count: int = 1
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        _check_dims(M=self.M, k=self.k, count=self.count)
        if self.k > self.M:
            raise ValueError(f"latent rank k = {self.k} exceeds M = {self.M}")
        resolve_dtype(self.precision)


def latent_rank_matrices(cfg: LatentRankMatrixConfig) -> list[np.ndarray]:
    """``count`` matrices, each ``(M x k) @ (k x M)`` with Gaussian factors."""
    dtype = resolve_dtype(cfg.precision)
    out = []
    for i in range(cfg.count):
        rng = _rng(shard_seed(cfg.seed, i))
        A = rng.standard_normal((cfg.M, cfg.k))
        B = rng.standard_normal((cfg.k, cfg.M))
        out.append((A @ B).astype(dtype))
    return out


def low_rank_images(N, channels, size, rank=1, seed=0, precision="double") -> np.ndarray:
    """(N, channels, *size) images whose every channel slice is a sum of
    ``rank`` outer products of Gaussian vectors (2-D) or a Gaussian signal
    (1-D)."""
    size = (int(size),) if np.isscalar(size) else tuple(int(s) for s in size)
    _check_dims(N=N, channels=channels, rank=rank)
    rng = _rng(seed)
    if len(size) == 1:
        imgs = rng.standard_normal((N, channels) + size)
    elif len(size) == 2:
        u = rng.standard_normal((N, channels, rank, size[0]))
        v = rng.standard_normal((N, channels, rank, size[1]))
        imgs = np.einsum("ncri,ncrj->ncij", u, v) / np.sqrt(rank)
    else:
        raise ValueError("low_rank_images supports 1-D and 2-D images")
    return imgs.astype(resolve_dtype(precision))


# --- binary container ---------------------------------------------------------
#
# little-endian layout:
#   magic  b"GRDB"   version u16   precision u8 (4 = single, 8 = double)
#   ndim   u8        seed i64 (-1 when unknown)   dims u64 * ndim
#   body   row-major values

_MAGIC = b"GRDB"
_VERSION = 1
_HEAD = struct.Struct("<4sHBBq")


def save_batch(path, array, seed: int | None = None) -> Path:
    array = np.asarray(array)
    dtype = resolve_dtype(array.dtype)
    path = Path(path)
    head = _HEAD.pack(_MAGIC, _VERSION, dtype.itemsize, array.ndim, -1 if seed is None else seed)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as fh:
        fh.write(head + dims)
        fh.write(np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes())
    return path


def load_batch(path):
    """Read a container written by :func:`save_batch`.

    Returns ``(array, meta)`` with ``meta`` holding precision and seed.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, size, ndim, seed = _HEAD.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a batch container (version {version})")
    if size not in (4, 8):
        raise ValueError(f"{path}: bad precision code {size}")
    dims = struct.unpack_from(f"<{ndim}Q", data, _HEAD.size)
    offset = _HEAD.size + 8 * ndim
    dtype = np.dtype("<f4" if size == 4 else "<f8")
    expected = int(np.prod(dims)) * size
    if len(data) - offset != expected:
        raise ValueError(f"{path}: body has {len(data) - offset} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    meta = {"precision": precision_name(dtype.newbyteorder("=")), "seed": None if seed < 0 else seed}
    return arr.astype(dtype.newbyteorder("=")), meta

"""Synthetic content-style benchmark with a controllable paired fraction.

Both endpoints share a content class ``c`` and a latent ``u ~ N(0, I_d)``;
a style index ``s`` picks the linear maps ``A_s`` (conditioning side) and
``B_s`` (target side). Endpoints go through the elementwise warp
``phi(z) = z + alpha * z**3``::

    z_src = phi(mu_src[c] + A[s] @ u + eps_0)
    z_tgt = phi(mu_tgt[c] + B[s] @ u + eps_T)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError

__all__ = [
    "GeneratorSpec", "EndpointSample", "Dataset", "build_generator", "warp",
    "endpoints_from_latents", "sample", "assign_pairing", "write_csv", "read_csv",
    "spectral_norm",
]


def warp(z, alpha):
    """Near-identity cubic warp, strictly increasing for ``alpha >= 0``."""
    z = np.asarray(z, dtype=np.float64)
    return z + alpha * z**3


def spectral_norm(m):
    return float(np.linalg.norm(m, ord=2))


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Fixed generative parameters; build with :func:`build_generator`."""

    n_content: int
    n_style: int
    latent_dim: int
    noise_std: float
    warp_alpha: float
    mu_src: np.ndarray
    mu_tgt: np.ndarray
    style_src: np.ndarray
    style_tgt: np.ndarray
    seed: int
    radius: float = 3.0
    style_norm: float = 0.5
    mean_offset: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, GeneratorSpec):
            return NotImplemented
        scalars = ("n_content", "n_style", "latent_dim", "noise_std", "warp_alpha", "seed",
                   "radius", "style_norm", "mean_offset")
        arrays = ("mu_src", "mu_tgt", "style_src", "style_tgt")
        return (all(getattr(self, k) == getattr(other, k) for k in scalars)
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays))

    __hash__ = object.__hash__


def build_generator(n_content=6, n_style=3, latent_dim=2, noise_std=0.05, warp_alpha=0.1,
                    seed=0, radius=3.0, style_norm=0.5, mean_offset=0.0):
    """Draw class means and style maps once.

    Class ``c`` sits at angle ``2*pi*c/K + phase`` on a circle of ``radius``
    in the first two coordinates; target-side means are rotated by
    ``mean_offset`` class spacings. Style maps have i.i.d. ``N(0, 1/d)``
    entries and are shrunk to spectral norm ``style_norm`` when larger.
    """
    if n_content < 1 or n_style < 1 or latent_dim < 1:
        raise ConfigError(f"counts must be positive: K_c={n_content}, S={n_style}, d={latent_dim}")
    if noise_std < 0 or warp_alpha < 0:
        raise ConfigError(f"noise_std and warp_alpha must be nonnegative, got {noise_std}, {warp_alpha}")
    if radius <= 0 or not (0 < style_norm <= 1):
        raise ConfigError(f"need radius > 0 and 0 < style_norm <= 1, got {radius}, {style_norm}")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    step = 2.0 * math.pi / n_content
    angles = phase + step * np.arange(n_content)

    def ring(theta):
        mu = np.zeros((n_content, latent_dim))
        mu[:, 0] = radius * np.cos(theta)
        if latent_dim > 1:
            mu[:, 1] = radius * np.sin(theta)
        return mu

    mu_src = ring(angles)
    mu_tgt = ring(angles + mean_offset * step)

    def style_maps():
        maps = rng.normal(0.0, 1.0 / math.sqrt(latent_dim), size=(n_style, latent_dim, latent_dim))
        for m in maps:
            norm = spectral_norm(m)
            if norm > style_norm:
                m *= style_norm / norm
        return maps

    style_src = style_maps()
    style_tgt = style_maps()
    for arr in (mu_src, mu_tgt, style_src, style_tgt):
        arr.setflags(write=False)
    return GeneratorSpec(n_content, n_style, latent_dim, float(noise_std), float(warp_alpha),
                         mu_src, mu_tgt, style_src, style_tgt, int(seed), float(radius),
                         float(style_norm), float(mean_offset))


@dataclass(frozen=True)
class EndpointSample:
    z_src: np.ndarray
    z_tgt: np.ndarray
    content: int
    style: int
    paired: bool = False


@dataclass
class Dataset:
    """Column-stored samples; iterating yields :class:`EndpointSample`."""

    z_src: np.ndarray
    z_tgt: np.ndarray
    content: np.ndarray
    style: np.ndarray
    paired: np.ndarray
    rho: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.z_src)
        for name in ("z_tgt", "content", "style", "paired"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.z_src)

    def __getitem__(self, i):
        return EndpointSample(self.z_src[i], self.z_tgt[i], int(self.content[i]),
                              int(self.style[i]), bool(self.paired[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def samples(self):
        return list(self)

    @property
    def latent_dim(self):
        return self.z_src.shape[1]

    @property
    def n_paired(self):
        return int(self.paired.sum())

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.z_src[mask], self.z_tgt[mask], self.content[mask], self.style[mask],
                       self.paired[mask], self.rho, dict(self.meta))


def endpoints_from_latents(spec, content, style, u, noise_src, noise_tgt):
    """Deterministic part of the generator, exposed for testing."""
    content = np.asarray(content)
    style = np.asarray(style)
    pre_src = spec.mu_src[content] + np.einsum("nij,nj->ni", spec.style_src[style], u) + noise_src
    pre_tgt = spec.mu_tgt[content] + np.einsum("nij,nj->ni", spec.style_tgt[style], u) + noise_tgt
    return warp(pre_src, spec.warp_alpha), warp(pre_tgt, spec.warp_alpha)


def sample(spec, n, rng):
    """Draw ``n`` unpaired endpoint samples as a :class:`Dataset`."""
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    d = spec.latent_dim
    content = rng.integers(0, spec.n_content, size=n)
    style = rng.integers(0, spec.n_style, size=n)
    u = rng.standard_normal((n, d))
    eps0 = spec.noise_std * rng.standard_normal((n, d))
    eps1 = spec.noise_std * rng.standard_normal((n, d))
    z_src, z_tgt = endpoints_from_latents(spec, content, style, u, eps0, eps1)
    return Dataset(z_src, z_tgt, content, style, np.zeros(n, dtype=bool), 0.0)


def assign_pairing(samples, rho, rng):
    """Flag exactly ``floor(rho * N)`` samples as paired, chosen uniformly."""
    if not (0.0 <= rho <= 1.0):
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    n = len(samples)
    k = math.floor(rho * n + 1e-9)
    paired = np.zeros(n, dtype=bool)
    if k:
        paired[rng.choice(n, size=k, replace=False)] = True
    return Dataset(samples.z_src, samples.z_tgt, samples.content, samples.style, paired,
                   float(rho), dict(samples.meta))


def _header(d):
    return ([f"z_src_{i}" for i in range(d)] + [f"z_tgt_{i}" for i in range(d)]
            + ["content", "style", "paired"])


def write_csv(dataset, path):
    d = dataset.latent_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(d))
        for i in range(len(dataset)):
            row = [f"{v:.17g}" for v in dataset.z_src[i]] + [f"{v:.17g}" for v in dataset.z_tgt[i]]
            row += [int(dataset.content[i]), int(dataset.style[i]), int(bool(dataset.paired[i]))]
            writer.writerow(row)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = sum(1 for h in header if h.startswith("z_src_"))
    if header != _header(d):
        raise ContractError(f"unexpected dataset header: {header}")
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), 2 * d + 3)
    paired = arr[:, 2 * d + 2].astype(bool)
    n = len(rows)
    rho = paired.sum() / n if n else 0.0
    return Dataset(arr[:, :d].copy(), arr[:, d:2 * d].copy(), arr[:, 2 * d].astype(np.int64),
                   arr[:, 2 * d + 1].astype(np.int64), paired, float(rho))

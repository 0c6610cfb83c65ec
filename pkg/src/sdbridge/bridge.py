"""Variance-exploding noise schedule, analytic score targets and samplers.

Time runs from t=1 (conditioning side, noisiest) down to t=0 (generated
side). The sampler integrates the reverse-time VE SDE

    dz = -g(t)^2 s(z, t | y) dt + g(t) dW,    g(t)^2 = d sigma(t)^2 / dt

with Euler-Maruyama on a uniform grid, starting from ``y + sigma_max * xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .exceptions import ConfigError, DivergenceError, DomainError, NumericError

__all__ = [
    "NoiseSchedule", "Trajectory", "sigma", "corrupt", "dsm_target",
    "bridge_score_target", "bridge_conditional_score", "bridge_marginal_sample",
    "folded_bridge_score", "time_grid", "sample_bridge", "injected_variance",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric VE schedule ``sigma(t) = sigma_min * (sigma_max/sigma_min)**t``."""

    sigma_min: float = 0.01
    sigma_max: float = 1.0
    n_steps: int = 40
    kind: str = "geometric"

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be positive, got {self.n_steps}")
        if self.kind != "geometric":
            raise ConfigError(f"only the geometric VE schedule is supported, got {self.kind!r}")

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        return sigma(self, t)

    def g2(self, t):
        """Diffusion coefficient squared, d sigma^2/dt."""
        s = self.sigma(t)
        return 2.0 * s * s * self.log_ratio


def _check_unit(t, lo_open=False, hi_open=False, what="t"):
    arr = np.asarray(t, dtype=np.float64)
    lo_bad = arr <= 0 if lo_open else arr < 0
    hi_bad = arr >= 1 if hi_open else arr > 1
    if np.any(lo_bad | hi_bad) or not np.all(np.isfinite(arr)):
        lo = "(" if lo_open else "["
        hi = ")" if hi_open else "]"
        raise DomainError(f"{what} must lie in {lo}0, 1{hi}, got {t}")
    return arr


def sigma(schedule, t):
    """Noise level at time ``t`` (scalar or array) in [0, 1]."""
    arr = _check_unit(t)
    out = schedule.sigma_min * np.exp(schedule.log_ratio * arr)
    return float(out) if np.ndim(t) == 0 else out


def _col(values, n):
    """Broadcast a scalar or per-row array against an (n, d) batch."""
    arr = np.asarray(values, dtype=np.float64)
    return arr if arr.ndim == 0 else arr.reshape(n, 1)


def corrupt(z0, t, schedule, rng):
    """Draw ``z_t = z0 + sigma(t) * xi`` with ``xi ~ N(0, I)``."""
    z0 = np.asarray(z0, dtype=np.float64)
    s = sigma(schedule, _check_unit(t, lo_open=True))
    xi = rng.standard_normal(z0.shape)
    return z0 + _col(s, len(z0)) * xi


def dsm_target(z_t, z0, t, schedule):
    """Gradient of ``log N(z_t; z0, sigma(t)^2 I)`` with respect to ``z_t``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("dsm_target is singular at t=0")
    s = sigma(schedule, t)
    z_t = np.asarray(z_t, dtype=np.float64)
    s2 = _col(np.square(s), len(z_t)) if z_t.ndim == 2 else np.square(s)
    return (np.asarray(z0) - z_t) / s2


def bridge_score_target(z_t, z_T, t, schedule):
    """Gradient of ``log N(z_T; z_t, (sigma_T^2 - sigma_t^2) I)`` w.r.t. ``z_t``.

    This is the Doob h-transform term that pins a VE path to ``z_T`` at t=1.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1):
        raise DomainError("bridge_score_target is singular at t=1")
    s_T = schedule.sigma_max
    s = sigma(schedule, t)
    z_t = np.asarray(z_t, dtype=np.float64)
    gap = s_T**2 - np.square(s)
    gap = _col(gap, len(z_t)) if z_t.ndim == 2 else gap
    return (np.asarray(z_T) - z_t) / gap


def _bridge_moments(z0, z_T, t, schedule):
    s2 = np.square(sigma(schedule, t))
    ratio = s2 / schedule.sigma_max**2
    n = len(np.atleast_2d(z0))
    r = _col(ratio, n) if np.ndim(z0) == 2 else ratio
    v = _col(s2 * (1.0 - ratio), n) if np.ndim(z0) == 2 else s2 * (1.0 - ratio)
    mean = (1.0 - r) * np.asarray(z0) + r * np.asarray(z_T)
    return mean, v


def bridge_conditional_score(z_t, z0, z_T, t, schedule):
    """Score of the VE bridge marginal ``q(z_t | z0, z_T)``.

    The bridge pinned at ``z0`` (t=0) and ``z_T`` (t=1) has mean
    ``(1-r) z0 + r z_T`` and variance ``sigma_t^2 (1-r)`` with
    ``r = sigma_t^2 / sigma_T^2``.
    """
    _check_unit(t, lo_open=True, hi_open=True)
    mean, var = _bridge_moments(z0, z_T, t, schedule)
    return (mean - np.asarray(z_t)) / var


def bridge_marginal_sample(z0, z_T, t, schedule, rng):
    """Draw ``z_t ~ q(z_t | z0, z_T)`` from the VE bridge."""
    _check_unit(t, lo_open=True)
    mean, var = _bridge_moments(z0, z_T, t, schedule)
    return mean + np.sqrt(var) * rng.standard_normal(np.shape(mean))


def folded_bridge_score(z_t, z0, z_T, t, schedule):
    """Bridge score with the h-transform folded in.

    The reverse sampler uses a single drift ``g^2 * s``; for the VE bridge the
    correct ``s`` is ``grad log q(z_t|z0,z_T) - h(z_t, z_T)``, which reduces
    to ``(z0 - z_t) / sigma_t^2``. Computed here from its two parts so the
    identity stays testable.
    """
    return (bridge_conditional_score(z_t, z0, z_T, t, schedule)
            - bridge_score_target(z_t, z_T, t, schedule))


@dataclass
class Trajectory:
    """Sampler path. ``states[k]`` is the (n, d) batch at ``times[k]``."""

    states: list
    times: np.ndarray
    direction: str = "src->tgt"

    def __post_init__(self):
        if len(self.states) != len(self.times):
            raise ValueError("states and times must have equal length")

    @property
    def terminal(self):
        return self.states[-1]

    def reversed_times(self):
        return 1.0 - self.times[::-1]


def time_grid(n_steps):
    """Uniform grid from 1 down to 0 with ``n_steps + 1`` points."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be positive, got {n_steps}")
    return np.linspace(1.0, 0.0, n_steps + 1)


def _data(x):
    return x.data if isinstance(x, dc.Tensor) else x


def sample_bridge(score_fn, y, schedule, n_steps=None, rng=None, record=False,
                  direction="src->tgt", differentiable=False, noise=None):
    """Integrate the reverse VE bridge from ``y + sigma_max * xi`` to t=0.

    ``score_fn(z, y, t)`` returns the learned score for a batch ``z`` given
    condition ``y`` and scalar time ``t``. The last step is taken without
    injected noise. With ``differentiable=True`` the state is carried as a
    :class:`~sdbridge.diffcore.Tensor` so an active tape records the whole
    path. ``noise`` may supply the Gaussian draws as an ``(n_steps, n, d)``
    array: index 0 initialises the state, index k feeds step k.

    Returns the terminal batch, or a :class:`Trajectory` when ``record``.
    """
    n_steps = schedule.n_steps if n_steps is None else int(n_steps)
    times = time_grid(n_steps)
    y = np.asarray(_data(y), dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("sample_bridge needs an rng or explicit noise")
        noise = rng.standard_normal((n_steps,) + y.shape)
    z = y + schedule.sigma_max * noise[0]
    if differentiable:
        z = dc.Tensor(z)
    states = [z] if record else None
    for k in range(n_steps):
        t = times[k]
        dt = t - times[k + 1]
        g2 = schedule.g2(t)
        s = score_fn(z, y, t)
        kick = math.sqrt(g2 * dt) * noise[k + 1] if k + 1 < n_steps else None
        if differentiable:
            try:
                z = dc.add(z, dc.scale(s, g2 * dt))
                if kick is not None:
                    z = dc.add(z, kick)
            except NumericError as exc:
                raise DivergenceError(f"sampler produced non-finite state: {exc}", step=k) from exc
        else:
            z = z + g2 * dt * _data(s)
            if kick is not None:
                z = z + kick
            if not np.all(np.isfinite(z)):
                raise DivergenceError("sampler produced non-finite state", step=k)
        if record:
            states.append(z)
    if record:
        return Trajectory(states, times, direction)
    return z


def injected_variance(schedule, n_steps):
    """Total variance a zero-score sampler accumulates: init plus noisy steps."""
    times = time_grid(n_steps)
    steps = sum(schedule.g2(times[k]) * (times[k] - times[k + 1]) for k in range(n_steps - 1))
    return schedule.sigma_max**2 + steps

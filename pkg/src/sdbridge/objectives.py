"""Loss terms for training a pair of directional bridges.

* marginal matching: denoising score matching with winner-takes-all choice
  among candidate conditions, limited by a per-epoch capacity ledger
* endpoint and trajectory cycle consistency between the two directions
* paired bridge supervision on samples with a known correspondence

Score functions follow the sampler convention ``score_fn(z, y, t)`` and
return :class:`~sdbridge.diffcore.Tensor` batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .bridge import (bridge_marginal_sample, dsm_target, folded_bridge_score, sample_bridge)
from .exceptions import ConfigError, ContractError

__all__ = [
    "ObjectiveConfig", "CapacityLedger", "dsm_loss", "dsm_row_losses", "wta_select",
    "cycle_endpoint_loss", "cycle_trajectory_loss", "trajectory_weights", "paired_loss",
    "total_loss", "LossTerms",
]


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_end: float = 1.0
    lambda_traj: float = 1.0
    lambda_pair: float = 1.0
    wta_candidates: int = 8
    capacity: int | None = 2
    traj_steps: int = 10
    eps_w: float = 1e-4
    t_min: float = 0.01
    dsm_weighting: str = "uniform"
    use_unpaired: bool = True
    cycle_batch: int | None = None

    def __post_init__(self):
        for name in ("lambda_end", "lambda_traj", "lambda_pair"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.wta_candidates < 1:
            raise ConfigError(f"wta_candidates must be positive, got {self.wta_candidates}")
        if self.capacity is not None and self.capacity < 1:
            raise ConfigError(f"capacity must be positive or None, got {self.capacity}")
        if self.traj_steps < 1:
            raise ConfigError(f"traj_steps must be positive, got {self.traj_steps}")
        if self.eps_w <= 0:
            raise ConfigError(f"eps_w must be positive, got {self.eps_w}")
        if not (0 < self.t_min < 1):
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.dsm_weighting not in ("uniform", "sigma2"):
            raise ConfigError(f"dsm_weighting must be 'uniform' or 'sigma2', got {self.dsm_weighting!r}")
        if self.cycle_batch is not None and self.cycle_batch < 1:
            raise ConfigError(f"cycle_batch must be positive or None, got {self.cycle_batch}")

    @property
    def cycle_active(self):
        return self.lambda_end > 0 or self.lambda_traj > 0


class CapacityLedger:
    """Per-epoch selection counts for a pool of conditioning samples."""

    def __init__(self, pool_size, limit=2):
        if limit is not None and limit < 1:
            raise ConfigError(f"capacity limit must be positive or None, got {limit}")
        self.counts = np.zeros(int(pool_size), dtype=np.int64)
        self.limit = limit
        self.saturation_events = 0

    def reset(self):
        self.counts[:] = 0

    def available(self, ids):
        ids = np.asarray(ids)
        if self.limit is None:
            return np.ones(ids.shape, dtype=bool)
        return self.counts[ids] < self.limit

    def select(self, losses, ids):
        """Pick one winner per row of ``losses`` and charge it to the ledger.

        Rows are processed in order. Among candidates whose identity is below
        capacity the lowest loss wins, ties going to the lowest index. If all
        candidates of a row are saturated the global argmin wins and the event
        is counted in ``saturation_events``.
        """
        losses = np.atleast_2d(np.asarray(losses, dtype=np.float64))
        ids = np.atleast_2d(np.asarray(ids))
        if losses.shape != ids.shape:
            raise ContractError(f"losses {losses.shape} and ids {ids.shape} differ")
        winners = np.empty(len(losses), dtype=np.int64)
        for r in range(len(losses)):
            ok = self.available(ids[r])
            if ok.any():
                k = int(np.argmin(np.where(ok, losses[r], np.inf)))
            else:
                k = int(np.argmin(losses[r]))
                self.saturation_events += 1
            winners[r] = k
            self.counts[ids[r, k]] += 1
        return winners


def _rows_sq(diff):
    return dc.sum_(dc.mul(diff, diff), axis=1)


def _weights(t, schedule, config):
    if config.dsm_weighting == "uniform":
        return np.ones_like(t)
    return np.square(schedule.sigma(t))


def _draw_times(n, config, rng):
    return rng.uniform(config.t_min, 1.0, size=n)


def dsm_row_losses(score_fn, z_t, y, target, t, weights=None):
    """Per-row squared error ``w(t) * ||score(z_t, y, t) - target||^2`` as a Tensor."""
    pred = score_fn(z_t, y, t)
    rows = _rows_sq(dc.sub(pred, target))
    if weights is not None:
        rows = dc.mul(rows, weights)
    return rows


def dsm_loss(score_fn, z_tgt, y, schedule, rng, config=None):
    """Mean DSM loss with ``t ~ U(t_min, 1)`` and ``z_t = z_tgt + sigma(t) xi``."""
    config = config or ObjectiveConfig()
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    t = _draw_times(len(z_tgt), config, rng)
    z_t = z_tgt + schedule.sigma(t)[:, None] * rng.standard_normal(z_tgt.shape)
    target = dsm_target(z_t, z_tgt, t, schedule)
    return dc.mean(dsm_row_losses(score_fn, z_t, y, target, t, _weights(t, schedule, config)))


def wta_select(score_fn, z_tgt, candidates, candidate_ids, ledger, schedule, rng, config=None):
    """Winner-takes-all choice of a conditioning sample per target row.

    ``candidates`` is ``(n, K, d)`` and ``candidate_ids`` ``(n, K)`` holds the
    pool index of each candidate for the ledger. All candidates of a row share
    one ``(t, xi)`` draw. Candidates are scored serially without recording;
    only the winners' loss is recomputed on the active tape.

    Returns ``(winner_index, loss)`` with ``loss`` the mean winner loss.
    """
    config = config or ObjectiveConfig()
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 3 or candidates.shape[0] != len(z_tgt) or candidates.shape[1] < 1:
        raise ContractError(f"candidates must be (n, K, d) with K >= 1, got {candidates.shape}")
    n, K, _ = candidates.shape
    t = _draw_times(n, config, rng)
    z_t = z_tgt + schedule.sigma(t)[:, None] * rng.standard_normal(z_tgt.shape)
    target = dsm_target(z_t, z_tgt, t, schedule)
    w = _weights(t, schedule, config)
    if K == 1:
        winners = ledger.select(np.zeros((n, 1)), candidate_ids) if ledger is not None \
            else np.zeros(n, dtype=np.int64)
    else:
        losses = np.empty((n, K))
        with dc.no_grad():
            for k in range(K):
                losses[:, k] = dsm_row_losses(score_fn, z_t, candidates[:, k], target, t, w).data
        if ledger is None:
            winners = np.argmin(losses, axis=1)
        else:
            winners = ledger.select(losses, candidate_ids)
    chosen = candidates[np.arange(n), winners]
    loss = dc.mean(dsm_row_losses(score_fn, z_t, chosen, target, t, w))
    return winners, loss


def paired_loss(score_fn, z_tgt, z_src, schedule, rng, config=None, paired=None):
    """Bridge score matching on known pairs.

    The conditioning endpoint is lifted to its t=1 state
    ``z_src + sigma_max * xi`` (the sampler's initial law), ``z_t`` is drawn
    from the VE bridge between ``z_tgt`` and that state, and the regression
    target is the bridge score with the h-transform folded in.
    """
    config = config or ObjectiveConfig()
    if paired is not None and not np.all(paired):
        raise ContractError("paired_loss received samples without a known correspondence")
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    z_src = np.asarray(z_src, dtype=np.float64)
    n = len(z_tgt)
    t = _draw_times(n, config, rng)
    lifted = z_src + schedule.sigma_max * rng.standard_normal(z_src.shape)
    z_t = bridge_marginal_sample(z_tgt, lifted, t, schedule, rng)
    target = folded_bridge_score(z_t, z_tgt, lifted, t, schedule)
    return dc.mean(dsm_row_losses(score_fn, z_t, z_src, target, t, _weights(t, schedule, config)))


def trajectory_weights(times, schedule, eps_w):
    """``w(t) = 1 / (sigma(t)^2 + eps_w)`` on a time grid."""
    return 1.0 / (np.square(schedule.sigma(np.asarray(times))) + eps_w)


def _state(x):
    return x if isinstance(x, dc.Tensor) else dc.Tensor(x)


def cycle_trajectory_loss(fwd_traj, rev_traj, schedule, eps_w=1e-4):
    """Weighted mismatch between a path and the return path run backwards.

    ``fwd_traj.states[k]`` (time ``t_k``) is compared with
    ``rev_traj.states[n-k]``, the point the return path reaches when it has
    the same fraction of the way left to go.
    """
    n = len(fwd_traj.states)
    if len(rev_traj.states) != n:
        raise ContractError(f"trajectory lengths differ: {n} vs {len(rev_traj.states)}")
    w = trajectory_weights(fwd_traj.times, schedule, eps_w)
    total = None
    for k in range(n):
        diff = dc.sub(_state(fwd_traj.states[k]), _state(rev_traj.states[n - 1 - k]))
        term = dc.scale(dc.mean(_rows_sq(diff)), w[k])
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, 1.0 / n)


def cycle_endpoint_loss(first_fn, second_fn, z_start, schedule, rng, n_steps=10, record=False):
    """Round trip ``z_start -> first -> second``; mean squared endpoint error.

    The first leg runs without recording (a constant); the second leg is
    recorded on the active tape. With ``record=True`` returns
    ``(loss, first_trajectory, second_trajectory)``.
    """
    z_start = np.asarray(z_start, dtype=np.float64)
    with dc.no_grad():
        first = sample_bridge(first_fn, z_start, schedule, n_steps, rng, record=True)
    second = sample_bridge(second_fn, first.terminal, schedule, n_steps, rng, record=True,
                           differentiable=True)
    loss = dc.mean(_rows_sq(dc.sub(second.terminal, z_start)))
    if record:
        return loss, first, second
    return loss


@dataclass
class LossTerms:
    total: object
    dsm: float = 0.0
    cyc_end: float = 0.0
    cyc_traj: float = 0.0
    pair: float = 0.0
    saturation_events: int = 0

    def breakdown(self):
        return {
            "loss_total": float(self.total.item()),
            "loss_dsm": self.dsm,
            "loss_cyc_end": self.cyc_end,
            "loss_cyc_traj": self.cyc_traj,
            "loss_pair": self.pair,
            "wta_saturation_events": self.saturation_events,
        }


def _accumulate(parts):
    total = None
    for p in parts:
        if p is None:
            continue
        total = p if total is None else dc.add(total, p)
    return total if total is not None else dc.Tensor([0.0])


def total_loss(batch, score_fns, config, ledgers, schedule, rng, iteration=0):
    """Unified objective for one mini-batch of both directions.

    ``batch`` maps each direction (``"fwd"`` conditions on source and generates
    target, ``"rev"`` the opposite) to a dict with keys ``targets``,
    ``candidates``, ``candidate_ids`` (unpaired marginal matching),
    ``pair_tgt``/``pair_src`` (paired rows in that direction's orientation)
    and a top-level ``cycle`` dict with ``src`` and ``tgt`` start batches.
    ``score_fns`` maps ``"fwd"``/``"rev"`` to score callables.

    Even iterations run ``src -> fwd -> rev`` with gradient into ``rev``; odd
    ones run ``tgt -> rev -> fwd`` with gradient into ``fwd``.
    """
    dsm_parts, pair_parts = [], []
    events_before = sum(l.saturation_events for l in ledgers.values() if l is not None)
    for direction in ("fwd", "rev"):
        part = batch[direction]
        fn = score_fns[direction]
        terms = []
        if config.use_unpaired and len(part["targets"]):
            _, loss = wta_select(fn, part["targets"], part["candidates"], part["candidate_ids"],
                                 ledgers.get(direction), schedule, rng, config)
            terms.append((loss, len(part["targets"])))
        if len(part["pair_tgt"]):
            loss = dsm_loss(fn, part["pair_tgt"], part["pair_src"], schedule, rng, config)
            terms.append((loss, len(part["pair_tgt"])))
            if config.lambda_pair > 0:
                pair_parts.append(paired_loss(fn, part["pair_tgt"], part["pair_src"], schedule, rng, config))
        if terms:
            n_all = sum(n for _, n in terms)
            dsm_parts.append(_accumulate([dc.scale(l, n / n_all) for l, n in terms]))
    dsm = _accumulate(dsm_parts)
    pair = _accumulate(pair_parts) if pair_parts else None

    end = traj = None
    cycle = batch.get("cycle")
    if config.cycle_active and cycle is not None and len(cycle["src"]):
        if iteration % 2 == 0:
            first, second, start = score_fns["fwd"], score_fns["rev"], cycle["src"]
        else:
            first, second, start = score_fns["rev"], score_fns["fwd"], cycle["tgt"]
        end_loss, first_traj, second_traj = cycle_endpoint_loss(
            first, second, start, schedule, rng, config.traj_steps, record=True)
        if config.lambda_end > 0:
            end = end_loss
        if config.lambda_traj > 0:
            traj = cycle_trajectory_loss(first_traj, second_traj, schedule, config.eps_w)

    parts = [dsm]
    if end is not None:
        parts.append(dc.scale(end, config.lambda_end))
    if traj is not None:
        parts.append(dc.scale(traj, config.lambda_traj))
    if pair is not None:
        parts.append(dc.scale(pair, config.lambda_pair))
    total = _accumulate(parts)
    events_after = sum(l.saturation_events for l in ledgers.values() if l is not None)
    return LossTerms(
        total=total,
        dsm=float(dsm.item()),
        cyc_end=config.lambda_end * float(end.item()) if end is not None else 0.0,
        cyc_traj=config.lambda_traj * float(traj.item()) if traj is not None else 0.0,
        pair=config.lambda_pair * float(pair.item()) if pair is not None else 0.0,
        saturation_events=events_after - events_before,
    )

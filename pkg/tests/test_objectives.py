import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pure_noise_cycle_mse, zero_net_dsm_expectation
from sdbridge import diffcore as dc
from sdbridge.bridge import NoiseSchedule, Trajectory, sample_bridge, sigma, time_grid
from sdbridge.denoiser import init_params, score
from sdbridge.exceptions import ConfigError, ContractError
from sdbridge.objectives import (CapacityLedger, ObjectiveConfig, cycle_endpoint_loss,
                                 cycle_trajectory_loss, dsm_loss, paired_loss, total_loss,
                                 trajectory_weights, wta_select)

S = NoiseSchedule()


def oracle_score(z, y, t):
    """Analytic DSM score when the condition *is* the clean endpoint."""
    z = z.data if isinstance(z, dc.Tensor) else z
    s2 = np.square(S.sigma(t))
    s2 = s2.reshape(-1, 1) if np.ndim(s2) else s2
    return dc.Tensor((y - z) / s2)


def zero_score(z, y, t):
    return dc.Tensor(np.zeros(np.shape(z.data if isinstance(z, dc.Tensor) else z)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(lambda_end=-1)
    with pytest.raises(ConfigError):
        ObjectiveConfig(capacity=0)
    with pytest.raises(ConfigError):
        ObjectiveConfig(dsm_weighting="snr")
    assert ObjectiveConfig().capacity == 2 and ObjectiveConfig().lambda_pair == 1.0


def test_dsm_oracle_substitution_is_zero():
    z = np.random.default_rng(0).standard_normal((64, 2))
    loss = dsm_loss(oracle_score, z, z, S, np.random.default_rng(1))
    assert loss.item() < 1e-8


def test_dsm_zero_net_matches_closed_form():
    n = 400000
    z = np.zeros((n, 2))
    cfg = ObjectiveConfig()
    loss = dsm_loss(zero_score, z, z, S, np.random.default_rng(2), cfg).item()
    expected = zero_net_dsm_expectation(S, cfg.t_min, 2)
    # standard error from an independent draw of the per-row loss
    rng = np.random.default_rng(3)
    t = rng.uniform(cfg.t_min, 1, n)
    rows = np.sum(rng.standard_normal((n, 2)) ** 2, axis=1) / np.square(S.sigma(t))
    se = rows.std() / math.sqrt(n)
    assert abs(loss - expected) < 3 * se


def test_wta_single_candidate_always_selected():
    z = np.random.default_rng(0).standard_normal((10, 2))
    ledger = CapacityLedger(5, limit=1)
    ids = np.zeros((10, 1), dtype=int)
    winners, _ = wta_select(zero_score, z, z[:, None, :], ids, ledger, S, np.random.default_rng(1))
    assert np.all(winners == 0)


def test_wta_prefers_true_condition():
    rng = np.random.default_rng(4)
    n, K = 200, 4
    z = rng.standard_normal((n, 2))
    cands = z[:, None, :] + 6.0 + rng.standard_normal((n, K, 2))
    true_pos = rng.integers(0, K, n)
    cands[np.arange(n), true_pos] = z
    winners, _ = wta_select(oracle_score, z, cands, np.arange(n * K).reshape(n, K), None, S, rng)
    assert np.mean(winners == true_pos) > 0.9


def test_wta_order_invariance_and_tie_break():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((30, 2))
    cands = rng.standard_normal((30, 5, 2))
    ids = np.arange(150).reshape(30, 5)
    w1, _ = wta_select(oracle_score, z, cands, ids, None, S, np.random.default_rng(9))
    perm = np.array([3, 0, 4, 1, 2])
    w2, _ = wta_select(oracle_score, z, cands[:, perm], ids[:, perm], None, S, np.random.default_rng(9))
    np.testing.assert_array_equal(perm[w2], w1)
    dup = np.repeat(cands[:, :1], 3, axis=1)
    w3, _ = wta_select(oracle_score, z, dup, ids[:, :3], None, S, np.random.default_rng(9))
    assert np.all(w3 == 0)


def test_ledger_avoids_saturated_duplicate():
    ledger = CapacityLedger(3, limit=1)
    losses = np.array([[0.1, 0.5]])
    ids = np.array([[2, 0]])
    assert ledger.select(losses, ids)[0] == 0
    assert ledger.select(losses, ids)[0] == 1
    assert ledger.saturation_events == 0


def test_ledger_saturation_fallback_and_reset():
    ledger = CapacityLedger(2, limit=1)
    ledger.select([[0.0]], [[0]])
    assert ledger.select([[0.0]], [[0]])[0] == 0
    assert ledger.saturation_events == 1
    ledger.reset()
    assert np.all(ledger.counts == 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_ledger_capacity_property(limit, pool, K, seed):
    rng = np.random.default_rng(seed)
    ledger = CapacityLedger(pool, limit)
    for _ in range(40):
        ids = rng.integers(0, pool, size=(1, K))
        before = ledger.counts.copy()
        had_room = bool(np.any(before[ids[0]] < limit))
        k = ledger.select(rng.random((1, K)), ids)[0]
        if had_room:
            assert before[ids[0, k]] < limit
            assert ledger.counts.max() <= max(limit, before.max())


def test_cycle_endpoint_degenerate_schedule():
    tiny = NoiseSchedule(sigma_min=1e-9, sigma_max=1e-8)
    x = np.random.default_rng(0).standard_normal((20, 2))
    loss = cycle_endpoint_loss(zero_score, zero_score, x, tiny, np.random.default_rng(1))
    assert loss.item() < 1e-12


def test_cycle_endpoint_permutation_invariant():
    x = np.random.default_rng(0).standard_normal((16, 2))
    perm = np.random.default_rng(1).permutation(16)
    # zero-score legs: the result depends only on the noise, which is per row
    noise = np.random.default_rng(2).standard_normal((10, 16, 2))
    def loss_for(rows):
        fwd = sample_bridge(zero_score, x[rows], S, 10, noise=noise[:, rows])
        back = sample_bridge(zero_score, fwd, S, 10, noise=noise[:, rows])
        return np.mean(np.sum((back - x[rows]) ** 2, axis=1))
    assert loss_for(np.arange(16)) == pytest.approx(loss_for(perm), rel=1e-12)


def test_cycle_endpoint_untrained_matches_pure_noise():
    p = init_params(n_layers=1, d_model=8, n_heads=2, seed=0, time_dim=8)
    fn = lambda z, y, t: score(p, z, y, t)
    x = np.random.default_rng(0).standard_normal((20000, 2))
    loss = cycle_endpoint_loss(fn, fn, x, S, np.random.default_rng(1), n_steps=10).item()
    expected = pure_noise_cycle_mse(S, 10, 2)
    assert abs(loss - expected) / expected < 0.10


def _traj(states):
    return Trajectory(list(states), time_grid(len(states) - 1))


def test_trajectory_loss_identity():
    rng = np.random.default_rng(0)
    states = [rng.standard_normal((4, 2)) for _ in range(11)]
    assert cycle_trajectory_loss(_traj(states), _traj(states[::-1]), S).item() == 0.0


def test_trajectory_loss_constant_offset():
    rng = np.random.default_rng(1)
    states = [rng.standard_normal((4, 2)) for _ in range(11)]
    delta = np.array([0.3, -0.4])
    rev = [s + delta for s in states[::-1]]
    times = time_grid(10)
    expected = sum(1.0 / (sigma(S, t) ** 2 + 1e-4) * 0.25 for t in times) / 11
    assert cycle_trajectory_loss(_traj(states), _traj(rev), S, 1e-4).item() == pytest.approx(expected, rel=1e-12)


def test_trajectory_weights_decrease_in_t():
    w = trajectory_weights(np.linspace(0, 1, 50), S, 1e-4)
    assert np.all(np.diff(w) < 0)


def test_trajectory_length_mismatch():
    a = _traj([np.zeros((1, 2))] * 11)
    b = _traj([np.zeros((1, 2))] * 6)
    with pytest.raises(ContractError):
        cycle_trajectory_loss(a, b, S)


def test_paired_oracle_substitution_and_contract():
    rng = np.random.default_rng(0)
    z_tgt, z_src = rng.standard_normal((64, 2)), rng.standard_normal((64, 2))

    def folded(z, y, t):
        s2 = np.square(S.sigma(t)).reshape(-1, 1)
        return dc.Tensor((z_tgt - z) / s2)

    assert paired_loss(folded, z_tgt, z_src, S, rng).item() < 1e-8
    assert paired_loss(zero_score, z_tgt, z_src, S, rng).item() >= 0
    with pytest.raises(ContractError):
        paired_loss(folded, z_tgt, z_src, S, rng, paired=np.zeros(64, dtype=bool))


def _batch(rng, n=16, n_pair=0, K=3):
    z = lambda m: rng.standard_normal((m, 2))
    part = lambda: {"targets": z(n), "candidates": rng.standard_normal((n, K, 2)),
                    "candidate_ids": rng.integers(0, 50, (n, K)), "pair_tgt": z(n_pair), "pair_src": z(n_pair)}
    return {"fwd": part(), "rev": part(), "cycle": {"src": z(8), "tgt": z(8)}}


def _nets(seed=0):
    out = {}
    for k, d in enumerate(("fwd", "rev")):
        p = init_params(n_layers=1, d_model=8, n_heads=2, seed=seed + k, time_dim=8)
        p.arrays["out.w"] = 0.01 * np.random.default_rng(seed + 10 + k).standard_normal((8, 2))
        out[d] = p
    return out


def _fns(nets, weights=None):
    return {d: (lambda p, w: (lambda z, y, t: score(p, z, y, t, w)))(nets[d], None if weights is None else weights[d])
            for d in nets}


def test_total_loss_gating():
    rng = np.random.default_rng(0)
    nets = _nets()
    cfg = ObjectiveConfig(lambda_end=0, lambda_traj=0, lambda_pair=0, wta_candidates=3)
    terms = total_loss(_batch(rng, n_pair=4), _fns(nets), cfg, {}, S, np.random.default_rng(1))
    assert terms.total.item() == terms.dsm
    assert terms.cyc_end == terms.cyc_traj == terms.pair == 0.0


def test_total_loss_rho_zero_has_no_pair_term():
    rng = np.random.default_rng(0)
    terms = total_loss(_batch(rng), _fns(_nets()), ObjectiveConfig(wta_candidates=3), {}, S,
                       np.random.default_rng(1))
    assert terms.pair == 0.0


def test_total_loss_breakdown_sums():
    rng = np.random.default_rng(2)
    ledgers = {"fwd": CapacityLedger(50), "rev": CapacityLedger(50)}
    terms = total_loss(_batch(rng, n_pair=5), _fns(_nets()), ObjectiveConfig(wta_candidates=3),
                       ledgers, S, np.random.default_rng(3), iteration=1)
    b = terms.breakdown()
    parts = b["loss_dsm"] + b["loss_cyc_end"] + b["loss_cyc_traj"] + b["loss_pair"]
    assert abs(parts - b["loss_total"]) <= 1e-12 * max(1.0, abs(b["loss_total"]))
    assert set(b) == {"loss_total", "loss_dsm", "loss_cyc_end", "loss_cyc_traj", "loss_pair",
                      "wta_saturation_events"}


@pytest.mark.parametrize("iteration,frozen", [(0, "fwd"), (1, "rev")])
def test_cycle_gradients_touch_one_direction(iteration, frozen):
    """With DSM and pair terms off the frozen direction receives exactly zero gradient."""
    rng = np.random.default_rng(0)
    nets = _nets()
    batch = _batch(rng, n=0)
    cfg = ObjectiveConfig(wta_candidates=3, use_unpaired=False)
    with dc.Tape() as tape:
        w = {d: tape.watch_params(nets[d].arrays) for d in nets}
        terms = total_loss(batch, _fns(nets, w), cfg, {}, S, np.random.default_rng(1), iteration)
        grads = tape.backward(terms.total)
    live = "rev" if frozen == "fwd" else "fwd"
    assert all(not np.any(grads[t.node]) for t in w[frozen].values())
    assert any(np.any(grads[t.node]) for t in w[live].values())

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdbridge.exceptions import ConfigError, ContractError
from sdbridge.synthgen import (assign_pairing, build_generator, endpoints_from_latents, read_csv,
                               sample, spectral_norm, warp, write_csv)


def test_generator_is_deterministic():
    assert build_generator(6, 3, 2, seed=5) == build_generator(6, 3, 2, seed=5)
    assert build_generator(6, 3, 2, seed=5) != build_generator(6, 3, 2, seed=6)


def test_generator_shapes_and_frozen():
    spec = build_generator(n_content=7, n_style=4, latent_dim=3)
    assert spec.mu_src.shape == (7, 3) and spec.mu_tgt.shape == (7, 3)
    assert spec.style_src.shape == (4, 3, 3) and spec.style_tgt.shape == (4, 3, 3)
    with pytest.raises(ValueError):
        spec.mu_src[0, 0] = 1.0


def test_means_on_circle():
    spec = build_generator(radius=3.0)
    np.testing.assert_allclose(np.linalg.norm(spec.mu_src, axis=1), 3.0)


@pytest.mark.parametrize("seed", range(5))
def test_style_maps_spectral_norm(seed):
    spec = build_generator(n_style=8, latent_dim=4, seed=seed, style_norm=1.0)
    for m in np.concatenate([spec.style_src, spec.style_tgt]):
        # power iteration as an independent check of the 2-norm
        v = np.ones(4)
        for _ in range(500):
            v = m.T @ (m @ v)
            v /= np.linalg.norm(v)
        assert np.linalg.norm(m @ v) <= 1 + 1e-9
        assert spectral_norm(m) <= 1 + 1e-9


def test_zero_counts_rejected():
    for kw in ({"n_content": 0}, {"n_style": 0}, {"latent_dim": 0}):
        with pytest.raises(ConfigError):
            build_generator(**kw)


def test_single_class():
    spec = build_generator(n_content=1)
    data = sample(spec, 50, np.random.default_rng(0))
    assert np.all(data.content == 0)


def test_degenerate_noise_gives_means():
    spec = build_generator(warp_alpha=0.0, noise_std=0.0)
    c = np.arange(6)
    zeros = np.zeros((6, 2))
    src, tgt = endpoints_from_latents(spec, c, np.zeros(6, dtype=int), zeros, zeros, zeros)
    np.testing.assert_array_equal(src, spec.mu_src)
    np.testing.assert_array_equal(tgt, spec.mu_tgt)


def test_warp_value():
    np.testing.assert_allclose(warp(np.array([2.0, 2.0]), 0.1), [2.8, 2.8])


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 2))
def test_warp_monotone(a, b, alpha):
    if a < b:
        assert warp(a, alpha) < warp(b, alpha)


def test_class_conditional_mean():
    spec = build_generator(warp_alpha=0.0)
    rng = np.random.default_rng(0)
    n = 100000
    c = np.zeros(n, dtype=int)
    s = rng.integers(0, 3, n)
    u = rng.standard_normal((n, 2))
    e0 = spec.noise_std * rng.standard_normal((n, 2))
    e1 = spec.noise_std * rng.standard_normal((n, 2))
    _, tgt = endpoints_from_latents(spec, c, s, u, e0, e1)
    se = tgt.std(0) / np.sqrt(n)
    assert np.all(np.abs(tgt.mean(0) - spec.mu_tgt[0]) < 3 * se)


def test_nonlinear_coupling():
    spec = build_generator()
    data = sample(spec, 10000, np.random.default_rng(1))
    X = np.hstack([data.z_src, np.ones((len(data), 1))])
    coef, *_ = np.linalg.lstsq(X, data.z_tgt, rcond=None)
    assert np.mean((X @ coef - data.z_tgt) ** 2) > 0


def test_shuffling_keeps_marginals():
    data = sample(build_generator(), 500, np.random.default_rng(2))
    perm = np.random.default_rng(3).permutation(500)
    np.testing.assert_array_equal(np.sort(data.z_src[perm], axis=0), np.sort(data.z_src, axis=0))


@pytest.mark.parametrize("rho,expected", [(0.0, 0), (1.0, 3000), (0.5, 1500), (0.1, 300), (0.333, 999)])
def test_pairing_count(rho, expected):
    data = sample(build_generator(), 3000, np.random.default_rng(0))
    paired = assign_pairing(data, rho, np.random.default_rng(1))
    assert paired.n_paired == expected
    assert len(paired) == 3000
    np.testing.assert_array_equal(paired.z_src, data.z_src)


def test_pairing_rho_range():
    data = sample(build_generator(), 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        assign_pairing(data, 1.5, np.random.default_rng(0))


def test_dataset_access():
    data = sample(build_generator(), 20, np.random.default_rng(0))
    s = data[3]
    assert s.content == data.content[3] and not s.paired
    assert len(data.samples) == 20
    assert len(data.subset(data.content == data.content[0])) >= 1
    assert np.all(np.isfinite(data.z_src)) and np.all(np.isfinite(data.z_tgt))


def test_csv_roundtrip(tmp_path):
    data = assign_pairing(sample(build_generator(), 50, np.random.default_rng(0)), 0.5,
                          np.random.default_rng(1))
    path = tmp_path / "d.csv"
    write_csv(data, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.z_src, data.z_src)
    np.testing.assert_array_equal(back.z_tgt, data.z_tgt)
    np.testing.assert_array_equal(back.paired, data.paired)
    assert path.read_text().splitlines()[0] == "z_src_0,z_src_1,z_tgt_0,z_tgt_1,content,style,paired"


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ContractError):
        read_csv(path)

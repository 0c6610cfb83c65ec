import io

import numpy as np
import pytest

from sdbridge.denoiser import (DenoiserConfig, TimeEmbedding, embed_time, init_params,
                               load_checkpoint, param_count, save_checkpoint, score)
from sdbridge.exceptions import ConfigError, ContractError, NumericError


def random_params(seed=0, **kw):
    kw = {"n_layers": 2, "d_model": 16, "n_heads": 4, "time_dim": 16, **kw}
    p = init_params(seed=seed, **kw)
    rng = np.random.default_rng(seed + 100)
    p.arrays["out.w"] = rng.standard_normal(p.arrays["out.w"].shape)
    return p


def test_time_embedding_at_zero():
    e = embed_time(0.0, TimeEmbedding(16))
    assert np.array_equal(e[0::2], np.zeros(8))
    assert np.array_equal(e[1::2], np.ones(8))


def test_time_embedding_separates_times():
    emb = TimeEmbedding(16, 1e4)
    assert np.max(np.abs(embed_time(0.25, emb) - embed_time(0.75, emb))) > 0.1


def test_time_embedding_bounded_and_batched():
    emb = TimeEmbedding(8)
    out = embed_time(np.linspace(0, 1, 7), emb)
    assert out.shape == (7, 8) and np.all(np.abs(out) <= 1)
    assert np.array_equal(embed_time(0.0, emb), embed_time(0.0, emb))


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ConfigError):
        TimeEmbedding(7)


def test_initial_score_is_zero():
    p = init_params(n_layers=2, d_model=16, n_heads=2, seed=1, time_dim=16)
    rng = np.random.default_rng(0)
    out = score(p, rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.uniform(0, 1, 5))
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_conditioning_is_live():
    p = random_params()
    z = np.ones((1, 2))
    a = score(p, z, np.zeros((1, 2)), 0.5).data
    b = score(p, z, np.ones((1, 2)), 0.5).data
    assert np.max(np.abs(a - b)) > 0


def test_same_seed_same_params():
    a = init_params(n_layers=1, d_model=8, n_heads=2, seed=4)
    b = init_params(n_layers=1, d_model=8, n_heads=2, seed=4)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)


@pytest.mark.parametrize("L,D,H", [(1, 8, 2), (4, 64, 4), (3, 48, 6)])
def test_param_count_formula(L, D, H):
    p = init_params(n_layers=L, d_model=D, n_heads=H, seed=0)
    assert p.n_params() == param_count(L, D, H)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        DenoiserConfig(d_model=10, n_heads=4)


def test_shape_contract():
    p = random_params()
    with pytest.raises(ContractError):
        score(p, np.zeros((3, 2)), np.zeros((2, 2)), 0.5)
    with pytest.raises(ContractError):
        score(p, np.zeros((3, 3)), np.zeros((3, 3)), 0.5)


def test_nan_output_raises():
    p = random_params()
    p.arrays["out.b"] = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        score(p, np.zeros((1, 2)), np.zeros((1, 2)), 0.5)


def test_head_permutation_symmetry():
    """Reordering heads (q/k/v columns and wo rows together) leaves the output unchanged."""
    p = random_params(n_layers=1, d_model=16, n_heads=4)
    rng = np.random.default_rng(2)
    z, y, t = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.uniform(0, 1, 4)
    before = score(p, z, y, t).data
    dh = 4
    perm = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in (2, 0, 3, 1)])
    q = p.copy()
    for name in ("wq", "wk", "wv"):
        q.arrays[f"blocks.0.attn.{name}"] = p.arrays[f"blocks.0.attn.{name}"][:, perm]
    for name in ("bq", "bk", "bv"):
        q.arrays[f"blocks.0.attn.{name}"] = p.arrays[f"blocks.0.attn.{name}"][perm]
    q.arrays["blocks.0.attn.wo"] = p.arrays["blocks.0.attn.wo"][perm, :]
    np.testing.assert_allclose(score(q, z, y, t).data, before, atol=1e-10)


def test_single_row_inputs():
    p = random_params()
    out = score(p, np.zeros(2), np.ones(2), 0.1)
    assert out.shape == (1, 2)


def test_checkpoint_roundtrip(tmp_path):
    p = random_params(seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.config == p.config
    assert list(q.arrays) == list(p.arrays)
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)


def test_checkpoint_truncated():
    buf = io.BytesIO()
    save_checkpoint(random_params(), buf)
    data = buf.getvalue()
    with pytest.raises(ContractError):
        load_checkpoint(io.BytesIO(data[:-8]))
    with pytest.raises(ContractError):
        load_checkpoint(io.BytesIO(data + b"\0"))

"""Attention score network over three tokens: noisy state, condition, time.

Each token is projected to ``d_model`` and the stack runs ``n_layers``
pre-norm blocks (multi-head self-attention then a GELU feed-forward, both
residual). The output at the noisy-state token is projected back to the
latent dimension and returned as the score.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .exceptions import ConfigError, ContractError, NumericError

__all__ = [
    "TimeEmbedding", "DenoiserConfig", "DenoiserParams", "embed_time",
    "init_params", "score", "param_count", "save_checkpoint", "load_checkpoint",
]


@dataclass(frozen=True)
class TimeEmbedding:
    dim: int = 64
    base: float = 1e4

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ConfigError(f"time embedding dimension must be even and positive, got {self.dim}")
        if self.base <= 0:
            raise ConfigError(f"frequency base must be positive, got {self.base}")

    def frequencies(self):
        k = np.arange(self.dim // 2)
        return self.base ** (-2.0 * k / self.dim)


def embed_time(t, embedding):
    """Interleaved ``[sin(w_k t), cos(w_k t)]`` rows, one per entry of ``t``.

    Scalar ``t`` gives a ``(dim,)`` vector, an array gives ``(len(t), dim)``.
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ConfigError(f"t must lie in [0, 1], got {t}")
    angles = np.multiply.outer(np.atleast_1d(arr), embedding.frequencies())
    out = np.empty(angles.shape[:-1] + (embedding.dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out[0] if arr.ndim == 0 else out


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    latent_dim: int = 2
    time_dim: int = 64
    time_base: float = 1e4
    ff_mult: int = 4

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "latent_dim", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        TimeEmbedding(self.time_dim, self.time_base)

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict = field(default_factory=dict)

    def copy(self):
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self):
        return sum(v.size for v in self.arrays.values())


def _shapes(cfg):
    D, d, E, F = cfg.d_model, cfg.latent_dim, cfg.time_dim, cfg.d_model * cfg.ff_mult
    shapes = {
        "in_z.w": (d, D), "in_z.b": (D,),
        "in_y.w": (d, D), "in_y.b": (D,),
        "in_t.w": (E, D), "in_t.b": (D,),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ff.w1": (D, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, D), p + "ff.b2": (D,),
        })
    shapes.update({"ln_f.g": (D,), "ln_f.b": (D,), "out.w": (D, d), "out.b": (d,)})
    return shapes


def param_count(n_layers, d_model, n_heads, latent_dim=2, time_dim=64, ff_mult=4):
    """Closed-form parameter count (``n_heads`` does not change it)."""
    D, d, E, F = d_model, latent_dim, time_dim, d_model * ff_mult
    inputs = 2 * (d * D + D) + (E * D + D)
    block = 4 * D + 4 * (D * D + D) + (D * F + F) + (F * D + D)
    head = 2 * D + D * d + d
    return inputs + n_layers * block + head


def init_params(n_layers=4, d_model=64, n_heads=4, seed=0, latent_dim=2, time_dim=64,
                time_base=1e4, ff_mult=4):
    """Xavier-uniform weights, unit norm gains, zero biases and a zero output head."""
    cfg = DenoiserConfig(n_layers, d_model, n_heads, latent_dim, time_dim, time_base, ff_mult)
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("out."):
            arrays[name] = np.zeros(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return DenoiserParams(cfg, arrays)


def _linear(x, w, b):
    return dc.add(dc.matmul(x, w), b)


def _attention(x, p, prefix, cfg):
    B, T, D = x.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(w, b):
        return dc.transpose(dc.reshape(_linear(x, p[prefix + w], p[prefix + b]), (B, T, H, dh)),
                            (0, 2, 1, 3))

    q = heads("wq", "bq")
    k = heads("wk", "bk")
    v = heads("wv", "bv")
    att = dc.softmax_rows(dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(dh)))
    mixed = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    return _linear(mixed, p[prefix + "wo"], p[prefix + "bo"])


def _as_batch(x, name, d):
    arr = x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
        x = arr if not isinstance(x, dc.Tensor) else dc.reshape(x, arr.shape)
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ContractError(f"{name} must have shape (n, {d}), got {arr.shape}")
    return x, arr.shape[0]


def score(params, z_t, y, t, weights=None):
    """Score estimate for a batch.

    ``z_t`` and ``y`` are ``(n, d)`` (or single ``(d,)`` rows); ``t`` is a
    scalar or an ``(n,)`` array. ``weights`` optionally overrides
    ``params.arrays`` with tape-watched tensors so the call is recorded.
    Returns a :class:`~sdbridge.diffcore.Tensor` of shape ``(n, d)``.
    """
    cfg = params.config
    p = weights if weights is not None else params.arrays
    z_t, n = _as_batch(z_t, "z_t", cfg.latent_dim)
    y, n_y = _as_batch(y, "y", cfg.latent_dim)
    if n_y != n:
        raise ContractError(f"z_t has {n} rows but y has {n_y}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    emb = embed_time(t_arr, TimeEmbedding(cfg.time_dim, cfg.time_base))
    D = cfg.d_model
    tokens = dc.concat_rows([
        dc.reshape(_linear(z_t, p["in_z.w"], p["in_z.b"]), (n, 1, D)),
        dc.reshape(_linear(y, p["in_y.w"], p["in_y.b"]), (n, 1, D)),
        dc.reshape(_linear(emb, p["in_t.w"], p["in_t.b"]), (n, 1, D)),
    ], axis=1)
    h = tokens
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        a = dc.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        h = dc.add(h, _attention(a, p, pre + "attn.", cfg))
        f = dc.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = _linear(dc.gelu(_linear(f, p[pre + "ff.w1"], p[pre + "ff.b1"])), p[pre + "ff.w2"], p[pre + "ff.b2"])
        h = dc.add(h, f)
    head = dc.reshape(dc.slice_rows(h, 0, 1, axis=1), (n, D))
    head = dc.layer_norm(head, p["ln_f.g"], p["ln_f.b"])
    out = _linear(head, p["out.w"], p["out.b"])
    if not np.all(np.isfinite(out.data)):
        raise NumericError("denoiser output is not finite")
    return out


# ---------------------------------------------------------------------------
# checkpoint format: 8-byte little-endian header length, JSON header, then
# float64 little-endian payload in header order.


def save_checkpoint(params, path_or_file):
    header = {
        "config": asdict(params.config),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.arrays.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.arrays.values())
    data = struct.pack("<Q", len(blob)) + blob + payload
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "wb") as fh:
            fh.write(data)
    else:
        path_or_file.write(data)


def load_checkpoint(path_or_file):
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    else:
        data = path_or_file.read()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n].decode("utf-8"))
    buf = io.BytesIO(data[8 + n:])
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ContractError(f"checkpoint truncated while reading {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if buf.read(1):
        raise ContractError("checkpoint has trailing bytes")
    return DenoiserParams(DenoiserConfig(**header["config"]), arrays)

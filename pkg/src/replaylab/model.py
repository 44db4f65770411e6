"""Decoder-only transformer: pre-norm attention with QK-norm and RoPE,
pre-norm GELU MLP, final norm, untied input/output embeddings.

Parameters live in a flat dict keyed like "layers.0.qkv" so the optimizer,
checkpointing, and gradient code can treat a model as a plain mapping of
named arrays.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"RLCK"
CHECKPOINT_VERSION = 1

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_context: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be a positive int, got {v!r}")
        if self.d_head % 2 != 0:
            raise ValueError("d_head must be even (RoPE rotates feature pairs)")

    def param_count(self) -> int:
        return 2 * self.vocab_size * self.d_model + self.n_layers * (
            4 * self.n_heads * self.d_model * self.d_head + 2 * self.d_model * self.d_ff
        )


def init_scales(config: ModelConfig) -> dict[str, float]:
    """Init std per tensor family: 0.02 for embeddings, fan-in scaling for
    projections, residual-output projections damped by 1/sqrt(2*n_layers)."""
    damp = 1.0 / np.sqrt(2.0 * config.n_layers)
    return {
        "embed_in": 0.02,
        "embed_out": 0.02,
        "qkv": 1.0 / np.sqrt(config.d_model),
        "up": 1.0 / np.sqrt(config.d_model),
        "out": damp / np.sqrt(config.n_heads * config.d_head),
        "down": damp / np.sqrt(config.d_ff),
    }


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws with |z| > 3 resampled; keeps the std within ~1.5%."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 3.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 3.0
    return (std * x).astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic given seed; tensor draw order is fixed."""
    rng = np.random.default_rng(seed)
    scales = init_scales(config)
    n, d, h, f, v = config.n_heads, config.d_model, config.d_head, config.d_ff, config.vocab_size
    params: dict[str, np.ndarray] = {
        "embed_in": _trunc_normal(rng, (v, d), scales["embed_in"]),
        "embed_out": _trunc_normal(rng, (v, d), scales["embed_out"]),
    }
    for i in range(config.n_layers):
        params[f"layers.{i}.qkv"] = _trunc_normal(rng, (3, n, d, h), scales["qkv"])
        params[f"layers.{i}.out"] = _trunc_normal(rng, (n, h, d), scales["out"])
        params[f"layers.{i}.up"] = _trunc_normal(rng, (d, f), scales["up"])
        params[f"layers.{i}.down"] = _trunc_normal(rng, (f, d), scales["down"])
    return params


def rope_angles(t: int, d_head: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T, d_head/2] with frequencies base**(-2i/d_head)."""
    if d_head % 2 != 0:
        raise ValueError("RoPE requires an even head dimension")
    pair = np.arange(d_head // 2, dtype=np.float64)
    freqs = ROPE_BASE ** (-2.0 * pair / d_head)
    angles = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, positions: np.ndarray | None = None) -> Tensor:
    """Rotary embedding over [..., T, n_heads, d_head] (position axis -3)."""
    t = x.shape[-3]
    d_head = x.shape[-1]
    cos, sin = rope_angles(t, d_head, dtype=x.dtype)
    if positions is not None:
        cos, sin = cos[positions], sin[positions]
    # broadcast over the head axis: [T, 1, d_head/2]
    return ad.rotate_pairs(x, cos[:, None, :], sin[:, None, :])


def _as_tensor(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p)


def forward(params: dict, tokens: np.ndarray, config: ModelConfig) -> Tensor:
    """Logits [B, T, V] for a token batch [B, T].

    Mirrors: embed -> per layer {attention residual, MLP residual with
    pre-norms and QK-norm + RoPE} -> final norm -> output embedding.
    Attention is exact softmax over the causal prefix, scaled by
    1/sqrt(d_head).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T], got shape {tokens.shape}")
    b, t = tokens.shape
    if t > config.max_context:
        raise ValueError(f"context length {t} exceeds max_context {config.max_context}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")

    embed_in = _as_tensor(params["embed_in"])
    dtype = embed_in.dtype
    scale = 1.0 / np.sqrt(np.asarray(config.d_head, dtype=dtype))
    causal = np.where(
        np.arange(t)[None, :] <= np.arange(t)[:, None], dtype.type(0.0), dtype.type(-np.inf)
    )[None, None, :, :]

    h = ad.embedding(embed_in, tokens)
    for i in range(config.n_layers):
        qkv = _as_tensor(params[f"layers.{i}.qkv"])
        w_out = _as_tensor(params[f"layers.{i}.out"])
        w_up = _as_tensor(params[f"layers.{i}.up"])
        w_down = _as_tensor(params[f"layers.{i}.down"])

        x = ad.rms_norm(h, RMS_EPS)
        q, k, v = (ad.einsum("btd,sndh->sbtnh", x, qkv)[s] for s in range(3))
        q = rope_apply(ad.rms_norm(q, RMS_EPS))
        k = rope_apply(ad.rms_norm(k, RMS_EPS))
        scores = ad.einsum("btnh,bsnh->bnts", q, k) * scale
        attn = ad.softmax(scores + causal)
        a = ad.einsum("bnts,bsnh->btnh", attn, v)
        h = h + ad.einsum("btnh,nhd->btd", a, w_out)

        m = ad.gelu(ad.einsum("btd,df->btf", ad.rms_norm(h, RMS_EPS), w_up))
        h = h + ad.einsum("btf,fd->btd", m, w_down)

    return ad.einsum("btd,vd->btv", ad.rms_norm(h, RMS_EPS), _as_tensor(params["embed_out"]))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Binary format: magic, version, 7 uint32 config fields, tensor count,
    then per tensor (uint16 name length, name, uint8 rank, uint32 extents,
    raw float32 little-endian values). Round-trips bit-exactly."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(
        struct.pack(
            "<7I",
            config.n_layers,
            config.d_model,
            config.n_heads,
            config.d_head,
            config.d_ff,
            config.vocab_size,
            config.max_context,
        )
    )
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig(*struct.unpack("<7I", buf.read(28)))
    (count,) = struct.unpack("<I", buf.read(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32)
    return config, params

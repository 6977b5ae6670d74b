"""Pre-norm decoder layer shared by the target and the drafter.

Activations are always ``[batch, rows, d]``. Attention takes optional
already-projected keys/values from earlier positions (a KV cache, or the
key blocks of earlier rollout steps during training) plus a boolean mask
over ``past + new`` keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ROPE_BASE = 10000.0


@lru_cache(maxsize=8)
def _rope_tables(head_dim: int, max_pos: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = ROPE_BASE ** (-np.arange(half) / half)
    ang = np.arange(max_pos)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1)
    rot = np.zeros((head_dim, head_dim))
    # x @ rot == concat(-x2, x1)
    rot[half:, :half] = -np.eye(half)
    rot[:half, half:] = np.eye(half)
    return cos, sin, rot


def rope(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotary position encoding on ``[B, H, T, dh]`` with per-row positions."""
    dh = x.shape[-1]
    cos, sin, rot = _rope_tables(dh, 4096)
    c, s = cos[positions], sin[positions]
    return nx.add(nx.mul(x, c), nx.mul(nx.matmul(x, rot), s))


def init_layer(rng: np.random.Generator, d: int, ffn: int, n_layers: int, prefix: str) -> dict[str, Tensor]:
    std = 1.0 / math.sqrt(d)
    out_std = std / math.sqrt(2 * n_layers)
    p = {
        "attn_norm": np.ones(d),
        "wq": rng.normal(0, std, (d, d)),
        "wk": rng.normal(0, std, (d, d)),
        "wv": rng.normal(0, std, (d, d)),
        "wo": rng.normal(0, out_std, (d, d)),
        "mlp_norm": np.ones(d),
        "w1": rng.normal(0, std, (d, ffn)),
        "w2": rng.normal(0, 1.0 / math.sqrt(ffn) / math.sqrt(2 * n_layers), (ffn, d)),
    }
    return {f"{prefix}{k}": nx.parameter(v, name=f"{prefix}{k}") for k, v in p.items()}


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(
    x: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    n_heads: int,
    positions: np.ndarray,
    mask: np.ndarray,
    past_k: Tensor | None = None,
    past_v: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Multi-head attention. Returns ``(output, new_keys, new_values)``
    where the new keys are post-rotary, ready to be cached."""
    q = rope(split_heads(nx.matmul(x, p[prefix + "wq"]), n_heads), positions)
    k = rope(split_heads(nx.matmul(x, p[prefix + "wk"]), n_heads), positions)
    v = split_heads(nx.matmul(x, p[prefix + "wv"]), n_heads)
    keys = k if past_k is None else nx.concat([past_k, k], axis=2)
    vals = v if past_v is None else nx.concat([past_v, v], axis=2)
    dh = q.shape[-1]
    scores = nx.scale(nx.matmul(q, nx.transpose(keys, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask.shape[-1] != scores.shape[-1] or mask.shape[-2] != scores.shape[-2]:
        raise nx.ShapeError(f"attention: mask shape {mask.shape} vs scores {scores.shape}")
    probs = nx.row_softmax(scores, mask)
    out = nx.matmul(merge_heads(nx.matmul(probs, vals)), p[prefix + "wo"])
    return out, k, v


def decoder_layer(
    h: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    n_heads: int,
    positions: np.ndarray,
    mask: np.ndarray,
    past_k: Tensor | None = None,
    past_v: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    a, k, v = attention(
        nx.rms_norm(h, p[prefix + "attn_norm"]), p, prefix, n_heads, positions, mask, past_k, past_v
    )
    h = nx.add(h, a)
    m = nx.matmul(nx.silu(nx.matmul(nx.rms_norm(h, p[prefix + "mlp_norm"]), p[prefix + "w1"])), p[prefix + "w2"])
    return nx.add(h, m), k, v


def causal_mask(n: int, past: int = 0) -> np.ndarray:
    """``[n, past + n]`` mask: every row sees all past keys and new rows up
    to itself."""
    m = np.ones((n, past + n), dtype=bool)
    m[:, past:] = np.tril(np.ones((n, n), dtype=bool))
    return m


# ---------------------------------------------------------------------------
# Inference kernels: plain numpy, batch of one, writing keys/values straight
# into preallocated cache buffers. Numerically the same computation as the
# tape-recorded path above, without graph bookkeeping.
# ---------------------------------------------------------------------------


RMS_EPS = 1e-6


def rms_np(x: np.ndarray, w: np.ndarray | None = None, eps: float = RMS_EPS) -> np.ndarray:
    xhat = x * (1.0 / np.sqrt((x * x).sum(axis=-1, keepdims=True) / x.shape[-1] + eps))
    return xhat if w is None else xhat * w


@dataclass(frozen=True)
class LayerWeights:
    """Inference snapshot of one decoder layer. The norm gains are folded
    into the following projections, and the query columns carry the
    ``1/sqrt(dh)`` attention scale."""

    wqkv: np.ndarray  # [d, 3d]
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    n_heads: int

    @classmethod
    def from_params(cls, p: dict[str, Tensor], prefix: str, n_heads: int) -> "LayerWeights":
        d = p[prefix + "wq"].shape[0]
        scale = 1.0 / math.sqrt(d // n_heads)
        g = p[prefix + "attn_norm"].data[:, None]
        wqkv = np.concatenate([p[prefix + "wq"].data * scale, p[prefix + "wk"].data, p[prefix + "wv"].data], axis=1)
        return cls(
            np.ascontiguousarray(g * wqkv),
            p[prefix + "wo"].data.copy(),
            p[prefix + "mlp_norm"].data[:, None] * p[prefix + "w1"].data,
            p[prefix + "w2"].data.copy(),
            n_heads,
        )


@dataclass(frozen=True)
class InferCtx:
    """Per-forward constants shared by every layer: rotary tables gathered
    at the row positions and the additive attention bias."""

    cos: np.ndarray
    sin: np.ndarray
    rot: np.ndarray
    bias: np.ndarray
    start: int

    @classmethod
    def build(cls, head_dim: int, positions: np.ndarray, mask: np.ndarray, start: int) -> "InferCtx":
        return cls.with_bias(head_dim, positions, np.where(mask, 0.0, -np.inf), start)

    @classmethod
    def with_bias(cls, head_dim: int, positions: np.ndarray, bias: np.ndarray, start: int) -> "InferCtx":
        cos, sin, rot = _rope_tables(head_dim, 4096)
        return cls(cos[positions], sin[positions], rot, bias, start)


def infer_layer(h: np.ndarray, lw: LayerWeights, ctx: InferCtx, kbuf: np.ndarray, vbuf: np.ndarray) -> np.ndarray:
    """One decoder layer over ``h`` ``[T, d]`` whose rows occupy cache slots
    ``ctx.start ..``. ``kbuf``/``vbuf`` are ``[H, max_seq, dh]``; the new
    keys/values are written in place."""
    t, d = h.shape
    nh = lw.n_heads
    end = ctx.start + t
    qkv = (rms_np(h) @ lw.wqkv).reshape(t, 3 * nh, d // nh).transpose(1, 0, 2)
    qk = qkv[: 2 * nh]
    qk = qk * ctx.cos + (qk @ ctx.rot) * ctx.sin
    kbuf[:, ctx.start : end] = qk[nh:]
    vbuf[:, ctx.start : end] = qkv[2 * nh :]
    s = qk[:nh] @ kbuf[:, :end].transpose(0, 2, 1)
    s += ctx.bias
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    h = h + (s @ vbuf[:, :end]).transpose(1, 0, 2).reshape(t, d) @ lw.wo
    z = rms_np(h) @ lw.w1
    return h + (z / (1.0 + np.exp(-z))) @ lw.w2

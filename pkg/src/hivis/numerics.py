"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the toy models need are provided. A primitive records a
node on the active :class:`Tape` when one is open and at least one input
requires a gradient; otherwise it is a plain numpy call wrapped in a
:class:`Tensor`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    """Immutable-by-convention float64 array; parameters are the exception.

    ``shape`` and a flat row-major ``flat`` view are exposed alongside the
    backing ``data`` array.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Usable as a context manager; while open, primitives record onto it.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class GradMap(dict):
    """Gradients keyed by tensor identity; index with the tensor itself."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(t))

    def get(self, t: Tensor, default=None):
        return dict.get(self, id(t), default)

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs and tape is not None)
    if result.requires_grad:
        tape.nodes.append(Node(op, tuple(inputs), result, backward))
    return result


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse sweep over ``tape`` seeded with 1.0 at ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = GradMap()
    out.update(grads)
    return out


def gradients(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients for ``params``, zero-filled where a param is unreachable."""
    gm = backward(tape, loss)
    return [gm.get(p, np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # flatten leading dims; much faster than numpy's stacked matmul loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", out, (a, b), bw)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and x != y for i, (x, y) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return tuple(res)

    return _record("concat", out, ts, bw)


def concat_last_dim(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after subtracting the row max.

    ``mask`` (boolean, broadcastable) marks admissible entries; masked
    entries get probability exactly 0. Every row needs one admissible entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("row_softmax", p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def log(x: Tensor, floor: float = 1e-12) -> tuple[Tensor, int]:
    """Natural log where exact zeros are clamped to ``floor``.

    Returns the tensor and how many entries were clamped.
    """
    x = as_tensor(x)
    zero = x.data == 0.0
    n_clamped = int(zero.sum())
    safe = np.where(zero, floor, x.data)
    out = np.log(safe)

    def bw(g):
        return (np.where(zero, 0.0, g / safe),)

    return _record("log", out, (x,), bw), n_clamped


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: shapes {x.shape} and {weight.shape} do not conform")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _record("rms_norm", out, (x, weight), bw)


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _record("silu", out, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table shape {table.shape} is not 2-D (ids {ids.shape})")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table shape {table.shape}")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding_lookup", out, (table,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the second-to-last axis."""
    x = as_tensor(x)
    if x.data.ndim < 2 or not (0 <= start <= stop <= x.shape[-2]):
        raise ShapeError(f"slice_rows: shape {x.shape} and range {(start, stop)} do not conform")
    out = x.data[..., start:stop, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        return (gx,)

    return _record("slice_rows", out, (x,), bw)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a 2-D tensor by integer index."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: shape {x.shape} is not 2-D (index {index.shape})")
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("take_rows", out, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {x.shape} and {shape} do not conform") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: shape {x.shape} and axes {axes} do not conform")
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def smooth_l1(a: Tensor, b: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Huber loss with transition at |a-b| = 1, summed over the last axis
    and divided by its width; rows are weighted by ``weights`` and summed."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data - b.data
    ad = np.abs(diff)
    elem = np.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5)
    per_row = elem.mean(axis=-1)
    w = np.ones(per_row.shape) if weights is None else np.broadcast_to(weights, per_row.shape)
    out = np.asarray((per_row * w).sum())
    d = a.shape[-1]

    def bw(g):
        ge = np.where(ad < 1.0, diff, np.sign(diff)) * (w[..., None] / d) * g
        return ge, -ge

    return _record("smooth_l1", out, (a, b), bw)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat_last_dim": concat_last_dim,
    "row_softmax": row_softmax,
    "rms_norm": rms_norm,
    "silu": silu,
    "embedding_lookup": embedding_lookup,
    "slice_rows": slice_rows,
    "mul": mul,
    "sub": sub,
    "log_softmax": log_softmax,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_all,
    "take_rows": take_rows,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` closes over ``params`` (perturbed in place) and returns a scalar.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords``
    a random subset of coordinates per parameter is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = fn()
    grads = gradients(tape, loss, params)
    if fn().item() != loss.item():
        raise NonDeterministicError("fn returned different values at the same point")

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: shapes {p.shape} and {g.shape} do not conform")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"HVS1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray | Tensor]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")  # keeps 0-d shape
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(DTYPE)
            off += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_hash(tensors: Mapping[str, np.ndarray | Tensor]) -> str:
    return hashlib.sha256(encode_checkpoint(tensors)).hexdigest()

"""One-layer drafter over explicit text embeddings, implicit target hidden
states and clamped sequential embeddings.

Every drafter input row is ``e ‖ f ‖ e_seq[i]``. Committed rows (prefill and
verified tokens) always use ``i = 0``; the j-th speculative row of a draft
round uses ``i = min(j, threshold)``. No visual embedding ever enters here:
the drafter's only view of the image is through the target's hidden states.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .layers import InferCtx, LayerWeights, causal_mask, decoder_layer, infer_layer, init_layer, rms_np
from .numerics import Tensor
from .target_model import ContextOverflow, TargetModel


@dataclass(frozen=True)
class DrafterConfig:
    d: int = 64
    d_seq: int = 32
    threshold: int = 3
    K_top: int = 10
    depth: int = 7
    n_paths: int = 60
    H: int = 4
    ffn: int = 128
    max_seq: int = 160
    seed: int = 0
    use_f: bool = True
    use_seq: bool = True

    def __post_init__(self):
        for name in ("threshold", "depth", "n_paths", "K_top"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.H:
            raise ValueError(f"d={self.d} not divisible by H={self.H}")

    @property
    def row_width(self) -> int:
        return 2 * self.d + self.d_seq

    def seq_index(self, step: int) -> int:
        if step < 0:
            raise ValueError("step index must be non-negative")
        return min(step, self.threshold) if self.use_seq else 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InputRow:
    e: np.ndarray
    f: np.ndarray
    seq_index: int
    vector: np.ndarray


class Drafter:
    def __init__(self, config: DrafterConfig, params: dict[str, Tensor], tok_emb: np.ndarray, lm_head: np.ndarray):
        self.config = config
        self.params = params
        # frozen, shared with the target (same underlying arrays)
        self.tok_emb = Tensor(tok_emb, name="tok_emb")
        self.lm_head = Tensor(lm_head, name="lm_head")
        self._snapshot: DrafterWeights | None = None

    @classmethod
    def init(cls, config: DrafterConfig, target: TargetModel) -> "Drafter":
        if config.d != target.config.d:
            raise ValueError(f"drafter width {config.d} != target width {target.config.d}")
        rng = np.random.default_rng([config.seed, 21])
        w = config.row_width
        p = {
            "in_proj": nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(w), (w, config.d)), "in_proj"),
            "seq_emb": nx.parameter(rng.normal(0.0, 0.02, (config.threshold + 1, config.d_seq)), "seq_emb"),
        }
        p.update(init_layer(rng, config.d, config.ffn, 1, "layer."))
        p["final_norm"] = nx.parameter(np.ones(config.d), "final_norm")
        return cls(config, p, target.params["tok_emb"].data, target.params["lm_head"].data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: DrafterConfig, target: TargetModel, sd: dict[str, np.ndarray]) -> "Drafter":
        d = cls.init(config, target)
        missing = set(d.params) - set(sd)
        if missing:
            raise nx.CheckpointError(f"drafter checkpoint lacks {sorted(missing)}")
        d.params = {k: nx.parameter(np.array(sd[k]), k) for k in d.params}
        d.drop_snapshot()
        return d

    def copy(self) -> "Drafter":
        return Drafter(self.config, {k: nx.parameter(t.data.copy(), k) for k, t in self.params.items()},
                       self.tok_emb.data, self.lm_head.data)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_hash(self) -> str:
        return nx.checkpoint_hash({"lm_head": self.lm_head.data})

    # -- rows ----------------------------------------------------------------

    def embed(self, ids) -> np.ndarray:
        return self.tok_emb.data[np.asarray(ids, dtype=np.int64)]

    def assemble_row(self, e: np.ndarray, f: np.ndarray, step_index: int) -> InputRow:
        d = self.config.d
        e, f = np.asarray(e, dtype=np.float64), np.asarray(f, dtype=np.float64)
        if e.shape != (d,) or f.shape != (d,):
            raise nx.ShapeError(f"assemble_row: e {e.shape} and f {f.shape} must both be ({d},)")
        i = self.config.seq_index(step_index)
        f_in = f if self.config.use_f else np.zeros(d)
        vec = np.concatenate([e, f_in, self.params["seq_emb"].data[i]])
        return InputRow(e, f, i, vec)

    def rows(self, e, f, seq_idx) -> Tensor:
        """Differentiable batch of input rows ``e ‖ f ‖ e_seq[idx]``.

        ``e`` and ``f`` are ``[..., n, d]``; ``f`` may be a tape tensor (the
        drafter's own earlier output)."""
        f = nx.as_tensor(f)
        if not self.config.use_f:
            f = Tensor(np.zeros(f.shape))
        e = nx.as_tensor(e)
        idx = np.broadcast_to(np.asarray(seq_idx, dtype=np.int64), e.shape[:-1])
        if not self.config.use_seq:
            idx = np.zeros_like(idx)
        seq = nx.embedding_lookup(self.params["seq_emb"], idx)
        return nx.concat_last_dim(e, f, seq)

    # -- forward ---------------------------------------------------------------

    def forward(
        self,
        rows: Tensor,
        positions: np.ndarray,
        mask: np.ndarray,
        past_k: Tensor | None = None,
        past_v: Tensor | None = None,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """``rows`` ``[B, T, 2d + d_seq]`` → ``(f', logits, keys, values)``."""
        p = self.params
        x = nx.matmul(rows, p["in_proj"])
        h, k, v = decoder_layer(x, p, "layer.", self.config.H, positions, mask, past_k, past_v)
        f = nx.rms_norm(h, p["final_norm"])
        return f, nx.matmul(f, self.lm_head), k, v

    def inference_weights(self) -> "DrafterWeights":
        """Inference snapshot, built on first use. Call :meth:`drop_snapshot`
        after changing ``params`` in place."""
        if self._snapshot is None:
            self._snapshot = self._build_snapshot()
        return self._snapshot

    def drop_snapshot(self) -> None:
        self._snapshot = None

    def _build_snapshot(self) -> "DrafterWeights":
        p, c = self.params, self.config
        w = p["in_proj"].data
        return DrafterWeights(
            w.copy(),
            w[: c.d].copy(),
            w[c.d : 2 * c.d].copy(),
            p["seq_emb"].data @ w[2 * c.d :],
            LayerWeights.from_params(p, "layer.", c.H),
            p["final_norm"].data.copy(),
            self.lm_head.data,
            self.tok_emb.data,
            c,
        )


@dataclass(frozen=True)
class DrafterWeights:
    """Inference snapshot of a :class:`Drafter`, fixed for one session.

    The input projection is also kept split by block, so a row's projection
    is ``e @ e_proj + f @ f_proj + seq_proj[i]`` without assembling it."""

    in_proj: np.ndarray
    e_proj: np.ndarray
    f_proj: np.ndarray
    seq_proj: np.ndarray  # [threshold + 1, d]
    layer: LayerWeights
    final_norm: np.ndarray
    lm_head: np.ndarray
    tok_emb: np.ndarray
    config: DrafterConfig

    def project(self, e: np.ndarray, f: np.ndarray, step_index) -> np.ndarray:
        """Projected rows for ``e``, ``f`` ``[m, d]``; ``step_index`` is
        clamped at the threshold."""
        c = self.config
        x = e @ self.e_proj + self.seq_proj[min(int(step_index), c.threshold) if c.use_seq else 0]
        if c.use_f:
            x += f @ self.f_proj
        return x

    def infer(
        self,
        x: np.ndarray,
        positions: np.ndarray,
        bias: np.ndarray,
        kbuf: np.ndarray,
        vbuf: np.ndarray,
        start: int,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Forward projected rows ``[m, d]`` into cache buffers at slot
        ``start`` under an additive attention ``bias``. Returns
        ``(f', logits)``."""
        ctx = InferCtx.with_bias(self.config.d // self.config.H, positions, bias, start)
        h = infer_layer(x, self.layer, ctx, kbuf, vbuf)
        f = rms_np(h, self.final_norm)
        return f, f @ self.lm_head


@dataclass
class DrafterKVCache:
    """Committed key/value rows plus a scratch extension for speculative rows.

    ``last_hidden`` / ``last_logits`` are the drafter output at the last
    committed row; they seed the next draft round.
    """

    keys: np.ndarray  # [H, max_seq, dh]
    values: np.ndarray
    weights: DrafterWeights
    length: int = 0
    scratch: int = 0
    last_hidden: np.ndarray | None = None
    last_logits: np.ndarray | None = None
    seq_indices: list[int] = field(default_factory=list)

    @classmethod
    def new(cls, drafter: Drafter) -> "DrafterKVCache":
        cfg = drafter.config
        shape = (cfg.H, cfg.max_seq, cfg.d // cfg.H)
        return cls(np.zeros(shape), np.zeros(shape), drafter.inference_weights())

    def discard_scratch(self) -> None:
        self.scratch = 0

    def committed(self) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[:, : self.length], self.values[:, : self.length]


def _run_rows(
    cache: DrafterKVCache,
    x: np.ndarray,
    positions: np.ndarray,
    new_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward ``m`` projected rows after the committed rows and current
    scratch; their keys/values are written into the scratch area.

    ``new_mask`` is ``[m, scratch + m]``; committed rows are always visible.
    """
    m = x.shape[0]
    base = cache.length + cache.scratch
    if base + m > cache.keys.shape[1]:
        raise ContextOverflow(f"drafter context overflow: {base} + {m}")
    bias = np.zeros((m, base + m))
    bias[:, cache.length :][~new_mask] = -np.inf
    f, logits = cache.weights.infer(x, positions, bias, cache.keys, cache.values, base)
    cache.scratch += m
    return f, logits


def _commit(cache: DrafterKVCache, e: np.ndarray, f: np.ndarray) -> None:
    n = e.shape[0]
    if n == 0:
        return
    x = cache.weights.project(e, f, 0)
    cache.discard_scratch()
    hid, logits = _run_rows(cache, x, np.arange(cache.length, cache.length + n), causal_mask(n))
    cache.length += n
    cache.scratch = 0
    cache.seq_indices.extend([0] * n)
    cache.last_hidden, cache.last_logits = hid[-1], logits[-1]


def drafter_prefill(drafter: Drafter, text_embeddings: np.ndarray, target_hiddens: np.ndarray) -> DrafterKVCache:
    """New cache from rows ``e^{t+1} ‖ f^t ‖ e_seq^0`` for ``t = 1 .. n``.

    For a prompt of ``l`` text tokens ``text_embeddings`` holds ``e^2 .. e^l``
    and ``target_hiddens`` holds ``f^1 .. f^{l-1}``: text positions only,
    never the visual prefix. The decode loop passes one extra row, the
    first generated token with ``f^l``.
    """
    e = np.asarray(text_embeddings, dtype=np.float64)
    f = np.asarray(target_hiddens, dtype=np.float64)
    if e.shape != f.shape:
        raise ValueError(f"drafter_prefill: {e.shape[0]} embeddings vs {f.shape[0]} hidden states")
    if e.shape[0] < 1:
        raise ValueError("drafter_prefill needs a text prompt of length >= 2")
    cache = DrafterKVCache.new(drafter)
    _commit(cache, e, f)
    return cache


def drafter_append_verified(drafter: Drafter, cache: DrafterKVCache, e_gen: np.ndarray, f_gen: np.ndarray) -> None:
    """Commit verified ``e_gen ‖ f_gen ‖ e_seq^0`` rows."""
    e_gen = np.asarray(e_gen, dtype=np.float64).reshape(-1, drafter.config.d)
    f_gen = np.asarray(f_gen, dtype=np.float64).reshape(-1, drafter.config.d)
    if e_gen.shape[0] != f_gen.shape[0]:
        raise ValueError(f"append: {e_gen.shape[0]} embeddings vs {f_gen.shape[0]} hidden states")
    _commit(cache, e_gen, f_gen)


def draft_step(drafter: Drafter, cache: DrafterKVCache, pending: list[InputRow]) -> tuple[np.ndarray, np.ndarray]:
    """Output at the last of ``pending`` speculative rows (causal among
    themselves, attending to every committed row). The cache is left as it
    was. With no pending rows, returns the last committed row's output."""
    if not pending:
        if cache.last_hidden is None:
            raise ValueError("draft_step on an empty cache")
        return cache.last_hidden, cache.last_logits
    m = len(pending)
    x = np.stack([r.vector for r in pending]) @ cache.weights.in_proj
    cache.discard_scratch()
    try:
        hid, logits = _run_rows(cache, x, np.arange(cache.length, cache.length + m), causal_mask(m))
    finally:
        cache.discard_scratch()
    return hid[-1], logits[-1]


def draft_rows_masked(
    cache: DrafterKVCache,
    x: np.ndarray,
    depths: np.ndarray,
    scratch_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched speculative forward used for tree expansion.

    ``x`` holds projected rows (:meth:`DrafterWeights.project`). Row ``i``
    sits at depth ``depths[i]`` (position ``length - 1 + depth``)
    and sees committed rows plus the scratch rows flagged in
    ``scratch_mask`` (``[m, scratch + m]``). Rows stay in scratch until
    :meth:`DrafterKVCache.discard_scratch`.
    """
    positions = cache.length - 1 + np.asarray(depths)
    return _run_rows(cache, x, positions, scratch_mask)

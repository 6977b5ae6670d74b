"""The frozen toy target VLM.

A decoder-only transformer reading a visual prefix (a fixed seeded
projection of scene cell features) followed by text tokens. It exposes
full-sequence training forwards and a KV-cached inference forward that
accepts arbitrary ancestor masks, which is what tree verification needs.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from . import vocab
from .dataset import MixedCorpus, QARecord, Record, sequence
from .layers import InferCtx, LayerWeights, causal_mask, decoder_layer, infer_layer, init_layer, rms_np
from .numerics import Tensor
from .scene import SceneSpec

log = logging.getLogger(__name__)

MAX_GRID = 8
_F_SHAPE = 0
_F_COLOR = _F_SHAPE + len(vocab.SHAPES)
_F_ROW = _F_COLOR + len(vocab.COLORS)
_F_COL = _F_ROW + MAX_GRID
_F_EMPTY = _F_COL + MAX_GRID
_F_PAD = _F_EMPTY + 1
SCENE_FEATURES = _F_PAD + 1


class TargetTrainingError(RuntimeError):
    pass


class ContextOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetConfig:
    d: int = 64
    L: int = 4
    H: int = 4
    vocab: int = vocab.VOCAB_SIZE
    v: int = 32
    max_seq: int = 160
    seed: int = 0
    ffn: int = 128

    def __post_init__(self):
        if self.d % self.H:
            raise ValueError(f"d={self.d} not divisible by H={self.H}")
        if (self.d // self.H) % 2:
            raise ValueError("head width must be even for rotary encoding")
        if self.vocab < 16:
            raise ValueError("vocab must be at least 16")
        if self.v < 1:
            raise ValueError("visual prefix length must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def scene_projection(config: TargetConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 7])
    return rng.normal(0.0, 1.0 / math.sqrt(3.0), (SCENE_FEATURES, config.d))


def scene_features(scene: SceneSpec, v: int) -> np.ndarray:
    if scene.rows * scene.cols > v or scene.rows > MAX_GRID or scene.cols > MAX_GRID:
        raise ValueError(f"scene grid {scene.rows}x{scene.cols} does not fit a visual prefix of {v}")
    feats = np.zeros((v, SCENE_FEATURES))
    for i, cell in enumerate(scene.cells):
        feats[i, _F_ROW + i // scene.cols] = 1.0
        feats[i, _F_COL + i % scene.cols] = 1.0
        if cell is None:
            feats[i, _F_EMPTY] = 1.0
        else:
            feats[i, _F_SHAPE + cell[0]] = 1.0
            feats[i, _F_COLOR + cell[1]] = 1.0
    feats[len(scene.cells) :, _F_PAD] = 1.0
    return feats


def encode_scene(scene: SceneSpec, config: TargetConfig) -> Tensor:
    """``[v, d]`` visual embeddings: one row per grid cell, then padding."""
    return Tensor(scene_features(scene, config.v) @ scene_projection(config))


class TargetModel:
    """Parameters plus the pure forward function; shareable across sessions."""

    def __init__(self, config: TargetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._proj = scene_projection(config)
        self._snapshot: TargetWeights | None = None

    @classmethod
    def init(cls, config: TargetConfig) -> "TargetModel":
        rng = np.random.default_rng([config.seed, 11])
        p: dict[str, Tensor] = {
            "tok_emb": nx.parameter(rng.normal(0.0, 1.0, (config.vocab, config.d)), "tok_emb"),
        }
        for i in range(config.L):
            p.update(init_layer(rng, config.d, config.ffn, config.L, f"layers.{i}."))
        p["final_norm"] = nx.parameter(np.ones(config.d), "final_norm")
        p["lm_head"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(config.d), (config.d, config.vocab)), "lm_head")
        return cls(config, p)

    # -- checkpoint plumbing --------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    @classmethod
    def from_state_dict(cls, config: TargetConfig, sd: dict[str, np.ndarray]) -> "TargetModel":
        ref = cls.init(config)
        missing = set(ref.params) - set(sd)
        if missing:
            raise nx.CheckpointError(f"target checkpoint lacks {sorted(missing)}")
        return cls(config, {k: nx.parameter(np.array(sd[k]), k) for k in ref.params})

    def param_hash(self) -> str:
        return nx.checkpoint_hash(self.state_dict())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward ---------------------------------------------------------------

    def embed(self, ids) -> Tensor:
        return nx.embedding_lookup(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def visual(self, scene: SceneSpec) -> np.ndarray:
        return scene_features(scene, self.config.v) @ self._proj

    def prefix_rows(self, scene: SceneSpec | None, ids) -> np.ndarray:
        """Input rows for a (scene, text) prefix: visual rows first."""
        text = self.embed(ids).data
        if scene is None:
            return text
        return np.concatenate([self.visual(scene), text], axis=0)

    def forward(
        self,
        rows: Tensor,
        positions: np.ndarray,
        mask: np.ndarray,
        past: list[tuple[Tensor, Tensor]] | None = None,
    ) -> tuple[Tensor, Tensor, list[tuple[Tensor, Tensor]]]:
        """``rows`` is ``[B, T, d]``. Returns logits, final hidden states
        (post final norm, so ``logits = hidden @ lm_head``) and per-layer
        new keys/values."""
        cfg, p = self.config, self.params
        h = nx.as_tensor(rows)
        new_kv = []
        for i in range(cfg.L):
            pk, pv = past[i] if past is not None else (None, None)
            h, k, v = decoder_layer(h, p, f"layers.{i}.", cfg.H, positions, mask, pk, pv)
            new_kv.append((k, v))
        f = nx.rms_norm(h, p["final_norm"])
        return nx.matmul(f, p["lm_head"]), f, new_kv

    def inference_weights(self) -> "TargetWeights":
        """Inference snapshot, built once. The target is frozen after
        pretraining; code that mutates ``params`` must call
        :meth:`drop_snapshot`."""
        if self._snapshot is None:
            self._snapshot = self._build_snapshot()
        return self._snapshot

    def drop_snapshot(self) -> None:
        self._snapshot = None

    def _build_snapshot(self) -> "TargetWeights":
        c = self.config
        layers = [LayerWeights.from_params(self.params, f"layers.{i}.", c.H) for i in range(c.L)]
        return TargetWeights(layers, self.params["final_norm"].data.copy(), self.params["lm_head"].data.copy(), c.d // c.H)


@dataclass(frozen=True)
class TargetWeights:
    """Frozen inference snapshot of a :class:`TargetModel`."""

    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray
    head_dim: int

    def infer(
        self,
        rows: np.ndarray,
        positions: np.ndarray,
        mask: np.ndarray,
        keys: list[np.ndarray],
        values: list[np.ndarray],
        start: int,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Forward ``rows`` ``[T, d]`` into per-layer cache buffers
        ``[H, max_seq, dh]`` at slot ``start``. Returns ``(logits, hidden)``."""
        ctx = InferCtx.build(self.head_dim, positions, mask, start)
        h = rows
        for lw, k, v in zip(self.layers, keys, values):
            h = infer_layer(h, lw, ctx, k, v)
        f = rms_np(h, self.final_norm)
        return f @ self.lm_head, f


@dataclass
class TargetState:
    """Per-session KV cache over a shared frozen :class:`TargetModel`."""

    model: TargetModel
    keys: list[np.ndarray]
    values: list[np.ndarray]
    weights: TargetWeights
    length: int = 0

    @classmethod
    def new(cls, model: TargetModel) -> "TargetState":
        c = model.config
        shape = (c.H, c.max_seq, c.d // c.H)
        return cls(
            model, [np.zeros(shape) for _ in range(c.L)], [np.zeros(shape) for _ in range(c.L)], model.inference_weights()
        )


def target_forward(
    state: TargetState,
    rows: np.ndarray | Tensor,
    attention_mask: np.ndarray | None = None,
    positions: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``p`` new rows against the cache and append them.

    ``attention_mask`` is ``[p, length + p]``; defaults to causal.
    ``positions`` default to ``length .. length + p - 1``; tree verification
    passes depth-based positions instead. Returns ``(logits, last_hidden)``
    as ``[p, vocab]`` and ``[p, d]`` arrays.
    """
    rows = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
    p_new = rows.shape[0]
    n = state.length
    cfg = state.model.config
    if n + p_new > cfg.max_seq:
        raise ContextOverflow(f"target context overflow: {n} + {p_new} > {cfg.max_seq}")
    if attention_mask is None:
        attention_mask = causal_mask(p_new, n)
    if attention_mask.shape != (p_new, n + p_new):
        raise nx.ShapeError(f"target_forward: mask shape {attention_mask.shape} != {(p_new, n + p_new)}")
    if positions is None:
        positions = np.arange(n, n + p_new)
    logits, hidden = state.weights.infer(
        rows, np.asarray(positions), attention_mask, state.keys, state.values, n
    )
    state.length = n + p_new
    return logits, hidden


def truncate_cache(state: TargetState, new_length: int) -> None:
    if not 0 <= new_length <= state.length:
        raise ValueError(f"cannot truncate cache of length {state.length} to {new_length}")
    state.length = new_length


def keep_cache_rows(state: TargetState, base: int, rows) -> None:
    """Keep positions ``[0, base)`` followed by the absolute positions in
    ``rows`` (ascending), discarding everything else after ``base``."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows[0] < base or rows[-1] >= state.length or np.any(np.diff(rows) <= 0)):
        raise ValueError("kept rows must be strictly ascending within [base, length)")
    if rows.size and rows[-1] == base + rows.size - 1:
        state.length = base + int(rows.size)  # already in place
        return
    for k, v in zip(state.keys, state.values):
        k[:, base : base + rows.size] = k[:, rows]
        v[:, base : base + rows.size] = v[:, rows]
    state.length = base + int(rows.size)


def sample_token(logits_row: np.ndarray, temperature: float, rng: np.random.Generator | None = None) -> tuple[int, np.ndarray]:
    """Greedy (lowest id on ties) at temperature 0, else sample from
    ``softmax(logits / T)``. Returns the token and the distribution used."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if temperature == 0:
        tok = int(np.argmax(logits_row))
        probs = np.zeros_like(logits_row)
        probs[tok] = 1.0
        return tok, probs
    probs = softmax(logits_row / temperature)
    tok = int(rng.choice(probs.size, p=probs))
    return tok, probs


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def generate(
    model: TargetModel,
    scene: SceneSpec | None,
    prompt: list[int],
    max_new: int,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Plain autoregressive decoding, stopping after ``<eos>``."""
    state = TargetState.new(model)
    logits, _ = target_forward(state, model.prefix_rows(scene, prompt))
    emb = model.params["tok_emb"].data
    out: list[int] = []
    while len(out) < max_new:
        tok = int(np.argmax(logits[-1])) if temperature == 0 else sample_token(logits[-1], temperature, rng)[0]
        out.append(tok)
        if tok == vocab.EOS_ID or len(out) == max_new:
            break
        logits, _ = target_forward(state, emb[[tok]])
    return out


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def _pad_batch(records: list[Record]) -> tuple[np.ndarray, np.ndarray]:
    seqs = [sequence(r)[0] for r in records]
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), vocab.PAD_ID, dtype=np.int64)
    valid = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


def lm_loss(model: TargetModel, records: list[Record]) -> Tensor:
    """Mean next-token cross-entropy over the text of a single-modality batch."""
    ids, valid = _pad_batch(records)
    b, t = ids.shape
    rows = model.embed(ids)
    prefix = 0
    if records[0].modality == "multimodal":
        vis = np.stack([model.visual(r.scene) for r in records])
        prefix = vis.shape[1]
        rows = nx.concat([Tensor(vis), rows], axis=1)
    n = prefix + t
    logits, _, _ = model.forward(rows, np.arange(n), causal_mask(n))
    logp = nx.log_softmax(nx.slice_rows(logits, prefix, n - 1))
    weight = np.zeros((b, t - 1, model.config.vocab))
    bi, ti = np.nonzero(valid[:, 1:])
    weight[bi, ti, ids[:, 1:][bi, ti]] = 1.0
    return nx.scale(nx.sum_all(nx.mul(logp, weight)), -1.0 / max(len(bi), 1))


def pretrain_target(
    corpus: MixedCorpus,
    config: TargetConfig,
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-3,
    warmup: int = 100,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> TargetModel:
    """Next-token training of the toy target on the mixed corpus.

    Each step draws a single-modality batch, choosing the modality in
    proportion to the corpus mix.
    """
    model = TargetModel.init(config)
    if steps == 0:
        return model
    by_mod: dict[str, list[Record]] = {"multimodal": [], "text": []}
    for r in corpus.records:
        by_mod[r.modality].append(r)
    mods = [m for m in by_mod if by_mod[m]]
    if not mods:
        raise ValueError("empty corpus")
    share = np.array([len(by_mod[m]) for m in mods], dtype=float)
    share /= share.sum()
    rng = np.random.default_rng([seed, 13])
    params = model.parameters()
    opt = nx.AdamState()
    t0 = time.perf_counter()
    for step in range(steps):
        mod = mods[int(rng.choice(len(mods), p=share))]
        pool = by_mod[mod]
        batch = [pool[i] for i in rng.integers(len(pool), size=batch_size)]
        with nx.Tape() as tape:
            loss = lm_loss(model, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TargetTrainingError(f"target loss diverged at step {step}")
        grads = nx.gradients(tape, loss, params)
        nx.adam_step(params, grads, opt, lr * min(1.0, (step + 1) / warmup))
        model.drop_snapshot()
        if on_step is not None:
            on_step(step, value)
        if step % 200 == 0:
            log.info("target step %d loss %.4f (%.1fs)", step, value, time.perf_counter() - t0)
    return model


def qa_accuracy(model: TargetModel, records: list[QARecord]) -> float:
    """Fraction of color queries whose greedy answer names the right color
    in the answer's color slot."""
    if not records:
        raise ValueError("no records")
    hits = 0
    for r in records:
        prompt = [vocab.BOS_ID, *r.question, vocab.SEP_ID]
        out = generate(model, r.scene, prompt, max_new=len(r.answer) + 1)
        hits += int(len(out) > 3 and out[3] == r.answer[3])
    return hits / len(records)

"""Two-stage drafter training.

Stage 1 is a single teacher-forced pass over rows ``e_{r+1} ‖ f_r ‖ e_seq^0``.
Stage 2 runs multi-step self-feedback rollouts from every start row at once.
Step ``s`` at row ``r`` continues the rollout that began at teacher row
``c = r - s + 1``. It reads the drafter's own step ``s-1`` output from row
``r-1`` with sequential index ``min(s-1, threshold)``, and it attends to
teacher rows ``0..c`` plus its own earlier rollout rows. That is the same
key set a live draft round sees, so training and inference agree row for
row. A rollout stops contributing once the target's greedy token leaves the
drafter's top-K.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataset import Record, sequence
from .drafter import Drafter, DrafterKVCache, draft_step, drafter_prefill
from .layers import causal_mask
from .numerics import Tensor
from .target_model import TargetModel, softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergence(RuntimeError):
    def __init__(self, msg: str, last_good: dict[str, np.ndarray]):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class LossWeights:
    w_reg: float = 1.0
    w_cls: float = 0.1
    w_topK: float = 0.1

    def __post_init__(self):
        ws = (self.w_reg, self.w_cls, self.w_topK)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


@dataclass(frozen=True)
class RolloutConfig:
    N: int = 4
    K: int = 5
    threshold: int = 3

    def __post_init__(self):
        if self.N < 1 or self.K < 1:
            raise ValueError("rollout N and K must be >= 1")


@dataclass
class TrainExample:
    ids: np.ndarray  # token ids x_1 .. x_T
    e: np.ndarray  # [T, d] token embeddings
    f: np.ndarray  # [T, d] target last-layer hidden states at text positions
    greedy: np.ndarray  # [T] greedy[t] = argmax(lm_head f_t), the target's guess for x_{t+1}
    modality: str
    boundary: int  # index of the first answer token

    @property
    def n_rows(self) -> int:
        """Teacher rows ``r = 0 .. T-3``; row r is trained toward ``f_{r+1}``."""
        return max(len(self.ids) - 2, 0)

    def answer_rows(self) -> np.ndarray:
        r = np.arange(self.n_rows)
        return r + 1 >= self.boundary - 1


@dataclass
class StorageReport:
    examples: int
    skipped: int
    stored_bytes: int
    full_dump_bytes: int

    @property
    def ratio(self) -> float:
        return self.stored_bytes / self.full_dump_bytes if self.full_dump_bytes else 0.0


def storage_bytes(text_rows: int, visual_rows: int, d: int) -> tuple[int, int]:
    """(stored, full dump) bytes for one record: embeddings and hidden states
    as f64 plus one i64 greedy token per text row."""
    stored = text_rows * (2 * d * 8 + 8)
    full = (text_rows + visual_rows) * 2 * d * 8 + text_rows * 8
    return stored, full


def precompute_targets(records: list[Record], target: TargetModel, batch_size: int = 64) -> tuple[list[TrainExample], StorageReport]:
    """One frozen target pass per record; keeps text positions only."""
    cfg = target.config
    out: list[TrainExample | None] = [None] * len(records)
    skipped, stored, full = 0, 0, 0
    groups: dict[str, list[int]] = {"multimodal": [], "text": []}
    for i, r in enumerate(records):
        ids, _ = sequence(r)
        v = cfg.v if r.modality == "multimodal" else 0
        if v + len(ids) > cfg.max_seq:
            skipped += 1
            continue
        groups["multimodal" if v else "text"].append(i)
    head = target.params["lm_head"].data
    for kind, idx in groups.items():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            seqs = [sequence(records[i]) for i in chunk]
            rows = [target.prefix_rows(records[i].scene if kind == "multimodal" else None, ids) for i, (ids, _) in zip(chunk, seqs)]
            width = max(len(x) for x in rows)
            batch = np.zeros((len(rows), width, cfg.d))
            for j, x in enumerate(rows):
                batch[j, : len(x)] = x
            _, hid, _ = target.forward(Tensor(batch), np.arange(width), causal_mask(width))
            for j, (i, (ids, boundary)) in enumerate(zip(chunk, seqs)):
                v = len(rows[j]) - len(ids)
                f = hid.data[j, v : v + len(ids)].copy()
                ex = TrainExample(
                    ids=np.asarray(ids, dtype=np.int64),
                    e=target.params["tok_emb"].data[ids].copy(),
                    f=f,
                    greedy=np.argmax(f @ head, axis=-1),
                    modality=records[i].modality,
                    boundary=boundary,
                )
                a, b = storage_bytes(len(ids), v, cfg.d)
                stored, full = stored + a, full + b
                out[i] = ex
    kept = [x for x in out if x is not None]
    return kept, StorageReport(len(kept), skipped, stored, full)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def top_k_mask(p: np.ndarray, K: int) -> np.ndarray:
    """Boolean mask of the K highest-probability entries per row (lowest id
    wins ties)."""
    order = np.argsort(-p, axis=-1, kind="stable")[..., :K]
    m = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(m, order, True, axis=-1)
    return m


def in_top_k(p: np.ndarray, token: np.ndarray, K: int) -> np.ndarray:
    """Whether ``token`` ranks within the top K of ``p`` (rows broadcast).

    Rank counts strictly larger entries plus equal entries with lower ids."""
    token = np.asarray(token)
    pt = np.take_along_axis(p, token[..., None], axis=-1)
    ids = np.arange(p.shape[-1])
    rank = (p > pt).sum(-1) + ((p == pt) & (ids < token[..., None])).sum(-1)
    return rank < K


def dynamic_filter(drafter_probs: np.ndarray, target_token, K: int) -> np.ndarray:
    """Keep a rollout going iff the target's greedy token is in the drafter's
    top-K."""
    return in_top_k(drafter_probs, np.asarray(target_token), K)


@dataclass
class LossOut:
    total: Tensor
    L_reg: float
    L_cls: float
    L_topK: float
    clamped: int
    per_row: np.ndarray  # unweighted total loss of every row


def total_loss(
    f_true: np.ndarray,
    f_pred: Tensor,
    p_target: np.ndarray,
    drafter_logits: Tensor,
    weights: LossWeights,
    K: int,
    row_weights: np.ndarray | None = None,
) -> LossOut:
    """``w_reg·SmoothL1 + w_cls·CE + w_topK·CE restricted to the target's
    top-K``, with rows combined by ``row_weights`` (default: mean)."""
    shape = f_pred.shape[:-1]
    if row_weights is None:
        row_weights = np.full(shape, 1.0 / max(int(np.prod(shape)), 1))
    p_d = nx.row_softmax(drafter_logits)
    logp, clamped = nx.log(p_d, PROB_FLOOR)
    omega = top_k_mask(p_target, K)
    w = row_weights[..., None]
    reg = nx.smooth_l1(f_pred, Tensor(f_true), row_weights)
    cls = nx.scale(nx.sum_all(nx.mul(logp, Tensor(p_target * w))), -1.0)
    topk = nx.scale(nx.sum_all(nx.mul(logp, Tensor(p_target * omega * w))), -1.0)
    total = nx.add(nx.add(nx.scale(reg, weights.w_reg), nx.scale(cls, weights.w_cls)), nx.scale(topk, weights.w_topK))

    diff = np.abs(f_pred.data - f_true)
    reg_rows = np.where(diff < 1.0, 0.5 * diff**2, diff - 0.5).mean(-1)
    cls_rows = -(p_target * logp.data).sum(-1)
    topk_rows = -(p_target * omega * logp.data).sum(-1)
    per_row = weights.w_reg * reg_rows + weights.w_cls * cls_rows + weights.w_topK * topk_rows
    return LossOut(total, float(reg.data), float(cls.data), float(topk.data), clamped, per_row)


# ---------------------------------------------------------------------------
# Batches and stages
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    e_in: np.ndarray  # [B, n, d]  e_{r+1}
    f_in: np.ndarray  # [B, n, d]  f_r
    f_next: np.ndarray  # [B, n, d]  f_{r+1}
    p_next: np.ndarray  # [B, n, V] target distribution at r+1
    greedy_next: np.ndarray  # [B, n]  greedy token at r+1
    loss_rows: np.ndarray  # [B, n] answer rows inside the sequence


def make_batch(examples: list[TrainExample], lm_head: np.ndarray) -> Batch:
    n = max(x.n_rows for x in examples)
    B, d = len(examples), examples[0].e.shape[1]
    e_in, f_in, f_next = np.zeros((B, n, d)), np.zeros((B, n, d)), np.zeros((B, n, d))
    greedy = np.zeros((B, n), dtype=np.int64)
    rows = np.zeros((B, n), dtype=bool)
    for i, x in enumerate(examples):
        m = x.n_rows
        e_in[i, :m] = x.e[1 : m + 1]
        f_in[i, :m] = x.f[:m]
        f_next[i, :m] = x.f[1 : m + 1]
        greedy[i, :m] = x.greedy[1 : m + 1]
        rows[i, :m] = x.answer_rows()
    return Batch(e_in, f_in, f_next, softmax(f_next @ lm_head), greedy, rows)


def _normalized(mask: np.ndarray) -> np.ndarray:
    c = mask.sum()
    return mask / c if c else mask.astype(np.float64)


def _teacher_forward(drafter: Drafter, batch: Batch):
    n = batch.e_in.shape[1]
    rows = drafter.rows(batch.e_in, batch.f_in, np.zeros(n, dtype=np.int64))
    return drafter.forward(rows, np.arange(n), causal_mask(n))


def stage1_step(drafter: Drafter, batch: Batch, weights: LossWeights, K: int = 5) -> LossOut:
    """Teacher-forced single pass; loss averaged over answer rows."""
    f, logits, _, _ = _teacher_forward(drafter, batch)
    return total_loss(batch.f_next, f, batch.p_next, logits, weights, K, _normalized(batch.loss_rows))


def rollout_mask(n: int, s: int) -> np.ndarray:
    """``[n, s·n]`` attention mask of step ``s`` over key blocks
    (teacher, step 2, ..., step s)."""
    m = np.zeros((n, s * n), dtype=bool)
    for r in range(n):
        c = r - s + 1
        if c < 0:
            m[r, (s - 1) * n + r] = True  # not a real rollout row; self only
            continue
        m[r, : c + 1] = True
        for j in range(2, s + 1):
            m[r, (j - 1) * n + c + j - 1] = True
    return m


@dataclass
class Stage2Out:
    loss: Tensor
    step_losses: list[float]
    components: dict[str, float]
    executed: np.ndarray  # [B, n] steps executed by the rollout starting at each row
    per_row: list[np.ndarray]  # per step, [B, n] unweighted row loss (NaN where inactive)
    clamped: int = 0


def stage2_rollout(drafter: Drafter, batch: Batch, rollout: RolloutConfig, weights: LossWeights) -> Stage2Out:
    """All rollouts of a batch in parallel, up to ``rollout.N`` steps.

    A rollout's step-s loss counts only if every earlier filter check
    passed; the failing step itself still counts. Each step's loss is the
    mean over its active answer rows, and the total is the mean over
    executed steps.
    """
    B, n, d = batch.e_in.shape
    thr = min(rollout.threshold, drafter.config.threshold)
    active = np.ones((B, n), dtype=bool)  # indexed by rollout start row
    executed = np.zeros((B, n), dtype=np.int64)
    keys: list[Tensor] = []
    values: list[Tensor] = []
    step_totals: list[Tensor] = []
    step_vals, per_row = [], []
    comp = Counter()
    clamped = 0
    prev = None
    valid_seq = np.zeros((B, n), dtype=bool)
    for i in range(B):
        last = np.flatnonzero(batch.loss_rows[i])
        valid_seq[i, : (last[-1] + 1 if last.size else 0)] = True
    for s in range(1, rollout.N + 1):
        if s == 1:
            f, logits, k, v = _teacher_forward(drafter, batch)
        else:
            shifted = nx.concat([Tensor(np.zeros((B, 1, d))), nx.slice_rows(prev, 0, n - 1)], axis=-2)
            rows = drafter.rows(batch.e_in, shifted, np.full(n, min(s - 1, thr), dtype=np.int64))
            past_k = keys[0] if len(keys) == 1 else nx.concat(keys, axis=2)
            past_v = values[0] if len(values) == 1 else nx.concat(values, axis=2)
            f, logits, k, v = drafter.forward(rows, np.arange(n), rollout_mask(n, s), past_k, past_v)
        keys.append(k)
        values.append(v)
        prev = f
        # row r belongs to the rollout started at c = r - s + 1
        starts = np.arange(n) - s + 1
        ok = starts >= 0
        act = np.zeros((B, n), dtype=bool)
        act[:, ok] = active[:, starts[ok]]
        act &= valid_seq
        rows_in_loss = act & batch.loss_rows
        if not act.any():
            break
        executed[:, starts[ok]] += act[:, ok]
        out = total_loss(batch.f_next, f, batch.p_next, logits, weights, rollout.K, _normalized(rows_in_loss))
        clamped += out.clamped
        if rows_in_loss.any():
            step_totals.append(out.total)
            step_vals.append(float(out.total.data))
            comp.update({"L_reg": out.L_reg, "L_cls": out.L_cls, "L_topK": out.L_topK})
        per_row.append(np.where(act, out.per_row, np.nan))
        member = dynamic_filter(softmax(logits.data), batch.greedy_next, rollout.K)
        fail = act & ~member
        active[:, starts[ok]] &= ~fail[:, ok]
    if not step_totals:
        zero = Tensor(np.array(0.0))
        return Stage2Out(zero, [], {"L_reg": 0.0, "L_cls": 0.0, "L_topK": 0.0}, executed, per_row, clamped)
    total = step_totals[0]
    for t in step_totals[1:]:
        total = nx.add(total, t)
    total = nx.scale(total, 1.0 / len(step_totals))
    comps = {k: comp[k] / len(step_totals) for k in ("L_reg", "L_cls", "L_topK")}
    return Stage2Out(total, step_vals, comps, executed, per_row, clamped)


def rollout_sequential(
    drafter: Drafter,
    example: TrainExample,
    start: int,
    rollout: RolloutConfig,
    weights: LossWeights,
) -> tuple[list[float], int]:
    """One rollout from teacher row ``start`` through the inference cache
    path. Returns the per-step row losses and the number of executed
    steps."""
    lm_head = drafter.lm_head.data
    cache: DrafterKVCache = drafter_prefill(drafter, example.e[1 : start + 2], example.f[: start + 1])
    hidden, logits = cache.last_hidden, cache.last_logits
    losses: list[float] = []
    pending = []
    last = example.n_rows - 1
    thr = min(rollout.threshold, drafter.config.threshold)
    for s in range(1, rollout.N + 1):
        r = start + s - 1
        if r > last:
            break
        if s > 1:
            pending.append(drafter.assemble_row(example.e[r + 1], hidden, min(s - 1, thr)))
            hidden, logits = draft_step(drafter, cache, pending)
        p_t = softmax(example.f[r + 1] @ lm_head)
        out = total_loss(example.f[r + 1][None], Tensor(hidden[None]), p_t[None], Tensor(logits[None]), weights, rollout.K)
        losses.append(float(out.per_row[0]))
        if not dynamic_filter(softmax(logits), example.greedy[r + 1], rollout.K):
            break
    return losses, len(losses)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 4
    stage2_epochs: int = 2
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 30
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    drafter: Drafter
    stage1: Drafter
    curves: list[dict]


def _batches(examples: list[TrainExample], size: int, rng: np.random.Generator) -> list[list[TrainExample]]:
    order = rng.permutation(len(examples))
    return [[examples[i] for i in order[s : s + size]] for s in range(0, len(order), size)]


def train(
    drafter: Drafter,
    stage1_examples: list[TrainExample],
    stage2_examples: list[TrainExample],
    config: TrainConfig,
    curves_path: str | Path | None = None,
    probe: Callable[[Drafter], float] | None = None,
) -> TrainResult:
    """Stage-1 epochs, then stage-2 epochs, one Adam state throughout.

    Returns the final drafter, a copy taken right after stage 1 and the
    per-epoch curve records (also appended to ``curves_path`` as JSON
    lines)."""
    rng = np.random.default_rng([config.seed, 99])
    head_hash = drafter.head_hash()
    params = drafter.parameters()
    state = nx.AdamState()
    curves: list[dict] = []
    lm_head = drafter.lm_head.data
    stage1_copy = drafter.copy()
    fh = open(curves_path, "a") if curves_path is not None else None
    try:
        plan = [("stage1", e) for e in range(config.stage1_epochs)] + [("stage2", e) for e in range(config.stage2_epochs)]
        for stage, epoch in plan:
            pool = stage1_examples if stage == "stage1" else stage2_examples
            sums, hist, nb, clamped = Counter(), Counter(), 0, 0
            for bi, exs in enumerate(_batches(pool, config.batch_size, rng)):
                batch = make_batch(exs, lm_head)
                last_good = {k: t.data.copy() for k, t in drafter.params.items()}
                with nx.Tape() as tape:
                    if stage == "stage1":
                        out = stage1_step(drafter, batch, config.weights, config.rollout.K)
                        loss, comps = out.total, {"L_reg": out.L_reg, "L_cls": out.L_cls, "L_topK": out.L_topK}
                        clamped += out.clamped
                    else:
                        o2 = stage2_rollout(drafter, batch, config.rollout, config.weights)
                        loss, comps = o2.loss, o2.components
                        clamped += o2.clamped
                        starts = o2.executed[o2.executed > 0]
                        hist.update(int(x) for x in starts)
                if not math.isfinite(float(loss.data)):
                    raise TrainingDivergence(f"{stage} epoch {epoch} batch {bi}: loss is {float(loss.data)}", last_good)
                if not loss.requires_grad:
                    continue
                grads = nx.gradients(tape, loss, params)
                if not all(np.isfinite(g).all() for g in grads):
                    raise TrainingDivergence(f"{stage} epoch {epoch} batch {bi}: non-finite gradient", last_good)
                lr = config.lr * min(1.0, (state.step + 1) / max(config.warmup, 1))
                nx.adam_step(params, grads, state, lr)
                drafter.drop_snapshot()
                sums.update(comps)
                sums["loss"] += float(loss.data)
                nb += 1
            if drafter.head_hash() != head_hash:
                raise AssertionError("shared LM head changed during training")
            rec = {"stage": stage, "epoch": epoch}
            rec.update({k: sums[k] / max(nb, 1) for k in ("loss", "L_reg", "L_cls", "L_topK")})
            rec["truncation_hist"] = {str(k): hist[k] for k in sorted(hist)}
            rec["clamped"] = clamped
            rec["probe_tau"] = probe(drafter) if probe is not None else None
            curves.append(rec)
            log.info("%s epoch %d loss %.4f probe %s", stage, epoch, rec["loss"], rec["probe_tau"])
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if stage == "stage1" and epoch == config.stage1_epochs - 1:
                stage1_copy = drafter.copy()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(drafter, stage1_copy, curves)

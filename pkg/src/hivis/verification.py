"""Lossless verification and the speculative decode loop.

Target cache invariant between rounds: it holds every committed token except
the newest one (the last bonus/correction token). That token becomes the
root of the next draft tree, so each round's single target pass evaluates
the root together with all drafted nodes.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import vocab
from .drafter import Drafter, drafter_append_verified, drafter_prefill
from .scene import SceneSpec
from .target_model import (
    ContextOverflow,
    TargetModel,
    TargetState,
    keep_cache_rows,
    sample_token,
    softmax,
    target_forward,
    truncate_cache,
)
from .tree import TokenTree, build_tree, draft_chain


class VerificationError(ValueError):
    pass


@dataclass(frozen=True)
class TreeConfig:
    k: int = 10
    depth: int = 7
    n_paths: int = 60

    def __post_init__(self):
        if min(self.k, self.depth, self.n_paths) < 1:
            raise ValueError("tree k, depth and n_paths must all be >= 1")


@dataclass
class RoundResult:
    accepted_draft_count: int
    committed_tokens: list[int]
    node_count: int = 0
    target_forward_count: int = 1
    wall_times: dict[str, float] = field(default_factory=dict)
    prefill: bool = False

    def __post_init__(self):
        if len(self.committed_tokens) != self.accepted_draft_count + 1:
            raise VerificationError(
                f"round commits {len(self.committed_tokens)} tokens for {self.accepted_draft_count} accepted drafts"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodeStats:
    rounds: list[RoundResult] = field(default_factory=list)
    total_tokens: int = 0
    wall_time: float = 0.0
    baseline_wall_time: float | None = None
    target_prefill_rows: int = 0
    drafter_prefill_rows: int = 0
    truncated: bool = False

    def add(self, r: RoundResult) -> None:
        self.rounds.append(r)
        self.total_tokens += len(r.committed_tokens)

    def verification_rounds(self) -> list[RoundResult]:
        return [r for r in self.rounds if not r.prefill]


@dataclass(frozen=True)
class Metrics:
    tau_committed: float
    tau_accepted: float
    speedup: float | None
    prefill_ratio: float


def verify_greedy(tree: TokenTree, target_logits: np.ndarray) -> tuple[list[int], int]:
    """Follow target argmax choices down the tree.

    Returns the accepted node indices (root excluded) and the correction or
    bonus token, i.e. the target argmax at the last accepted node."""
    kids = dict(zip(zip(tree.parents[1:].tolist(), tree.tokens[1:].tolist()), range(1, len(tree))))
    best_all = np.argmax(target_logits, axis=-1).tolist()
    cur, path = 0, []
    while True:
        best = best_all[cur]
        nxt = kids.get((cur, best))
        if nxt is None:
            return path, best
        path.append(nxt)
        cur = nxt


def verify_sampled(
    chain: list[int],
    q_dists: list[np.ndarray],
    p_dists: list[np.ndarray],
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Speculative sampling over a drafted chain.

    ``p_dists`` has one more entry than ``chain``: the target's distribution
    after the whole chain, used for the bonus token."""
    if len(p_dists) != len(chain) + 1 or len(q_dists) != len(chain):
        raise VerificationError("need len(q) == len(chain) and len(p) == len(chain) + 1")
    for i, x in enumerate(chain):
        p, q = p_dists[i], q_dists[i]
        if q[x] <= 0.0:
            raise VerificationError(f"drafted token {x} at position {i} has zero drafter probability")
        if rng.random() < p[x] / q[x]:
            continue
        res = residual_distribution(p, q)
        return i, int(rng.choice(res.size, p=res))
    p = p_dists[-1]
    return len(chain), int(rng.choice(p.size, p=p))


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    r = np.maximum(p - q, 0.0)
    z = r.sum()
    if z <= 0.0:
        raise VerificationError("residual is empty: p == q, rejection impossible")
    return r / z


def one_step_output_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Closed-form law of the token emitted at the first drafted position:
    accepted draft mass plus rejection mass times the residual."""
    accept = q * np.minimum(1.0, np.divide(p, q, out=np.zeros_like(p), where=q > 0))
    reject = 1.0 - accept.sum()
    if reject <= 0.0:
        return accept
    return accept + reject * residual_distribution(p, q)


# -- decode loop -------------------------------------------------------------------


def _greedy_round(target, state, drafter, dcache, root, tree_cfg, base, times):
    t0 = time.perf_counter()
    tree = build_tree(dcache, root, tree_cfg.k, tree_cfg.depth, tree_cfg.n_paths)
    room = target.config.max_seq - base
    if len(tree) > room:
        tree = tree.prefix(room)
    t1 = time.perf_counter()
    n = len(tree)
    mask = np.ones((n, base + n), dtype=bool)
    mask[:, base:] = tree.attention_mask()
    emb = target.params["tok_emb"].data
    logits, hidden = target_forward(state, emb[tree.tokens], mask, base + tree.depths)
    path, bonus = verify_greedy(tree, logits)
    t2 = time.perf_counter()
    kept = [0] + path
    keep_cache_rows(state, base, [base + i for i in kept])
    accepted = tree.tokens[path].tolist()
    drafter_append_verified(drafter, dcache, emb[accepted + [bonus]], hidden[kept])
    t3 = time.perf_counter()
    times.update(draft=t1 - t0, verify=t2 - t1, update=t3 - t2)
    return accepted, bonus, n


def _sampled_round(target, state, drafter, dcache, root, tree_cfg, base, temperature, rng, times):
    t0 = time.perf_counter()
    depth = min(tree_cfg.depth, target.config.max_seq - base - 1)
    chain, q = draft_chain(drafter, dcache, depth, temperature, rng) if depth > 0 else ([], [])
    t1 = time.perf_counter()
    emb = target.params["tok_emb"].data
    logits, hidden = target_forward(state, emb[[root] + chain])
    p = [softmax(row / temperature) for row in logits]
    n_acc, nxt = verify_sampled(chain, q, p, rng)
    t2 = time.perf_counter()
    truncate_cache(state, base + n_acc + 1)
    accepted = chain[:n_acc]
    drafter_append_verified(drafter, dcache, emb[accepted + [nxt]], hidden[: n_acc + 1])
    t3 = time.perf_counter()
    times.update(draft=t1 - t0, verify=t2 - t1, update=t3 - t2)
    return accepted, nxt, len(chain) + 1


def decode_loop(
    prompt: list[int],
    scene: SceneSpec | None,
    target: TargetModel,
    drafter: Drafter,
    tree_cfg: TreeConfig,
    temperature: float = 0.0,
    max_new: int = 32,
    rng: np.random.Generator | None = None,
) -> tuple[list[int], DecodeStats]:
    """Speculative decoding: target prefill, then draft/verify rounds until
    ``max_new`` tokens or ``<eos>``."""
    if len(prompt) < 2:
        raise ValueError("prompt must have at least 2 tokens")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    stats = DecodeStats()
    start = time.perf_counter()

    t0 = time.perf_counter()
    state = TargetState.new(target)
    rows = target.prefix_rows(scene, prompt)
    logits, hidden = target_forward(state, rows)
    x, _ = sample_token(logits[-1], temperature, rng)
    text_f = hidden[rows.shape[0] - len(prompt):]
    t1 = time.perf_counter()
    # prefill rows t = 1 .. l-1 and the first verified row (e(x) ‖ f^l) in one causal pass
    dcache = drafter_prefill(drafter, drafter.embed(prompt[1:] + [x]), text_f)
    t2 = time.perf_counter()
    stats.target_prefill_rows = rows.shape[0]
    stats.drafter_prefill_rows = dcache.length
    stats.add(RoundResult(0, [x], wall_times={"target_prefill": t1 - t0, "drafter_prefill": t2 - t1}, prefill=True))
    out = [x]

    while len(out) < max_new and out[-1] != vocab.EOS_ID:
        base = state.length
        if base + 1 > target.config.max_seq:
            stats.truncated = True
            break
        times: dict[str, float] = {}
        try:
            if temperature == 0:
                accepted, bonus, n = _greedy_round(target, state, drafter, dcache, x, tree_cfg, base, times)
            else:
                accepted, bonus, n = _sampled_round(
                    target, state, drafter, dcache, x, tree_cfg, base, temperature, rng, times
                )
        except ContextOverflow:
            stats.truncated = True
            break
        committed = _clip(accepted + [bonus], max_new - len(out))
        stats.add(RoundResult(len(committed) - 1, committed, n, wall_times=times))
        out.extend(committed)
        x = bonus

    stats.wall_time = time.perf_counter() - start
    return out, stats


def _clip(tokens: list[int], room: int) -> list[int]:
    """A round's tokens up to ``<eos>`` and the ``max_new`` budget. Drafts
    verified past either point are never emitted, so they are not counted."""
    if vocab.EOS_ID in tokens:
        tokens = tokens[: tokens.index(vocab.EOS_ID) + 1]
    return tokens[:room]


def compute_metrics(stats: DecodeStats | list[DecodeStats]) -> Metrics:
    """τ over verification rounds (the prefill round is not a verification;
    runs that end at prefill fall back to counting it), speedup against the
    recorded baseline time, and drafter/target prefill row ratio."""
    runs = [stats] if isinstance(stats, DecodeStats) else list(stats)
    rounds = [r for s in runs for r in s.verification_rounds()]
    if not rounds:
        rounds = [r for s in runs for r in s.rounds]
    if not rounds:
        raise ValueError("no rounds recorded")
    tau_c = float(np.mean([r.accepted_draft_count + 1 for r in rounds]))
    tau_a = float(np.mean([r.accepted_draft_count for r in rounds]))
    spec = sum(s.wall_time for s in runs)
    base = [s.baseline_wall_time for s in runs]
    speedup = None if any(b is None for b in base) or spec <= 0 else sum(base) / spec
    t_rows = sum(s.target_prefill_rows for s in runs)
    ratio = sum(s.drafter_prefill_rows for s in runs) / t_rows if t_rows else 0.0
    return Metrics(tau_c, tau_a, speedup, ratio)

"""Token-tree drafting: fixed-depth expansion with per-level top-k pruning,
then selection of the highest-scoring candidates into one verification tree.

Candidates are root-to-node paths. Selection ranks every node in the
expansion pool by ``(-path_score, token path)``. A parent never scores below
its child and its path is a prefix of the child's, so it always sorts first.
The selected set is therefore closed under ancestors and flattens into a tree
without extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drafter import Drafter, DrafterKVCache, draft_rows_masked, draft_step
from .target_model import softmax

BRUTE_FORCE_BUDGET = 100_000


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class TreeNode:
    token: int
    parent: int  # -1 for the root
    prob: float
    score: float
    depth: int
    path: tuple[int, ...]  # drafted tokens from the root (root excluded)


@dataclass
class TokenTree:
    """Flattened verification tree. Node 0 is the root (the last committed
    token); parents always precede children."""

    tokens: np.ndarray
    parents: np.ndarray
    probs: np.ndarray
    scores: np.ndarray
    depths: np.ndarray
    hidden: np.ndarray  # drafter f' per node; zero rows for unexpanded leaves
    ancestors: np.ndarray  # strict: ancestors[i, j] iff j is a proper ancestor of i

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def nodes(self) -> list[TreeNode]:
        out: list[TreeNode] = []
        for i in range(len(self)):
            p = int(self.parents[i])
            path = () if p < 0 else out[p].path + (int(self.tokens[i]),)
            out.append(TreeNode(int(self.tokens[i]), p, float(self.probs[i]), float(self.scores[i]), int(self.depths[i]), path))
        return out

    @property
    def paths(self) -> list[tuple[int, ...]]:
        """Root-to-leaf drafted token paths."""
        nodes = self.nodes
        inner = set(int(p) for p in self.parents[1:])
        return sorted(n.path for i, n in enumerate(nodes) if i and i not in inner)

    def attention_mask(self) -> np.ndarray:
        return self.ancestors | np.eye(len(self), dtype=bool)

    def children(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.parents == i)]

    def selected(self) -> set[tuple[int, ...]]:
        """Drafted token paths of every non-root node."""
        return {n.path for n in self.nodes[1:]}

    def outline(self) -> str:
        lines = []

        def walk(i):
            lines.append(f"{'  ' * int(self.depths[i])}{int(self.tokens[i])} p={self.probs[i]:.6g} s={self.scores[i]:.6g}")
            for c in self.children(i):
                walk(c)

        walk(0)
        return "\n".join(lines)

    def prefix(self, m: int) -> "TokenTree":
        """The first ``m`` nodes, still a tree since parents come first."""
        return TokenTree(
            self.tokens[:m], self.parents[:m], self.probs[:m], self.scores[:m], self.depths[:m],
            self.hidden[:m], self.ancestors[:m, :m].copy(),
        )


def top_k(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest positive entries, lowest id first on ties."""
    order = np.argsort(-probs, kind="stable")[:k]
    return [int(i) for i in order if probs[i] > 0.0]


def expand_level(probs: np.ndarray, scores: np.ndarray, k: int):
    """Rank the top-k children of every frontier row.

    ``probs`` is ``[m, V]`` (one drafter distribution per frontier node) and
    ``scores`` the frontier path scores. Returns ``(token, parent row, prob,
    path score)`` arrays over all ``<= m·k`` candidates ordered by
    ``(-score, token, parent row)``; the first ``k`` are the next frontier.
    Zero-probability children are dropped."""
    m = probs.shape[0]
    if k == 1:
        top = probs.argmax(axis=1)[:, None]  # first maximum, i.e. lowest id
    else:
        top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    pk = probs[np.arange(m)[:, None], top]
    tok, pr = top.ravel(), pk.ravel()
    sc = (scores[:, None] * pk).ravel()
    row = np.repeat(np.arange(m), top.shape[1])
    order = np.lexsort((tok, -sc))  # stable, so equal keys stay in row order
    order = order[pr[order] > 0.0]
    return tok[order], row[order], pr[order], sc[order]


def build_tree(cache: DrafterKVCache, root_token: int, k: int, depth: int, n_paths: int) -> TokenTree:
    """Draft a token tree rooted at the last committed token.

    The root's children come from the drafter output already held at the
    cache's last committed row. Each level runs the frontier's rows as one
    scratch batch (a row sees only its own ancestors), takes each frontier
    node's top-k children and keeps the best ``k`` of those as the next
    frontier. The final tree holds the ``n_paths`` best nodes of the whole
    pool by ``(-score, token path)``. Speculative rows are discarded on
    return.

    The result equals the exact top-``n_paths`` over all paths only while
    ``n_paths <= k + 2``: beyond that, a node whose parent fell off the
    frontier can outrank the pool's weakest nodes.
    """
    if cache.last_logits is None:
        raise ValueError("build_tree needs a prefilled drafter cache")
    depth = min(depth, n_paths)  # n ancestor-closed nodes reach depth n at most
    if k == 1:
        return _chain_tree(cache, root_token, depth)
    return _pool_tree(cache, root_token, k, depth, n_paths)


def _pool_tree(cache: DrafterKVCache, root_token: int, k: int, depth: int, n_paths: int) -> TokenTree:
    w = cache.weights
    cap = 1 + k + (depth - 1) * k * k
    tokens = np.zeros(cap, dtype=np.int64)
    parents = np.full(cap, -1)
    probs = np.ones(cap)
    scores = np.ones(cap)
    depths = np.zeros(cap, dtype=np.int64)
    paths = np.full((cap, depth), -1)  # -1 padding keeps lexicographic order = tuple order
    hidden = np.zeros((cap, w.config.d))
    visible = np.zeros((cap, max(1, (depth - 1) * k)), dtype=bool)  # scratch rows each node's row sees
    tokens[0] = root_token
    hidden[0] = cache.last_hidden

    t1, _, p1, _ = expand_level(softmax(cache.last_logits)[None], scores[:1], k)
    n = 1 + len(t1)
    front = np.arange(1, n)
    tokens[front], parents[front], probs[front], scores[front] = t1, 0, p1, p1
    depths[front] = 1
    paths[front, 0] = t1

    cache.discard_scratch()
    try:
        for level in range(1, depth):
            m = len(front)
            if m == 0:
                break
            start = cache.scratch
            par = parents[front]
            x = w.project(w.tok_emb[tokens[front]], hidden[par], level)
            visible[front] = visible[par]
            visible[front, start + np.arange(m)] = True
            h, logits = draft_rows_masked(cache, x, np.full(m, level), visible[front, : start + m])
            hidden[front] = h
            tok, row, pr, sc = expand_level(softmax(logits), scores[front], k)
            idx = np.arange(n, n + len(tok))
            src = front[row]
            tokens[idx], parents[idx], probs[idx], scores[idx] = tok, src, pr, sc
            depths[idx] = level + 1
            paths[idx] = paths[src]
            paths[idx, level] = tok
            n += len(tok)
            front = idx[:k]
    finally:
        cache.discard_scratch()

    keys = np.vstack([paths[1:n, ::-1].T, -scores[1:n]])
    sel = np.concatenate([[0], np.lexsort(keys)[:n_paths] + 1])
    remap = np.full(n, -1)
    remap[sel] = np.arange(len(sel))
    par = remap[parents[sel]]
    par[0] = -1
    p, dep = paths[sel], depths[sel]
    anc = ((p[:, None] == p[None]) | (p[None] < 0)).all(axis=-1) & (dep[None] < dep[:, None])
    return TokenTree(tokens[sel], par, probs[sel], scores[sel], dep, hidden[sel], anc)


def _chain_tree(cache: DrafterKVCache, root_token: int, depth: int) -> TokenTree:
    """``build_tree`` for ``k = 1``: the tree is the greedy chain and every
    node is selected, since scores never increase along a path."""
    w = cache.weights
    tokens, probs, hidden = [root_token], [1.0], [cache.last_hidden]
    h, logits = cache.last_hidden, cache.last_logits
    cache.discard_scratch()
    try:
        for level in range(1, depth + 1):
            # argmax over logits picks the same (lowest-id) token as over the
            # softmax, whose value there is exactly 1 / sum(exp(z - max))
            tok = int(logits.argmax())
            tokens.append(tok)
            probs.append(float(1.0 / np.exp(logits - logits[tok]).sum()))
            if level == depth:
                break
            x = w.project(w.tok_emb[tok][None], h[None], level)
            hs, ls = draft_rows_masked(cache, x, np.array([level]), np.ones((1, level), dtype=bool))
            h, logits = hs[0], ls[0]
            hidden.append(h)
    finally:
        cache.discard_scratch()
    n = len(tokens)
    hid = np.zeros((n, w.config.d))
    hid[: len(hidden)] = hidden
    pr = np.array(probs)
    return TokenTree(
        np.array(tokens), np.arange(-1, n - 1), pr, np.cumprod(pr), np.arange(n), hid,
        np.tri(n, k=-1, dtype=bool),
    )


def draft_chain(
    drafter: Drafter,
    cache: DrafterKVCache,
    depth: int,
    temperature: float,
    rng: np.random.Generator,
) -> tuple[list[int], list[np.ndarray]]:
    """Sample a chain of ``depth`` tokens from the drafter at ``temperature``.

    Returns the tokens and the distribution each was drawn from."""
    tokens, dists = [], []
    hidden, logits = cache.last_hidden, cache.last_logits
    pending = []
    for j in range(1, depth + 1):
        q = softmax(logits / temperature)
        tok = int(rng.choice(q.size, p=q))
        tokens.append(tok)
        dists.append(q)
        if j == depth:
            break
        pending.append(drafter.assemble_row(drafter.embed(tok), hidden, j))
        hidden, logits = draft_step(drafter, cache, pending)
    return tokens, dists


# -- exhaustive oracle ---------------------------------------------------------


@dataclass(frozen=True)
class BrutePath:
    tokens: tuple[int, ...]
    probs: tuple[float, ...]

    @property
    def score(self) -> float:
        s = 1.0
        for p in self.probs:
            s *= p
        return s


def brute_force_paths(drafter: Drafter, cache: DrafterKVCache, k: int, depth: int) -> list[BrutePath]:
    """Every top-k-restricted path of length ``depth``, each prefix evaluated
    with its own independent draft pass, sorted by ``(-score, tokens)``."""
    if k ** depth > BRUTE_FORCE_BUDGET:
        raise BudgetExceeded(f"k^depth = {k ** depth} exceeds budget {BRUTE_FORCE_BUDGET}")
    out: list[BrutePath] = []

    def rec(pending, hidden, logits, toks, probs):
        p = softmax(logits)
        for tok in top_k(p, k):
            t2, p2 = toks + (tok,), probs + (float(p[tok]),)
            if len(t2) == depth:
                out.append(BrutePath(t2, p2))
                continue
            rows = pending + [drafter.assemble_row(drafter.embed(tok), hidden, len(t2))]
            h, lg = draft_step(drafter, cache, rows)
            rec(rows, h, lg, t2, p2)

    rec([], cache.last_hidden, cache.last_logits, (), ())
    out.sort(key=lambda b: (-b.score, b.tokens))
    return out


def rank_prefixes(paths: list[BrutePath], n: int) -> list[tuple[int, ...]]:
    """Top ``n`` distinct prefixes of ``paths`` by ``(-score, tokens)``."""
    scores: dict[tuple[int, ...], float] = {}
    for b in paths:
        s = 1.0
        for j, p in enumerate(b.probs):
            s *= p
            scores[b.tokens[: j + 1]] = s
    return sorted(scores, key=lambda t: (-scores[t], t))[:n]

import math

import numpy as np
import pytest

from hivis import dataset as ds
from hivis import numerics as nx
from hivis.drafter import Drafter, DrafterConfig, draft_step, drafter_prefill
from hivis.numerics import Tensor
from hivis.target_model import TargetState, softmax, target_forward
from hivis.training import (
    LossWeights,
    RolloutConfig,
    TrainConfig,
    TrainExample,
    dynamic_filter,
    in_top_k,
    make_batch,
    precompute_targets,
    rollout_sequential,
    stage1_step,
    stage2_rollout,
    storage_bytes,
    total_loss,
    train,
)

W = LossWeights()


def _example(drafter, seed, T=9):
    """Synthetic example whose every row is an answer row."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, drafter.lm_head.shape[1], T)
    f = rng.normal(size=(T, drafter.config.d))
    greedy = rng.integers(0, drafter.lm_head.shape[1], T)
    return TrainExample(ids, drafter.embed(ids), f, greedy, "text", 1)


def _rollout_probs(drafter, ex, start, N, thr):
    """Drafter distribution at each step of the rollout from ``start``,
    computed through the inference cache."""
    cache = drafter_prefill(drafter, ex.e[1 : start + 2], ex.f[: start + 1])
    hidden, logits = cache.last_hidden, cache.last_logits
    out, pending = [softmax(logits)], []
    for s in range(2, N + 1):
        r = start + s - 1
        pending.append(drafter.assemble_row(ex.e[r + 1], hidden, min(s - 1, thr)))
        hidden, logits = draft_step(drafter, cache, pending)
        out.append(softmax(logits))
    return out


def _ranked(p, rank):
    return int(np.argsort(-p, kind="stable")[rank - 1])


# -- losses ------------------------------------------------------------------------


def test_alignment_fixed_point(tiny_drafter):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 8))
    head = tiny_drafter.lm_head.data
    p = softmax(f @ head)
    out = total_loss(f, Tensor(f), p, Tensor(f @ head), W, 5)
    assert out.L_reg == 0.0
    assert out.L_cls == pytest.approx(float(-(p * np.log(p)).sum(-1).mean()), rel=1e-12)


def test_smooth_l1_closed_forms():
    f = np.random.default_rng(1).normal(size=(2, 4))
    assert nx.smooth_l1(Tensor(f), Tensor(f)).item() == 0.0
    out = total_loss(f, Tensor(f + 0.5), np.full((2, 8), 1 / 8), Tensor(np.zeros((2, 8))), W, 3)
    assert out.L_reg == pytest.approx(0.125)


def test_classification_losses_vanish_on_matching_onehots():
    p = np.zeros((1, 8))
    p[0, 2] = 1.0
    logits = np.zeros((1, 8))
    logits[0, 2] = 1e4
    out = total_loss(np.zeros((1, 4)), Tensor(np.zeros((1, 4))), p, Tensor(logits), W, 3)
    assert out.L_cls == 0.0 and out.L_topK == 0.0


def test_topk_loss_uniform():
    out = total_loss(np.zeros((1, 4)), Tensor(np.zeros((1, 4))), np.full((1, 8), 1 / 8), Tensor(np.zeros((1, 8))), W, 3)
    assert out.L_topK == pytest.approx(3 / 8 * math.log(8), rel=1e-12)


def test_loss_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0)


def test_stage1_gradients(tiny_drafter):
    d = tiny_drafter.copy()
    batch = make_batch([_example(d, 2, T=4)], d.lm_head.data)
    assert nx.grad_check(lambda: stage1_step(d, batch, W, 5).total, d.parameters()) < 1e-4


# -- dynamic filter ---------------------------------------------------------------


def test_top_k_membership_boundaries():
    p = np.array([0.1, 0.3, 0.05, 0.3, 0.25])
    assert in_top_k(p, np.array(3), 2) and not in_top_k(p, np.array(4), 2)  # tie at 0.3: lower id first
    assert dynamic_filter(p, 4, 3) and not dynamic_filter(p, 0, 3)


@pytest.mark.parametrize("rank, steps", [(3, 5), (5, 5), (6, 2)])
def test_rank_at_step_two_controls_continuation(tiny_drafter, rank, steps):
    d, K, N = tiny_drafter, 5, 5
    ex = _example(d, 3)
    probs = _rollout_probs(d, ex, 0, N, d.config.threshold)
    for s, p in enumerate(probs, start=1):
        ex.greedy[s] = _ranked(p, rank if s == 2 else 1)
    out = stage2_rollout(d, make_batch([ex], d.lm_head.data), RolloutConfig(N=N, K=K), W)
    assert out.executed[0, 0] == steps
    seq_losses, n = rollout_sequential(d, ex, 0, RolloutConfig(N=N, K=K), W)
    assert n == steps


def test_truncation_keeps_failing_step_loss(tiny_drafter):
    d, K, N = tiny_drafter, 5, 5
    ex = _example(d, 4)
    probs = _rollout_probs(d, ex, 0, N, d.config.threshold)
    for s, p in enumerate(probs, start=1):
        ex.greedy[s] = _ranked(p, K + 1 if s == 4 else 1)
    out = stage2_rollout(d, make_batch([ex], d.lm_head.data), RolloutConfig(N=N, K=K), W)
    assert out.executed[0, 0] == 4
    assert all(np.isfinite(out.per_row[s - 1][0, s - 1]) for s in range(1, 5))
    assert len(out.per_row) < 5 or np.isnan(out.per_row[4][0, 4])


def test_all_steps_run_when_drafter_agrees(tiny_drafter):
    d, N = tiny_drafter, 4
    ex = _example(d, 5)
    for s, p in enumerate(_rollout_probs(d, ex, 0, N, d.config.threshold), start=1):
        ex.greedy[s] = _ranked(p, 1)
    out = stage2_rollout(d, make_batch([ex], d.lm_head.data), RolloutConfig(N=N, K=1), W)
    assert out.executed[0, 0] == N


def test_larger_k_never_runs_fewer_steps(tiny_drafter):
    exs = [_example(tiny_drafter, 10 + i) for i in range(3)]
    batch = make_batch(exs, tiny_drafter.lm_head.data)
    prev = None
    for K in range(1, 17):
        ex = stage2_rollout(tiny_drafter, batch, RolloutConfig(N=4, K=K), W).executed
        if prev is not None:
            assert (ex >= prev).all()
        prev = ex
    assert (prev == np.minimum(4, np.arange(7, 0, -1))[None]).all()  # K = vocab: nothing filtered


def test_batched_rollout_matches_sequential(tiny_drafter):
    d = tiny_drafter
    exs = [_example(d, 20 + i, T=6 + i) for i in range(3)]
    cfg = RolloutConfig(N=4, K=3)
    out = stage2_rollout(d, make_batch(exs, d.lm_head.data), cfg, W)
    for i, ex in enumerate(exs):
        for c in range(ex.n_rows):
            losses, n = rollout_sequential(d, ex, c, cfg, W)
            assert out.executed[i, c] == n
            for s, v in enumerate(losses):
                assert abs(out.per_row[s][i, c + s] - v) < 1e-9


def test_stage2_gradients(tiny_drafter):
    d = tiny_drafter.copy()
    batch = make_batch([_example(d, 6, T=5), _example(d, 7, T=4)], d.lm_head.data)
    fn = lambda: stage2_rollout(d, batch, RolloutConfig(N=3, K=16), W).loss
    assert nx.grad_check(fn, d.parameters()) < 1e-4


# -- precompute and loop -----------------------------------------------------------


def test_precompute_matches_inference_pass(target):
    records = ds.build_corpus(3, 3, seed=2).records
    examples, report = precompute_targets(records, target)
    assert report.examples == 6
    for r, ex in zip(records, examples):
        ids, _ = ds.sequence(r)
        st = TargetState.new(target)
        _, h = target_forward(st, target.prefix_rows(r.scene, ids))
        assert np.abs(h[-len(ids):] - ex.f).max() < 1e-9


def test_storage_ratio():
    stored, full = storage_bytes(32, 512, 64)
    assert stored / full < 0.15


def test_precompute_empty(target):
    examples, report = precompute_targets([], target)
    assert examples == [] and report.stored_bytes == 0 and report.ratio == 0.0


def test_zero_epochs_and_determinism(target):
    examples, _ = precompute_targets(ds.build_corpus(8, 8, seed=3).records, target)
    init = Drafter.init(DrafterConfig(), target)
    res = train(init.copy(), examples, examples, TrainConfig(0, 0))
    assert nx.checkpoint_hash(res.drafter.state_dict()) == nx.checkpoint_hash(init.state_dict())
    cfg = TrainConfig(1, 1, batch_size=8, seed=4)
    a = train(init.copy(), examples, examples, cfg)
    b = train(init.copy(), examples, examples, cfg)
    assert nx.checkpoint_hash(a.drafter.state_dict()) == nx.checkpoint_hash(b.drafter.state_dict())
    assert nx.checkpoint_hash(a.stage1.state_dict()) != nx.checkpoint_hash(a.drafter.state_dict())
    assert [c["stage"] for c in a.curves] == ["stage1", "stage2"]

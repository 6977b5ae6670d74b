import numpy as np
import pytest

from hivis import dataset as ds
from hivis import vocab
from hivis.bench import eval_prompts
from hivis.target_model import generate
from hivis.tree import TokenTree
from hivis.verification import (
    DecodeStats,
    RoundResult,
    TreeConfig,
    VerificationError,
    compute_metrics,
    decode_loop,
    one_step_output_distribution,
    residual_distribution,
    verify_greedy,
    verify_sampled,
)


def _chain(tokens):
    n = len(tokens)
    return TokenTree(
        np.array(tokens), np.arange(-1, n - 1), np.ones(n), np.ones(n), np.arange(n), np.zeros((n, 4)),
        np.tri(n, k=-1, dtype=bool),
    )


def _onehot_logits(best, vocab_size=16):
    z = np.zeros((len(best), vocab_size))
    z[np.arange(len(best)), best] = 5.0
    return z


def test_greedy_full_chain_acceptance():
    tree = _chain([3, 7, 8, 9])
    path, bonus = verify_greedy(tree, _onehot_logits([7, 8, 9, 11]))
    assert path == [1, 2, 3] and bonus == 11


def test_greedy_immediate_rejection():
    tree = TokenTree(
        np.array([3, 5, 6]), np.array([-1, 0, 0]), np.ones(3), np.ones(3), np.array([0, 1, 1]), np.zeros((3, 4)),
        np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0]], dtype=bool),
    )
    path, bonus = verify_greedy(tree, _onehot_logits([4, 0, 0]))
    assert path == [] and bonus == 4


def test_greedy_follows_the_matching_branch():
    tree = TokenTree(
        np.array([3, 5, 6, 7]), np.array([-1, 0, 0, 2]), np.ones(4), np.ones(4), np.array([0, 1, 1, 2]),
        np.zeros((4, 4)), np.array([[0, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 1, 0]], dtype=bool),
    )
    path, bonus = verify_greedy(tree, _onehot_logits([6, 1, 7, 2]))
    assert path == [2, 3] and bonus == 2


def test_sampled_p_equals_q_accepts_everything():
    rng = np.random.default_rng(0)
    q = np.full(8, 1 / 8)
    for _ in range(200):
        n, _ = verify_sampled([1, 2, 3], [q] * 3, [q] * 4, rng)
        assert n == 3


def test_sampled_zero_target_mass_rejects():
    rng = np.random.default_rng(1)
    p = np.array([0.0, 0.5, 0.5])
    q = np.array([0.5, 0.25, 0.25])
    for _ in range(100):
        n, tok = verify_sampled([0], [q], [p, p], rng)
        assert n == 0 and tok != 0


def test_sampled_validates():
    with pytest.raises(VerificationError):
        verify_sampled([1], [np.ones(2) / 2], [np.ones(2) / 2], np.random.default_rng(0))
    with pytest.raises(VerificationError):
        verify_sampled([0], [np.array([0.0, 1.0])], [np.ones(2) / 2] * 2, np.random.default_rng(0))


def test_residual_and_one_step_law():
    p = np.array([0.5, 0.3, 0.2])
    q = np.array([0.2, 0.5, 0.3])
    r = residual_distribution(p, q)
    assert np.allclose(r, [1.0, 0.0, 0.0])
    assert np.abs(one_step_output_distribution(p, q) - p).max() < 1e-15
    with pytest.raises(VerificationError):
        residual_distribution(p, p)


def test_metrics_arithmetic():
    s = DecodeStats()
    s.add(RoundResult(0, [4], prefill=True))
    for k in (5, 3, 4):
        s.add(RoundResult(k - 1, list(range(k))))
    m = compute_metrics(s)
    assert m.tau_committed == 4.0 and m.tau_accepted == 3.0 and m.speedup is None
    floor = DecodeStats()
    for _ in range(3):
        floor.add(RoundResult(0, [7]))
    assert compute_metrics(floor).tau_committed == 1.0
    with pytest.raises(VerificationError):
        RoundResult(2, [1, 2])


def test_metrics_speedup_and_prefill_ratio():
    s = DecodeStats(wall_time=2.0, baseline_wall_time=3.0, target_prefill_rows=2000, drafter_prefill_rows=20)
    s.add(RoundResult(1, [1, 2]))
    m = compute_metrics(s)
    assert m.speedup == 1.5 and m.prefill_ratio == 0.01


def test_tree_config_validation():
    with pytest.raises(ValueError):
        TreeConfig(0, 4, 10)


def test_max_new_one(trained_target, drafter):
    prompt, scene = eval_prompts("scene_qa", 1, 3)[0]
    out, stats = decode_loop(prompt, scene, trained_target, drafter, TreeConfig(5, 4, 10), 0.0, 1)
    assert len(out) == 1 and len(stats.rounds) == 1


def test_decode_validates(trained_target, drafter):
    with pytest.raises(ValueError):
        decode_loop([2], None, trained_target, drafter, TreeConfig(), 0.0, 8)
    with pytest.raises(ValueError):
        decode_loop([2, 3], None, trained_target, drafter, TreeConfig(), 1.0, 8)


@pytest.mark.parametrize("tree", [TreeConfig(1, 6, 6), TreeConfig(3, 3, 8), TreeConfig(10, 7, 60)])
def test_untrained_drafter_is_lossless(trained_target, drafter, tree):
    for task in ("scene_qa", "text_qa"):
        for prompt, scene in eval_prompts(task, 5, 11):
            out, stats = decode_loop(prompt, scene, trained_target, drafter, tree, 0.0, 32)
            assert out == generate(trained_target, scene, prompt, 32)
            assert stats.total_tokens == len(out)


def test_rounds_stop_at_eos_and_budget(trained_target, trained_drafter):
    for prompt, scene in eval_prompts("scene_qa", 10, 2):
        for max_new in (3, 32):
            out, stats = decode_loop(prompt, scene, trained_target, trained_drafter, TreeConfig(5, 4, 20), 0.0, max_new)
            assert len(out) <= max_new
            assert vocab.EOS_ID not in out[:-1]
            assert sum(len(r.committed_tokens) for r in stats.rounds) == len(out)


def test_sampled_decode_runs(trained_target, trained_drafter):
    prompt, scene = eval_prompts("scene_qa", 1, 4)[0]
    rng = np.random.default_rng(0)
    out, stats = decode_loop(prompt, scene, trained_target, trained_drafter, TreeConfig(1, 4, 4), 1.0, 20, rng)
    assert 1 <= len(out) <= 20
    assert all(r.node_count <= 5 for r in stats.verification_rounds())


def test_deeper_trees_accept_more(trained_target, trained_drafter):
    runs = {}
    for depth in (1, 4):
        runs[depth] = [
            decode_loop(p, s, trained_target, trained_drafter, TreeConfig(5, depth, 20), 0.0, 32)[1]
            for p, s in eval_prompts("scene_qa", 50, 6)
        ]
    assert compute_metrics(runs[4]).tau_committed > compute_metrics(runs[1]).tau_committed

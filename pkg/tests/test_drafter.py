import numpy as np
import pytest

from hivis import numerics as nx
from hivis.drafter import (
    Drafter,
    DrafterConfig,
    DrafterKVCache,
    draft_rows_masked,
    draft_step,
    drafter_append_verified,
    drafter_prefill,
)
from hivis.layers import causal_mask


def _inputs(seed, n, d=64):
    rng = np.random.default_rng(seed)
    return rng.integers(4, 256, n), rng.normal(size=(n, d))


def _tape_outputs(drafter, e, f, seq):
    """Monolithic recomputation through the differentiable forward."""
    n = e.shape[0]
    rows = drafter.rows(e[None], f[None], np.asarray(seq))
    h, logits, _, _ = drafter.forward(rows, np.arange(n), causal_mask(n))
    return h.data[0], logits.data[0]


def test_assemble_row_seq_index(drafter):
    e, f = np.ones(64), np.zeros(64)
    seq = drafter.params["seq_emb"].data
    assert drafter.assemble_row(e, f, 0).seq_index == 0
    row = drafter.assemble_row(e, f, 7)
    assert row.seq_index == 3 and np.array_equal(row.vector[128:], seq[3])
    assert row.vector.shape == (160,)
    assert drafter.assemble_row(e, f, 5).seq_index == 3
    assert drafter.assemble_row(e, f, 1).seq_index == 1


def test_assemble_row_shape_error(drafter):
    with pytest.raises(nx.ShapeError):
        drafter.assemble_row(np.ones(3), np.ones(64), 0)


def test_variants_blank_their_inputs(target):
    e, f = np.ones(64), np.full(64, 2.0)
    no_f = Drafter.init(DrafterConfig(use_f=False), target)
    assert not no_f.assemble_row(e, f, 2).vector[64:128].any()
    no_seq = Drafter.init(DrafterConfig(use_seq=False), target)
    assert no_seq.assemble_row(e, f, 2).seq_index == 0


def test_prefill_smallest(drafter):
    ids, f = _inputs(0, 1)
    cache = drafter_prefill(drafter, drafter.embed(ids), f)
    assert cache.length == 1 and cache.seq_indices == [0]


def test_prefill_validates(drafter):
    with pytest.raises(ValueError):
        drafter_prefill(drafter, np.zeros((0, 64)), np.zeros((0, 64)))
    with pytest.raises(ValueError):
        drafter_prefill(drafter, np.zeros((3, 64)), np.zeros((2, 64)))


def test_prefill_deterministic(drafter):
    ids, f = _inputs(1, 6)
    a = drafter_prefill(drafter, drafter.embed(ids), f)
    b = drafter_prefill(drafter, drafter.embed(ids), f)
    assert np.array_equal(a.keys, b.keys) and np.array_equal(a.values, b.values)
    assert np.array_equal(a.last_logits, b.last_logits)


def test_append_lengths(drafter):
    ids, f = _inputs(2, 8)
    cache = drafter_prefill(drafter, drafter.embed(ids[:5]), f[:5])
    keys = cache.keys.copy()
    drafter_append_verified(drafter, cache, np.zeros((0, 64)), np.zeros((0, 64)))
    assert cache.length == 5 and np.array_equal(cache.keys, keys)
    drafter_append_verified(drafter, cache, drafter.embed(ids[5:]), f[5:])
    assert cache.length == 8


def test_append_then_draft_equals_monolithic(drafter):
    ids, f = _inputs(3, 8)
    e = drafter.embed(ids)
    inc = drafter_prefill(drafter, e[:5], f[:5])
    drafter_append_verified(drafter, inc, e[5:], f[5:])
    mono = drafter_prefill(drafter, e, f)
    row = drafter.assemble_row(drafter.embed(9), inc.last_hidden, 1)
    a, b = draft_step(drafter, inc, [row]), draft_step(drafter, mono, [row])
    assert np.abs(a[0] - b[0]).max() < 1e-9 and np.abs(a[1] - b[1]).max() < 1e-9


def test_draft_step_matches_tape_forward(drafter):
    ids, f = _inputs(4, 6)
    e = drafter.embed(ids)
    cache = drafter_prefill(drafter, e, f)
    h_prev = cache.last_hidden
    pending, e_all, f_all, seq = [], list(e), list(f), [0] * 6
    for j, tok in enumerate([11, 12, 13], start=1):
        row = drafter.assemble_row(drafter.embed(tok), h_prev, j)
        pending.append(row)
        e_all.append(row.e)
        f_all.append(row.f)
        seq.append(row.seq_index)
        h_prev, logits = draft_step(drafter, cache, pending)
        ref_h, ref_l = _tape_outputs(drafter, np.array(e_all), np.array(f_all), seq)
        assert np.abs(h_prev - ref_h[-1]).max() < 1e-9
        assert np.abs(logits - ref_l[-1]).max() < 1e-9
    assert cache.length == 6 and cache.scratch == 0


def test_draft_step_deterministic_and_pure(drafter):
    ids, f = _inputs(5, 4)
    cache = drafter_prefill(drafter, drafter.embed(ids), f)
    row = drafter.assemble_row(drafter.embed(7), cache.last_hidden, 1)
    a, b = draft_step(drafter, cache, [row]), draft_step(drafter, cache, [row])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert draft_step(drafter, cache, [])[0] is cache.last_hidden


def test_masked_rows_equal_chain_steps(drafter):
    """Two sibling rows under a tree mask see only themselves."""
    ids, f = _inputs(6, 5)
    cache = drafter_prefill(drafter, drafter.embed(ids), f)
    w = cache.weights
    toks = [20, 21]
    x = w.project(w.tok_emb[toks], np.repeat(cache.last_hidden[None], 2, 0), 1)
    h, logits = draft_rows_masked(cache, x, np.array([1, 1]), np.eye(2, dtype=bool))
    cache.discard_scratch()
    for i, tok in enumerate(toks):
        ref = draft_step(drafter, cache, [drafter.assemble_row(drafter.embed(tok), cache.last_hidden, 1)])
        assert np.abs(h[i] - ref[0]).max() < 1e-12 and np.abs(logits[i] - ref[1]).max() < 1e-12


def test_project_matches_assembled_row(drafter):
    w = drafter.inference_weights()
    e, f = np.random.default_rng(7).normal(size=(2, 64))
    for j in (0, 2, 9):
        row = drafter.assemble_row(e, f, j)
        assert np.abs(w.project(e[None], f[None], j)[0] - row.vector @ w.in_proj).max() < 1e-12


def test_snapshot_follows_parameter_updates(drafter):
    d = drafter.copy()
    before = d.inference_weights()
    d.params["in_proj"].data += 1.0
    assert d.inference_weights() is before
    d.drop_snapshot()
    assert not np.array_equal(d.inference_weights().in_proj, before.in_proj)


def test_state_dict_round_trip(drafter, target):
    back = Drafter.from_state_dict(drafter.config, target, drafter.state_dict())
    assert nx.checkpoint_hash(back.state_dict()) == nx.checkpoint_hash(drafter.state_dict())
    with pytest.raises(nx.CheckpointError):
        Drafter.from_state_dict(drafter.config, target, {})


def test_width_mismatch(target):
    with pytest.raises(ValueError):
        Drafter.init(DrafterConfig(d=32), target)


def test_empty_cache_draft_step(drafter):
    with pytest.raises(ValueError):
        draft_step(drafter, DrafterKVCache.new(drafter), [])

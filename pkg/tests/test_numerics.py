import numpy as np
import pytest

from hivis import numerics as nx
from hivis.numerics import Tensor


def param(a):
    return nx.parameter(np.asarray(a, dtype=float))


def test_row_softmax_symmetric():
    assert np.allclose(nx.row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(nx.matmul(Tensor(a), Tensor(np.eye(5))).data, a)


def test_concat_last_dim_shape():
    parts = [Tensor(np.ones((1, 4))) for _ in range(3)]
    assert nx.concat_last_dim(*parts).shape == (1, 12)


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_primitive_dispatch():
    out = nx.primitive_forward("add", Tensor([1.0]), Tensor([2.0]))
    assert out.item() == 3.0
    with pytest.raises(ValueError):
        nx.primitive_forward("conv", Tensor([1.0]))


def test_square_gradient():
    x = param(3.0)
    with nx.Tape() as tape:
        y = nx.mul(x, x)
    assert nx.gradients(tape, y, [x])[0] == pytest.approx(6.0)


def test_cross_entropy_gradient_is_p_minus_onehot():
    z = param([[0.3, -1.2, 2.0, 0.1]])
    onehot = np.array([[0.0, 0.0, 1.0, 0.0]])
    with nx.Tape() as tape:
        loss = nx.scale(nx.sum_all(nx.mul(nx.log_softmax(z), Tensor(onehot))), -1.0)
    g = nx.gradients(tape, loss, [z])[0]
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(g, p - onehot, atol=1e-14)


def test_no_tape_no_record():
    x = param(2.0)
    y = nx.mul(x, x)
    assert y.data == 4.0
    with nx.Tape() as tape:
        nx.mul(Tensor(1.0), Tensor(2.0))  # constants only
    assert len(tape) == 0


def test_grad_check_linear_exact():
    x = param([1.0, -2.0, 0.5])
    assert nx.grad_check(lambda: nx.sum_all(nx.scale(x, 3.0)), [x]) < 1e-10


def test_grad_check_rms_norm_matmul():
    rng = np.random.default_rng(1)
    x, w, m = param(rng.normal(size=(2, 4))), param(rng.normal(size=4)), param(rng.normal(size=(4, 3)))
    probe = Tensor(rng.normal(size=(2, 3)))
    fn = lambda: nx.sum_all(nx.mul(nx.matmul(nx.rms_norm(x, w), m), probe))
    assert nx.grad_check(fn, [x, w, m]) < 1e-5


@pytest.mark.parametrize("op", ["silu", "row_softmax", "smooth_l1", "take_rows", "concat"])
def test_grad_check_primitives(op):
    rng = np.random.default_rng(3)
    a = param(rng.normal(size=(3, 4)) * 1.5)
    b = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    build = {
        "silu": lambda: nx.silu(a),
        "row_softmax": lambda: nx.row_softmax(a),
        "smooth_l1": lambda: nx.smooth_l1(a, b),
        "take_rows": lambda: nx.take_rows(a, np.array([2, 0, 2])),
        "concat": lambda: nx.concat([a, b], axis=0),
    }[op]

    def fn():
        out = build()
        if out.data.ndim == 0:
            return out
        return nx.sum_all(nx.mul(out, Tensor(np.resize(w.data, out.shape))))

    assert nx.grad_check(fn, [a, b] if op in ("smooth_l1", "concat") else [a]) < 1e-6


def test_grad_check_detects_nondeterminism():
    x = param(1.0)
    calls = iter(range(100))
    with pytest.raises(nx.NonDeterministicError):
        nx.grad_check(lambda: nx.scale(x, float(next(calls))), [x])


def test_adam_zero_gradient_fixed_point():
    p = param([1.0, 2.0])
    state = nx.AdamState()
    nx.adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert not state.m[0].any() and not state.v[0].any()


def test_adam_single_step_hand_computed():
    p = param(1.0)
    nx.adam_step([p], [np.array(1.0)], nx.AdamState(), lr=0.1)
    assert p.data == pytest.approx(0.9, abs=1e-7)


def test_adam_monotone_for_positive_gradient():
    p = param(1.0)
    state = nx.AdamState()
    nx.adam_step([p], [np.array(1.0)], state, lr=0.1)
    first = float(p.data)
    nx.adam_step([p], [np.array(1.0)], state, lr=0.1)
    assert float(p.data) < first < 1.0


def test_adam_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.adam_step([param([1.0, 2.0])], [np.zeros(3)], nx.AdamState(), lr=0.1)


def test_checkpoint_round_trip(tmp_path):
    sd = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5)}
    path = tmp_path / "x.hvs"
    nx.save_checkpoint(path, sd)
    back = nx.load_checkpoint(path)
    assert list(back) == ["a", "b"]
    assert all(np.array_equal(back[k], sd[k]) for k in sd)
    assert nx.checkpoint_hash(back) == nx.checkpoint_hash(sd)


def test_checkpoint_rejects_garbage():
    with pytest.raises(nx.CheckpointError):
        nx.decode_checkpoint(b"nope")
    buf = nx.encode_checkpoint({"a": np.ones(4)})
    with pytest.raises(nx.CheckpointError):
        nx.decode_checkpoint(buf[:-5])

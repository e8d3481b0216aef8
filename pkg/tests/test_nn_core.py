import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saluda import nn
from saluda.nn import BatchNormState, BNMode, Tensor, grad_check
from saluda.nn import checkpoint


def param(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- linear


def test_linear_scalar_affine():
    out = nn.linear(Tensor([[2.0]]), param([[3.0]]), param([1.0]))
    assert out.data.tolist() == [[7.0]]


def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(5, 4))
    out = nn.linear(Tensor(x), param(np.eye(4)), param(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        nn.linear(Tensor(np.zeros((2, 3))), param(np.zeros((4, 2))))


def test_linear_gradcheck():
    rng = np.random.default_rng(1)
    x, w, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=(3, 2))), param(rng.normal(size=2))
    probe = rng.normal(size=(4, 2))
    report = grad_check(lambda: nn.sum_all(nn.linear(x, w, b) * probe), {"x": x, "w": w, "b": b})
    assert report.max_rel_error < 1e-6


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_already_normalized():
    x = np.array([[-1.0, 2.0], [1.0, -2.0]])
    x = (x - x.mean(0)) / x.std(0)
    state = BatchNormState(2, eps=1e-12)
    out = nn.batchnorm(Tensor(x), param(np.ones(2)), param(np.zeros(2)), state)
    np.testing.assert_allclose(out.data, x, atol=1e-9)


def test_batchnorm_eval_frozen_hand_computed():
    state = BatchNormState(2, eps=1e-5, running_mean=np.array([1.0, -2.0]), running_var=np.array([4.0, 0.25]))
    x = np.array([[3.0, 0.0], [1.0, -2.0], [-1.0, 1.0]])
    gamma, beta = np.array([2.0, 0.5]), np.array([0.1, -0.3])
    out = nn.batchnorm(Tensor(x), param(gamma), param(beta), state, BNMode.EVAL_FROZEN)
    expected = [
        [(3 - 1) / math.sqrt(4 + 1e-5) * 2 + 0.1, (0 + 2) / math.sqrt(0.25 + 1e-5) * 0.5 - 0.3],
        [0.1, -0.3],
        [(-1 - 1) / math.sqrt(4 + 1e-5) * 2 + 0.1, (1 + 2) / math.sqrt(0.25 + 1e-5) * 0.5 - 0.3],
    ]
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)
    np.testing.assert_array_equal(state.running_mean, [1.0, -2.0])


def test_batchnorm_running_stats_geometric():
    x = np.random.default_rng(2).normal(3.0, 2.0, size=(50, 3))
    state = BatchNormState(3, momentum=0.1)
    g, b = param(np.ones(3)), param(np.zeros(3))
    nn.batchnorm(Tensor(x), g, b, state)
    gap1 = np.abs(state.running_mean - x.mean(0))
    nn.batchnorm(Tensor(x), g, b, state)
    gap2 = np.abs(state.running_mean - x.mean(0))
    np.testing.assert_allclose(gap2, 0.9 * gap1, rtol=1e-12)
    np.testing.assert_allclose(gap1, 0.9 * np.abs(x.mean(0)), rtol=1e-12)


def test_batchnorm_degenerate_batch():
    with pytest.raises(nn.DegenerateBatchError):
        nn.batchnorm(Tensor(np.zeros((1, 2))), param(np.ones(2)), param(np.zeros(2)), BatchNormState(2))


def test_batchnorm_train_gradcheck():
    rng = np.random.default_rng(3)
    x, g, b = param(rng.normal(size=(6, 3))), param(rng.normal(size=3)), param(rng.normal(size=3))
    probe = rng.normal(size=(6, 3))
    report = grad_check(lambda: nn.sum_all(nn.batchnorm(x, g, b, BatchNormState(3)) * probe),
                        {"x": x, "g": g, "b": b})
    assert report.max_rel_error < 1e-4


def test_batchnorm_eval_is_pure():
    state = BatchNormState(2, running_mean=np.array([0.5, 1.0]), running_var=np.array([2.0, 3.0]))
    x = Tensor(np.random.default_rng(4).normal(size=(5, 2)))
    a = nn.batchnorm(x, param(np.ones(2)), param(np.zeros(2)), state, BNMode.EVAL_FROZEN).data
    b = nn.batchnorm(x, param(np.ones(2)), param(np.zeros(2)), state, BNMode.EVAL_FROZEN).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(state.running_var, [2.0, 3.0])


# ---------------------------------------------------------------- losses


def test_cross_entropy_confident():
    logits = Tensor(np.eye(3) * 50.0)
    assert nn.softmax_cross_entropy(logits, [0, 1, 2], 255).item() < 1e-12


def test_cross_entropy_uniform():
    assert nn.softmax_cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0], 255).item() == pytest.approx(math.log(4))


def test_cross_entropy_ignore_and_gradcheck():
    rng = np.random.default_rng(5)
    z = param(rng.normal(size=(6, 4)))
    labels = [0, 255, 3, 1, 255, 2]
    report = grad_check(lambda: nn.softmax_cross_entropy(z, labels, 255), {"z": z})
    assert report.max_rel_error < 1e-4
    assert np.all(z.grad[[1, 4]] == 0)


def test_cross_entropy_all_ignored():
    with pytest.raises(ValueError, match="empty"):
        nn.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [255, 255], 255)


def test_bce_values():
    assert nn.sigmoid_bce(Tensor([0.0]), [1]).item() == pytest.approx(math.log(2))
    assert nn.sigmoid_bce(Tensor([20.0]), [1]).item() < 3e-9
    assert math.isfinite(nn.sigmoid_bce(Tensor([-800.0, 800.0]), [1, 0]).item())


def test_bce_gradcheck_and_empty():
    z = param(np.random.default_rng(6).normal(size=(7, 1)))
    t = [0, 1, 1, 0, 1, 0, 0]
    assert grad_check(lambda: nn.sigmoid_bce(z, t), {"z": z}).max_rel_error < 1e-4
    with pytest.raises(ValueError):
        nn.sigmoid_bce(Tensor(np.zeros((0, 1))), [])


def test_entropy_gradcheck():
    z = param(np.random.default_rng(7).normal(size=(5, 4)))
    assert grad_check(lambda: nn.mean_entropy(z), {"z": z}).max_rel_error < 1e-4
    assert nn.mean_entropy(Tensor(np.zeros((3, 6)))).item() == pytest.approx(math.log(6))


def test_segment_pool_gradcheck():
    rng = np.random.default_rng(8)
    v, s = param(rng.normal(size=(9, 3))), param(rng.normal(size=(9, 1)))
    seg = np.array([0, 0, 1, 2, 2, 2, 1, 0, 2])
    probe = rng.normal(size=(3, 3))
    report = grad_check(lambda: nn.sum_all(nn.segment_softmax_pool(v, s, seg, 3) * probe), {"v": v, "s": s})
    assert report.max_rel_error < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.integers(1, 5))
def test_softmax_rows_sum_to_one(row, reps):
    p = nn.softmax(np.tile(row, (reps, 1)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- optimiser


def test_adamw_zero_grad_no_decay():
    p = {"w": np.array([1.0, -2.0])}
    nn.AdamW(lr=0.1, weight_decay=0.0).step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_first_step_hand_computed():
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    w0, g = 0.5, 0.2
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = w0 * (1 - lr * wd) - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    p = {"w": np.array([w0])}
    nn.AdamW(lr, wd, b1, b2, eps).step(p, {"w": np.array([g])})
    assert abs(p["w"][0] - expected) < 1e-12


def test_adamw_weight_decay_only():
    p = {"w": np.array([2.0, -4.0])}
    opt = nn.AdamW(lr=0.1, weight_decay=0.01)
    for _ in range(3):
        before = p["w"].copy()
        opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_allclose(p["w"], before * (1 - 0.1 * 0.01), rtol=1e-15)
    assert opt.step_count == 3


def test_adamw_nonfinite_aborts():
    p = {"w": np.array([1.0])}
    opt = nn.AdamW()
    with pytest.raises(nn.NumericalError):
        opt.step(p, {"w": np.array([np.nan])})
    assert p["w"][0] == 1.0 and opt.step_count == 0


def test_cosine_schedule():
    assert nn.cosine_lr(1e-3, 0, 100) == 1e-3
    assert nn.cosine_lr(1e-3, 100, 100) == 0.0
    assert nn.cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    lrs = [nn.cosine_lr(1.0, t, 37) for t in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- EMA


@pytest.mark.parametrize("alpha, expected", [(0.0, 2.0), (1.0, 0.0), (0.5, 1.0)])
def test_ema(alpha, expected):
    teacher = {"w": np.zeros(3)}
    nn.ema_update(teacher, {"w": np.full(3, 2.0)}, alpha)
    np.testing.assert_array_equal(teacher["w"], expected)
    assert teacher["w"].shape == (3,)


# ---------------------------------------------------------------- checkpoint


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.lists(st.floats(allow_nan=False), min_size=0, max_size=6), max_size=4))
def test_checkpoint_round_trip(d):
    tensors = {k: np.array(v, dtype=np.float64) for k, v in d.items()}
    tensors["matrix"] = np.arange(6, dtype=np.float64).reshape(2, 3)
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout_and_errors():
    raw = checkpoint.dumps({"a": np.array([1.5])})
    assert raw[:4] == b"SALW"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(raw[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + raw[4:])

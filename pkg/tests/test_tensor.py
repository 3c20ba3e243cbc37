import itertools

import numpy as np
import numpy.testing as npt
import pytest

from mpae.exceptions import ConfigError, DimensionError, UsageError
from mpae.model import ModelConfig, ResidualBlock
from mpae.tensor import Parameter, Tensor, backward, no_grad, zero_grad
from mpae.tensor.functional import (
    activation,
    conv3d,
    group_norm,
    loss,
    upsample_nearest2x,
    weight_standardize,
)
from mpae.tensor.optim import AdamState, adam_step

TRIALS = 20
STEP = 1e-5


def gradcheck(forward, leaves, rng, n_coords=24, tol=1e-4):
    """Compare backward() against central differences on random coordinates."""
    projection = Tensor(rng.normal(size=forward().shape), dtype=np.float64)

    def scalar() -> float:
        with no_grad():
            return float((forward().data * projection.data).sum())

    for leaf in leaves:
        leaf.grad = None
    backward((forward() * projection).sum())
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        idx = rng.choice(flat.size, min(n_coords, flat.size), replace=False)
        numeric = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + STEP
            plus = scalar()
            flat[i] = orig - STEP
            minus = scalar()
            flat[i] = orig
            numeric.append((plus - minus) / (2 * STEP))
        numeric = np.array(numeric)
        analytic = leaf.grad.reshape(-1)[idx]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / scale < tol


def leaf(rng, shape, away_from_zero=False):
    data = rng.normal(size=shape)
    if away_from_zero:
        data = np.sign(data) * (np.abs(data) + 0.05)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def naive_conv3d(x, w, b, stride, padding):
    n, c, *dims = x.shape
    o, _, k = w.shape[:3]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    out_dims = [(d + 2 * padding - k) // stride + 1 for d in dims]
    out = np.zeros((n, o, *out_dims))
    for i, j, l in itertools.product(*(range(d) for d in out_dims)):
        patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k]
        out[:, :, i, j, l] = np.einsum("ncabd,ocabd->no", patch, w) + b
    return out


@pytest.mark.parametrize(
    ("stride", "padding", "mode", "k"),
    [(1, 1, "zeros", 3), (2, 1, "zeros", 3), (1, 1, "circular", 3), (1, 0, "zeros", 1)],
)
def test_conv3d_gradients(stride, padding, mode, k):
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        x = leaf(rng, (2, 3, 6, 6, 6))
        w = leaf(rng, (4, 3, k, k, k))
        b = leaf(rng, (4,))
        gradcheck(lambda: conv3d(x, w, b, stride, padding, mode), [x, w, b], rng)


def test_weight_standardize_gradients():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        w = leaf(rng, (4, 3, 3, 3, 3))
        gradcheck(lambda: weight_standardize(w), [w], rng)


def test_group_norm_gradients():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        x = leaf(rng, (2, 4, 3, 3, 3))
        gamma = leaf(rng, (4,))
        beta = leaf(rng, (4,))
        gradcheck(lambda: group_norm(x, 2, gamma, beta), [x, gamma, beta], rng)


@pytest.mark.parametrize("kind", ["silu", "relu", "tanh"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        x = leaf(rng, (2, 3, 4, 4, 4), away_from_zero=True)
        gradcheck(lambda: activation(x, kind), [x], rng)


@pytest.mark.parametrize("kind", ["l1", "mse"])
def test_loss_gradients(kind):
    rng = np.random.default_rng(4)
    for _ in range(TRIALS):
        x = leaf(rng, (2, 1, 4, 4, 4))
        target = x.data + np.sign(rng.normal(size=x.shape)) * (0.05 + rng.random(x.shape))
        gradcheck(lambda: loss(x, target, kind), [x], rng)


def test_upsample_and_arithmetic_gradients():
    rng = np.random.default_rng(5)
    for _ in range(TRIALS):
        a = leaf(rng, (2, 3, 3, 3, 3))
        b = leaf(rng, (2, 3, 3, 3, 3))
        gradcheck(lambda: upsample_nearest2x(a * b - a + 2.0 * b), [a, b], rng)
        gradcheck(lambda: (a * b).mean() + a.sum() / 3.0, [a, b], rng)


@pytest.mark.parametrize("mode", ["zeros", "circular"])
def test_residual_block_gradients(mode):
    rng = np.random.default_rng(6)
    config = ModelConfig(levels=1, base_channels=4, groups=2, padding_mode=mode)
    for trial in range(TRIALS):
        block = ResidualBlock("block", 3, 4, config, np.random.default_rng(trial), dtype=np.float64)
        x = leaf(rng, (2, 3, 6, 6, 6))
        gradcheck(lambda: block(x), [x] + block.parameters(), rng)


def test_conv3d_matches_naive():
    rng = np.random.default_rng(7)
    for stride, padding, k in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)]:
        x = rng.uniform(-1, 1, size=(2, 2, 7, 6, 5)).astype(np.float32)
        w = rng.uniform(-1, 1, size=(3, 2, k, k, k)).astype(np.float32)
        b = rng.uniform(-1, 1, size=3).astype(np.float32)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        expected = naive_conv3d(x.astype(float), w.astype(float), b.astype(float), stride, padding)
        assert out.dtype == np.float32
        assert out.shape == expected.shape
        assert np.abs(out - expected).max() <= 1e-6 * max(1.0, np.abs(expected).max())


def test_conv3d_circular_padding_is_shift_equivariant():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 6, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    out = conv3d(Tensor(x), w, padding=1, padding_mode="circular").data
    shifted = conv3d(Tensor(np.roll(x, 2, axis=3)), w, padding=1, padding_mode="circular").data
    npt.assert_allclose(shifted, np.roll(out, 2, axis=3), atol=1e-5)


def test_conv3d_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(DimensionError, match="channels"):
        conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(DimensionError, match="odd"):
        conv3d(x, Tensor(np.zeros((1, 2, 2, 2, 2))))
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((1, 2, 3, 3, 3))))


def test_weight_standardize_statistics(rng):
    w = weight_standardize(Tensor(rng.normal(2.0, 3.0, size=(5, 2, 3, 3, 3)))).data
    flat = w.reshape(5, -1)
    npt.assert_allclose(flat.mean(axis=1), 0, atol=1e-6)
    npt.assert_allclose(flat.std(axis=1), 1, atol=1e-4)


def test_group_norm_rejects_groups():
    x = Tensor(np.zeros((1, 6, 2, 2, 2)))
    with pytest.raises(ConfigError):
        group_norm(x, 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


def test_unknown_activation_and_loss():
    x = Tensor(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(ConfigError):
        activation(x, "gelu")
    with pytest.raises(ConfigError):
        loss(x, np.zeros(x.shape), "huber")
    with pytest.raises(DimensionError):
        loss(x, np.zeros((1, 1, 2, 2, 1)))


def test_upsample_values():
    x = Tensor(np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2))
    out = upsample_nearest2x(x).data
    assert out.shape == (1, 1, 4, 4, 4)
    assert out[0, 0, 3, 0, 1] == x.data[0, 0, 1, 0, 0]


def test_backward_accumulates_shared_use():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward((x * x).sum())
    npt.assert_allclose(x.grad, 2 * x.data)


def test_backward_errors_and_unreached_params():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)
    unused = Parameter(np.ones(2), "unused")
    backward((x * 2.0).sum(), [unused])
    npt.assert_array_equal(unused.grad, 0)
    with pytest.raises(DimensionError):
        x + Tensor(np.ones(4))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf
    assert (x * 2.0).requires_grad


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Parameter(np.zeros(2), "p", dtype=np.float32).dtype == np.float32


def test_reductions_keep_float64():
    x = Tensor(np.full(3, 1 / 3), requires_grad=True, dtype=np.float64)
    assert x.sum().dtype == np.float64
    assert x.mean().dtype == np.float64
    assert loss(x, np.zeros(3), "mse").dtype == np.float64
    assert x.mean().item() == pytest.approx(1 / 3, rel=1e-15)
    assert Tensor(np.float32(2.0)).dtype == np.float32


def test_second_backward_doubles_gradients():
    rng = np.random.default_rng(5)
    x = leaf(rng, (2, 3, 4, 4, 4))
    w = leaf(rng, (2, 3, 3, 3, 3))
    value = loss(conv3d(x, w, padding=1), rng.normal(size=(2, 2, 4, 4, 4)), "mse")
    backward(value)
    first_x, first_w = x.grad.copy(), w.grad.copy()
    backward(value)
    npt.assert_array_equal(x.grad, 2 * first_x)
    npt.assert_array_equal(w.grad, 2 * first_w)


def test_adam_on_scalar_quadratic():
    p = Parameter(np.array([1.0]), "w", dtype=np.float64)
    state = AdamState(lr=0.1)
    w, m, v = 1.0, 0.0, 0.0
    trajectory = []
    for step in range(1, 101):
        zero_grad([p])
        backward((p * p).sum(), [p])
        adam_step([p], state)
        g = 2 * w
        m = 0.9 * m + (1 - 0.9) * g
        v = 0.999 * v + (1 - 0.999) * g * g
        w -= 0.1 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        assert p.data[0] == pytest.approx(w, abs=1e-12)
        trajectory.append(abs(p.data[0]))
    assert trajectory[-1] < 0.5
    # the descent before the first overshoot is strictly monotone
    assert all(b < a for a, b in zip(trajectory[:5], trajectory[1:6]))


def test_adam_first_step():
    p = Parameter(np.array([1.0, -1.0, 0.5]), "p", dtype=np.float64)
    p.grad = np.array([0.5, -2.0, 0.0])
    state = adam_step([p], AdamState(lr=0.1))
    assert state.t == 1
    npt.assert_allclose(p.data, [0.9, -0.9, 0.5], atol=1e-6)


def test_adam_weight_decay_is_added_to_gradient():
    p = Parameter(np.array([2.0]), "p", dtype=np.float64)
    p.grad = np.array([0.0])
    adam_step([p], AdamState(lr=0.1, weight_decay=0.5))
    npt.assert_allclose(p.data, [1.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    p = Parameter(np.array([3.0, -4.0]), "p", dtype=np.float64)
    state = AdamState(lr=0.05)
    for _ in range(2000):
        zero_grad([p])
        backward((p * p).sum(), [p])
        adam_step([p], state)
    npt.assert_allclose(p.data, 0, atol=0.05)


def test_adam_zero_lr_keeps_parameters():
    p = Parameter(np.array([1.0, 2.0]), "p", dtype=np.float32)
    p.grad = np.array([1.0, 1.0], dtype=np.float32)
    adam_step([p], AdamState(lr=0.0, weight_decay=1e-6))
    npt.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_errors():
    with pytest.raises(UsageError):
        adam_step([Parameter(np.ones(1), "p")], AdamState())
    with pytest.raises(ConfigError):
        AdamState(lr=-1.0)

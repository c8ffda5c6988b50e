import numpy as np
import pytest

from project.errors import NotScalarError, ShapeError
from project.numerics import functional as F
from project.numerics.module import MLP, make_rng, parameter
from project.numerics.tensor import Tape, Tensor, backward, is_grad_enabled, no_grad
from tests.common.helpers import check_gradients, naive_conv2d

SEEDS = list(range(20))


def _param(rng, *shape):
    return parameter(rng.standard_normal(shape))


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed):
    rng = make_rng(seed)
    a, b = _param(rng, 3, 4), _param(rng, 4)
    # keep the divisor away from zero
    c = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))

    check_gradients(lambda x, y: x + y, [a, b], rng)
    check_gradients(lambda x, y: x - y, [a, b], rng)
    check_gradients(lambda x, y: x * y, [a, b], rng)
    check_gradients(lambda x, y: x / y, [a, c], rng)
    check_gradients(lambda x: -(x**2), [a], rng)
    check_gradients(F.sigmoid, [a], rng)
    check_gradients(F.relu, [a], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_matrix_gradients(seed):
    rng = make_rng(seed)
    a, b = _param(rng, 3, 5), _param(rng, 5, 2)

    check_gradients(lambda x, y: x @ y, [a, b], rng)
    check_gradients(F.transpose, [a], rng)
    check_gradients(lambda x: F.reshape(x, (5, 3)), [a], rng)
    check_gradients(lambda x: F.sum(x, axis=0), [a], rng)
    check_gradients(lambda x: F.mean(x, axis=1, keepdims=True), [a], rng)
    check_gradients(lambda x, y: F.concat([x, F.transpose(y)], axis=0), [a, b], rng)
    check_gradients(lambda x: F.take(x, np.array([2, 0, 2]), axis=0), [_param(rng, 3, 4)], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_and_pool_gradients(seed):
    rng = make_rng(seed)
    x = _param(rng, 2, 4, 5, 5)
    weight, bias = _param(rng, 6, 2, 3, 3), _param(rng, 6)

    check_gradients(lambda a, w, b: F.conv2d(a, w, b, stride=2, padding=1, groups=2), [x, weight, bias], rng)
    check_gradients(lambda a: F.max_pool2d(a, 2, 2), [x], rng)
    check_gradients(lambda a: F.avg_pool2d(a, 3, 1, 1), [x], rng)
    check_gradients(F.global_avg_pool, [x], rng)
    check_gradients(lambda a: F.channel_shuffle(a, 2), [x], rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_normalization_and_loss_gradients(seed):
    rng = make_rng(seed)
    x = _param(rng, 4, 3, 2, 2)
    gamma, beta = _param(rng, 3), _param(rng, 3)

    check_gradients(lambda a, g, b: F.batch_norm(a, g, b)[0], [x, gamma, beta], rng)
    check_gradients(lambda a, g, b: F.affine_channels(a, g, b), [x, gamma, beta], rng)
    check_gradients(F.layer_norm, [_param(rng, 4, 6)], rng)

    logits = _param(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    check_gradients(lambda z: F.softmax_cross_entropy(z, labels), [logits], rng)
    check_gradients(lambda z: F.mse(z, np.ones((5, 4))), [logits], rng)


def test_mlp_gradients(rng):
    mlp = MLP([4, 6, 3], rng)
    x = Tensor(rng.standard_normal((5, 4)))

    check_gradients(lambda *_: mlp(x), mlp.parameters(), rng)


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 2), (1, 1, 4)])
def test_conv2d_matches_direct_loops(rng, stride, padding, groups):
    x = rng.standard_normal((2, 4, 6, 6))
    weight = rng.standard_normal((8, 4 // groups, 3, 3))
    bias = rng.standard_normal(8)

    out = F.conv2d(Tensor(x), Tensor(weight), Tensor(bias), stride, padding, groups)

    np.testing.assert_allclose(out.data, naive_conv2d(x, weight, bias, stride, padding, groups), atol=1e-10)


def test_conv2d_rejects_inconsistent_groups(rng):
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(rng.standard_normal((1, 4, 3, 3))), Tensor(rng.standard_normal((4, 3, 1, 1))), groups=2)


def test_channel_shuffle_permutation():
    # two groups of three channels interleave
    assert F.channel_shuffle_permutation(6, 2).tolist() == [0, 3, 1, 4, 2, 5]

    with pytest.raises(ShapeError):
        F.channel_shuffle_permutation(6, 4)


def test_gradients_accumulate_over_reuse():
    a = parameter(np.array([2.0, 3.0]))
    backward((a * a + a).sum())

    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_backward_requires_scalar(rng):
    a = _param(rng, 3)

    with pytest.raises(NotScalarError):
        backward(a * 2.0)


def test_no_grad_records_nothing(rng):
    a = _param(rng, 3)

    with no_grad():
        assert not is_grad_enabled()
        out = (a * 2.0).sum()

    assert is_grad_enabled()
    assert len(Tape.trace(out)) == 0


def test_tape_is_topologically_ordered(rng):
    a = _param(rng, 3)
    hidden = F.relu(a * 2.0)
    loss = (hidden + a).sum()

    tape = Tape.trace(loss)
    position = {id(record.output): i for i, record in enumerate(tape.records)}

    for record in tape.records:
        for parent in record.inputs:
            if id(parent) in position:
                assert position[id(parent)] < position[id(record.output)]

    assert tape.records[-1].output is loss


def test_batch_norm_statistics(rng):
    x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 3.0 + 1.0)
    out, mean, var = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))

    np.testing.assert_allclose(mean, x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.data.var(axis=(0, 2, 3)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)


def test_layer_norm_normalizes_rows(rng):
    x = Tensor(rng.standard_normal((5, 7)) * 40.0 + 300.0)

    out = F.layer_norm(x)

    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(F.layer_norm(Tensor(np.ones((2, 3)))).data, np.zeros((2, 3)))

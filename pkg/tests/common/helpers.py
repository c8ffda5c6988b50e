from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import project
from project.model_ir import CONV_KINDS, POOL_KINDS, LayerKind, ModelIR, load_model
from project.numerics.tensor import Tensor, backward
from project.pruning import DEFAULT_A_MAX, PruningPolicy, pruning_units

FIXTURE_DIR = Path(project.__file__).parent / "fixtures"
FIXTURE_NAMES = (
    "single_conv",
    "plain_toy",
    "resnet_toy",
    "mobile_v1_toy",
    "mobile_v2_toy",
    "shuffle_toy",
    "motif_toy",
)


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.json"


def load_fixture(name: str) -> ModelIR:
    return load_model(fixture_path(name))


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar function f with respect to every entry of `array` (modified in place
    and restored)."""
    grad = np.zeros_like(array)

    for idx in np.ndindex(array.shape):
        original = array[idx]

        array[idx] = original + eps
        plus = f()
        array[idx] = original - eps
        minus = f()
        array[idx] = original

        grad[idx] = (plus - minus) / (2 * eps)

    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    rtol: float = 1e-4,
    atol: float = 1e-6,
):
    """Compare the tape gradients of sum(fn(*inputs) * R) for a random projection R against finite differences."""
    out = fn(*inputs)
    projection = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(fn(*inputs).data * projection))

    for t in inputs:
        t.grad = None

    backward((fn(*inputs) * Tensor(projection)).sum())

    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue

        expected = numeric_gradient(loss, t.data)
        assert t.grad is not None, f"input {i} received no gradient"
        np.testing.assert_allclose(t.grad, expected, rtol=rtol, atol=atol, err_msg=f"gradient of input {i}")


def _window_count(size: int, kernel: int, stride: int, padding: int) -> int:
    """Number of window positions, found by sliding the window until it leaves the padded input."""
    count, start = 0, 0

    while start + kernel <= size + 2 * padding:
        count += 1
        start += stride

    return count


def loop_nest_flops(m: ModelIR) -> int:
    """Independent FLOPs count: walks every output position of every convolution and tallies the multiply-accumulates
    of its receptive field, two operations each."""
    spatial: dict[str, tuple[int, int]] = {}
    total = 0

    for layer_id in m.topo_order:
        layer = m.layer(layer_id)
        producers = m.producers(layer_id)
        h, w = spatial[producers[0]] if producers else tuple(m.input_shape[1:])

        if layer.kind in CONV_KINDS or layer.kind in POOL_KINDS:
            kh, kw = layer.kernel
            rows = _window_count(h, kh, layer.stride[0], layer.padding[0])
            cols = _window_count(w, kw, layer.stride[1], layer.padding[1])

            if layer.kind in CONV_KINDS:
                macs_per_position = 0
                for _ in range(layer.out_channels):
                    macs_per_position += (layer.in_channels // layer.groups) * kh * kw

                for _ in range(rows):
                    for _ in range(cols):
                        total += 2 * macs_per_position

            h, w = rows, cols
        elif layer.kind == LayerKind.dense:
            macs = 0
            for _ in range(layer.out_channels):
                macs += layer.in_channels
            total += 2 * macs
        elif layer.kind in (LayerKind.global_avgpool, LayerKind.flatten):
            h, w = 1, 1

        spatial[layer_id] = (h, w)

    return total


def naive_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int, groups: int):
    """Direct grouped cross-correlation with explicit loops."""
    n, c, h, w = x.shape
    out_c, c_per_group, kh, kw = weight.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out_per_group = out_c // groups
    out = np.zeros((n, out_c, h_out, w_out))

    for b in range(n):
        for o in range(out_c):
            g = o // out_per_group
            channels = slice(g * c_per_group, (g + 1) * c_per_group)

            for i in range(h_out):
                for j in range(w_out):
                    window = padded[b, channels, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(window * weight[o]) + bias[o]

    return out


def random_policy(m: ModelIR, rng: np.random.Generator, a_max: float = DEFAULT_A_MAX) -> PruningPolicy:
    """Random ratio per pruning unit; members of a share group get the same ratio."""
    ratios = {}

    for unit in pruning_units(m):
        ratio = float(rng.uniform(0.0, a_max))

        for layer_id in unit:
            ratios[layer_id] = ratio

    return PruningPolicy(ratios=ratios, a_max=a_max)


def kept_filters(before: np.ndarray, after: np.ndarray) -> list[int]:
    """Indices of the rows of `before` that survived into `after`, matched by value."""
    kept = []

    for row in after.reshape(len(after), -1):
        matches = np.flatnonzero(np.all(before.reshape(len(before), -1) == row, axis=1))
        assert len(matches) == 1
        kept.append(int(matches[0]))

    return kept

"""Training oracle: interprets a ModelIR with the numerics primitives to train, evaluate and fine-tune it."""

import logging
from typing import Sequence

import numpy as np

from project.config import TrainConfig
from project.datasets import Dataset
from project.errors import DivergenceError, ShapeError
from project.model_ir import CONV_KINDS, LayerKind, LayerSpec, ModelIR, expected_weight_shapes
from project.numerics import functional as F
from project.numerics.module import Module, make_rng, parameter, uniform_init
from project.numerics.optim import make_optimizer
from project.numerics.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
RUNNING_STATS = ("running_mean", "running_var")
EVAL_BATCH_SIZE = 256


def initial_weights(layer: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    shapes = expected_weight_shapes(layer)

    if layer.kind in CONV_KINDS:
        fan_in = (layer.in_channels // layer.groups) * layer.kernel[0] * layer.kernel[1]
    elif layer.kind == LayerKind.dense:
        fan_in = layer.in_channels
    elif layer.kind == LayerKind.batchnorm:
        c = layer.out_channels
        return {"gamma": np.ones(c), "beta": np.zeros(c), "running_mean": np.zeros(c), "running_var": np.ones(c)}
    else:
        return {}

    return {name: uniform_init(rng, shape, fan_in) for name, shape in shapes.items()}


class Network(Module):
    """Trainable view of a ModelIR. Batch-norm running statistics are buffers, not parameters."""

    def __init__(self, m: ModelIR, seed: int = 0):
        rng = make_rng(seed)
        self.params: dict[str, dict[str, Tensor]] = {}
        self._model = m
        self._running: dict[str, dict[str, np.ndarray]] = {}

        for layer in m.layers:
            weights = layer.weights if layer.weights is not None else initial_weights(layer, rng)
            trainable = {name: parameter(w) for name, w in weights.items() if name not in RUNNING_STATS}

            if trainable:
                self.params[layer.id] = trainable

            if layer.kind == LayerKind.batchnorm:
                self._running[layer.id] = {name: np.array(weights[name], dtype=np.float64) for name in RUNNING_STATS}

    @property
    def model(self) -> ModelIR:
        return self._model

    def layer_parameters(self, layer_ids: Sequence[str]) -> list[Tensor]:
        return [p for layer_id in layer_ids for _, p in sorted(self.params.get(layer_id, {}).items())]

    def __call__(self, x: np.ndarray, training: bool = False, frozen: frozenset[str] = frozenset()) -> Tensor:
        m = self._model

        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(m.input_shape):
            raise ShapeError(f"batch of shape {x.shape} does not match the model input {m.input_shape}")

        source = Tensor(x)
        outputs: dict[str, Tensor] = {}

        for layer_id in m.topo_order:
            inputs = [outputs[p] for p in m.producers(layer_id)] or [source]
            outputs[layer_id] = self._apply(m.layer(layer_id), inputs, training and layer_id not in frozen)

        return outputs[m.output_layer]

    def _apply(self, layer: LayerSpec, inputs: list[Tensor], training: bool) -> Tensor:
        x = inputs[0]
        params = self.params.get(layer.id, {})
        kind = layer.kind

        if kind in CONV_KINDS:
            return F.conv2d(x, params["weight"], params["bias"], layer.stride, layer.padding, layer.groups)

        if kind == LayerKind.dense:
            return x @ F.transpose(params["weight"]) + params["bias"]

        if kind == LayerKind.maxpool:
            return F.max_pool2d(x, layer.kernel, layer.stride, layer.padding)

        if kind == LayerKind.avgpool:
            return F.avg_pool2d(x, layer.kernel, layer.stride, layer.padding)

        if kind == LayerKind.global_avgpool:
            return F.global_avg_pool(x)

        if kind == LayerKind.relu:
            return F.relu(x)

        if kind == LayerKind.batchnorm:
            return self._batch_norm(layer, x, params, training)

        if kind == LayerKind.add:
            out = inputs[0]
            for other in inputs[1:]:
                out = out + other
            return out

        if kind == LayerKind.concat:
            return F.concat(inputs, axis=1)

        if kind == LayerKind.channel_shuffle:
            return F.channel_shuffle(x, layer.groups)

        if kind == LayerKind.flatten:
            return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))

        raise NotImplementedError(f"no interpreter for layer kind {kind.value}")

    def _batch_norm(self, layer: LayerSpec, x: Tensor, params: dict[str, Tensor], training: bool) -> Tensor:
        running = self._running[layer.id]

        if training:
            out, mean, var = F.batch_norm(x, params["gamma"], params["beta"], BN_EPS)
            running["running_mean"] = (1 - BN_MOMENTUM) * running["running_mean"] + BN_MOMENTUM * mean
            running["running_var"] = (1 - BN_MOMENTUM) * running["running_var"] + BN_MOMENTUM * var
            return out

        scale = params["gamma"] * Tensor(1.0 / np.sqrt(running["running_var"] + BN_EPS))
        shift = params["beta"] - scale * Tensor(running["running_mean"])
        return F.affine_channels(x, scale, shift)

    def to_model(self) -> ModelIR:
        weights = {}

        for layer in self._model.layers:
            group = {name: p.data.copy() for name, p in self.params.get(layer.id, {}).items()}
            group.update({name: array.copy() for name, array in self._running.get(layer.id, {}).items()})

            if group:
                weights[layer.id] = group

        return self._model.with_weights(weights)


def execute(m: ModelIR, batch: np.ndarray, seed: int = 0) -> np.ndarray:
    """Inference-mode logits of a batch (n, c, h, w)."""
    with no_grad():
        return Network(m, seed=seed)(np.asarray(batch, dtype=np.float64)).data


def _predict(net: Network, images: np.ndarray) -> np.ndarray:
    predictions = []

    with no_grad():
        for start in range(0, len(images), EVAL_BATCH_SIZE):
            logits = net(images[start : start + EVAL_BATCH_SIZE]).data
            predictions.append(logits.reshape(len(logits), -1).argmax(axis=1))

    return np.concatenate(predictions)


def evaluate(m: ModelIR, d: Dataset, split: str = "validation") -> float:
    """Top-1 accuracy on a split."""
    images, labels = d.split(split)
    return float(np.mean(_predict(Network(m), images) == labels))


def fit(m: ModelIR, d: Dataset, cfg: TrainConfig) -> tuple[ModelIR, list[float]]:
    """Minimize cross-entropy on the train split. Returns the trained model and the train accuracy of every epoch.
    With `freeze_unpruned` only layers whose width was changed by pruning are updated."""
    net = Network(m, seed=cfg.seed)
    frozen = frozenset(layer.id for layer in m.layers if not layer.pruned) if cfg.freeze_unpruned else frozenset()
    params = net.layer_parameters([layer.id for layer in m.layers if layer.id not in frozen])

    if cfg.epochs == 0 or len(params) == 0:
        return net.to_model(), []

    optimizer = make_optimizer(params, cfg.optimizer)
    rng = make_rng(cfg.seed)
    images, labels = d.split("train")
    history = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        correct, total_loss = 0, 0.0

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            logits = net(images[batch], training=True, frozen=frozen)
            loss = F.softmax_cross_entropy(logits, labels[batch])

            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}")

            backward(loss)
            optimizer.step()
            net.zero_grad()

            correct += int(np.sum(logits.data.argmax(axis=1) == labels[batch]))
            total_loss += loss.item() * len(batch)

        accuracy = correct / len(labels)
        history.append(accuracy)
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs}: loss {total_loss / len(labels):.4f}, train accuracy {accuracy:.4f}.",
            extra={"epoch": epoch + 1, "loss": total_loss / len(labels), "accuracy": accuracy},
        )

    return net.to_model(), history


class Oracle:
    """Accuracy evaluator of the search environment, with an optional short fine-tune before scoring."""

    def __init__(self, dataset: Dataset, fine_tune: TrainConfig | None = None, split: str = "validation"):
        self.dataset = dataset
        self.fine_tune = fine_tune
        self.split = split

    def reward_accuracy(self, m: ModelIR) -> float:
        if self.fine_tune is not None and self.fine_tune.epochs > 0:
            m, _ = fit(m, self.dataset, self.fine_tune)

        return evaluate(m, self.dataset, self.split)

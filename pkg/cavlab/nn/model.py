import os

# 0 = All logs, 1 = Filter INFO, 2 = Filter INFO/WARNING, 3 = Filter all
os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import tensorflow as tf

from cavlab.errors import DimensionMismatch, InvalidIndexError, UnknownLayerError
from cavlab.schemas import ModelConfig, TrainingLog

logger = logging.getLogger(__name__)

NUM_BLOCKS = 6
POOLED_BLOCKS = (0, 1, 2)
LAYER_IDS = [f"layers.{i}" for i in range(NUM_BLOCKS)]
LOGITS = "logits"
BATCH = 64


def layer_index(layer: str) -> int:
    if layer == LOGITS:
        return NUM_BLOCKS
    try:
        return LAYER_IDS.index(layer)
    except ValueError:
        raise UnknownLayerError(f"Unknown layer {layer!r}; expected one of {', '.join(LAYER_IDS)}") from None


class ElementsNet(tf.keras.Model):
    """Six conv/batchnorm/activation blocks, max-pool after blocks 0-2, global average pool, linear head.

    Block i's output (after its pool, if any) is the activation of `layers.i`.
    """

    def __init__(self, config: ModelConfig, num_classes: int, float_dtype: str = "float32", seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.model_config = config
        self.num_classes = num_classes
        self.float_dtype = float_dtype
        self.blocks = []
        for i, channels in enumerate(config.channels_per_layer):
            parts = [
                tf.keras.layers.Conv2D(
                    channels,
                    config.kernel_size,
                    padding="same",
                    kernel_initializer=tf.keras.initializers.HeNormal(seed=seed + i),
                    bias_initializer="zeros",
                    dtype=float_dtype,
                ),
                tf.keras.layers.BatchNormalization(dtype=float_dtype),
                tf.keras.layers.Activation(config.activation, dtype=float_dtype),
            ]
            if i in POOLED_BLOCKS:
                parts.append(tf.keras.layers.MaxPooling2D(2, dtype=float_dtype))
            self.blocks.append(tf.keras.Sequential(parts, name=f"layers_{i}"))
        self.pool = tf.keras.layers.GlobalAveragePooling2D(dtype=float_dtype)
        self.hidden = (
            tf.keras.layers.Dense(
                config.head_hidden,
                activation="relu",
                kernel_initializer=tf.keras.initializers.HeNormal(seed=seed + NUM_BLOCKS),
                dtype=float_dtype,
            )
            if config.head_hidden
            else None
        )
        self.head = tf.keras.layers.Dense(
            num_classes,
            kernel_initializer=tf.keras.initializers.GlorotUniform(seed=seed + NUM_BLOCKS + 1),
            dtype=float_dtype,
        )

    def run_blocks(self, a, start: int, stop: int, training=False):
        for block in self.blocks[start:stop]:
            a = block(a, training=training)
        return a

    def head_logits(self, a, training=False):
        a = self.pool(a)
        if self.hidden is not None:
            a = self.hidden(a)
        return self.head(a)

    def call(self, x, training=False):
        return self.head_logits(self.run_blocks(x, 0, NUM_BLOCKS, training), training)


def build_network(config: ModelConfig, num_classes: int, float_dtype: str = "float32", seed: int = 0) -> ElementsNet:
    net = ElementsNet(config, num_classes, float_dtype=float_dtype, seed=seed)
    net(tf.zeros((1, config.input_side, config.input_side, 3), dtype=float_dtype), training=False)
    return net


@dataclass(frozen=True)
class TrainedModel:
    config: ModelConfig
    network: ElementsNet
    log: TrainingLog = field(default_factory=TrainingLog)

    @property
    def num_classes(self) -> int:
        return self.network.num_classes

    @cached_property
    def analysis_network(self) -> ElementsNet:
        # float64 copy with identical weights and frozen statistics for analysis passes
        net = build_network(self.config, self.num_classes, float_dtype="float64")
        net.set_weights([np.asarray(w, dtype=np.float64) for w in self.network.get_weights()])
        return net

    def layer_shape(self, layer: str) -> tuple[int, int, int]:
        i = layer_index(layer)
        if i == NUM_BLOCKS:
            raise UnknownLayerError("logits have no spatial shape")
        side = self.config.input_side
        for j in range(i + 1):
            if j in POOLED_BLOCKS:
                side //= 2
        return side, side, self.config.channels_per_layer[i]

    def layer_size(self, layer: str) -> int:
        h, w, d = self.layer_shape(layer)
        return h * w * d


@dataclass
class ActivationTensor:
    """Activations at one layer; `data` is (H, W, D) or a batch (N, H, W, D)."""

    layer: str
    data: np.ndarray

    def flatten(self) -> np.ndarray:
        if self.data.ndim == 3:
            return self.data.reshape(-1)
        return self.data.reshape(self.data.shape[0], -1)

    @classmethod
    def from_flat(cls, layer: str, flat: np.ndarray, shape: tuple[int, int, int]) -> "ActivationTensor":
        flat = np.asarray(flat)
        if flat.shape[-1] != int(np.prod(shape)):
            raise DimensionMismatch(f"{layer} expects {int(np.prod(shape))} values, got {flat.shape[-1]}")
        return cls(layer, flat.reshape(flat.shape[:-1] + tuple(shape)))


def _batches(n: int):
    for start in range(0, n, BATCH):
        yield slice(start, min(n, start + BATCH))


def _as_batch(x: np.ndarray, trailing: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == trailing
    return (x[None] if single else x), single


def forward_capture(model: TrainedModel, x: np.ndarray, layer: str) -> ActivationTensor:
    """Activations of `layer` in evaluation mode; accepts one image or a batch."""
    i = layer_index(layer)
    if i == NUM_BLOCKS:
        raise UnknownLayerError("forward_capture takes a block layer, not logits")
    batch, single = _as_batch(x, 3)
    net = model.analysis_network
    out = [
        net.run_blocks(tf.constant(np.asarray(batch[s], dtype=np.float64)), 0, i + 1, training=False).numpy()
        for s in _batches(len(batch))
    ]
    data = np.concatenate(out) if out else np.zeros((0,) + model.layer_shape(layer))
    return ActivationTensor(layer, data[0] if single else data)


def _check_activation(model: TrainedModel, a, layer: str) -> tuple[np.ndarray, bool]:
    data = a.data if isinstance(a, ActivationTensor) else np.asarray(a, dtype=np.float64)
    if isinstance(a, ActivationTensor) and a.layer != layer:
        raise DimensionMismatch(f"activation is from {a.layer}, expected {layer}")
    shape = model.layer_shape(layer)
    if data.ndim in (1, 2) and data.shape[-1] == int(np.prod(shape)):
        data = data.reshape(data.shape[:-1] + shape)
    if data.shape[-3:] != shape:
        raise DimensionMismatch(f"activation shape {data.shape} does not match {layer} {shape}")
    return _as_batch(np.asarray(data, dtype=np.float64), 3)


def continue_forward(model: TrainedModel, a, l1: str, l2: str):
    """Map activations at l1 to activations at l2, or to logits when l2 is 'logits'."""
    i, j = layer_index(l1), layer_index(l2)
    if i >= j:
        raise UnknownLayerError(f"{l1} must precede {l2}")
    batch, single = _check_activation(model, a, l1)
    net = model.analysis_network
    out = []
    for s in _batches(len(batch)):
        t = net.run_blocks(tf.constant(batch[s]), i + 1, min(j + 1, NUM_BLOCKS), training=False)
        if j == NUM_BLOCKS:
            t = net.head_logits(t, training=False)
        out.append(t.numpy())
    result = np.concatenate(out)
    if j == NUM_BLOCKS:
        return result[0] if single else result
    return ActivationTensor(l2, result[0] if single else result)


def logits(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(x, 3)
    net = model.analysis_network
    out = np.concatenate([net(tf.constant(np.asarray(batch[s], dtype=np.float64)), training=False).numpy() for s in _batches(len(batch))])
    return out[0] if single else out


def _check_class(model: TrainedModel, k: int) -> None:
    if not 0 <= k < model.num_classes:
        raise InvalidIndexError(f"class index {k} outside [0, {model.num_classes})")


def activation_gradients(model: TrainedModel, activations, layer: str, k: int) -> np.ndarray:
    """(N, m) gradients of logit k with respect to given activations at `layer`."""
    _check_class(model, k)
    i = layer_index(layer)
    batch, _ = _check_activation(model, activations, layer)
    net = model.analysis_network
    grads = []
    for s in _batches(len(batch)):
        a = tf.constant(batch[s])
        with tf.GradientTape() as tape:
            tape.watch(a)
            target = net.head_logits(net.run_blocks(a, i + 1, NUM_BLOCKS, training=False), training=False)[:, k]
        # samples are independent in evaluation mode, so the gradient of the sum is per-sample
        grads.append(tape.gradient(target, a).numpy().reshape(len(batch[s]), -1))
    return np.concatenate(grads) if grads else np.zeros((0, model.layer_size(layer)))


def logit_gradients(model: TrainedModel, x: np.ndarray, layer: str, k: int) -> np.ndarray:
    _check_class(model, k)
    batch, _ = _as_batch(x, 3)
    return activation_gradients(model, forward_capture(model, batch, layer), layer, k)


def grad_logit_wrt_activation(model: TrainedModel, x: np.ndarray, layer: str, k: int) -> np.ndarray:
    """Exact reverse-mode gradient of logit k w.r.t. the layer activation of one image, flattened."""
    return logit_gradients(model, np.asarray(x)[None], layer, k)[0]


def evaluate(model: TrainedModel, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean binary cross-entropy and per-(image, class) accuracy at logit threshold 0."""
    z = logits(model, images)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise DimensionMismatch(f"labels {y.shape} do not match logits {z.shape}")
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    accuracy = np.mean((z > 0) == (y > 0.5))
    return float(loss), float(accuracy)


def has_downstream_nonlinearity(config: ModelConfig, block: int) -> bool:
    if config.head_hidden:
        return True
    for j in range(block + 1, NUM_BLOCKS):
        if config.activation != "linear" or j in POOLED_BLOCKS:
            return True
    return False


def eligible_layers(
    model: TrainedModel | ModelConfig,
    layer_accuracy: dict[str, float] | None = None,
    min_accuracy: float = 0.9,
) -> list[str]:
    """Layers worth running TCAV on.

    Without a downstream nonlinearity the logit gradient is constant, so
    scores are exactly 0 or 1; such layers are dropped, as are layers whose
    probe accuracy is below `min_accuracy` when accuracies are given.
    """
    config = model.config if isinstance(model, TrainedModel) else model
    layers = [LAYER_IDS[i] for i in range(NUM_BLOCKS) if has_downstream_nonlinearity(config, i)]
    if layer_accuracy:
        dropped = [l for l in layers if layer_accuracy.get(l, 1.0) < min_accuracy]
        if dropped:
            logger.info("excluding low-accuracy layers: %s", ", ".join(dropped))
        layers = [l for l in layers if l not in dropped]
    return layers

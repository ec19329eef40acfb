import logging

import numpy as np
import tensorflow as tf

from cavlab.errors import DimensionMismatch
from cavlab.nn.model import TrainedModel, build_network
from cavlab.schemas import EpochRecord, ModelConfig, OptimizerConfig, TrainingLog

logger = logging.getLogger(__name__)


class StopAtAccuracy(tf.keras.callbacks.Callback):
    """Stop once the epoch's per-(image, class) training accuracy exceeds the threshold."""

    def __init__(self, threshold: float):
        super().__init__()
        self.threshold = threshold
        self.reached = False

    def on_epoch_end(self, epoch, logs=None):
        accuracy = (logs or {}).get("accuracy", 0.0)
        if accuracy > self.threshold:
            self.reached = True
            self.model.stop_training = True


def _shuffled_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int) -> tf.data.Dataset:
    rng = np.random.default_rng(seed)
    side = images.shape[1]

    def generator():
        # the generator is re-entered every epoch; rng state carries over, so each epoch reshuffles
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start : start + batch_size])
            yield images[idx], labels[idx]

    return tf.data.Dataset.from_generator(
        generator,
        output_signature=(
            tf.TensorSpec((None, side, side, 3), tf.float32),
            tf.TensorSpec((None, labels.shape[1]), tf.float32),
        ),
    ).prefetch(2)


def compile_network(net, optimizer_config: OptimizerConfig) -> None:
    net.compile(
        optimizer=tf.keras.optimizers.Adam(optimizer_config.learning_rate),
        loss=tf.keras.losses.BinaryCrossentropy(from_logits=True),
        metrics=[tf.keras.metrics.BinaryAccuracy(name="accuracy", threshold=0.0)],
    )


def train(
    model_config: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    optimizer_config: OptimizerConfig | None = None,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    verbose: int = 0,
) -> TrainedModel:
    """Train the multi-label head with per-class sigmoid and binary cross-entropy under Adam.

    Training stops once training accuracy passes the threshold or after
    `max_epochs`; a model that never got there is still returned, with the
    warning recorded in its log.
    """
    optimizer_config = optimizer_config or OptimizerConfig()
    num_classes = model_config.num_classes or labels.shape[1]
    if labels.shape[1] != num_classes:
        raise DimensionMismatch(f"dataset has {labels.shape[1]} classes, model expects {num_classes}")
    if images.shape[1:] != (model_config.input_side, model_config.input_side, 3):
        raise DimensionMismatch(f"images {images.shape[1:]} do not match input_side {model_config.input_side}")

    tf.keras.utils.set_random_seed(optimizer_config.seed)
    tf.config.experimental.enable_op_determinism()
    net = build_network(model_config, num_classes, seed=optimizer_config.seed)
    compile_network(net, optimizer_config)

    if optimizer_config.max_epochs == 0:
        warning = "max_epochs is 0; returning the initialized model"
        logger.warning(warning)
        return TrainedModel(model_config, net, TrainingLog(converged=False, warning=warning))

    val_data = None
    if validation is not None:
        val_data = tf.data.Dataset.from_tensor_slices(
            (validation[0].astype(np.float32), validation[1].astype(np.float32))
        ).batch(optimizer_config.batch_size)
    stopper = StopAtAccuracy(optimizer_config.accuracy_threshold)
    history = net.fit(
        _shuffled_batches(images, labels, optimizer_config.batch_size, optimizer_config.seed),
        validation_data=val_data,
        epochs=optimizer_config.max_epochs,
        callbacks=[stopper],
        verbose=verbose,
    )
    log = training_log(history.history, stopper.reached, optimizer_config)
    if log.warning:
        logger.warning(log.warning)
    return TrainedModel(model_config, net, log)


def training_log(history: dict, converged: bool, optimizer_config: OptimizerConfig) -> TrainingLog:
    epochs = []
    for e, (loss, acc) in enumerate(zip(history.get("loss", []), history.get("accuracy", []))):
        val_loss = history.get("val_loss", [])
        val_acc = history.get("val_accuracy", [])
        epochs.append(
            EpochRecord(
                epoch=e + 1,
                loss=float(loss),
                accuracy=float(acc),
                val_loss=float(val_loss[e]) if e < len(val_loss) else None,
                val_accuracy=float(val_acc[e]) if e < len(val_acc) else None,
            )
        )
    warning = None
    if not converged:
        warning = (
            f"training accuracy did not exceed {optimizer_config.accuracy_threshold} "
            f"within {optimizer_config.max_epochs} epochs"
        )
    return TrainingLog(epochs=epochs, converged=converged, warning=warning)


def fit_steps(model: TrainedModel, images: np.ndarray, labels: np.ndarray, steps: int, optimizer_config=None) -> list[float]:
    """Run `steps` optimizer updates on one fixed batch and return the loss seen before each update."""
    compile_network(model.network, optimizer_config or OptimizerConfig())
    losses = []
    for _ in range(steps):
        result = model.network.train_on_batch(images, labels)
        losses.append(float(result[0] if isinstance(result, (list, tuple)) else result))
    model.__dict__.pop("analysis_network", None)
    return losses


"""Versioned checkpoint: named float32 weight tensors plus the model config and training log."""
import json
import logging

import numpy as np

from cavlab.errors import DimensionMismatch, SchemaVersionError
from cavlab.nn.model import TrainedModel, build_network
from cavlab.schemas import ModelConfig, TrainingLog
from cavlab.storage import decode_bundle, encode_bundle

logger = logging.getLogger(__name__)


def _weight_names(network) -> list[str]:
    return [f"{i:03d}:{getattr(w, 'path', None) or w.name}" for i, w in enumerate(network.weights)]


def save_checkpoint(model: TrainedModel) -> bytes:
    names = _weight_names(model.network)
    weights = model.network.get_weights()
    meta = {
        "kind": "checkpoint",
        "num_classes": model.num_classes,
        "model_config": json.loads(model.config.model_dump_json()),
        "training_log": json.loads(model.log.model_dump_json()),
    }
    return encode_bundle(dict(zip(names, weights)), meta=meta, dtype="<f4")


def load_checkpoint(data: bytes) -> TrainedModel:
    arrays, meta = decode_bundle(data)
    if meta.get("kind") != "checkpoint":
        raise SchemaVersionError(f"expected a checkpoint bundle, got {meta.get('kind')!r}")
    config = ModelConfig.model_validate(meta["model_config"])
    network = build_network(config, int(meta["num_classes"]))
    stored = list(arrays.values())
    expected = network.get_weights()
    if len(stored) != len(expected):
        raise DimensionMismatch(f"checkpoint holds {len(stored)} tensors, network has {len(expected)}")
    for name, have, want in zip(arrays, stored, expected):
        if have.shape != want.shape:
            raise DimensionMismatch(f"Checkpoint mismatch for {name}: {have.shape} vs {want.shape}")
    network.set_weights([np.asarray(a, dtype=np.float32) for a in stored])
    return TrainedModel(config, network, TrainingLog.model_validate(meta["training_log"]))

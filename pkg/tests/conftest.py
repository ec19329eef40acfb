import numpy as np
import pytest

from cavlab.elements.classes import ClassTable
from cavlab.nn.model import TrainedModel, build_network
from cavlab.schemas import (
    AnalysisConfig,
    DatasetConfig,
    ExperimentConfig,
    ModelConfig,
    OptimiseConfig,
    OptimizerConfig,
    ProbeConfig,
)


@pytest.fixture
def tiny_dataset_config() -> DatasetConfig:
    # 16 px images, elements of 3-5 px: fast to render, still six concepts
    return DatasetConfig(
        palette=["red", "green"],
        shapes=["square", "triangle"],
        textures=["solid", "stripes"],
        elements_per_image=2,
        image_side=16,
        seed=3,
        n_train=24,
        n_val=8,
    )


@pytest.fixture
def tiny_table(tiny_dataset_config) -> ClassTable:
    return ClassTable.from_config(tiny_dataset_config)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(channels_per_layer=[4, 4, 4, 4, 4, 4], input_side=16)


@pytest.fixture
def tiny_model(tiny_model_config, tiny_table) -> TrainedModel:
    network = build_network(tiny_model_config, len(tiny_table), seed=1)
    return TrainedModel(tiny_model_config, network)


@pytest.fixture
def tiny_experiment(tiny_dataset_config, tiny_model_config) -> ExperimentConfig:
    return ExperimentConfig(
        name="tiny",
        dataset=tiny_dataset_config,
        model=tiny_model_config,
        training=OptimizerConfig(max_epochs=1, batch_size=8, seed=3),
        probes=ProbeConfig(n_positive=12, n_negative=12, num_random=3, random_cav_count=3, iterations=50, seed=3),
        analysis=AnalysisConfig(
            layers=["layers.1", "layers.2"],
            concepts=["red", "green", "triangle"],
            classes=["red+triangle", "green+square"],
            class_inputs=4,
            consistency_pairs=[("layers.1", "layers.2")],
            consistency_cavs=2,
            gammas=[0.0, 0.01, 0.02],
            optimise=OptimiseConfig(steps=5, n_inputs=6),
            entanglement_pairs=[("red", "triangle")],
        ),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_images(rng) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(5, 16, 16, 3)).astype(np.float32)

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from cavlab.config import thread_cap
from cavlab.elements.classes import ClassTable, assign_classes, class_present
from cavlab.elements.render import render_image
from cavlab.elements.scene import sample_scene, stream
from cavlab.errors import NumericError
from cavlab.schemas import DatasetConfig, SceneSpec

logger = logging.getLogger(__name__)


@dataclass
class GeneratedSplit:
    split: str
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray  # (N, K) float32
    scenes: list[SceneSpec]


def _render_index(config: DatasetConfig, table: ClassTable, split: str, index: int):
    scene = sample_scene(config, stream(config.seed, split, index), index=index)
    return scene, render_image(scene, config), assign_classes(scene, table)


def generate_dataset(
    config: DatasetConfig,
    table: ClassTable,
    n_images: int,
    split: str = "train",
    threads: int | None = None,
    progress: bool = False,
) -> GeneratedSplit:
    """Generate `n_images` labelled images.

    Each image has its own stream keyed by (seed, split, index), so the output
    does not depend on the thread count.
    """
    side = config.image_side
    images = np.zeros((n_images, side, side, 3), dtype=np.float32)
    labels = np.zeros((n_images, len(table)), dtype=np.float32)
    scenes: list[SceneSpec] = []
    workers = thread_cap(threads)
    logger.info("generating %d %s images with %d threads", n_images, split, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = pool.map(lambda i: _render_index(config, table, split, i), range(n_images))
        for i, (scene, image, label) in enumerate(
            tqdm(results, total=n_images, desc=f"gen {split}", disable=not progress)
        ):
            images[i] = image
            labels[i] = label
            scenes.append(scene)
    return GeneratedSplit(split=split, images=images, labels=labels, scenes=scenes)


def class_inputs(
    config: DatasetConfig,
    table: ClassTable,
    class_name: str,
    n: int,
    max_draws: int | None = None,
) -> tuple[np.ndarray, list[SceneSpec]]:
    """In-distribution images containing the class, found by rejection sampling."""
    class_def = table.get(class_name)
    max_draws = max_draws if max_draws is not None else 1000 * n
    images, scenes = [], []
    for j in range(max_draws):
        scene = sample_scene(config, stream(config.seed, "class", class_name, j), index=j)
        if class_present(scene, class_def, config.image_side):
            scenes.append(scene)
            images.append(render_image(scene, config))
            if len(images) == n:
                return np.stack(images), scenes
    raise NumericError(f"found only {len(images)} of {n} images for class {class_name!r} in {max_draws} draws")

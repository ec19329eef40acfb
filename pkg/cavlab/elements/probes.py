import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from cavlab.elements.concepts import check_region, concept_group
from cavlab.elements.render import render_image
from cavlab.elements.scene import sample_scene, stream
from cavlab.schemas import DatasetConfig, SceneSpec


def fingerprint(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype="<f4").tobytes()).hexdigest()[:16]


@dataclass
class ProbeDataset:
    concept: str
    r: int
    location: Optional[str]
    positive_images: np.ndarray
    negative_images: np.ndarray
    positive_scenes: list[SceneSpec]
    negative_scenes: list[SceneSpec]

    @property
    def label(self) -> str:
        return f"{self.concept}@{self.location}" if self.location else self.concept

    @property
    def positive_fingerprint(self) -> str:
        return fingerprint(self.positive_images)


def _render_all(config: DatasetConfig, scenes: list[SceneSpec]) -> np.ndarray:
    side = config.image_side
    if not scenes:
        return np.zeros((0, side, side, 3), dtype=np.float32)
    return np.stack([render_image(s, config) for s in scenes])


def positive_set(config: DatasetConfig, concept: str, n: int, location: str | None = None):
    """Images whose every element carries `concept` (and lies in `location`).

    The stream does not involve the random index, so all R probes of a
    concept share this set.
    """
    concept_group(config, concept)
    check_region(location)
    scenes = [
        sample_scene(config, stream(config.seed, "positive", concept, location, i), i, concept, location)
        for i in range(n)
    ]
    return _render_all(config, scenes), scenes


@lru_cache(maxsize=64)
def _random_set_cached(config_json: str, r: int, n: int):
    config = DatasetConfig.model_validate_json(config_json)
    scenes = [sample_scene(config, stream(config.seed, "random", r, i), i) for i in range(n)]
    return _render_all(config, scenes), scenes


def random_set(config: DatasetConfig, r: int, n: int) -> tuple[np.ndarray, list[SceneSpec]]:
    """Unconstrained in-distribution images for random index r, shared by every concept."""
    images, scenes = _random_set_cached(config.model_dump_json(), int(r), int(n))
    return images.copy(), list(scenes)


def build_probe(
    config: DatasetConfig,
    concept: str,
    r: int,
    location: str | None = None,
    n_positive: int = 150,
    n_negative: int = 150,
) -> ProbeDataset:
    pos_images, pos_scenes = positive_set(config, concept, n_positive, location)
    neg_images, neg_scenes = random_set(config, r, n_negative)
    return ProbeDataset(
        concept=concept,
        r=r,
        location=location,
        positive_images=pos_images,
        negative_images=neg_images,
        positive_scenes=pos_scenes,
        negative_scenes=neg_scenes,
    )

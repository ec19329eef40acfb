import logging
import zlib

import numpy as np

from cavlab.elements.concepts import allowed_combinations, check_region, concept_group, texture_period
from cavlab.errors import ConfigError, PlacementError
from cavlab.schemas import DatasetConfig, ElementSpec, SceneSpec

logger = logging.getLogger(__name__)

# full scene redraws before a placement failure is reported
SCENE_RESTARTS = 50


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by the dataset seed and a tuple of tags.

    Integer tags are used as-is, anything else through its crc32, so
    ("random", 3, 17) and ("positive", "red", None, 17) never share a stream.
    """
    words = [int(seed)]
    for tag in tags:
        if isinstance(tag, (int, np.integer)) and not isinstance(tag, bool) and tag >= 0:
            words.append(int(tag))
        else:
            words.append(zlib.crc32(repr(tag).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def position_range(side: int, size: int, region: str | None, axis: str) -> tuple[int, int]:
    """Inclusive range of top-left coordinates along one axis.

    A region only constrains its own axis; odd sides leave the middle
    row/column in neither half.
    """
    lo, hi = 0, side - size
    first_half = {"x": "left", "y": "top"}[axis]
    second_half = {"x": "right", "y": "bottom"}[axis]
    if region == first_half:
        hi = side // 2 - size
    elif region == second_half:
        lo = (side + 1) // 2
    return lo, hi


def _overlaps(a: ElementSpec, b: ElementSpec) -> bool:
    return a.x < b.x + b.size and b.x < a.x + a.size and a.y < b.y + b.size and b.y < a.y + a.size


def _draw_attributes(config: DatasetConfig, rng: np.random.Generator, concept: str | None):
    required = {concept_group(config, concept): concept} if concept is not None else {}
    combos = allowed_combinations(config, required)
    textures = [t for t in config.textures if required.get("texture", t) == t]
    if not combos or not textures:
        raise ConfigError(f"concept {concept!r} cannot occur under {config.combination_rule}")
    colour, shape = combos[int(rng.integers(len(combos)))]
    texture = textures[int(rng.integers(len(textures)))]
    b_lo, b_hi = config.brightness_range
    brightness = int(rng.integers(b_lo, b_hi + 1))
    return colour, shape, texture, brightness


def _place(config, rng, attrs, location, placed) -> ElementSpec | None:
    colour, shape, texture, brightness = attrs
    s_lo, s_hi = config.element_sizes
    side = config.image_side
    for _ in range(config.max_placement_attempts):
        size = int(rng.integers(s_lo, s_hi + 1))
        x_lo, x_hi = position_range(side, size, location, "x")
        y_lo, y_hi = position_range(side, size, location, "y")
        if x_hi < x_lo or y_hi < y_lo:
            continue
        element = ElementSpec(
            colour=colour,
            brightness=brightness,
            size=size,
            shape=shape,
            texture=texture,
            texture_shift=int(rng.integers(texture_period(texture, size))),
            x=int(rng.integers(x_lo, x_hi + 1)),
            y=int(rng.integers(y_lo, y_hi + 1)),
        )
        if not any(_overlaps(element, other) for other in placed):
            return element
    return None


def sample_scene(
    config: DatasetConfig,
    rng: np.random.Generator,
    index: int = 0,
    concept: str | None = None,
    location: str | None = None,
) -> SceneSpec:
    """Draw `elements_per_image` non-overlapping elements.

    With `concept` set every element carries it; with `location` set every
    element lies fully inside that half of the image.
    """
    check_region(location)
    for _ in range(SCENE_RESTARTS):
        placed: list[ElementSpec] = []
        for _ in range(config.elements_per_image):
            element = _place(config, rng, _draw_attributes(config, rng, concept), location, placed)
            if element is None:
                break
            placed.append(element)
        else:
            return SceneSpec(index=index, elements=placed)
        logger.debug("restarting placement for image %d", index)
    raise PlacementError(
        f"Could not place {config.elements_per_image} elements without overlap in image {index} "
        f"after {SCENE_RESTARTS} restarts of {config.max_placement_attempts} attempts"
    )

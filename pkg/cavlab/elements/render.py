import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cavlab.elements.concepts import texture_period
from cavlab.schemas import COLOUR_RGB, DatasetConfig, ElementSpec, SceneSpec


def shape_mask(shape: str, size: int) -> np.ndarray:
    # sampled at pixel centres in element-local coordinates
    v, u = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (u - c) ** 2 + (v - c) ** 2 <= c**2
    if shape == "triangle":
        # apex at the top centre, base along the bottom edge
        return np.abs(u - c) <= (v / size) * c
    if shape == "plus":
        arm = size / 6
        return (np.abs(u - c) <= arm) | (np.abs(v - c) <= arm)
    if shape == "cross":
        arm = size / 8
        return (np.abs(u - v) / np.sqrt(2) <= arm) | (np.abs(u + v - size) / np.sqrt(2) <= arm)
    raise ValueError(f"unknown shape {shape!r}")


def texture_mask(texture: str, size: int, shift: int) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size] + 0.5
    p = texture_period(texture, size)
    if texture == "solid":
        return np.ones((size, size), dtype=bool)
    if texture == "spots":
        du = np.mod(u + shift, p) - p / 2
        dv = np.mod(v + shift, p) - p / 2
        return du**2 + dv**2 <= (size / 10) ** 2
    if texture == "stripes":
        return np.mod(u + v + shift, p) < p / 2
    raise ValueError(f"unknown texture {texture!r}")


def draw_element(image: np.ndarray, element: ElementSpec) -> None:
    s = element.size
    mask = shape_mask(element.shape, s) & texture_mask(element.texture, s, element.texture_shift)
    rgb = np.asarray(COLOUR_RGB[element.colour], dtype=np.float32) * np.float32(element.brightness / 255)
    patch = image[element.y : element.y + s, element.x : element.x + s]
    patch[mask] = rgb


def render_image(scene: SceneSpec, config: DatasetConfig) -> np.ndarray:
    """Rasterize a scene onto a black H x W x 3 float32 canvas."""
    side = config.image_side
    image = np.zeros((side, side, 3), dtype=np.float32)
    for element in scene.elements:
        if element.x + element.size > side or element.y + element.size > side:
            raise ValueError(f"element at ({element.x}, {element.y}) size {element.size} leaves the image")
        draw_element(image, element)
    return image


def save_png(image: np.ndarray, path) -> None:
    plt.imsave(path, np.clip(image, 0.0, 1.0))

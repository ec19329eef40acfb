"""Ground-truth class table: every satisfiable cross-group pair and triple of concepts."""
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Optional

import numpy as np

from cavlab.elements.concepts import AXIS_REGIONS, GROUP_ORDER, allowed_combinations, concept_groups
from cavlab.errors import UnknownConceptError
from cavlab.schemas import DatasetConfig, ElementSpec, SceneSpec


@dataclass(frozen=True)
class ClassDef:
    concepts: tuple[str, ...]
    region: Optional[str] = None

    @property
    def name(self) -> str:
        base = "+".join(self.concepts)
        return f"{base}@{self.region}" if self.region else base


def element_region_match(element: ElementSpec, region: str | None, side: int) -> bool:
    """Class regions are decided by the element centre; a centre on the midline is in neither half."""
    if region is None:
        return True
    twice_cx = 2 * element.x + element.size
    twice_cy = 2 * element.y + element.size
    return {
        "left": twice_cx < side,
        "right": twice_cx > side,
        "top": twice_cy < side,
        "bottom": twice_cy > side,
    }[region]


def _satisfiable(config: DatasetConfig, assignment: dict[str, str]) -> bool:
    return bool(allowed_combinations(config, assignment))


@dataclass
class ClassTable:
    config: DatasetConfig
    classes: list[ClassDef] = field(default_factory=list)

    @classmethod
    def from_config(cls, config: DatasetConfig) -> "ClassTable":
        groups = concept_groups(config)
        classes: list[ClassDef] = []
        for arity in (2, 3):
            for group_set in combinations(GROUP_ORDER, arity):
                for values in product(*(groups[g] for g in group_set)):
                    if _satisfiable(config, dict(zip(group_set, values))):
                        classes.append(ClassDef(tuple(values)))
        if config.spatial_classes:
            spatial = []
            for shape, axis in config.spatial_axes.items():
                for base in classes:
                    if shape in base.concepts:
                        spatial.extend(ClassDef(base.concepts, region) for region in AXIS_REGIONS[axis])
            classes.extend(spatial)
        return cls(config=config, classes=classes)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownConceptError(f"Unknown class {name!r}") from None

    def get(self, name: str) -> ClassDef:
        return self.classes[self.index(name)]


def class_present(scene: SceneSpec, class_def: ClassDef, side: int) -> bool:
    return any(
        all(c in (e.colour, e.texture, e.shape) for c in class_def.concepts)
        and element_region_match(e, class_def.region, side)
        for e in scene.elements
    )


def assign_classes(scene: SceneSpec, table: ClassTable) -> np.ndarray:
    """Multi-label vector: 1 where some element carries every concept of the class."""
    side = table.config.image_side
    return np.array([class_present(scene, c, side) for c in table.classes], dtype=np.float32)

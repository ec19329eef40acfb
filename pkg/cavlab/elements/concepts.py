"""Attribute groups of the Elements dataset and the red/triangle co-occurrence rules."""
from cavlab.errors import UnknownConceptError, UnknownRegionError
from cavlab.schemas import DatasetConfig, ElementSpec

GROUP_ORDER = ("colour", "texture", "shape")
REGIONS = ("left", "right", "top", "bottom")
AXIS_REGIONS = {"horizontal": ("left", "right"), "vertical": ("top", "bottom")}


def concept_groups(config: DatasetConfig) -> dict[str, list[str]]:
    return {"colour": list(config.palette), "texture": list(config.textures), "shape": list(config.shapes)}


def all_concepts(config: DatasetConfig) -> list[str]:
    groups = concept_groups(config)
    return [c for g in GROUP_ORDER for c in groups[g]]


def concept_group(config: DatasetConfig, concept: str) -> str:
    for group, values in concept_groups(config).items():
        if concept in values:
            return group
    raise UnknownConceptError(f"Unknown concept {concept!r}; known: {', '.join(all_concepts(config))}")


def check_region(region: str | None) -> None:
    if region is not None and region not in REGIONS:
        raise UnknownRegionError(f"Unknown region {region!r}; expected one of {', '.join(REGIONS)}")


def allowed(config: DatasetConfig, colour: str, shape: str) -> bool:
    rule = config.combination_rule
    if rule == "E2_only_triangles_red":
        return colour != "red" or shape == "triangle"
    if rule == "E3_red_iff_triangle":
        return (colour == "red") == (shape == "triangle")
    return True


def allowed_combinations(config: DatasetConfig, required: dict[str, str] | None = None) -> list[tuple[str, str]]:
    """(colour, shape) pairs permitted by the rule and matching `required` group values."""
    required = required or {}
    return [
        (c, s)
        for c in config.palette
        for s in config.shapes
        if allowed(config, c, s) and required.get("colour", c) == c and required.get("shape", s) == s
    ]


def carries(element: ElementSpec, concept: str) -> bool:
    return concept in (element.colour, element.shape, element.texture)


def texture_period(texture: str, size: int) -> int:
    # spots: lattice period size/4; stripes: period size/5 (45 degree lattice)
    if texture == "spots":
        return max(2, round(size / 4))
    if texture == "stripes":
        return max(2, round(size / 5))
    return 1


TEXTURE_GEOMETRY = {
    "spots": "dot radius size/10 on a square lattice of period size/4, shifted by texture_shift",
    "stripes": "45 degree stripes, period size/5, half duty cycle, shifted by texture_shift",
    "solid": "filled",
}
OVERLAP_POLICY = "bounding boxes pairwise disjoint; rejection sampling with redrawn size and position"

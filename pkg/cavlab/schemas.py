from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cavlab.config import SCHEMA_VERSION, TOOL_VERSION

COLOUR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
STANDARD_PALETTE = ["red", "green", "blue", "yellow", "cyan", "magenta"]
SIMPLE_PALETTE = ["red", "green", "blue"]
STANDARD_SHAPES = ["square", "circle", "triangle", "plus", "cross"]
SIMPLE_SHAPES = ["square", "circle", "triangle", "plus"]
TEXTURES = ["solid", "spots", "stripes"]

CombinationRule = Literal["E1_unrestricted", "E2_only_triangles_red", "E3_red_iff_triangle"]
Region = Literal["left", "right", "top", "bottom"]
Axis = Literal["horizontal", "vertical"]
Activation = Literal["relu", "linear", "sigmoid"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- elements

class ElementSpec(StrictModel):
    colour: str
    brightness: int = Field(ge=0, le=255)
    size: int = Field(gt=0)
    shape: str
    texture: str
    texture_shift: int = Field(ge=0)
    x: int = Field(ge=0)
    y: int = Field(ge=0)


class SceneSpec(StrictModel):
    index: int = 0
    elements: list[ElementSpec] = Field(default_factory=list)


class DatasetConfig(StrictModel):
    palette: list[str] = Field(default_factory=lambda: list(SIMPLE_PALETTE))
    shapes: list[str] = Field(default_factory=lambda: list(SIMPLE_SHAPES))
    textures: list[str] = Field(default_factory=lambda: list(TEXTURES))
    elements_per_image: int = Field(default=4, ge=0)
    image_side: int = Field(default=64, ge=8)
    brightness_range: tuple[int, int] = (153, 255)
    # None scales the 48-80 px range at 256 px to the image side
    size_range: Optional[tuple[int, int]] = None
    combination_rule: CombinationRule = "E1_unrestricted"
    spatial_classes: bool = False
    spatial_axes: dict[str, Axis] = Field(
        default_factory=lambda: {"square": "horizontal", "triangle": "vertical"}
    )
    seed: int = Field(default=0, ge=0, lt=2**64)
    max_placement_attempts: int = Field(default=1000, ge=1)
    n_train: int = Field(default=20000, ge=0)
    n_val: int = Field(default=2000, ge=0)

    @field_validator("palette")
    @classmethod
    def _known_colours(cls, palette):
        unknown = [c for c in palette if c not in COLOUR_RGB]
        if unknown:
            raise ValueError(f"unknown colours: {unknown}")
        if len(set(palette)) != len(palette):
            raise ValueError("palette has duplicates")
        return palette

    @field_validator("shapes")
    @classmethod
    def _known_shapes(cls, shapes):
        unknown = [s for s in shapes if s not in STANDARD_SHAPES]
        if unknown:
            raise ValueError(f"unknown shapes: {unknown}")
        return shapes

    @field_validator("textures")
    @classmethod
    def _known_textures(cls, textures):
        unknown = [t for t in textures if t not in TEXTURES]
        if unknown:
            raise ValueError(f"unknown textures: {unknown}")
        return textures

    @model_validator(mode="after")
    def _ranges_fit(self):
        lo, hi = self.brightness_range
        if not 0 <= lo <= hi <= 255:
            raise ValueError(f"brightness_range {self.brightness_range} outside [0, 255]")
        s_lo, s_hi = self.element_sizes
        if not 1 <= s_lo <= s_hi <= self.image_side:
            raise ValueError(f"size range {(s_lo, s_hi)} does not fit image_side {self.image_side}")
        for shape in self.spatial_axes:
            if shape not in STANDARD_SHAPES:
                raise ValueError(f"spatial_axes names unknown shape {shape!r}")
        return self

    @property
    def element_sizes(self) -> tuple[int, int]:
        if self.size_range is not None:
            return self.size_range
        return max(1, 48 * self.image_side // 256), max(1, 80 * self.image_side // 256)

    @classmethod
    def simple(cls, **overrides) -> "DatasetConfig":
        return cls(**{"palette": list(SIMPLE_PALETTE), "shapes": list(SIMPLE_SHAPES), **overrides})

    @classmethod
    def standard(cls, **overrides) -> "DatasetConfig":
        return cls(**{"palette": list(STANDARD_PALETTE), "shapes": list(STANDARD_SHAPES), **overrides})


# ---------------------------------------------------------------- model

MODEL_PRESETS = {
    "simple": [64, 64, 64, 64, 64, 64],
    "standard": [64, 64, 64, 128, 128, 128],
    "spatial": [64, 64, 128, 256, 256, 256],
}


class ModelConfig(StrictModel):
    channels_per_layer: list[int] = Field(default_factory=lambda: list(MODEL_PRESETS["simple"]))
    # 0 means "derive from the class table"
    num_classes: int = Field(default=0, ge=0)
    input_side: int = Field(default=64, ge=8)
    activation: Activation = "relu"
    head_hidden: int = Field(default=0, ge=0)
    kernel_size: int = Field(default=3, ge=1)

    @field_validator("channels_per_layer")
    @classmethod
    def _six_blocks(cls, channels):
        if len(channels) != 6:
            raise ValueError(f"expected 6 convolutional blocks, got {len(channels)}")
        if any(c < 1 for c in channels):
            raise ValueError("channel counts must be positive")
        return channels

    @model_validator(mode="after")
    def _pools_fit(self):
        if self.input_side % 8:
            raise ValueError(f"input_side {self.input_side} must be divisible by 8 (three 2x max-pools)")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {name!r}")
        return cls(channels_per_layer=list(MODEL_PRESETS[name]), **overrides)


class OptimizerConfig(StrictModel):
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=100, ge=0)
    accuracy_threshold: float = Field(default=0.995, gt=0, le=1)
    seed: int = 0


class ProbeConfig(StrictModel):
    n_positive: int = Field(default=150, ge=2)
    n_negative: int = Field(default=150, ge=2)
    test_fraction: float = Field(default=1 / 3, gt=0, lt=1)
    num_random: int = Field(default=30, ge=2)
    random_cav_count: int = Field(default=30, ge=1)
    l2: float = Field(default=1e-4, ge=0)
    iterations: int = Field(default=500, ge=1)
    standardize: bool = False
    seed: int = 0


class OptimiseConfig(StrictModel):
    learning_rate: float = Field(default=1e-2, gt=0)
    steps: int = Field(default=300, ge=1)
    n_inputs: int = Field(default=256, ge=1)
    # multiplicative decay per step; 1.0 keeps the rate constant
    decay_rate: float = Field(default=1.0, gt=0, le=1)
    patience: int = Field(default=10, ge=1)


class AnalysisConfig(StrictModel):
    layers: list[str] = Field(default_factory=lambda: ["layers.1", "layers.2", "layers.3", "layers.4"])
    concepts: list[str] = Field(default_factory=list)
    classes: list[str] = Field(default_factory=list)
    # location-constrained probe variants captured for every concept
    locations: list[Region] = Field(default_factory=list)
    exclude_low_accuracy_layers: bool = False
    gamma: float = 0.01
    gammas: list[float] = Field(default_factory=lambda: [0.0, 0.005, 0.01, 0.015, 0.02])
    p_threshold: float = Field(default=0.01, gt=0, lt=1)
    class_inputs: int = Field(default=200, ge=1)
    min_cav_accuracy: float = Field(default=0.9, ge=0, le=1)
    entanglement_threshold: float = Field(default=0.95, gt=0, lt=1)
    spatial_threshold: float = Field(default=0.95, gt=0, lt=1)
    mass_threshold: float = Field(default=0.7, gt=0, lt=1)
    consistency_pairs: list[tuple[str, str]] = Field(
        default_factory=lambda: [("layers.1", "layers.2"), ("layers.2", "layers.3"), ("layers.3", "layers.4")]
    )
    consistency_cavs: int = Field(default=10, ge=1)
    projected_recentre: bool = True
    optimise: OptimiseConfig = Field(default_factory=OptimiseConfig)
    entanglement_pairs: list[tuple[str, str]] = Field(default_factory=lambda: [("red", "triangle")])


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: OptimizerConfig = Field(default_factory=OptimizerConfig)
    probes: ProbeConfig = Field(default_factory=ProbeConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    @model_validator(mode="after")
    def _sides_agree(self):
        if self.model.input_side != self.dataset.image_side:
            raise ValueError(
                f"model.input_side ({self.model.input_side}) must equal dataset.image_side ({self.dataset.image_side})"
            )
        return self


# ---------------------------------------------------------------- manifests

class DatasetManifest(StrictModel):
    schema_version: int = SCHEMA_VERSION
    config: DatasetConfig
    split: str
    seed: int
    classes: list[str]
    texture_geometry: dict[str, str]
    overlap_policy: str
    scenes: list[SceneSpec]
    images_digest: str
    labels_digest: str


class EpochRecord(StrictModel):
    epoch: int
    loss: float
    accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None


class TrainingLog(StrictModel):
    epochs: list[EpochRecord] = Field(default_factory=list)
    converged: bool = False
    warning: Optional[str] = None
    loss_function: str = "per-class sigmoid + binary cross-entropy"


class ExperimentManifest(StrictModel):
    schema_version: int = SCHEMA_VERSION
    tool_version: str = TOOL_VERSION
    stage: str
    config: ExperimentConfig
    inputs: dict[str, str] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)
    training_log_digest: Optional[str] = None
    notes: dict[str, str] = Field(default_factory=dict)


# ---------------------------------------------------------------- reports

class TcavReport(StrictModel):
    concept: str
    class_name: str
    layer: str
    scores: list[float]
    mean: float
    std: float
    null_scores: list[float] = Field(default_factory=list)
    null_mean: float
    p_value: float
    p_threshold: float = 0.01
    significant: bool
    cav_accuracy: Optional[float] = None

    @model_validator(mode="after")
    def _consistent(self):
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("TCAV scores must lie in [0, 1]")
        if self.significant != (self.p_value < self.p_threshold):
            raise ValueError("significant must equal p_value < p_threshold")
        return self

    @property
    def flag(self) -> str:
        # figure convention: black for significant, red for insignificant
        return "black" if self.significant else "red"

    @property
    def above_null(self) -> bool:
        return self.mean > self.null_mean


class ConsistencyScoreReport(StrictModel):
    concept: str
    class_name: str
    layers: list[str]
    above_null: list[bool]
    score: float = Field(ge=0, le=1)


class ConsistencyReport(StrictModel):
    concept: str
    l1: str
    l2: str
    gamma: float
    recentred: bool = True
    errors: dict[str, list[float]]
    normalized: Optional[dict[str, list[float]]] = None

    @model_validator(mode="after")
    def _nonnegative(self):
        for variant, values in self.errors.items():
            if any(v < 0 for v in values):
                raise ValueError(f"negative consistency error in {variant}")
        return self


class GammaSweep(StrictModel):
    concept: str
    l1: str
    l2: str
    gammas: list[float]
    mean_errors: list[float]
    relative_errors: list[float]
    r_squared: float
    fixed_gamma1: Optional[float] = None
    best_gamma: Optional[float] = None


class SimilarityMatrix(StrictModel):
    concepts: list[str]
    layer: str
    matrix: list[list[float]]
    label: str = ""

    @model_validator(mode="after")
    def _square(self):
        n = len(self.concepts)
        if len(self.matrix) != n or any(len(row) != n for row in self.matrix):
            raise ValueError("similarity matrix must be square over its concepts")
        return self

    def entry(self, c1: str, c2: str) -> float:
        return self.matrix[self.concepts.index(c1)][self.concepts.index(c2)]


class DotDistribution(StrictModel):
    cav_concept: str
    cav_layer: str
    cav_r: int
    probe_label: str
    values: list[float]


class EntanglementResult(StrictModel):
    cav_concept: str
    probe_concept: str
    layer: str
    fraction: float
    mean_margin: float
    p_value: float
    threshold: float
    entangled: bool


class SpatialNormGrid(StrictModel):
    concept: str
    layer: str
    grid: list[list[float]]
    reduction: Literal["norm", "mean"] = "norm"
    aggregated_over: int = 1


class SpatialDependenceResult(StrictModel):
    concept: str
    layer: str
    mu1: str
    mu2: str
    fraction: float
    threshold: float
    dependent: bool


class TheoryVerdict(StrictModel):
    case: Literal["linear", "relu", "sigmoid"]
    consistent: bool
    max_error: float
    witnesses: list[dict[str, float | list[float] | str]] = Field(default_factory=list)
    detail: str = ""


class HeatmapPayload(StrictModel):
    schema_version: int = SCHEMA_VERSION
    kind: Literal["similarity", "spatial_norm", "spatial_mean"]
    title: str
    row_labels: list[str]
    col_labels: list[str]
    values: list[list[float]]
    manifest: Optional[str] = None

    @model_validator(mode="after")
    def _shape(self):
        if len(self.values) != len(self.row_labels):
            raise ValueError("values rows must match row_labels")
        if any(len(row) != len(self.col_labels) for row in self.values):
            raise ValueError("values columns must match col_labels")
        return self

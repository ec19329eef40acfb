"""Spatial structure of CAVs: per-cell channel norms and means, region mass, location dependence."""
import numpy as np

from cavlab.analysis.stats import pair_fraction, welch_test
from cavlab.analysis.tcav import ClassInputs, tcav_sweep
from cavlab.cav import Cav, CavFamily
from cavlab.elements.concepts import check_region
from cavlab.errors import DimensionMismatch
from cavlab.schemas import SpatialDependenceResult, SpatialNormGrid, TcavReport


def _reshape(cav: Cav | np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    v = cav.v if isinstance(cav, Cav) else np.asarray(cav, dtype=np.float64)
    h, w, d = dims
    if v.shape[-1] != h * w * d:
        raise DimensionMismatch(f"CAV of length {v.shape[-1]} cannot be reshaped to {dims}")
    return v.reshape(h, w, d)


def _grid(cav, dims, reduction: str) -> np.ndarray:
    cube = _reshape(cav, dims)
    if reduction == "norm":
        return np.linalg.norm(cube, axis=2)
    if reduction == "mean":
        return cube.mean(axis=2)
    raise ValueError(f"unknown reduction {reduction!r}")


def _label(cav) -> tuple[str, str]:
    return (cav.label, cav.layer) if isinstance(cav, Cav) else ("", "")


def spatial_norms(cav: Cav | np.ndarray, dims: tuple[int, int, int]) -> SpatialNormGrid:
    concept, layer = _label(cav)
    return SpatialNormGrid(concept=concept, layer=layer, grid=_grid(cav, dims, "norm").tolist(), reduction="norm")


def spatial_means(cav: Cav | np.ndarray, dims: tuple[int, int, int]) -> SpatialNormGrid:
    concept, layer = _label(cav)
    return SpatialNormGrid(concept=concept, layer=layer, grid=_grid(cav, dims, "mean").tolist(), reduction="mean")


def family_mean_grid(family: CavFamily, dims: tuple[int, int, int], reduction: str = "norm") -> SpatialNormGrid:
    if not family.cavs:
        raise ValueError(f"family {family.label} at {family.layer} is empty")
    grid = np.mean([_grid(c, dims, reduction) for c in family.cavs], axis=0)
    return SpatialNormGrid(
        concept=family.label, layer=family.layer, grid=grid.tolist(), reduction=reduction, aggregated_over=len(family)
    )


def region_mask(shape: tuple[int, int], region: str) -> tuple[np.ndarray, np.ndarray]:
    """(cells in the region, cells in either half of its axis); an odd middle row/column is in neither."""
    check_region(region)
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    if region in ("left", "right"):
        first, second = cols < w // 2, cols >= (w + 1) // 2
        inside = first if region == "left" else second
    else:
        first, second = rows < h // 2, rows >= (h + 1) // 2
        inside = first if region == "top" else second
    return inside, first | second


def region_mass_fraction(grid: SpatialNormGrid | np.ndarray, region: str) -> float:
    values = np.asarray(grid.grid if isinstance(grid, SpatialNormGrid) else grid, dtype=np.float64)
    inside, considered = region_mask(values.shape, region)
    total = values[considered].sum()
    return float(values[inside].sum() / total) if total > 0 else 0.0


def grid_ratio(grid: SpatialNormGrid) -> float:
    values = np.asarray(grid.grid)
    low = values.min()
    return float(values.max() / low) if low > 0 else float("inf")


def spatial_dependence_test(
    cav: Cav,
    acts_mu1: np.ndarray,
    acts_mu2: np.ndarray,
    mu1: str,
    mu2: str,
    threshold: float = 0.95,
) -> SpatialDependenceResult:
    """Fraction of pairs where the CAV scores the mu1 activation above the mu2 one."""
    a1 = np.asarray(acts_mu1, dtype=np.float64).reshape(len(acts_mu1), -1)
    a2 = np.asarray(acts_mu2, dtype=np.float64).reshape(len(acts_mu2), -1)
    if a1.shape[1] != cav.dim or a2.shape[1] != cav.dim:
        raise DimensionMismatch(f"activations do not match the CAV at {cav.layer}")
    fraction = pair_fraction(a1 @ cav.v, a2 @ cav.v)
    return SpatialDependenceResult(
        concept=cav.label, layer=cav.layer, mu1=mu1, mu2=mu2, fraction=fraction,
        threshold=threshold, dependent=fraction > threshold,
    )


def spatial_tcav_suite(
    model,
    class_inputs: ClassInputs,
    families: list[CavFamily],
    random_families: dict[str, CavFamily],
    layers: list[str],
    p_threshold: float = 0.01,
) -> list[TcavReport]:
    """TcavReports of the plain and location-constrained variants of concepts for one spatial class."""
    return tcav_sweep(model, families, random_families, [class_inputs], layers, p_threshold)


def spatial_contrast(reports_a: list[TcavReport], reports_b: list[TcavReport]) -> dict[str, float]:
    """Welch p per layer between the scores of two concept variants (e.g. left and right)."""
    by_layer = {r.layer: r for r in reports_b}
    return {r.layer: welch_test(r.scores, by_layer[r.layer].scores) for r in reports_a if r.layer in by_layer}

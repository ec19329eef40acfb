"""Directional derivatives, TCAV scores, significance against random CAVs and layer consistency scores."""
import logging
from dataclasses import dataclass

import numpy as np

from cavlab.analysis.stats import welch_test
from cavlab.cav import Cav, CavFamily
from cavlab.errors import DimensionMismatch
from cavlab.nn.model import TrainedModel, grad_logit_wrt_activation, logit_gradients
from cavlab.schemas import ConsistencyScoreReport, TcavReport

logger = logging.getLogger(__name__)


def _check_dim(grads: np.ndarray, v: np.ndarray) -> None:
    if grads.shape[-1] != v.shape[-1]:
        raise DimensionMismatch(f"gradient has {grads.shape[-1]} entries, CAV has {v.shape[-1]}")


def directional_derivative(model: TrainedModel, x: np.ndarray, cav: Cav | np.ndarray, k: int, layer: str | None = None) -> float:
    v = cav.v if isinstance(cav, Cav) else np.asarray(cav, dtype=np.float64)
    layer = cav.layer if isinstance(cav, Cav) else layer
    grad = grad_logit_wrt_activation(model, x, layer, k)
    _check_dim(grad, v)
    return float(grad @ v)


def directional_derivatives(grads: np.ndarray, v: np.ndarray) -> np.ndarray:
    _check_dim(grads, v)
    return grads @ v


def score_from_gradients(grads: np.ndarray, v: np.ndarray) -> float:
    if len(grads) == 0:
        raise ValueError("TCAV score needs a non-empty class input set")
    # strict inequality: a zero derivative is not a positive influence
    return float(np.mean(directional_derivatives(grads, v) > 0))


def tcav_score(model: TrainedModel, class_inputs: np.ndarray, cav: Cav, k: int) -> float:
    if len(class_inputs) == 0:
        raise ValueError("TCAV score needs a non-empty class input set")
    return score_from_gradients(logit_gradients(model, class_inputs, cav.layer, k), cav.v)


def significance(concept_scores, random_scores) -> tuple[float, float]:
    """(p_value, null_mean) of the concept scores against random-CAV scores."""
    return welch_test(concept_scores, random_scores), float(np.mean(random_scores))


def tcav_report(
    concept: str,
    class_name: str,
    layer: str,
    scores: list[float],
    null_scores: list[float],
    p_threshold: float = 0.01,
    cav_accuracy: float | None = None,
) -> TcavReport:
    p_value, null_mean = significance(scores, null_scores)
    return TcavReport(
        concept=concept,
        class_name=class_name,
        layer=layer,
        scores=[float(s) for s in scores],
        mean=float(np.mean(scores)),
        std=float(np.std(scores)),
        null_scores=[float(s) for s in null_scores],
        null_mean=null_mean,
        p_value=p_value,
        p_threshold=p_threshold,
        significant=p_value < p_threshold,
        cav_accuracy=cav_accuracy,
    )


def layer_consistency_score(reports: list[TcavReport], significant_only: bool = False) -> ConsistencyScoreReport:
    """|2 (fraction of layers above the null score - 1/2)|."""
    used = [r for r in reports if r.significant] if significant_only else list(reports)
    if not used:
        raise ValueError("layer consistency score needs at least one layer report")
    above = [r.above_null for r in used]
    return ConsistencyScoreReport(
        concept=used[0].concept,
        class_name=used[0].class_name,
        layers=[r.layer for r in used],
        above_null=above,
        score=abs(2 * (sum(above) / len(above) - 0.5)),
    )


@dataclass
class ClassInputs:
    name: str
    index: int
    images: np.ndarray


def tcav_sweep(
    model: TrainedModel,
    families: list[CavFamily],
    random_families: dict[str, CavFamily],
    classes: list[ClassInputs],
    layers: list[str],
    p_threshold: float = 0.01,
) -> list[TcavReport]:
    """TcavReports for every (class, layer, family) triple; gradients are computed once per (class, layer)."""
    reports = []
    for cls in classes:
        for layer in layers:
            layer_families = [f for f in families if f.layer == layer]
            if not layer_families:
                continue
            grads = logit_gradients(model, cls.images, layer, cls.index)
            null = [score_from_gradients(grads, c.v) for c in random_families[layer].cavs]
            for family in layer_families:
                scores = [score_from_gradients(grads, c.v) for c in family.cavs]
                reports.append(
                    tcav_report(family.label, cls.name, layer, scores, null, p_threshold, float(family.accuracies.mean()))
                )
            logger.info("tcav %s at %s: %d families", cls.name, layer, len(layer_families))
    return reports


def consistency_scores(reports: list[TcavReport], significant_only: bool = False) -> list[ConsistencyScoreReport]:
    groups: dict[tuple[str, str], list[TcavReport]] = {}
    for r in reports:
        groups.setdefault((r.concept, r.class_name), []).append(r)
    out = []
    for group in groups.values():
        if significant_only and not any(r.significant for r in group):
            continue
        out.append(layer_consistency_score(group, significant_only))
    return out


def consistency_score_summary(scores) -> dict[str, float]:
    values = np.asarray([s.score if isinstance(s, ConsistencyScoreReport) else s for s in scores], dtype=np.float64)
    if values.size == 0:
        raise ValueError("no consistency scores to summarise")
    return {
        "n": int(values.size),
        "mean": float(values.mean()),
        "fraction_zero": float(np.mean(values == 0.0)),
        "fraction_below_0_2": float(np.mean(values < 0.2)),
        "fraction_at_most_0_5": float(np.mean(values <= 0.5)),
    }

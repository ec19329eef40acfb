import logging

import numpy as np

from cavlab.analysis.stats import pair_fraction, welch_test
from cavlab.cav import Cav, CavFamily
from cavlab.errors import DimensionMismatch
from cavlab.schemas import DotDistribution, EntanglementResult, SimilarityMatrix

logger = logging.getLogger(__name__)


def _aligned(f1: CavFamily, f2: CavFamily) -> tuple[np.ndarray, np.ndarray]:
    by_r1 = {c.r: c.v for c in f1.cavs}
    by_r2 = {c.r: c.v for c in f2.cavs}
    rs = sorted(set(by_r1) & set(by_r2))
    if len(rs) < 2:
        raise ValueError(f"{f1.label} and {f2.label} share fewer than 2 random set indices")
    return np.stack([by_r1[r] for r in rs]), np.stack([by_r2[r] for r in rs])


def mean_cross_cosine(f1: CavFamily, f2: CavFamily) -> float:
    """Mean v1^r1 . v2^r2 over pairs with r1 != r2 (CAVs are unit norm)."""
    V1, V2 = _aligned(f1, f2)
    R = len(V1)
    G = V1 @ V2.T
    return float((G.sum() - np.trace(G)) / (R * (R - 1)))


def cosine_matrix(families: list[CavFamily], label: str = "") -> SimilarityMatrix:
    layers = {f.layer for f in families}
    if len(layers) > 1:
        raise DimensionMismatch(f"cosine matrix families span several layers: {sorted(layers)}")
    n = len(families)
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            M[i, j] = np.clip(mean_cross_cosine(families[i], families[j]), -1.0, 1.0)
            M[j, i] = M[i, j]
    return SimilarityMatrix(
        concepts=[f.label for f in families],
        layer=families[0].layer if families else "",
        matrix=M.tolist(),
        label=label,
    )


def dot_distributions(cav: Cav, probes: dict[str, np.ndarray]) -> list[DotDistribution]:
    """a . v for every activation of every named probe set."""
    out = []
    for name, acts in probes.items():
        acts = np.asarray(acts, dtype=np.float64).reshape(len(acts), -1)
        if acts.shape[1] != cav.dim:
            raise DimensionMismatch(f"probe {name!r} has dim {acts.shape[1]}, CAV at {cav.layer} has {cav.dim}")
        out.append(
            DotDistribution(
                cav_concept=cav.label, cav_layer=cav.layer, cav_r=cav.r, probe_label=name,
                values=(acts @ cav.v).tolist(),
            )
        )
    return out


def entanglement_flag(
    cav: Cav,
    positives: np.ndarray,
    negatives: np.ndarray,
    probe_concept: str,
    threshold: float = 0.95,
) -> EntanglementResult:
    """Fraction of (positive, negative) pairs of the probe concept that the CAV orders correctly."""
    dists = dot_distributions(cav, {"positive": positives, "negative": negatives})
    pos, neg = np.array(dists[0].values), np.array(dists[1].values)
    fraction = pair_fraction(pos, neg)
    return EntanglementResult(
        cav_concept=cav.label,
        probe_concept=probe_concept,
        layer=cav.layer,
        fraction=fraction,
        mean_margin=float(pos.mean() - neg.mean()),
        p_value=welch_test(pos, neg),
        threshold=threshold,
        entangled=fraction > threshold,
    )


def family_entanglement(
    family: CavFamily, positives: np.ndarray, negatives: np.ndarray, probe_concept: str, threshold: float = 0.95
) -> list[EntanglementResult]:
    """Entanglement of every family member, with negatives from a random set none of them was trained on."""
    return [entanglement_flag(cav, positives, negatives, probe_concept, threshold) for cav in family.cavs]

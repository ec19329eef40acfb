"""Concept activation vectors: linear probes on captured activations, concept families and random CAVs."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.model_selection import train_test_split

from cavlab.config import thread_cap
from cavlab.errors import ConfigError, DimensionMismatch, NumericError, SchemaVersionError, UnknownConceptError
from cavlab.schemas import ProbeConfig
from cavlab.storage import decode_bundle, encode_bundle

logger = logging.getLogger(__name__)

RANDOM = "random"


@dataclass
class Cav:
    v: np.ndarray
    b: float
    concept: str
    layer: str
    r: int
    test_accuracy: float
    train_accuracy: float = 1.0
    location: Optional[str] = None
    # index of the random set used as positives, for random CAVs
    r_positive: Optional[int] = None

    @property
    def label(self) -> str:
        return f"{self.concept}@{self.location}" if self.location else self.concept

    @property
    def dim(self) -> int:
        return self.v.shape[0]

    def scores(self, activations: np.ndarray) -> np.ndarray:
        return activations @ self.v + self.b


@dataclass
class CavFamily:
    concept: str
    layer: str
    cavs: list[Cav] = field(default_factory=list)
    location: Optional[str] = None
    positive_fingerprint: str = ""

    @property
    def label(self) -> str:
        return f"{self.concept}@{self.location}" if self.location else self.concept

    def __len__(self) -> int:
        return len(self.cavs)

    def matrix(self) -> np.ndarray:
        return np.stack([c.v for c in self.cavs])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([c.test_accuracy for c in self.cavs])


class LinearProbe:
    """L2-regularised logistic regression fitted by full-batch gradient descent from zero weights."""

    def __init__(self, l2: float = 1e-4, iterations: int = 500):
        self.l2 = l2
        self.iterations = iterations
        self.w: np.ndarray | None = None
        self.b = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearProbe":
        n, m = X.shape
        w = np.zeros(m)
        b = 0.0
        # step 1/L, L the Lipschitz constant of the mean logistic loss gradient over [X, 1]
        gram = X @ X.T + 1.0
        lipschitz = 0.25 * float(np.linalg.eigvalsh(gram)[-1]) / n + self.l2
        lr = 1.0 / lipschitz
        for _ in range(self.iterations):
            residual = expit(X @ w + b) - y
            w -= lr * (X.T @ residual / n + self.l2 * w)
            b -= lr * float(residual.mean())
        self.w, self.b = w, b
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (X @ self.w + self.b > 0).astype(float)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(X) == y)) if len(y) else float("nan")


def _split(A: np.ndarray, test_fraction: float, seed: int):
    if len(A) < 2:
        return A, A[:0]
    return train_test_split(A, test_size=test_fraction, random_state=seed, shuffle=True)


def train_cav(
    positives: np.ndarray,
    negatives: np.ndarray,
    hyper: ProbeConfig | None = None,
    concept: str = "",
    layer: str = "",
    r: int = 0,
    location: str | None = None,
) -> Cav:
    """Fit a probe separating positive from negative activations and return its unit normal."""
    hyper = hyper or ProbeConfig()
    A_pos = np.asarray(positives, dtype=np.float64).reshape(len(positives), -1)
    A_neg = np.asarray(negatives, dtype=np.float64).reshape(len(negatives), -1)
    if len(A_pos) == 0 or len(A_neg) == 0:
        raise ValueError("train_cav needs non-empty positive and negative sets")
    if A_pos.shape[1] != A_neg.shape[1]:
        raise DimensionMismatch(f"positive dim {A_pos.shape[1]} != negative dim {A_neg.shape[1]}")

    pos_train, pos_test = _split(A_pos, hyper.test_fraction, hyper.seed)
    neg_train, neg_test = _split(A_neg, hyper.test_fraction, hyper.seed)
    X_train = np.concatenate([pos_train, neg_train])
    y_train = np.concatenate([np.ones(len(pos_train)), np.zeros(len(neg_train))])
    X_test = np.concatenate([pos_test, neg_test])
    y_test = np.concatenate([np.ones(len(pos_test)), np.zeros(len(neg_test))])

    mean, scale = 0.0, 1.0
    if hyper.standardize:
        mean = X_train.mean(axis=0)
        scale = X_train.std(axis=0)
        scale[scale == 0] = 1.0
    probe = LinearProbe(hyper.l2, hyper.iterations).fit((X_train - mean) / scale, y_train)
    w = probe.w / scale
    b = probe.b - float(np.sum(w * mean))

    norm = float(np.linalg.norm(w))
    if not np.isfinite(norm) or norm == 0.0:
        raise NumericError(f"probe for {concept!r} at {layer} has a degenerate weight vector")
    cav = Cav(
        v=w / norm,
        b=b / norm,
        concept=concept,
        layer=layer,
        r=r,
        test_accuracy=probe.accuracy((X_test - mean) / scale, y_test),
        train_accuracy=probe.accuracy((X_train - mean) / scale, y_train),
        location=location,
    )
    logger.debug("cav %s %s r=%d acc=%.3f", cav.label, layer, r, cav.test_accuracy)
    return cav


def train_family(
    concept: str,
    layer: str,
    positives: np.ndarray,
    negatives: dict[int, np.ndarray],
    hyper: ProbeConfig | None = None,
    location: str | None = None,
    threads: int | None = None,
    positive_fingerprint: str = "",
) -> CavFamily:
    """R CAVs sharing the positive activations, one per random negative set index r."""
    if len(negatives) < 2:
        raise ConfigError(f"a CAV family needs at least 2 random sets, got {len(negatives)}")
    hyper = hyper or ProbeConfig()
    rs = sorted(negatives)
    with ThreadPoolExecutor(max_workers=thread_cap(threads)) as pool:
        cavs = list(
            pool.map(lambda r: train_cav(positives, negatives[r], hyper, concept, layer, r, location), rs)
        )
    return CavFamily(concept, layer, cavs, location, positive_fingerprint)


def random_pairs(indices: list[int], count: int, seed: int) -> list[tuple[int, int]]:
    pairs = list(combinations(sorted(indices), 2))
    if count > len(pairs):
        raise ConfigError(f"{count} random CAVs requested but only {len(pairs)} distinct pairs exist")
    order = np.random.default_rng(seed).permutation(len(pairs))[:count]
    return [pairs[i] for i in order]


def train_random_cav(
    negative_set: np.ndarray, positive_set: np.ndarray, r_negative: int, r_positive: int, layer: str, hyper=None
) -> Cav:
    if r_negative == r_positive:
        raise ValueError(f"random CAV needs two different random sets, got r={r_negative} twice")
    cav = train_cav(positive_set, negative_set, hyper, RANDOM, layer, r_negative)
    cav.r_positive = r_positive
    return cav


def random_cavs(
    layer: str,
    random_sets: dict[int, np.ndarray],
    count: int,
    hyper: ProbeConfig | None = None,
    threads: int | None = None,
) -> CavFamily:
    """Random CAVs over distinct pairs of random sets: one set as positives, the other as negatives."""
    if len(random_sets) < 2:
        raise ConfigError(f"random CAVs need at least 2 random sets, got {len(random_sets)}")
    hyper = hyper or ProbeConfig()
    pairs = random_pairs(list(random_sets), count, hyper.seed)
    with ThreadPoolExecutor(max_workers=thread_cap(threads)) as pool:
        cavs = list(
            pool.map(
                lambda p: train_random_cav(random_sets[p[0]], random_sets[p[1]], p[0], p[1], layer, hyper), pairs
            )
        )
    return CavFamily(RANDOM, layer, cavs)


def cav_accuracy_table(families: list[CavFamily]) -> pd.DataFrame:
    rows = [
        {
            "concept": f.label,
            "layer": f.layer,
            "mean_accuracy": float(f.accuracies.mean()),
            "std_accuracy": float(f.accuracies.std()),
            "min_accuracy": float(f.accuracies.min()),
            "n_cavs": len(f),
        }
        for f in families
    ]
    return pd.DataFrame(rows, columns=["concept", "layer", "mean_accuracy", "std_accuracy", "min_accuracy", "n_cavs"])


# ---------------------------------------------------------------- cav store

def encode_cavs(families: list[CavFamily]) -> bytes:
    """One record per Cav keyed by (label, layer, r); directions stored as float64."""
    arrays, records = {}, []
    for family in families:
        for cav in family.cavs:
            key = f"{cav.label}|{cav.layer}|{cav.r}|{cav.r_positive if cav.r_positive is not None else ''}"
            arrays[key] = cav.v
            records.append(
                {
                    "key": key,
                    "concept": cav.concept,
                    "location": cav.location,
                    "layer": cav.layer,
                    "r": cav.r,
                    "r_positive": cav.r_positive,
                    "b": cav.b,
                    "test_accuracy": cav.test_accuracy,
                    "train_accuracy": cav.train_accuracy,
                    "positive_fingerprint": family.positive_fingerprint,
                }
            )
    return encode_bundle(arrays, meta={"kind": "cavs", "records": records}, dtype="<f8")


def decode_cavs(data: bytes) -> list[CavFamily]:
    arrays, meta = decode_bundle(data)
    if meta.get("kind") != "cavs":
        raise SchemaVersionError(f"expected a cav store, got {meta.get('kind')!r}")
    families: dict[tuple, CavFamily] = {}
    for rec in meta["records"]:
        key = (rec["concept"], rec["location"], rec["layer"])
        family = families.setdefault(
            key, CavFamily(rec["concept"], rec["layer"], [], rec["location"], rec["positive_fingerprint"])
        )
        family.cavs.append(
            Cav(
                v=arrays[rec["key"]],
                b=rec["b"],
                concept=rec["concept"],
                layer=rec["layer"],
                r=rec["r"],
                test_accuracy=rec["test_accuracy"],
                train_accuracy=rec["train_accuracy"],
                location=rec["location"],
                r_positive=rec["r_positive"],
            )
        )
    return list(families.values())


def find_family(families: list[CavFamily], label: str, layer: str) -> CavFamily:
    for family in families:
        if family.label == label and family.layer == layer:
            return family
    raise UnknownConceptError(f"no CAV family for {label!r} at {layer}")

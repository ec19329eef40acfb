"""Layer consistency: scaled perturbations, consistency error, optimised and baseline directions, gamma sweeps."""
import logging
from dataclasses import dataclass, field

import numpy as np
import tensorflow as tf
from scipy.stats import linregress

from cavlab.cav import CavFamily
from cavlab.errors import DimensionMismatch, OptimisationDiverged, UnknownLayerError
from cavlab.nn.model import TrainedModel, continue_forward, forward_capture, layer_index
from cavlab.schemas import ConsistencyReport, GammaSweep, OptimiseConfig

logger = logging.getLogger(__name__)

VARIANTS = ("optimised", "concept", "projected", "random_cav", "random_direction")


def mean_activation_norm(model: TrainedModel, X: np.ndarray, layer: str) -> float:
    acts = forward_capture(model, X, layer).flatten()
    return float(np.linalg.norm(acts.reshape(len(X), -1), axis=1).mean())


@dataclass
class PerturbationSpec:
    """a + gamma * v * abar / ||v||, or a + v when unscaled."""

    gamma: float
    layer: str
    v: np.ndarray
    mean_activation_norm: float = 1.0
    scaled: bool = True

    def offset(self) -> np.ndarray:
        v = np.asarray(self.v, dtype=np.float64)
        if not self.scaled:
            return v
        norm = np.linalg.norm(v)
        if norm == 0.0 or self.gamma == 0.0:
            return np.zeros_like(v)
        return self.gamma * v * (self.mean_activation_norm / norm)

    def apply(self, a: np.ndarray) -> np.ndarray:
        return a + self.offset()


@dataclass
class ConsistencyContext:
    """Activations of a fixed input set at l1 and their image f(a1) at l2."""

    model: TrainedModel
    l1: str
    l2: str
    a1: np.ndarray  # (N, m1)
    a2: np.ndarray  # (N, m2)
    abar1: float
    abar2: float
    _zero_image: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, model: TrainedModel, X: np.ndarray, l1: str, l2: str) -> "ConsistencyContext":
        if layer_index(l1) >= layer_index(l2):
            raise UnknownLayerError(f"{l1} must precede {l2}")
        a1 = forward_capture(model, X, l1).flatten().reshape(len(X), -1)
        # a2 = f(a1) so that a zero perturbation gives exactly zero error
        a2 = continue_forward(model, a1, l1, l2).flatten().reshape(len(X), -1)
        abar1 = float(np.linalg.norm(a1, axis=1).mean())
        abar2 = float(np.linalg.norm(a2, axis=1).mean())
        return cls(model, l1, l2, a1, a2, abar1, abar2)

    @property
    def m1(self) -> int:
        return self.a1.shape[1]

    @property
    def m2(self) -> int:
        return self.a2.shape[1]

    def f(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        single = a.ndim == 1
        out = continue_forward(self.model, a[None] if single else a, self.l1, self.l2).flatten()
        return out.reshape(-1) if single else out.reshape(len(a), -1)

    def _check(self, v1, v2) -> None:
        if np.shape(v1)[-1] != self.m1:
            raise DimensionMismatch(f"v1 has {np.shape(v1)[-1]} entries, {self.l1} has {self.m1}")
        if np.shape(v2)[-1] != self.m2:
            raise DimensionMismatch(f"v2 has {np.shape(v2)[-1]} entries, {self.l2} has {self.m2}")

    def targets(self, v1: np.ndarray, gamma: float, scaled: bool = True) -> np.ndarray:
        """f(a1 + perturbation) - a2 for every input."""
        spec = PerturbationSpec(gamma, self.l1, v1, self.abar1, scaled)
        return self.f(spec.apply(self.a1)) - self.a2

    def errors(self, v1, v2, gamma: float, gamma2: float | None = None, scaled: bool = True) -> np.ndarray:
        """Per-input ||f(a1 + p1) - (a2 + p2)||."""
        self._check(v1, v2)
        gamma2 = gamma if gamma2 is None else gamma2
        p2 = PerturbationSpec(gamma2, self.l2, v2, self.abar2, scaled).offset()
        return np.linalg.norm(self.targets(v1, gamma, scaled) - p2, axis=1)

    def zero_image(self) -> np.ndarray:
        if self._zero_image is None:
            self._zero_image = self.f(np.zeros(self.m1))
        return self._zero_image


def consistency_error(
    model: TrainedModel, X: np.ndarray, v1: np.ndarray, l1: str, v2: np.ndarray, l2: str, gamma: float = 0.01, scaled: bool = True
) -> np.ndarray:
    return ConsistencyContext.build(model, X, l1, l2).errors(v1, v2, gamma, scaled=scaled)


@dataclass
class OptimisedDirection:
    v: np.ndarray
    trace: list[float]
    error: float


def optimise_cav(
    ctx: ConsistencyContext,
    v1: np.ndarray,
    init_v2: np.ndarray,
    gamma: float = 0.01,
    opt: OptimiseConfig | None = None,
    scaled: bool = True,
) -> OptimisedDirection:
    """Adam on v2 minimising the mean consistency error over the context inputs; returns the best iterate.

    Raises OptimisationDiverged when the error rises `patience` steps in a row above its best value.
    """
    opt = opt or OptimiseConfig()
    ctx._check(v1, init_v2)
    targets = tf.constant(ctx.targets(v1, gamma, scaled))
    scale = gamma * ctx.abar2
    v2 = tf.Variable(np.asarray(init_v2, dtype=np.float64))
    lr = opt.learning_rate
    if opt.decay_rate < 1.0:
        lr = tf.keras.optimizers.schedules.ExponentialDecay(opt.learning_rate, decay_steps=1, decay_rate=opt.decay_rate)
    optimizer = tf.keras.optimizers.Adam(learning_rate=lr)

    def loss_fn():
        offset = scale * v2 / tf.norm(v2) if scaled else v2
        return tf.reduce_mean(tf.norm(targets - offset[None, :], axis=1))

    trace: list[float] = []
    best_v, best = np.array(init_v2, dtype=np.float64), np.inf
    rising = 0
    for _ in range(opt.steps):
        with tf.GradientTape() as tape:
            loss = loss_fn()
        value = float(loss.numpy())
        trace.append(value)
        if value < best:
            best, best_v, rising = value, v2.numpy().copy(), 0
        elif len(trace) > 1 and value > trace[-2]:
            rising += 1
            if rising >= opt.patience:
                raise OptimisationDiverged(f"consistency error rose for {rising} consecutive steps", trace)
        else:
            rising = 0
        optimizer.apply_gradients([(tape.gradient(loss, v2), v2)])
    final = float(loss_fn().numpy())
    trace.append(final)
    if final < best:
        best, best_v = final, v2.numpy().copy()
    if scaled:
        best_v = best_v / np.linalg.norm(best_v)
    return OptimisedDirection(best_v, trace, best)


def projected_direction(ctx: ConsistencyContext, v1: np.ndarray, recentre: bool = True) -> np.ndarray:
    """f(v1) - f(0), or f(v1) when not recentred, unit-normalised."""
    image = ctx.f(np.asarray(v1, dtype=np.float64))
    if recentre:
        image = image - ctx.zero_image()
    norm = np.linalg.norm(image)
    return image / norm if norm > 0 else image


def random_direction(m: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.uniform(-0.5, 0.5, size=m)
    return v / np.linalg.norm(v)


def baseline_vectors(
    kind: str,
    ctx: ConsistencyContext,
    v1: np.ndarray | None = None,
    random_family: CavFamily | None = None,
    index: int = 0,
    rng: np.random.Generator | None = None,
    recentre: bool = True,
) -> np.ndarray:
    if kind == "projected":
        return projected_direction(ctx, v1, recentre)
    if kind == "random_direction":
        return random_direction(ctx.m2, rng if rng is not None else np.random.default_rng(index))
    if kind == "random_cav":
        return random_family.cavs[index % len(random_family)].v
    raise ValueError(f"unknown baseline kind {kind!r}")


def consistency_experiment(
    ctx: ConsistencyContext,
    family1: CavFamily,
    family2: CavFamily,
    random_family2: CavFamily,
    gamma: float = 0.01,
    n_cavs: int = 10,
    opt: OptimiseConfig | None = None,
    recentre: bool = True,
    seed: int = 0,
) -> ConsistencyReport:
    """Mean consistency error per CAV for the concept direction and every baseline at l2."""
    if family1.layer != ctx.l1 or family2.layer != ctx.l2 or random_family2.layer != ctx.l2:
        raise DimensionMismatch("families do not match the context layers")
    rng = np.random.default_rng(seed)
    n = min(n_cavs, len(family1), len(family2))
    errors: dict[str, list[float]] = {k: [] for k in VARIANTS}
    for i in range(n):
        v1 = family1.cavs[i].v
        concept_v2 = family2.cavs[i].v
        # optimisation starts from a concept CAV trained against a different random set
        init = family2.cavs[(i + 1) % len(family2)].v
        directions = {
            "optimised": optimise_cav(ctx, v1, init, gamma, opt).v,
            "concept": concept_v2,
            "projected": baseline_vectors("projected", ctx, v1, recentre=recentre),
            "random_cav": baseline_vectors("random_cav", ctx, random_family=random_family2, index=i),
            "random_direction": baseline_vectors("random_direction", ctx, rng=rng),
        }
        for kind, v2 in directions.items():
            errors[kind].append(float(ctx.errors(v1, v2, gamma).mean()))
        logger.debug("consistency %s %s->%s cav %d done", family1.label, ctx.l1, ctx.l2, i)
    return ConsistencyReport(
        concept=family1.label,
        l1=ctx.l1,
        l2=ctx.l2,
        gamma=gamma,
        recentred=recentre,
        errors=errors,
        normalized=normalize_errors(errors),
    )


def normalize_errors(errors: dict[str, list[float]]) -> dict[str, list[float]] | None:
    ref = float(np.mean(errors.get("optimised") or [0.0]))
    if ref <= 0.0:
        return None
    return {k: [e / ref for e in v] for k, v in errors.items()}


def gamma_sweep(ctx: ConsistencyContext, v1, v2, gammas: list[float], concept: str = "") -> GammaSweep:
    """Mean error per gamma, error relative to the l2 perturbation size, and the R^2 of a linear fit."""
    means = [float(ctx.errors(v1, v2, g).mean()) for g in gammas]
    relative = [m / (g * ctx.abar2) if g > 0 else 0.0 for m, g in zip(means, gammas)]
    r_squared = float(linregress(gammas, means).rvalue ** 2) if len(set(gammas)) > 1 else 1.0
    return GammaSweep(
        concept=concept, l1=ctx.l1, l2=ctx.l2, gammas=list(gammas), mean_errors=means,
        relative_errors=relative, r_squared=r_squared,
    )


def fixed_gamma_sweep(ctx: ConsistencyContext, v1, v2, gamma1: float, gammas2: list[float], concept: str = "") -> GammaSweep:
    means = [float(ctx.errors(v1, v2, gamma1, g2).mean()) for g2 in gammas2]
    relative = [m / (gamma1 * ctx.abar2) if gamma1 > 0 else 0.0 for m in means]
    r_squared = float(linregress(gammas2, means).rvalue ** 2) if len(set(gammas2)) > 1 else 1.0
    return GammaSweep(
        concept=concept, l1=ctx.l1, l2=ctx.l2, gammas=list(gammas2), mean_errors=means,
        relative_errors=relative, r_squared=r_squared, fixed_gamma1=gamma1,
        best_gamma=float(gammas2[int(np.argmin(means))]),
    )

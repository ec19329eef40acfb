import numpy as np
import pytest

from cavlab.analysis.consistency import (
    VARIANTS,
    ConsistencyContext,
    PerturbationSpec,
    baseline_vectors,
    consistency_error,
    consistency_experiment,
    fixed_gamma_sweep,
    gamma_sweep,
    mean_activation_norm,
    normalize_errors,
    optimise_cav,
    projected_direction,
)
from cavlab.cav import Cav, CavFamily
from cavlab.errors import DimensionMismatch, OptimisationDiverged, UnknownLayerError
from cavlab.nn.model import TrainedModel, build_network, forward_capture
from cavlab.schemas import ModelConfig, OptimiseConfig


@pytest.fixture
def affine_model() -> TrainedModel:
    # linear activations and no pooling after layers.2: the layers.3 -> layers.4 map is affine
    config = ModelConfig(channels_per_layer=[4] * 6, input_side=16, activation="linear")
    return TrainedModel(config, build_network(config, 3, seed=2))


def _unit(rng, m):
    v = rng.normal(size=m)
    return v / np.linalg.norm(v)


def _family(concept, layer, rng, m, n=3):
    return CavFamily(concept, layer, [
        Cav(v=_unit(rng, m), b=0.0, concept=concept, layer=layer, r=r, test_accuracy=0.9, train_accuracy=1.0)
        for r in range(n)
    ])


class TestPerturbation:
    def test_scaled_offset_norm(self, rng):
        v = rng.normal(size=10)
        spec = PerturbationSpec(gamma=0.01, layer="layers.1", v=v, mean_activation_norm=40.0)
        assert np.linalg.norm(spec.offset()) == pytest.approx(0.4)

    def test_zero_gamma_is_identity(self, rng):
        a = rng.normal(size=(3, 10))
        spec = PerturbationSpec(gamma=0.0, layer="layers.1", v=rng.normal(size=10), mean_activation_norm=5.0)
        np.testing.assert_array_equal(spec.apply(a), a)

    def test_mean_activation_norm(self, tiny_model, tiny_images):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        assert mean_activation_norm(tiny_model, tiny_images, "layers.1") == pytest.approx(ctx.abar1)


class TestContext:
    def test_zero_gamma_gives_zero_error(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        errors = ctx.errors(_unit(rng, ctx.m1), _unit(rng, ctx.m2), 0.0)
        np.testing.assert_allclose(errors, 0.0, atol=1e-12)

    def test_errors_are_nonnegative_per_input(self, tiny_model, tiny_images, rng):
        errors = consistency_error(tiny_model, tiny_images, _unit(rng, 64), "layers.1", _unit(rng, 16), "layers.2")
        assert errors.shape == (len(tiny_images),)
        assert (errors >= 0).all()

    def test_dimensions_checked(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        with pytest.raises(DimensionMismatch):
            ctx.errors(_unit(rng, ctx.m1 + 1), _unit(rng, ctx.m2), 0.01)

    def test_layer_order(self, tiny_model, tiny_images):
        with pytest.raises(UnknownLayerError):
            ConsistencyContext.build(tiny_model, tiny_images, "layers.2", "layers.1")

    def test_affine_map_has_exact_consistent_pair(self, affine_model, tiny_images, rng):
        ctx = ConsistencyContext.build(affine_model, tiny_images, "layers.3", "layers.4")
        v1 = rng.normal(size=ctx.m1)
        v2 = ctx.f(v1) - ctx.zero_image()
        np.testing.assert_allclose(ctx.errors(v1, v2, 0.01, scaled=False), 0.0, atol=1e-9)

    def test_projected_direction_is_unit(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        v = projected_direction(ctx, _unit(rng, ctx.m1))
        assert np.linalg.norm(v) == pytest.approx(1.0)
        plain = projected_direction(ctx, _unit(rng, ctx.m1), recentre=False)
        assert np.linalg.norm(plain) == pytest.approx(1.0)

    def test_f_composes_with_capture(self, tiny_model, tiny_images):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.3")
        expected = forward_capture(tiny_model, tiny_images, "layers.3").flatten()
        np.testing.assert_allclose(ctx.f(ctx.a1), expected, atol=1e-10)


class TestOptimisation:
    def test_best_iterate_not_worse_than_start(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        v1, init = _unit(rng, ctx.m1), _unit(rng, ctx.m2)
        result = optimise_cav(ctx, v1, init, 0.01, OptimiseConfig(steps=30))
        start = float(ctx.errors(v1, init, 0.01).mean())
        assert result.error <= start + 1e-12
        assert np.linalg.norm(result.v) == pytest.approx(1.0)
        assert float(ctx.errors(v1, result.v, 0.01).mean()) == pytest.approx(result.error, rel=1e-6)

    def test_reaches_affine_optimum(self, affine_model, tiny_images, rng):
        ctx = ConsistencyContext.build(affine_model, tiny_images, "layers.3", "layers.4")
        v1 = _unit(rng, ctx.m1)
        target = ctx.f(ctx.abar1 * 0.01 * v1) - ctx.zero_image()
        result = optimise_cav(ctx, v1, _unit(rng, ctx.m2), 0.01, OptimiseConfig(steps=300, learning_rate=0.05))
        cosine = result.v @ target / np.linalg.norm(target)
        assert cosine > 0.99

    def test_divergence_aborts_with_trace(self, affine_model, tiny_images, rng):
        ctx = ConsistencyContext.build(affine_model, tiny_images, "layers.3", "layers.4")
        v1 = _unit(rng, ctx.m1)
        near_optimum = ctx.targets(v1, 0.01)[0] + 1e-3 * rng.normal(size=ctx.m2)
        with pytest.raises(OptimisationDiverged) as info:
            optimise_cav(ctx, v1, near_optimum, 0.01, OptimiseConfig(steps=50, learning_rate=5.0, patience=1))
        assert len(info.value.trace) >= 2


class TestExperiment:
    def test_report_structure(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        f1 = _family("red", "layers.1", rng, ctx.m1)
        f2 = _family("red", "layers.2", rng, ctx.m2)
        random2 = _family("random", "layers.2", rng, ctx.m2)
        report = consistency_experiment(ctx, f1, f2, random2, 0.01, 2, OptimiseConfig(steps=10), seed=4)
        assert set(report.errors) == set(VARIANTS)
        assert all(len(v) == 2 for v in report.errors.values())
        assert report.normalized is not None
        assert np.mean(report.normalized["optimised"]) == pytest.approx(1.0)

    def test_family_layers_checked(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        f1 = _family("red", "layers.1", rng, ctx.m1)
        with pytest.raises(DimensionMismatch):
            consistency_experiment(ctx, f1, f1, f1)

    def test_normalize_without_reference(self):
        assert normalize_errors({"optimised": [0.0, 0.0], "concept": [1.0]}) is None

    def test_baselines(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        random2 = _family("random", "layers.2", rng, ctx.m2)
        assert baseline_vectors("random_cav", ctx, random_family=random2, index=4) is random2.cavs[1].v
        direction = baseline_vectors("random_direction", ctx, rng=np.random.default_rng(0))
        assert np.linalg.norm(direction) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            baseline_vectors("nearest", ctx)


class TestGammaSweeps:
    def test_affine_error_is_linear_in_gamma(self, affine_model, tiny_images, rng):
        ctx = ConsistencyContext.build(affine_model, tiny_images, "layers.3", "layers.4")
        sweep = gamma_sweep(ctx, _unit(rng, ctx.m1), _unit(rng, ctx.m2), [0.0, 0.005, 0.01, 0.02], "red")
        assert sweep.mean_errors[0] == pytest.approx(0.0, abs=1e-12)
        assert sweep.r_squared == pytest.approx(1.0, abs=1e-9)

    def test_fixed_gamma_best(self, tiny_model, tiny_images, rng):
        ctx = ConsistencyContext.build(tiny_model, tiny_images, "layers.1", "layers.2")
        gammas = [0.0, 0.005, 0.01, 0.02]
        sweep = fixed_gamma_sweep(ctx, _unit(rng, ctx.m1), _unit(rng, ctx.m2), 0.01, gammas)
        assert sweep.fixed_gamma1 == 0.01
        assert sweep.best_gamma == gammas[int(np.argmin(sweep.mean_errors))]

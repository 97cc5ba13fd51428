"""Removal attacks and audits: pgd, fine-tuning, compression, stealth checks."""

import math

import numpy as np
import pytest

from certmark import (
    AttackResult,
    ClassifierArch,
    DegenerateAuditError,
    GeneratorArch,
    InvalidArgumentError,
    LayeredParams,
    NoiseSpec,
    adversarial_direction,
    build_private_classifier,
    compress,
    finetune_drift,
    image_suspiciousness,
    init_generator,
    landscape_sweep,
    mahalanobis_norm,
    make_sign_test_metric,
    pgd_attack,
    random_direction,
    surrogate_task_image,
)

TASKS = ("ellipses", "gradients", "stripes", "blobs")


@pytest.fixture(scope="module")
def small():
    arch = GeneratorArch(latent_dim=4, hidden=(8,), image_hw=(8, 8), n_prompts=2)
    gen = init_generator(arch, 61)
    clf = build_private_classifier(
        gen, 62,
        arch=ClassifierArch(image_hw=(8, 8), hidden=(16,), mc_draws=4),
        n_images=32, steps=60,
    )
    spec = NoiseSpec(
        sigma=tuple(0.01 for _ in gen.params.dims),
        dims=gen.params.dims,
        budget_sigma_u=0.01,
    )
    return gen, clf, spec


class TestRandomDirection:
    def test_unit_norm_and_sign_structure(self):
        d = random_direction((5, 11, 3), seed=1)
        assert d.l2_norm() == pytest.approx(1.0, rel=1e-12)
        scale = 1.0 / math.sqrt(19)
        for b in d.blocks:
            np.testing.assert_allclose(np.abs(b), scale, rtol=1e-15)

    def test_deterministic(self):
        a = random_direction((5, 11, 3), seed=2)
        b = random_direction((5, 11, 3), seed=2)
        c = random_direction((5, 11, 3), seed=3)
        for x, y in zip(a.blocks, b.blocks):
            np.testing.assert_array_equal(x, y)
        assert any(not np.array_equal(x, y) for x, y in zip(a.blocks, c.blocks))

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            random_direction((), seed=1)
        with pytest.raises(InvalidArgumentError):
            random_direction((4, 0), seed=1)


class TestAdversarialDirection:
    def test_descends_and_normalizes(self, small):
        gen, clf, _ = small
        adv = adversarial_direction(gen, clf, prompt=0, seed=70, steps=4, n_images=4)
        trace = adv.surrogate_trace
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert len(trace) >= 2
        assert not adv.used_fallback
        assert adv.direction.l2_norm() == pytest.approx(1.0, rel=1e-9)

    def test_step_validation(self, small):
        gen, clf, _ = small
        with pytest.raises(InvalidArgumentError):
            adversarial_direction(gen, clf, prompt=0, seed=70, steps=0)


class TestPgdAttack:
    def test_perturbation_respects_budgets(self, small):
        gen, clf, _ = small
        budgets = (0.05, 0.1, 0.3)
        result, attacked = pgd_attack(
            gen, clf, prompt=0, budgets=budgets, seed=71, steps=4, n_images=4,
        )
        assert result.kind == "pgd-l2"
        assert result.budgets == budgets
        assert not result.diverged
        for norm, budget in zip(result.l2_norms, budgets):
            assert norm <= budget + 1e-9
        final_delta = attacked.params - gen.params
        assert final_delta.l2_norm() <= budgets[-1] + 1e-9
        assert final_delta.l2_norm() > 0.0

    def test_metrics_default_to_target_posterior(self, small):
        gen, clf, _ = small
        result, _ = pgd_attack(
            gen, clf, prompt=0, budgets=0.2, seed=72, steps=4, n_images=4,
        )
        assert len(result.metrics) == 1
        assert 0.0 <= result.metrics[0] <= 1.0

    def test_mahalanobis_geometry(self, small):
        gen, clf, spec = small
        budgets = (2.0, 5.0)
        result, attacked = pgd_attack(
            gen, clf, prompt=0, budgets=budgets, seed=73, steps=3, n_images=4,
            geometry="mahalanobis", noise=spec,
        )
        assert result.kind == "pgd-mahalanobis"
        for norm, budget in zip(result.mahalanobis_norms, budgets):
            assert norm <= budget + 1e-9
        delta = attacked.params - gen.params
        assert mahalanobis_norm(delta, spec) <= budgets[-1] + 1e-9

    def test_attack_lowers_the_posterior(self, small):
        # a vanishing first budget measures the clean posterior on the same
        # probe batch; a real ball must push it down
        gen, clf, _ = small
        result, _ = pgd_attack(
            gen, clf, prompt=0, budgets=(1e-9, 0.5), seed=74, steps=6, n_images=4,
        )
        assert result.metrics[1] < result.metrics[0]

    def test_budget_validation(self, small):
        gen, clf, spec = small
        with pytest.raises(InvalidArgumentError):
            pgd_attack(gen, clf, prompt=0, budgets=(), seed=1)
        with pytest.raises(InvalidArgumentError):
            pgd_attack(gen, clf, prompt=0, budgets=(-0.1,), seed=1)
        with pytest.raises(InvalidArgumentError):
            pgd_attack(gen, clf, prompt=0, budgets=(0.2, 0.1), seed=1)
        with pytest.raises(InvalidArgumentError):
            pgd_attack(gen, clf, prompt=0, budgets=0.1, seed=1, geometry="linf")
        with pytest.raises(InvalidArgumentError):
            pgd_attack(gen, clf, prompt=0, budgets=0.1, seed=1, geometry="mahalanobis")


class TestLandscapeSweep:
    def test_grid_matches_pointwise_evaluation(self, small):
        gen, _, _ = small
        da = random_direction(gen.params.dims, seed=80)
        db = random_direction(gen.params.dims, seed=81)
        metric = lambda g: float(g.params.l2_norm())
        eps_a = [-0.1, 0.0, 0.2]
        eps_b = [0.0, 0.3]
        surface = landscape_sweep(gen, da, db, eps_a, eps_b, metric)
        assert surface.shape == (3, 2)
        for i, ea in enumerate(eps_a):
            for j, eb in enumerate(eps_b):
                moved = gen.params + da.scale(ea) + db.scale(eb)
                assert surface[i, j] == pytest.approx(moved.l2_norm(), rel=1e-12)


class TestCompress:
    def test_quantize_level_count(self, small):
        gen, _, _ = small
        for bits in (1, 3, 6):
            q = compress(gen, "quantize", bits=bits)
            for orig, b in zip(gen.params.blocks, q.params.blocks):
                assert len(np.unique(b)) <= 2**bits
                assert b.min() >= orig.min() - 1e-12
                assert b.max() <= orig.max() + 1e-12

    def test_quantize_idempotent(self, small):
        gen, _, _ = small
        once = compress(gen, "quantize", bits=4)
        twice = compress(once, "quantize", bits=4)
        for a, b in zip(once.params.blocks, twice.params.blocks):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    def test_quantize_keeps_constant_blocks(self, small):
        gen, _, _ = small
        dims = gen.params.dims
        const = LayeredParams([np.full(d, 0.37) for d in dims])
        q = compress(gen.with_params(const), "quantize", bits=2)
        for b in q.params.blocks:
            np.testing.assert_array_equal(b, 0.37)

    def test_prune_exact_zero_budget(self, small):
        # initial bias entries are exact zeros and sort to the front of the
        # magnitude order, so the total zero count hits the budget exactly
        gen, _, _ = small
        fraction = 0.25
        p = compress(gen, "prune", fraction=fraction)
        for orig, b in zip(gen.params.blocks, p.params.blocks):
            budget = int(math.floor(orig.size * fraction))
            assert int(np.sum(orig == 0.0)) <= budget
            assert int(np.sum(b == 0.0)) == budget
            survivors = b != 0.0
            np.testing.assert_array_equal(b[survivors], orig[survivors])
            zeroed = np.abs(orig[(b == 0.0) & (orig != 0.0)])
            if zeroed.size and np.any(survivors):
                assert zeroed.max() <= np.abs(orig[survivors]).min()

    def test_prune_breaks_ties_by_index(self, small):
        gen, _, _ = small
        dims = gen.params.dims
        alternating = LayeredParams(
            [np.where(np.arange(d) % 2 == 0, 1.0, -1.0) for d in dims]
        )
        p = compress(gen.with_params(alternating), "prune", fraction=0.5)
        for d, b in zip(dims, p.params.blocks):
            n_zero = d // 2
            np.testing.assert_array_equal(b[:n_zero], 0.0)
            assert np.all(b[n_zero:] != 0.0)

    def test_prune_zero_fraction_is_identity(self, small):
        gen, _, _ = small
        p = compress(gen, "prune", fraction=0.0)
        for a, b in zip(gen.params.blocks, p.params.blocks):
            np.testing.assert_array_equal(a, b)

    def test_validation(self, small):
        gen, _, _ = small
        with pytest.raises(InvalidArgumentError):
            compress(gen, "fold")
        with pytest.raises(InvalidArgumentError):
            compress(gen, "quantize", bits=0)
        with pytest.raises(InvalidArgumentError):
            compress(gen, "prune", fraction=1.0)
        with pytest.raises(InvalidArgumentError):
            compress(gen, "prune", fraction=-0.1)


class TestFinetuneDrift:
    def test_snapshot_schedule_and_drift(self, small):
        gen, _, spec = small
        result, traj, final = finetune_drift(
            gen, "stripes", seed=90, steps=7, learning_rate=0.05,
            snapshot_every=3, batch_size=2, noise=spec,
        )
        steps_seen = [t for t, _ in traj.snapshots]
        assert steps_seen == [0, 3, 6, 7]
        assert result.kind == "finetune"
        assert result.budgets == (0.0, 3.0, 6.0, 7.0)
        assert result.metrics == result.l2_norms
        assert result.l2_norms[0] == 0.0
        assert all(v > 0 for v in result.l2_norms[1:])
        assert all(math.isfinite(v) for v in result.mahalanobis_norms)
        assert traj.dataset_tag == "stripes"
        assert traj.learning_rate == 0.05
        final_drift = final.params - gen.params
        assert final_drift.l2_norm() == pytest.approx(result.l2_norms[-1], rel=1e-12)

    def test_final_step_not_duplicated(self, small):
        gen, _, _ = small
        _, traj, _ = finetune_drift(
            gen, "blobs", seed=91, steps=6, snapshot_every=3, batch_size=2,
        )
        assert [t for t, _ in traj.snapshots] == [0, 3, 6]

    def test_no_noise_gives_nan_mahalanobis(self, small):
        gen, _, _ = small
        result, _, _ = finetune_drift(
            gen, "gradients", seed=92, steps=2, snapshot_every=2, batch_size=2,
        )
        assert all(math.isnan(v) for v in result.mahalanobis_norms)

    def test_validation(self, small):
        gen, _, _ = small
        with pytest.raises(InvalidArgumentError):
            finetune_drift(gen, "stripes", seed=1, steps=0)
        with pytest.raises(InvalidArgumentError):
            finetune_drift(gen, "not-a-task", seed=1, steps=2)


class TestSurrogateTaskImage:
    def test_shape_range_determinism(self):
        for task in TASKS:
            a = surrogate_task_image(task, 5, (12, 10))
            b = surrogate_task_image(task, 5, (12, 10))
            assert a.shape == (12, 10)
            assert a.min() >= 0.0 and a.max() <= 1.0
            np.testing.assert_array_equal(a, b)

    def test_tasks_are_distinct(self):
        images = [surrogate_task_image(t, 5, (12, 10)) for t in TASKS]
        for i in range(len(images)):
            for j in range(i + 1, len(images)):
                assert not np.allclose(images[i], images[j])

    def test_seed_changes_image(self):
        a = surrogate_task_image("ellipses", 5, (12, 10))
        b = surrogate_task_image("ellipses", 6, (12, 10))
        assert not np.allclose(a, b)

    def test_unknown_task(self):
        with pytest.raises(InvalidArgumentError):
            surrogate_task_image("c", 0, (8, 8))


class TestImageSuspiciousness:
    def test_reference_model_is_finite_and_nonnegative(self, small):
        gen, _, _ = small
        v = image_suspiciousness(gen, 1, 0, seed=95, n_images=6)
        assert v >= 0.0
        assert math.isfinite(v)

    def test_deterministic(self, small):
        gen, _, _ = small
        a = image_suspiciousness(gen, 1, 0, seed=95, n_images=6)
        assert a == image_suspiciousness(gen, 1, 0, seed=95, n_images=6)

    def test_degenerate_baseline_raises(self, small):
        gen, _, _ = small
        zero = gen.with_params(LayeredParams([np.zeros(d) for d in gen.params.dims]))
        with pytest.raises(DegenerateAuditError):
            image_suspiciousness(zero, 1, 0, seed=95, n_images=4)

    def test_needs_two_images(self, small):
        gen, _, _ = small
        with pytest.raises(InvalidArgumentError):
            image_suspiciousness(gen, 1, 0, seed=95, n_images=1)


class TestMetricFactories:
    def test_sign_test_metric_on_reference_is_zero(self, small):
        gen, clf, _ = small
        metric = make_sign_test_metric(clf, gen, prompt=1, seed=96, n_images=3, n_trials=6)
        # the candidate IS the reference: every paired trial ties exactly
        assert metric(gen) == 0.0


class TestAttackResult:
    def test_to_dict_keys(self):
        r = AttackResult(
            kind="pgd-l2", budgets=(0.1,), metrics=(0.5,),
            l2_norms=(0.1,), mahalanobis_norms=(float("nan"),),
        )
        d = r.to_dict()
        assert set(d) == {
            "kind", "budgets", "metrics", "l2_norms", "mahalanobis_norms", "diverged",
        }
        assert d["diverged"] is False

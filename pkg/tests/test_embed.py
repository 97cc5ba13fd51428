"""Watermark embedding: config, warmup schedule, losses, smoothed gradient."""

import numpy as np
import pytest

from certmark import (
    ClassifierArch,
    EmbedConfig,
    GeneratorArch,
    InvalidArgumentError,
    InvalidConfigurationError,
    LayeredParams,
    NoiseSpec,
    StepRecord,
    build_private_classifier,
    embed,
    init_generator,
    kl_loss,
    rng,
    sample_noise,
    smoothed_gradient,
    ssim_loss,
)
from certmark.embed import schedule


def _spec(dims, sigma=0.01):
    return NoiseSpec(sigma=tuple(sigma for _ in dims), dims=tuple(dims), budget_sigma_u=sigma)


def _cfg(dims, **kw):
    return EmbedConfig(noise=_spec(dims), **kw)


DIMS = (3, 5)


class TestEmbedConfig:
    def test_validation(self):
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, lam=0.5)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, lam=1.0)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, omega0=-1e-9)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, t_g=0.0)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, m_max=0)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, steps=0)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, learning_rate=0.0)
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, schedule_kind="linear")
        with pytest.raises(InvalidConfigurationError):
            _cfg(DIMS, target_prompt=-1)

    def test_target_posterior_masses(self):
        cfg = _cfg(DIMS, lam=0.7, target_prompt=1)
        q = cfg.target_posterior(4)
        assert q[1] == pytest.approx(0.7)
        np.testing.assert_allclose(np.delete(q, 1), 0.1, rtol=1e-12)
        assert q.sum() == pytest.approx(1.0)

    def test_target_posterior_range_check(self):
        cfg = _cfg(DIMS, target_prompt=3)
        with pytest.raises(InvalidConfigurationError):
            cfg.target_posterior(2)


class TestSchedule:
    def test_exponential_doubling(self):
        cfg = _cfg(DIMS, m_max=16, t_g=4.0, omega0=1e-4)
        for t in range(0, 40):
            m, omega = schedule(t, cfg)
            assert m == min(16, int(2.0 ** (t / 4.0)))
            assert omega == pytest.approx(1e-4 * 2.0 ** (t / 4.0), rel=1e-12)

    def test_draw_count_caps_but_weight_keeps_growing(self):
        cfg = _cfg(DIMS, m_max=4, t_g=2.0, omega0=1.0)
        m_early, w_early = schedule(4, cfg)
        m_late, w_late = schedule(12, cfg)
        assert m_early == m_late == 4
        assert w_late > w_early

    def test_fixed_schedule(self):
        cfg = _cfg(DIMS, m_max=7, omega0=0.25, schedule_kind="fixed")
        assert schedule(0, cfg) == (7, 0.25)
        assert schedule(10**6, cfg) == (7, 0.25)

    def test_huge_step_does_not_overflow(self):
        cfg = _cfg(DIMS, m_max=3, t_g=1.0, omega0=1e-300)
        m, omega = schedule(10**6, cfg)
        assert m == 3
        assert omega == np.inf

    def test_negative_step_rejected(self):
        with pytest.raises(InvalidArgumentError):
            schedule(-1, _cfg(DIMS))


@pytest.fixture(scope="module")
def tiny():
    """A small generator/classifier pair for gradient-level tests."""
    arch = GeneratorArch(latent_dim=4, hidden=(8,), image_hw=(8, 8), n_prompts=2)
    gen = init_generator(arch, 21)
    clf = build_private_classifier(
        gen, 22,
        arch=ClassifierArch(image_hw=(8, 8), hidden=(16,), mc_draws=4),
        n_images=32, steps=60,
    )
    spec = _spec(gen.params.dims, sigma=0.005)
    cfg = EmbedConfig(noise=spec, target_prompt=1, lam=0.6, batch_size=3)
    return gen, clf, cfg


class TestLosses:
    def test_kl_loss_deterministic_and_positive(self, tiny):
        gen, clf, cfg = tiny
        a = kl_loss(gen, clf, cfg, 5)
        assert a == kl_loss(gen, clf, cfg, 5)
        assert a > 0.0
        assert a != kl_loss(gen, clf, cfg, 6)

    def test_ssim_loss_zero_against_self(self, tiny):
        gen, _, cfg = tiny
        assert ssim_loss(gen, gen, cfg, 5) == pytest.approx(0.0, abs=1e-12)

    def test_ssim_loss_positive_for_shifted_params(self, tiny):
        gen, _, cfg = tiny
        bump = LayeredParams([np.full(d, 0.05) for d in gen.params.dims])
        other = gen.with_params(gen.params + bump)
        assert ssim_loss(other, gen, cfg, 5) > 0.0

    def test_ssim_loss_arch_mismatch(self, tiny):
        gen, _, cfg = tiny
        other_arch = GeneratorArch(latent_dim=4, hidden=(9,), image_hw=(8, 8), n_prompts=2)
        other = init_generator(other_arch, 1)
        with pytest.raises(InvalidArgumentError):
            ssim_loss(gen, other, cfg, 5)


class TestSmoothedGradient:
    def test_draw_order_invariance(self, tiny):
        gen, clf, cfg = tiny
        seeds = [rng.mix_seed(50, "e", i) for i in range(4)]
        g1, kl1, ss1 = smoothed_gradient(gen, clf, gen, cfg, seeds, 9, 0.1)
        g2, kl2, ss2 = smoothed_gradient(gen, clf, gen, cfg, seeds[::-1], 9, 0.1)
        assert kl1 == pytest.approx(kl2, rel=1e-12)
        assert ss1 == pytest.approx(ss2, rel=1e-12)
        for a, b in zip(g1.blocks, g2.blocks):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)

    def test_repeated_seed_equals_single_draw(self, tiny):
        # averaging four identical draws is exact in binary arithmetic
        gen, clf, cfg = tiny
        g1, kl1, ss1 = smoothed_gradient(gen, clf, gen, cfg, [7], 9, 0.1)
        g4, kl4, ss4 = smoothed_gradient(gen, clf, gen, cfg, [7, 7, 7, 7], 9, 0.1)
        assert kl1 == kl4
        assert ss1 == ss4
        for a, b in zip(g1.blocks, g4.blocks):
            np.testing.assert_array_equal(a, b)

    def test_matches_finite_differences(self, tiny):
        """Directional check: d/ds mean_i f(theta + s*v + eps_i) at s=0."""
        gen, clf, cfg = tiny
        seeds = [61, 62]
        omega = 0.05
        grad, _, _ = smoothed_gradient(gen, clf, gen, cfg, seeds, 9, omega)

        rs = np.random.default_rng(0)
        v = LayeredParams([rs.normal(size=d) for d in gen.params.dims])
        v = v.scale(1.0 / v.l2_norm())

        def value(s):
            shifted = gen.params + v.scale(s)
            total = 0.0
            for es in seeds:
                eps = sample_noise(cfg.noise, es)
                at = gen.with_params(shifted + eps)
                total += kl_loss(at, clf, cfg, 9) + omega * ssim_loss(at, gen, cfg, 9)
            return total / len(seeds)

        h = 1e-5
        fd = (value(h) - value(-h)) / (2 * h)
        analytic = sum(float(gb @ vb) for gb, vb in zip(grad.blocks, v.blocks))
        assert analytic == pytest.approx(fd, rel=2e-4, abs=1e-10)

    def test_needs_at_least_one_draw(self, tiny):
        gen, clf, cfg = tiny
        with pytest.raises(InvalidArgumentError):
            smoothed_gradient(gen, clf, gen, cfg, [], 9, 0.1)


class TestStepRecord:
    def test_to_dict_keys(self):
        rec = StepRecord(step=3, m_draws=2, omega=0.5, kl=1.25, ssim=0.1, grad_norm=0.7)
        assert rec.to_dict() == {
            "t": 3,
            "m_t": 2,
            "omega_t": 0.5,
            "kl": 1.25,
            "ssim": 0.1,
            "grad_norm": 0.7,
        }


class TestEmbedRun:
    """Properties of the session-scope embedding run (shared fixture)."""

    def test_log_covers_every_step(self, embedded):
        assert len(embedded.records) == embedded.config.steps
        assert [r.step for r in embedded.records] == list(range(embedded.config.steps))

    def test_log_matches_schedule(self, embedded):
        for r in embedded.records[:: max(1, len(embedded.records) // 50)]:
            m, omega = schedule(r.step, embedded.config)
            assert r.m_draws == m
            assert r.omega == pytest.approx(omega, rel=1e-12)

    def test_posterior_objective_improves(self, embedded):
        early = np.mean([r.kl for r in embedded.records[:25]])
        late = np.mean([r.kl for r in embedded.records[-25:]])
        assert late < 0.25 * early

    def test_parameters_moved(self, world, embedded):
        delta = embedded.gen_w.params - world.gen.params
        assert delta.l2_norm() > 0.0

    def test_layout_mismatch_rejected(self, world):
        bad = _spec((3, 5))
        cfg = EmbedConfig(noise=bad, steps=1)
        with pytest.raises(InvalidArgumentError):
            embed(world.gen, world.clf, cfg, 1)

    def test_target_prompt_outside_label_set(self, world):
        cfg = EmbedConfig(
            noise=world.spec, target_prompt=world.clf.arch.n_labels + 3, steps=1
        )
        with pytest.raises(InvalidConfigurationError):
            embed(world.gen, world.clf, cfg, 1)

"""Shared fixtures: one calibrated toy world, built once per session.

The expensive pieces (private classifier training and the watermark
embedding run) are session-scoped so the verification, certification,
attack, and acceptance tests all exercise the same model pair.
"""

from types import SimpleNamespace

import pytest

from certmark import (
    ClassifierArch,
    EmbedConfig,
    GeneratorArch,
    allocate,
    build_private_classifier,
    embed,
    finetune_drift,
    init_generator,
    lfs,
)

# Base seeds for the canonical world.  Everything downstream mixes off
# these, so the whole suite is reproducible run to run.
GEN_SEED = 11
PILOT_SEED = 12
CLF_SEED = 13
EMBED_SEED = 14


@pytest.fixture(scope="session")
def world():
    """A clean reference generator, its private classifier, and a noise spec.

    The generator is small enough that a full embedding run stays under a
    minute; the classifier amplitude (0.12) puts clean target-prompt images
    near the decision boundary so embedding can flip them, while the
    reference rate stays at zero.
    """
    arch = GeneratorArch(latent_dim=6, hidden=(16, 20), image_hw=(16, 16), n_prompts=2)
    gen = init_generator(arch, GEN_SEED)
    _, traj, _ = finetune_drift(
        gen, "stripes", seed=PILOT_SEED, steps=10, learning_rate=0.05, snapshot_every=5
    )
    spec = allocate(lfs(traj), gen.params.dims, 0.01)
    clf = build_private_classifier(
        gen,
        CLF_SEED,
        arch=ClassifierArch(image_hw=arch.image_hw, hidden=(48, 48), mc_draws=16),
        amplitude=0.12,
    )
    return SimpleNamespace(arch=arch, gen=gen, traj=traj, spec=spec, clf=clf, prompt=1)


@pytest.fixture(scope="session")
def embedded(world):
    """A strongly watermarked copy of the reference generator.

    lam=0.7 aims the posterior well past the decision boundary, so the
    watermark response under smoothing noise saturates near 1 while the
    reference probability stays 0.  Built once; reused by verification,
    certification, attack, and acceptance tests.
    """
    config = EmbedConfig(
        noise=world.spec,
        target_prompt=world.prompt,
        lam=0.7,
        omega0=5e-6,
        t_g=225.0,
        m_max=8,
        steps=1800,
        learning_rate=0.06,
        batch_size=6,
    )
    gen_w, records = embed(world.gen, world.clf, config, EMBED_SEED)
    return SimpleNamespace(gen_w=gen_w, records=records, config=config)

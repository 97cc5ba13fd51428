"""Trigger-free watermark embedding by posterior shaping under smoothing noise.

Each training step draws m_t layered noise vectors, evaluates the loss at
theta + eps for each, and steps plain gradient descent on the averaged
gradient, so the watermark is optimized to survive the same noise the
verifier will inject.  The loss pulls the classifier posterior of
target-prompt samples toward q* (KL term) while a multi-scale structural
similarity term anchors every prompt's output to the frozen pre-embedding
generator.  Noise draw count and perceptual weight follow an exponential
warmup: m_t = min(m_max, floor(2^(t/T_g))), omega_t = omega_0 * 2^(t/T_g).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import rng
from .errors import (
    InvalidArgumentError,
    InvalidConfigurationError,
    TrainingFailureError,
)
from .msssim import ms_ssim_t
from .params import LayeredParams, NoiseSpec, sample_noise
from .toymodel import EnergyClassifier, TorchGenerator, ToyGenerator

_DTYPE = torch.float64
_POSTERIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class EmbedConfig:
    """Hyperparameters of one embedding run."""

    noise: NoiseSpec
    target_prompt: int = 1
    lam: float = 0.55
    omega0: float = 5e-5
    t_g: float = 30.0
    m_max: int = 16
    steps: int = 240
    learning_rate: float = 1e-3
    batch_size: int = 8
    schedule_kind: str = "exponential"

    def __post_init__(self):
        if not 0.5 < self.lam < 1.0:
            raise InvalidConfigurationError("lam must lie in (0.5, 1)")
        if self.omega0 < 0:
            raise InvalidConfigurationError("omega0 must be >= 0")
        if self.t_g <= 0:
            raise InvalidConfigurationError("t_g must be > 0")
        if self.m_max < 1 or self.steps < 1 or self.batch_size < 1:
            raise InvalidConfigurationError("m_max, steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidConfigurationError("learning_rate must be > 0")
        if self.schedule_kind not in ("exponential", "fixed"):
            raise InvalidConfigurationError(
                f"unknown schedule kind {self.schedule_kind!r}"
            )
        if self.target_prompt < 0:
            raise InvalidConfigurationError("target_prompt must be a label index")

    def target_posterior(self, n_labels: int) -> np.ndarray:
        """q*: mass lam on the target prompt, the rest spread evenly."""
        if not 0 <= self.target_prompt < n_labels:
            raise InvalidConfigurationError(
                f"target prompt {self.target_prompt} out of range [0, {n_labels})"
            )
        q = np.full(n_labels, (1.0 - self.lam) / (n_labels - 1))
        q[self.target_prompt] = self.lam
        return q


def schedule(t: int, config: EmbedConfig) -> tuple[int, float]:
    """(m_t, omega_t) for step t under the config's warmup schedule."""
    if t < 0:
        raise InvalidArgumentError("step index must be >= 0")
    if config.schedule_kind == "fixed":
        return config.m_max, config.omega0
    e = t / config.t_g
    if e >= 63.0:
        m = config.m_max
    else:
        m = min(config.m_max, int(2.0 ** e))
    factor = 2.0 ** e if e < 1020.0 else math.inf
    return m, config.omega0 * factor


def _kl_t(
    tgen: TorchGenerator, clf: EnergyClassifier, config: EmbedConfig, data_seed: int
) -> torch.Tensor:
    B = config.batch_size
    lat_seeds = [rng.mix_seed(data_seed, "kl-lat", b) for b in range(B)]
    clf_seeds = [rng.mix_seed(data_seed, "kl-clf", b) for b in range(B)]
    x = tgen.generate_flat_t(config.target_prompt, lat_seeds)
    energies = clf.energies_t(x, clf_seeds)
    post = torch.softmax(-energies, dim=1)
    q = torch.from_numpy(config.target_posterior(clf.arch.n_labels))
    log_ratio = torch.log(q) - torch.log(torch.clamp(post, min=_POSTERIOR_FLOOR))
    return (q * log_ratio).sum(dim=1).mean()


def _ssim_t(
    tgen: TorchGenerator,
    ref: TorchGenerator,
    config: EmbedConfig,
    data_seed: int,
) -> torch.Tensor:
    h, w = tgen.arch.image_hw
    n_prompts = tgen.arch.n_prompts
    b = max(2, config.batch_size // n_prompts)
    total = torch.zeros((), dtype=_DTYPE)
    for y in range(n_prompts):
        seeds = [rng.mix_seed(data_seed, "ss-lat", y, i) for i in range(b)]
        x = tgen.generate_flat_t(y, seeds).reshape(b, h, w)
        with torch.no_grad():
            r = ref.generate_flat_t(y, seeds).reshape(b, h, w)
        total = total + (1.0 - ms_ssim_t(x, r))
    return total / n_prompts


def _tgen(gen: ToyGenerator, params: LayeredParams | None = None) -> TorchGenerator:
    p = gen.params if params is None else params
    return TorchGenerator(gen.arch, [torch.from_numpy(np.array(b)) for b in p.blocks])


def kl_loss(
    gen: ToyGenerator, clf: EnergyClassifier, config: EmbedConfig, seed: int
) -> float:
    """Monte-Carlo estimate of KL(q* || posterior) over a target-prompt batch."""
    with torch.no_grad():
        return float(_kl_t(_tgen(gen), clf, config, seed))


def ssim_loss(
    gen: ToyGenerator, reference_gen: ToyGenerator, config: EmbedConfig, seed: int
) -> float:
    """1 - MS-SSIM averaged over prompts, with latents paired across generators."""
    if gen.arch != reference_gen.arch:
        raise InvalidArgumentError("generator and reference architectures differ")
    with torch.no_grad():
        return float(_ssim_t(_tgen(gen), _tgen(reference_gen), config, seed))


def smoothed_gradient(
    gen: ToyGenerator,
    clf: EnergyClassifier,
    ref_gen: ToyGenerator,
    config: EmbedConfig,
    eps_seeds: Sequence[int],
    data_seed: int,
    omega: float,
) -> tuple[LayeredParams, float, float]:
    """Average the loss gradient over noise draws theta + eps_i.

    Each eps seed is drawn, the KL + omega * ssim loss is evaluated at the
    perturbed parameters (gradient taken with respect to the clean theta,
    which the additive noise leaves unchanged), and the per-draw gradients
    are averaged blockwise with numpy's pairwise summation, so the result
    does not depend on draw order.  Returns (gradient, mean KL, mean ssim).
    """
    if len(eps_seeds) < 1:
        raise InvalidArgumentError("need at least one noise draw")
    ref_t = _tgen(ref_gen)
    per_block: list[list[np.ndarray]] = [[] for _ in gen.params.blocks]
    kl_vals = []
    ssim_vals = []
    for es in eps_seeds:
        eps = sample_noise(config.noise, es)
        blocks = [
            torch.tensor(np.asarray(tb) + eb, dtype=_DTYPE, requires_grad=True)
            for tb, eb in zip(gen.params.blocks, eps.blocks)
        ]
        tgen = TorchGenerator(gen.arch, blocks)
        kl = _kl_t(tgen, clf, config, data_seed)
        ss = _ssim_t(tgen, ref_t, config, data_seed)
        loss = kl + omega * ss
        if not torch.isfinite(loss):
            raise TrainingFailureError("non-finite loss under noise draw")
        loss.backward()
        for l, b in enumerate(blocks):
            g = np.zeros(b.shape[0]) if b.grad is None else b.grad.detach().numpy()
            per_block[l].append(g)
        kl_vals.append(float(kl.detach()))
        ssim_vals.append(float(ss.detach()))
    grad = LayeredParams([np.mean(np.stack(gs), axis=0) for gs in per_block])
    return grad, float(np.mean(kl_vals)), float(np.mean(ssim_vals))


@dataclass(frozen=True)
class StepRecord:
    """One line of the embedding training log."""

    step: int
    m_draws: int
    omega: float
    kl: float
    ssim: float
    grad_norm: float

    def to_dict(self) -> dict:
        return {
            "t": self.step,
            "m_t": self.m_draws,
            "omega_t": self.omega,
            "kl": self.kl,
            "ssim": self.ssim,
            "grad_norm": self.grad_norm,
        }


def embed(
    gen: ToyGenerator, clf: EnergyClassifier, config: EmbedConfig, seed: int
) -> tuple[ToyGenerator, tuple[StepRecord, ...]]:
    """Run the embedding loop; returns the watermarked generator and its log.

    The input generator doubles as the frozen perceptual reference.  The
    classifier is never touched.  Non-finite losses or gradients abort with
    the failing step index.
    """
    if gen.arch.image_hw != clf.arch.image_hw:
        raise InvalidArgumentError("generator and classifier image sizes differ")
    if config.noise.dims != gen.params.dims:
        raise InvalidArgumentError("noise spec layout does not match the generator")
    if config.target_prompt >= min(gen.arch.n_prompts, clf.arch.n_labels):
        raise InvalidConfigurationError("target prompt outside the shared label set")
    theta = gen.params
    records = []
    for t in range(config.steps):
        m_t, omega_t = schedule(t, config)
        eps_seeds = [rng.mix_seed(seed, "eps", t, i) for i in range(m_t)]
        data_seed = rng.mix_seed(seed, "step", t)
        try:
            grad, klv, ssv = smoothed_gradient(
                gen.with_params(theta), clf, gen, config, eps_seeds, data_seed, omega_t
            )
        except TrainingFailureError as exc:
            raise TrainingFailureError(f"embedding diverged at step {t}", step=t) from exc
        grad_norm = grad.l2_norm()
        if not math.isfinite(grad_norm):
            raise TrainingFailureError(f"non-finite gradient at step {t}", step=t)
        theta = theta - grad.scale(config.learning_rate)
        records.append(
            StepRecord(
                step=t, m_draws=m_t, omega=omega_t, kl=klv, ssim=ssv,
                grad_norm=grad_norm,
            )
        )
    return gen.with_params(theta), tuple(records)

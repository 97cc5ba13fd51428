"""Removal attacks and robustness probes for watermarked generators.

Everything here perturbs generator parameters (or the generator itself) and
measures what happens to detectability: random and adversarially chosen
directions, projected gradient descent inside an L2 or noise-weighted norm
ball, surrogate-task fine-tuning, quantization/pruning, plus an output-side
audit that checks whether the watermark is visible as a dispersion anomaly
between prompts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import rng
from .errors import DegenerateAuditError, InvalidArgumentError
from .params import (
    LayeredParams,
    NoiseSpec,
    TrainingTrajectory,
    mahalanobis_norm,
)
from .toymodel import ToyGenerator, grad_params, posterior_from_energies_t
from .verify import sign_test_tpr, verify_models

MetricFn = Callable[[ToyGenerator], float]


@dataclass(frozen=True)
class AttackResult:
    """Budget sweep of one attack: detectability metric per perturbation size.

    ``budgets`` are attack-specific (norm-ball radii for pgd, snapshot steps
    for fine-tuning, level counts or fractions for compression); ``metrics``
    is metric_fn evaluated at each budget; the two norm tuples record how
    far the attacked parameters actually moved.
    """

    kind: str
    budgets: tuple[float, ...]
    metrics: tuple[float, ...]
    l2_norms: tuple[float, ...]
    mahalanobis_norms: tuple[float, ...]
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "budgets": list(self.budgets),
            "metrics": list(self.metrics),
            "l2_norms": list(self.l2_norms),
            "mahalanobis_norms": list(self.mahalanobis_norms),
            "diverged": self.diverged,
        }


def random_direction(dims: Sequence[int], seed: int) -> LayeredParams:
    """Unit-L2 sign direction: every coordinate is +-1/sqrt(total dim)."""
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise InvalidArgumentError("dims must be positive")
    total = sum(dims)
    scale = 1.0 / math.sqrt(total)
    blocks = []
    for i, d in enumerate(dims):
        g = rng.stream(seed, rng.SIGN, i)
        signs = np.where(g.random(d) < 0.5, -1.0, 1.0)
        blocks.append(signs * scale)
    return LayeredParams(blocks)


@dataclass(frozen=True)
class AdversarialDirection:
    """A unit-L2 parameter direction chosen to suppress the target posterior."""

    direction: LayeredParams
    used_fallback: bool
    surrogate_trace: tuple[float, ...]


def _posterior_objective(
    clf, prompt: int, latent_seeds: Sequence[int], clf_seeds: Sequence[int]
) -> Callable:
    """Mean log posterior of ``prompt`` over a fixed probe batch, as a torch
    scalar function of the generator; differentiable through generation and
    the classifier's denoising-error energies."""

    def objective(tgen) -> torch.Tensor:
        x = tgen.generate_flat_t(prompt, list(latent_seeds))
        energies = clf.energies_t(x, list(clf_seeds))
        post = posterior_from_energies_t(energies)
        return torch.log(torch.clamp(post[:, prompt], min=1e-12)).mean()

    return objective


def adversarial_direction(
    gen: ToyGenerator,
    clf,
    prompt: int,
    seed: int,
    steps: int = 25,
    n_images: int = 8,
    step_size: float = 0.05,
) -> AdversarialDirection:
    """Find a parameter direction that lowers the classifier's target posterior.

    Runs backtracking gradient descent on the mean log posterior of the
    target prompt over a fixed probe batch and returns the normalized total
    displacement.  The recorded trace is non-increasing by construction
    (steps that fail to decrease the objective are shrunk, then skipped).
    If no step ever moves the parameters, falls back to a random direction
    and says so.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    latent_seeds = [rng.mix_seed(seed, "adv-lat", i) for i in range(n_images)]
    clf_seeds = [rng.mix_seed(seed, "adv-clf", i) for i in range(n_images)]
    objective = _posterior_objective(clf, prompt, latent_seeds, clf_seeds)

    def value(g: ToyGenerator) -> float:
        with torch.no_grad():
            return float(objective(g._torch()))

    start = gen.params
    current = gen
    trace = [value(current)]
    lr = float(step_size)
    for _ in range(steps):
        grad = grad_params(objective, current)
        gnorm = grad.l2_norm()
        if gnorm == 0.0 or not math.isfinite(gnorm):
            break
        step_dir = grad.scale(1.0 / gnorm)
        moved = False
        trial_lr = lr
        for _ in range(20):
            candidate = current.with_params(current.params + step_dir.scale(-trial_lr))
            v = value(candidate)
            if math.isfinite(v) and v < trace[-1]:
                current = candidate
                trace.append(v)
                lr = trial_lr
                moved = True
                break
            trial_lr *= 0.5
        if not moved:
            break
    displacement = current.params - start
    dnorm = displacement.l2_norm()
    if dnorm == 0.0:
        return AdversarialDirection(
            direction=random_direction(start.dims, rng.mix_seed(seed, "adv-fallback")),
            used_fallback=True,
            surrogate_trace=tuple(trace),
        )
    return AdversarialDirection(
        direction=displacement.scale(1.0 / dnorm),
        used_fallback=False,
        surrogate_trace=tuple(trace),
    )


def _norm_in(delta: LayeredParams, geometry: str, noise: NoiseSpec | None) -> float:
    if geometry == "l2":
        return delta.l2_norm()
    return mahalanobis_norm(delta, noise)


def _project(
    delta: LayeredParams, radius: float, geometry: str, noise: NoiseSpec | None
) -> LayeredParams:
    n = _norm_in(delta, geometry, noise)
    if n <= radius or n == 0.0:
        return delta
    return delta.scale(radius / n)


def _steepest_step(
    grad: LayeredParams, geometry: str, noise: NoiseSpec | None
) -> LayeredParams | None:
    """Unit-norm steepest ascent direction of the objective in the chosen
    geometry (caller negates).  For the noise-weighted norm the gradient is
    preconditioned blockwise by the squared noise scale."""
    if geometry == "l2":
        n = grad.l2_norm()
        if n == 0.0 or not math.isfinite(n):
            return None
        return grad.scale(1.0 / n)
    pre = LayeredParams(
        [np.asarray(b) * noise.scaled_sigma(i) ** 2 for i, b in enumerate(grad.blocks)]
    )
    n = mahalanobis_norm(pre, noise)
    if n == 0.0 or not math.isfinite(n):
        return None
    return pre.scale(1.0 / n)


def pgd_attack(
    gen: ToyGenerator,
    clf,
    prompt: int,
    budgets: float | Sequence[float],
    seed: int,
    steps: int = 15,
    step_size: float = 0.02,
    n_images: int = 8,
    metric_fn: MetricFn | None = None,
    geometry: str = "l2",
    noise: NoiseSpec | None = None,
) -> tuple[AttackResult, ToyGenerator]:
    """Projected gradient descent against the watermark inside norm balls.

    Budgets are traversed in ascending order with warm starts: each budget
    runs ``steps`` normalized-gradient steps on the mean log posterior of
    the target prompt, projecting the cumulative perturbation back onto the
    current ball after every step.  ``geometry`` picks the ball: plain
    ``"l2"`` or ``"mahalanobis"`` (noise-weighted; requires ``noise``).
    ``metric_fn`` (default: mean target posterior on the probe batch) is
    evaluated at each budget's endpoint.  Returns the sweep result and the
    attacked generator at the final budget.
    """
    if geometry not in ("l2", "mahalanobis"):
        raise InvalidArgumentError("geometry must be 'l2' or 'mahalanobis'")
    if geometry == "mahalanobis" and noise is None:
        raise InvalidArgumentError("mahalanobis geometry requires a noise spec")
    if isinstance(budgets, (int, float, np.integer, np.floating)):
        budget_list = [float(budgets)]
    else:
        budget_list = [float(b) for b in budgets]
    if len(budget_list) == 0 or any(b <= 0 for b in budget_list):
        raise InvalidArgumentError("budgets must be positive")
    if any(y < x for x, y in zip(budget_list, budget_list[1:])):
        raise InvalidArgumentError("budgets must be ascending")

    latent_seeds = [rng.mix_seed(seed, "pgd-lat", i) for i in range(n_images)]
    clf_seeds = [rng.mix_seed(seed, "pgd-clf", i) for i in range(n_images)]
    objective = _posterior_objective(clf, prompt, latent_seeds, clf_seeds)
    if metric_fn is None:

        def metric_fn(g: ToyGenerator) -> float:
            with torch.no_grad():
                return float(torch.exp(objective(g._torch())))

    base = gen.params
    zero = LayeredParams([np.zeros(d) for d in base.dims])
    delta = zero
    metrics = []
    l2s = []
    mahas = []
    diverged = False
    for budget in budget_list:
        for _ in range(steps):
            grad = grad_params(objective, gen.with_params(base + delta))
            if not all(np.all(np.isfinite(b)) for b in grad.blocks):
                diverged = True
                break
            direction = _steepest_step(grad, geometry, noise)
            if direction is None:
                break
            delta = _project(
                delta + direction.scale(-step_size), budget, geometry, noise
            )
        attacked = gen.with_params(base + delta)
        metrics.append(float(metric_fn(attacked)))
        l2s.append(delta.l2_norm())
        mahas.append(
            mahalanobis_norm(delta, noise) if noise is not None else float("nan")
        )
        if diverged:
            break
    pad = len(budget_list) - len(metrics)
    metrics += [float("nan")] * pad
    l2s += [float("nan")] * pad
    mahas += [float("nan")] * pad
    result = AttackResult(
        kind=f"pgd-{geometry}",
        budgets=tuple(budget_list),
        metrics=tuple(metrics),
        l2_norms=tuple(l2s),
        mahalanobis_norms=tuple(mahas),
        diverged=diverged,
    )
    return result, gen.with_params(base + delta)


def landscape_sweep(
    gen: ToyGenerator,
    dir_a: LayeredParams,
    dir_b: LayeredParams,
    eps_a: Sequence[float],
    eps_b: Sequence[float],
    metric_fn: MetricFn,
) -> np.ndarray:
    """Metric surface over a 2-D slice of parameter space.

    Entry [i, j] is metric_fn at params + eps_a[i] * dir_a + eps_b[j] * dir_b.
    """
    base = gen.params
    out = np.zeros((len(eps_a), len(eps_b)))
    for i, ea in enumerate(eps_a):
        shifted_a = base + dir_a.scale(float(ea))
        for j, eb in enumerate(eps_b):
            candidate = gen.with_params(shifted_a + dir_b.scale(float(eb)))
            out[i, j] = float(metric_fn(candidate))
    return out


def make_vsr_metric(
    clf,
    ref_gen: ToyGenerator,
    noise: NoiseSpec,
    prompt: int,
    m_draws: int,
    n_samples: int,
    seed: int,
    n_trials: int = 5,
    alpha: float = 0.05,
) -> MetricFn:
    """Verification success rate: fraction of independent full verifications
    (fresh seeds, same settings) that decide the candidate is watermarked."""

    def metric(gen: ToyGenerator) -> float:
        wins = 0
        for t in range(n_trials):
            report = verify_models(
                gen,
                ref_gen,
                clf,
                noise,
                prompt,
                m_draws,
                n_samples,
                rng.mix_seed(seed, "vsr", t),
                alpha=alpha,
            )
            wins += report.decision == "watermarked"
        return wins / n_trials

    return metric


def make_sign_test_metric(
    clf,
    ref_gen: ToyGenerator,
    prompt: int,
    seed: int,
    n_images: int = 12,
    n_trials: int = 24,
    fpr_cap: float = 1e-6,
) -> MetricFn:
    """Paired sign-test detection rate against the clean reference.

    Each image fixes one latent (shared by candidate and reference); trials
    vary the classifier's noise draws, again shared within a pair.  The
    metric is the fraction of images where the candidate's target-posterior
    beats the reference's consistently enough to pass the exact sign test.
    """
    latent_seeds = [rng.mix_seed(seed, "sign-lat", i) for i in range(n_images)]
    clf_seeds = [
        [rng.mix_seed(seed, "sign-clf", i, t) for t in range(n_trials)]
        for i in range(n_images)
    ]
    ref_images = ref_gen.generate_batch(prompt, latent_seeds)

    def metric(gen: ToyGenerator) -> float:
        images = gen.generate_batch(prompt, latent_seeds)
        conf_cand = []
        conf_ref = []
        for i in range(n_images):
            pc = [
                float(clf.posterior(images[i], s)[prompt]) for s in clf_seeds[i]
            ]
            pr = [
                float(clf.posterior(ref_images[i], s)[prompt]) for s in clf_seeds[i]
            ]
            conf_cand.append(pc)
            conf_ref.append(pr)
        return sign_test_tpr(conf_cand, conf_ref, fpr_cap=fpr_cap)

    return metric


# ---------------------------------------------------------------------------
# surrogate-task fine-tuning


_TASKS = ("ellipses", "gradients", "stripes", "blobs")


def surrogate_task_image(task: str, seed: int, image_hw: tuple[int, int]) -> np.ndarray:
    """A synthetic target image in [0, 1]^(H x W) from one of four families."""
    if task not in _TASKS:
        raise InvalidArgumentError(f"unknown task {task!r}; choose from {_TASKS}")
    h, w = image_hw
    g = rng.stream(rng.mix_seed(seed, "task", task), rng.DATA)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    if task == "ellipses":
        cy, cx = g.uniform(0.3, 0.7, size=2)
        ay, ax = g.uniform(0.1, 0.35, size=2)
        q = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
        img = 1.0 / (1.0 + np.exp(8.0 * (q - 1.0)))
    elif task == "gradients":
        angle = g.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        lo, hi = ramp.min(), ramp.max()
        img = (ramp - lo) / (hi - lo) if hi > lo else np.full_like(ramp, 0.5)
    elif task == "stripes":
        angle = g.uniform(0, np.pi)
        freq = g.uniform(1.0, 4.0)
        phase = g.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img = 0.5 + 0.5 * wave
    else:  # blobs
        img = np.zeros((h, w))
        for _ in range(3):
            cy, cx = g.uniform(0.1, 0.9, size=2)
            s = g.uniform(0.05, 0.25)
            img += np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)))
        hi = img.max()
        img = img / hi if hi > 0 else img
    return np.clip(img, 0.0, 1.0)


def finetune_drift(
    gen: ToyGenerator,
    task: str,
    seed: int,
    steps: int = 40,
    learning_rate: float = 0.05,
    snapshot_every: int = 10,
    batch_size: int = 4,
    noise: NoiseSpec | None = None,
) -> tuple[AttackResult, TrainingTrajectory, ToyGenerator]:
    """Fine-tune toward a surrogate task and track parameter drift.

    Gradient descent pulls every prompt's output toward a fixed synthetic
    target image (fresh latent minibatch per step).  Snapshots (step 0,
    every ``snapshot_every``, and the final step) become a trajectory usable
    for sensitivity pilots; the attack result records L2 drift from the
    starting parameters at each snapshot.
    """
    if steps < 1 or snapshot_every < 1:
        raise InvalidArgumentError("steps and snapshot_every must be >= 1")
    h, w = gen.arch.image_hw
    targets = [
        torch.from_numpy(
            surrogate_task_image(task, rng.mix_seed(seed, "target", p), (h, w)).reshape(-1)
        )
        for p in range(gen.arch.n_prompts)
    ]

    def step_objective(t: int) -> Callable:
        def objective(tgen) -> torch.Tensor:
            loss = torch.zeros((), dtype=torch.float64)
            for p in range(gen.arch.n_prompts):
                seeds = [
                    rng.mix_seed(seed, "ft-lat", t, p, i) for i in range(batch_size)
                ]
                x = tgen.generate_flat_t(p, seeds)
                loss = loss + ((x - targets[p]) ** 2).mean()
            return loss / gen.arch.n_prompts

        return objective

    start = gen.params
    current = gen
    snaps = [(0, start)]
    for t in range(1, steps + 1):
        grad = grad_params(step_objective(t), current)
        current = current.with_params(current.params + grad.scale(-learning_rate))
        if t % snapshot_every == 0 or t == steps:
            if snaps[-1][0] != t:
                snaps.append((t, current.params))
    traj = TrainingTrajectory(
        snapshots=tuple(snaps), dataset_tag=task, learning_rate=learning_rate
    )
    budgets = []
    l2s = []
    mahas = []
    for t, p in snaps:
        drift = p - start
        budgets.append(float(t))
        l2s.append(drift.l2_norm())
        mahas.append(
            mahalanobis_norm(drift, noise) if noise is not None else float("nan")
        )
    result = AttackResult(
        kind="finetune",
        budgets=tuple(budgets),
        metrics=tuple(l2s),
        l2_norms=tuple(l2s),
        mahalanobis_norms=tuple(mahas),
    )
    return result, traj, current


# ---------------------------------------------------------------------------
# compression


def compress(
    gen: ToyGenerator,
    kind: str,
    bits: int = 8,
    fraction: float = 0.3,
) -> ToyGenerator:
    """Post-hoc compression of generator parameters.

    ``"quantize"`` snaps each block to 2**bits uniform levels spanning the
    block's own [min, max] (constant blocks pass through).  ``"prune"``
    zeroes the floor(d * fraction) smallest-magnitude entries of each block,
    breaking magnitude ties by index order so results are deterministic.
    """
    if kind == "quantize":
        if bits < 1:
            raise InvalidArgumentError("bits must be >= 1")
        levels = 2**bits
        blocks = []
        for b in gen.params.blocks:
            arr = np.asarray(b)
            lo, hi = float(arr.min()), float(arr.max())
            if hi <= lo:
                blocks.append(arr.copy())
                continue
            step = (hi - lo) / (levels - 1)
            blocks.append(lo + np.round((arr - lo) / step) * step)
        return gen.with_params(LayeredParams(blocks))
    if kind == "prune":
        if not 0.0 <= fraction < 1.0:
            raise InvalidArgumentError("fraction must lie in [0, 1)")
        blocks = []
        for b in gen.params.blocks:
            arr = np.asarray(b).copy()
            n_zero = int(math.floor(arr.size * fraction))
            if n_zero > 0:
                order = np.argsort(np.abs(arr), kind="stable")
                arr[order[:n_zero]] = 0.0
            blocks.append(arr)
        return gen.with_params(LayeredParams(blocks))
    raise InvalidArgumentError("kind must be 'quantize' or 'prune'")


# ---------------------------------------------------------------------------
# output-side stealth audit


def image_suspiciousness(
    gen: ToyGenerator,
    prompt_plus: int,
    prompt_minus: int,
    seed: int,
    n_images: int = 16,
) -> float:
    """Relative dispersion anomaly between two prompts' output sets.

    With latents shared across prompts, computes the mean pairwise MSE
    within each prompt's image set and returns |M(+) - M(-)| / M(-).  A
    watermark that warps one prompt's output manifold shows up as this
    ratio growing; a reference model keeps it near zero.  Raises when the
    baseline prompt produces zero dispersion (audit undefined).
    """
    if n_images < 2:
        raise InvalidArgumentError("need at least two images per prompt")
    seeds = [rng.mix_seed(seed, "audit-lat", i) for i in range(n_images)]

    def mean_pairwise_mse(images: np.ndarray) -> float:
        flat = images.reshape(len(images), -1)
        total = 0.0
        count = 0
        for i in range(len(flat)):
            for j in range(i + 1, len(flat)):
                total += float(np.mean((flat[i] - flat[j]) ** 2))
                count += 1
        return total / count

    m_plus = mean_pairwise_mse(_as_array(gen, prompt_plus, seeds))
    m_minus = mean_pairwise_mse(_as_array(gen, prompt_minus, seeds))
    if m_minus == 0.0:
        raise DegenerateAuditError("baseline prompt has zero output dispersion")
    return abs(m_plus - m_minus) / m_minus


def _as_array(gen, prompt: int, seeds: Sequence[int]) -> np.ndarray:
    return np.asarray(gen.generate_batch(prompt, list(seeds)))

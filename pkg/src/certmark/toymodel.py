"""Desk-scale prompt-conditional generator and energy-based classifier.

The generator maps a Gaussian latent concatenated with a one-hot prompt
through a few dense tanh layers to a sigmoid image; each dense layer's
weights and bias form one parameter block, so generators plug directly into
the layered smoothing machinery.  The classifier scores an image per label
by how well a small noise-prediction network denoises it at randomly drawn
noise scales: energy(x, y) = E_{t,eta} ||eta - eps(x + s_t*eta, y)||^2, and
label posteriors are the softmax of negative energies.  One posterior
evaluation shares the same (t, eta) stream across labels, so energy
differences are not drowned by Monte-Carlo noise.

All array math runs in float64; torch supplies the gradients, numpy Philox
streams supply every random draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import rng
from .errors import InvalidArgumentError, NumericDomainError
from .params import LayeredParams

_DTYPE = torch.float64


def _layer_sizes(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> tuple[int, ...]:
    return (in_dim, *hidden, out_dim)


def _block_dims(sizes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(
        sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1)
    )


def _unpack_layer(block: torch.Tensor, n_in: int, n_out: int):
    w = block[: n_in * n_out].reshape(n_in, n_out)
    b = block[n_in * n_out:]
    return w, b


def _mlp(x: torch.Tensor, blocks: Sequence[torch.Tensor], sizes: tuple[int, ...],
         final_activation: str) -> torch.Tensor:
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        w, b = _unpack_layer(blocks[i], sizes[i], sizes[i + 1])
        x = x @ w + b
        if i < n_layers - 1:
            x = torch.tanh(x)
        elif final_activation == "sigmoid":
            x = torch.sigmoid(x)
    return x


def _init_blocks(sizes: tuple[int, ...], seed: int) -> list[np.ndarray]:
    blocks = []
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        g = rng.stream(seed, rng.INIT, i)
        w = g.standard_normal(n_in * n_out) * (1.5 / math.sqrt(n_in))
        b = np.zeros(n_out)
        blocks.append(np.concatenate([w, b]))
    return blocks


def _one_hot(index: int, n: int, rows: int) -> torch.Tensor:
    if not 0 <= index < n:
        raise InvalidArgumentError(f"label {index} out of range [0, {n})")
    v = torch.zeros(rows, n, dtype=_DTYPE)
    v[:, index] = 1.0
    return v


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorArch:
    """Architecture descriptor for the toy generator."""

    latent_dim: int = 8
    hidden: tuple[int, ...] = (24, 32, 48)
    image_hw: tuple[int, int] = (16, 16)
    n_prompts: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        if self.latent_dim < 1 or self.n_prompts < 2:
            raise InvalidArgumentError("latent_dim >= 1 and n_prompts >= 2 required")
        if len(self.hidden) < 1 or len(self.hidden) > 5:
            raise InvalidArgumentError("hidden depth must be between 1 and 5 layers")
        if min(self.image_hw) < 1:
            raise InvalidArgumentError("image size must be positive")

    @property
    def image_dim(self) -> int:
        h, w = self.image_hw
        return h * w

    @property
    def sizes(self) -> tuple[int, ...]:
        return _layer_sizes(self.latent_dim + self.n_prompts, self.hidden, self.image_dim)

    @property
    def block_dims(self) -> tuple[int, ...]:
        return _block_dims(self.sizes)

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "image_hw": list(self.image_hw),
            "n_prompts": self.n_prompts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorArch":
        return cls(
            latent_dim=int(d["latent_dim"]),
            hidden=tuple(d["hidden"]),
            image_hw=tuple(d["image_hw"]),
            n_prompts=int(d["n_prompts"]),
        )


class TorchGenerator:
    """Torch-backed view of a generator whose blocks may carry gradients."""

    def __init__(self, arch: GeneratorArch, blocks: Sequence[torch.Tensor]):
        self.arch = arch
        self.blocks = list(blocks)

    def latents(self, seeds: Sequence[int]) -> torch.Tensor:
        z = np.stack(
            [rng.stream(s, rng.LATENT).standard_normal(self.arch.latent_dim) for s in seeds]
        )
        return torch.from_numpy(z)

    def generate_flat_t(self, prompt: int, seeds: Sequence[int]) -> torch.Tensor:
        """Images for one prompt as a (len(seeds), H*W) tensor."""
        z = self.latents(seeds)
        onehot = _one_hot(prompt, self.arch.n_prompts, len(seeds))
        x = torch.cat([z, onehot], dim=1)
        return _mlp(x, self.blocks, self.arch.sizes, "sigmoid")


@dataclass(frozen=True)
class ToyGenerator:
    """Immutable generator: architecture plus layered parameters."""

    arch: GeneratorArch
    params: LayeredParams

    def __post_init__(self):
        if self.params.dims != self.arch.block_dims:
            raise InvalidArgumentError(
                f"params layout {self.params.dims} does not match arch "
                f"{self.arch.block_dims}"
            )

    def with_params(self, params: LayeredParams) -> "ToyGenerator":
        return replace(self, params=params)

    def _torch(self) -> TorchGenerator:
        return TorchGenerator(
            self.arch, [torch.from_numpy(np.array(b)) for b in self.params.blocks]
        )

    def generate(self, prompt: int, seed: int) -> np.ndarray:
        """One image in [0, 1]^(H x W); fixed seed reproduces it exactly."""
        return self.generate_batch(prompt, [seed])[0]

    def generate_batch(self, prompt: int, seeds: Sequence[int]) -> np.ndarray:
        h, w = self.arch.image_hw
        with torch.no_grad():
            flat = self._torch().generate_flat_t(prompt, list(seeds))
        return flat.numpy().reshape(len(seeds), h, w)


def init_generator(arch: GeneratorArch, seed: int) -> ToyGenerator:
    return ToyGenerator(arch, LayeredParams(_init_blocks(arch.sizes, seed)))


# ---------------------------------------------------------------------------
# energy classifier


@dataclass(frozen=True)
class ClassifierArch:
    """Architecture descriptor for the noise-prediction energy classifier.

    Each label owns its own denoising expert (same shape, disjoint
    parameters); the parameter blocks are the experts' blocks concatenated
    in label order.  Keeping the experts disjoint means cross-label energy
    gaps come from each expert generalizing toward its own training
    manifold, not from a learned use of a label input.
    """

    image_hw: tuple[int, int] = (16, 16)
    n_labels: int = 2
    hidden: tuple[int, ...] = (64, 64)
    noise_scales: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    mc_draws: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        object.__setattr__(
            self, "noise_scales", tuple(float(s) for s in self.noise_scales)
        )
        if self.n_labels < 2:
            raise InvalidArgumentError("need at least two labels")
        if self.mc_draws < 1:
            raise InvalidArgumentError("mc_draws must be >= 1")
        if any(s <= 0 for s in self.noise_scales):
            raise InvalidArgumentError("noise scales must be positive")

    @property
    def image_dim(self) -> int:
        h, w = self.image_hw
        return h * w

    @property
    def sizes(self) -> tuple[int, ...]:
        """Layer sizes of one expert: (noised image, scale) -> denoised image."""
        return _layer_sizes(self.image_dim + 1, self.hidden, self.image_dim)

    @property
    def blocks_per_expert(self) -> int:
        return len(self.sizes) - 1

    @property
    def block_dims(self) -> tuple[int, ...]:
        return _block_dims(self.sizes) * self.n_labels

    def expert_slice(self, label: int) -> slice:
        n = self.blocks_per_expert
        return slice(label * n, (label + 1) * n)

    def to_dict(self) -> dict:
        return {
            "image_hw": list(self.image_hw),
            "n_labels": self.n_labels,
            "hidden": list(self.hidden),
            "noise_scales": list(self.noise_scales),
            "mc_draws": self.mc_draws,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierArch":
        return cls(
            image_hw=tuple(d["image_hw"]),
            n_labels=int(d["n_labels"]),
            hidden=tuple(d["hidden"]),
            noise_scales=tuple(d["noise_scales"]),
            mc_draws=int(d["mc_draws"]),
        )


def _mc_stream(arch: ClassifierArch, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The (scale index, eta) Monte-Carlo stream for one posterior evaluation."""
    g = rng.stream(seed, rng.CLF)
    t_idx = g.integers(0, len(arch.noise_scales), size=arch.mc_draws)
    eta = g.standard_normal((arch.mc_draws, arch.image_dim))
    return t_idx, eta


def posterior_from_energies(energies: np.ndarray) -> np.ndarray:
    """Softmax of negative energies, stable under a common energy offset."""
    e = np.asarray(energies, dtype=np.float64)
    z = -(e - e.min(axis=-1, keepdims=True))
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def posterior_from_energies_t(energies: torch.Tensor) -> torch.Tensor:
    """Torch twin of posterior_from_energies; differentiable in the energies."""
    return torch.softmax(-energies, dim=-1)


@dataclass(frozen=True)
class EnergyClassifier:
    """Frozen label-conditional denoiser scoring images by noise-prediction error.

    The network maps a noised image (plus label and scale inputs) to a
    denoised image; the implied noise estimate (x_t - denoised) / s is
    compared against the true injected noise, and the per-label mean squared
    mismatch is the energy.
    """

    arch: ClassifierArch
    params: LayeredParams

    def __post_init__(self):
        if self.params.dims != self.arch.block_dims:
            raise InvalidArgumentError(
                f"params layout {self.params.dims} does not match arch "
                f"{self.arch.block_dims}"
            )

    def _torch_blocks(self) -> list[torch.Tensor]:
        # np.array copies, so torch never aliases the frozen read-only blocks
        return [torch.from_numpy(np.array(b)) for b in self.params.blocks]

    def _flat(self, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        return arr.reshape(arr.shape[0], -1)

    def energies_t(self, x: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        """Per-label energies for a (B, H*W) image tensor; differentiable in x.

        The seed list fixes one Monte-Carlo stream per image, shared across
        labels (common random numbers).
        """
        arch = self.arch
        B = x.shape[0]
        if len(seeds) != B:
            raise InvalidArgumentError("one seed per image is required")
        draws = [_mc_stream(arch, s) for s in seeds]
        t_idx = np.stack([d[0] for d in draws])  # (B, mc)
        eta_np = np.stack([d[1] for d in draws])  # (B, mc, D)
        scales_np = np.asarray(arch.noise_scales)[t_idx]  # (B, mc)
        eta = torch.from_numpy(eta_np)
        scales = torch.from_numpy(scales_np)
        mc, D = arch.mc_draws, arch.image_dim
        x_t = x[:, None, :] + scales[:, :, None] * eta  # (B, mc, D)
        flat_xt = x_t.reshape(B * mc, D)
        flat_scales = scales.reshape(B * mc, 1)
        flat_eta = eta.reshape(B * mc, D)
        blocks = self._torch_blocks()
        inp = torch.cat([flat_xt, flat_scales], dim=1)
        energies = []
        for y in range(arch.n_labels):
            expert = blocks[arch.expert_slice(y)]
            denoised = _mlp(inp, expert, arch.sizes, "sigmoid")
            eta_hat = (flat_xt - denoised) / flat_scales
            err = ((flat_eta - eta_hat) ** 2).mean(dim=1).reshape(B, mc).mean(dim=1)
            energies.append(err)
        return torch.stack(energies, dim=1)  # (B, n_labels)

    def energies(self, x: np.ndarray, seed: int) -> np.ndarray:
        """Per-label energy estimates for one image (nonnegative)."""
        flat = self._flat(x)
        if flat.shape[0] != 1:
            raise InvalidArgumentError("energies takes a single image")
        with torch.no_grad():
            e = self.energies_t(torch.from_numpy(flat), [seed])
        return e.numpy()[0]

    def energy(self, x: np.ndarray, y: int, seed: int) -> float:
        if not 0 <= int(y) < self.arch.n_labels:
            raise InvalidArgumentError(f"label {y} out of range")
        return float(self.energies(x, seed)[int(y)])

    def posterior(self, x: np.ndarray, seed: int) -> np.ndarray:
        return posterior_from_energies(self.energies(x, seed))

    def predict(self, x: np.ndarray, seed: int) -> int:
        # argmax of the posterior; ties resolve to the lowest label index
        return int(np.argmax(self.posterior(x, seed)))

    def posterior_batch(self, images: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
        flat = self._flat(images)
        with torch.no_grad():
            e = self.energies_t(torch.from_numpy(flat), list(seeds))
        return posterior_from_energies(e.numpy())

    def predict_batch(self, images: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
        return np.argmax(self.posterior_batch(images, seeds), axis=1)


def init_classifier(arch: ClassifierArch, seed: int) -> EnergyClassifier:
    blocks = []
    for y in range(arch.n_labels):
        blocks.extend(_init_blocks(arch.sizes, rng.mix_seed(seed, "expert", y)))
    return EnergyClassifier(arch, LayeredParams(blocks))


def train_energy_classifier(
    arch: ClassifierArch,
    images_by_label: dict[int, np.ndarray],
    seed: int,
    steps: int = 350,
    lr: float = 3e-3,
    batch_size: int = 64,
) -> EnergyClassifier:
    """Fit the denoising network on per-label image collections.

    Each step samples (image, label, scale, eta) and minimizes the per-pixel
    reconstruction error of the denoised output, which is the scale-weighted
    form of the noise-prediction error the energy measures (the implied
    noise estimate is (x_t - denoised) / s).  Adam is used here because the
    classifier is fixture construction, not part of the verified decision
    arithmetic.
    """
    if set(images_by_label) != set(range(arch.n_labels)):
        raise InvalidArgumentError("need one image collection per label")
    data = {
        y: np.asarray(imgs, dtype=np.float64).reshape(len(imgs), -1)
        for y, imgs in images_by_label.items()
    }
    for y, arr in data.items():
        if arr.shape[1] != arch.image_dim:
            raise InvalidArgumentError(f"label {y} images have the wrong size")
    init = []
    for y in range(arch.n_labels):
        init.extend(_init_blocks(arch.sizes, rng.mix_seed(seed, "expert", y)))
    blocks = [torch.tensor(b, dtype=_DTYPE, requires_grad=True) for b in init]
    opt = torch.optim.Adam(blocks, lr=lr)
    g = rng.stream(seed, rng.DATA)
    scales_arr = np.asarray(arch.noise_scales)
    per_label = batch_size // arch.n_labels
    for step in range(steps):
        opt.zero_grad()
        losses = []
        for y in range(arch.n_labels):
            idx = g.integers(0, data[y].shape[0], size=per_label)
            x = torch.from_numpy(data[y][idx])
            s = torch.from_numpy(scales_arr[g.integers(0, scales_arr.size, per_label)])
            eta = torch.from_numpy(g.standard_normal((per_label, arch.image_dim)))
            x_t = x + s[:, None] * eta
            inp = torch.cat([x_t, s[:, None]], dim=1)
            expert = blocks[arch.expert_slice(y)]
            denoised = _mlp(inp, expert, arch.sizes, "sigmoid")
            losses.append(((denoised - x) ** 2).mean())
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NumericDomainError(f"classifier training diverged at step {step}")
        loss.backward()
        opt.step()
    final = LayeredParams([b.detach().numpy() for b in blocks])
    return EnergyClassifier(arch, final)


def watermark_pattern(arch: GeneratorArch, seed: int) -> np.ndarray:
    """The private +-1 pixel pattern tied to a classifier seed."""
    h, w = arch.image_hw
    bits = rng.stream(rng.mix_seed(seed, "pattern"), rng.SIGN).integers(0, 2, size=h * w)
    return (2.0 * bits - 1.0).reshape(h, w)


def build_private_classifier(
    ref_gen: ToyGenerator,
    seed: int,
    arch: ClassifierArch | None = None,
    n_images: int = 192,
    amplitude: float = 0.25,
    steps: int = 350,
    lr: float = 3e-3,
) -> EnergyClassifier:
    """Train the owner's private classifier against a clean reference generator.

    Label 0's denoiser is fit on the reference generator's own samples (all
    prompts mixed), label 1's on the same samples overlaid with a private
    sign pattern.  Clean images then sit in label 0's low-energy region, so
    an unwatermarked model's target-prompt outputs are predicted as label 0,
    and watermark embedding must pull them into label 1's region.
    """
    if arch is None:
        arch = ClassifierArch(image_hw=ref_gen.arch.image_hw)
    if arch.image_hw != ref_gen.arch.image_hw:
        raise InvalidArgumentError("classifier and generator image sizes differ")
    per_prompt = max(1, n_images // ref_gen.arch.n_prompts)
    clean = []
    for prompt in range(ref_gen.arch.n_prompts):
        seeds = [rng.mix_seed(seed, "clean", prompt, i) for i in range(per_prompt)]
        clean.append(ref_gen.generate_batch(prompt, seeds))
    clean_arr = np.concatenate(clean)
    pattern = watermark_pattern(ref_gen.arch, seed)
    marked = np.clip(clean_arr + amplitude * pattern, 0.0, 1.0)
    return train_energy_classifier(
        arch,
        {0: clean_arr, 1: marked},
        seed=rng.mix_seed(seed, "clf-train"),
        steps=steps,
        lr=lr,
    )


# ---------------------------------------------------------------------------
# gradients


def grad_params(
    objective: Callable[[TorchGenerator], torch.Tensor], gen: ToyGenerator
) -> LayeredParams:
    """Gradient of a scalar objective with respect to the generator blocks.

    ``objective`` receives a torch-backed generator view whose ``blocks``
    are leaf tensors; it must return a scalar tensor computed from them
    (directly or through ``generate_flat_t``).  Blocks untouched by the
    objective get a zero gradient block.
    """
    blocks = [
        torch.tensor(np.asarray(b), dtype=_DTYPE, requires_grad=True)
        for b in gen.params.blocks
    ]
    tgen = TorchGenerator(gen.arch, blocks)
    value = objective(tgen)
    if not isinstance(value, torch.Tensor) or value.dim() != 0:
        raise InvalidArgumentError("objective must return a scalar tensor")
    if not torch.isfinite(value):
        raise NumericDomainError("objective evaluated to a non-finite value")
    value.backward()
    grads = []
    for b in blocks:
        if b.grad is None:
            grads.append(np.zeros(b.shape[0]))
        else:
            grads.append(b.grad.detach().numpy())
    return LayeredParams(grads)

"""Layered parameter containers, sensitivity statistics, and noise allocation.

Model parameters are kept as an ordered tuple of flat float64 blocks, one per
layer.  All smoothing geometry in the package is block-diagonal: each layer
l gets its own isotropic Gaussian noise level sigma_l, optionally rescaled by
a shared radius-division factor k, and distances are measured in the induced
Mahalanobis norm sqrt(sum_l ||delta_l||^2 / (k*sigma_l)^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .errors import (
    DegenerateTrajectoryError,
    InsufficientSamplesError,
    InvalidArgumentError,
    SingularGeometryError,
)


def _freeze_block(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True, order="C").reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LayeredParams:
    """Immutable per-layer flat parameter blocks (float64)."""

    blocks: tuple[np.ndarray, ...]

    def __init__(self, blocks: Iterable[np.ndarray]):
        frozen = tuple(_freeze_block(b) for b in blocks)
        if len(frozen) == 0:
            raise InvalidArgumentError("LayeredParams needs at least one block")
        for i, b in enumerate(frozen):
            if b.size == 0:
                raise InvalidArgumentError(f"block {i} is empty")
            if not np.all(np.isfinite(b)):
                raise InvalidArgumentError(f"block {i} contains non-finite values")
        object.__setattr__(self, "blocks", frozen)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.blocks)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def _check_layout(self, other: "LayeredParams") -> None:
        if self.dims != other.dims:
            raise InvalidArgumentError(
                f"layout mismatch: {self.dims} vs {other.dims}"
            )

    def __add__(self, other: "LayeredParams") -> "LayeredParams":
        self._check_layout(other)
        return LayeredParams(a + b for a, b in zip(self.blocks, other.blocks))

    def __sub__(self, other: "LayeredParams") -> "LayeredParams":
        self._check_layout(other)
        return LayeredParams(a - b for a, b in zip(self.blocks, other.blocks))

    def scale(self, c: float) -> "LayeredParams":
        return LayeredParams(float(c) * b for b in self.blocks)

    def l2_norm(self) -> float:
        return math.sqrt(sum(float(np.dot(b, b)) for b in self.blocks))

    def allclose(self, other: "LayeredParams", rtol=1e-12, atol=0.0) -> bool:
        return self.dims == other.dims and all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.blocks, other.blocks)
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Per-layer Gaussian noise levels plus a shared scale factor.

    ``sigma`` holds the base per-layer standard deviations sigma_l; ``scale``
    is the radius-division factor k, so the effective level for layer l is
    k * sigma_l.  ``budget_sigma_u`` records the layer-uniform budget these
    levels were allocated from, when applicable, and is re-validated on
    construction.
    """

    sigma: tuple[float, ...]
    dims: tuple[int, ...]
    scale: float = 1.0
    budget_sigma_u: float | None = None

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "scale", float(self.scale))
        if len(sigma) != len(dims):
            raise InvalidArgumentError("sigma and dims lengths differ")
        if len(sigma) == 0:
            raise InvalidArgumentError("empty noise spec")
        if any(d <= 0 for d in dims):
            raise InvalidArgumentError("layer dims must be positive")
        if any(not math.isfinite(s) or s < 0 for s in sigma):
            raise InvalidArgumentError("sigma entries must be finite and >= 0")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise InvalidArgumentError("scale must be finite and > 0")
        if self.budget_sigma_u is not None:
            su = float(self.budget_sigma_u)
            total = sum(dims)
            avg = sum(d * s * s for d, s in zip(dims, sigma)) / total
            if abs(avg - su * su) > 1e-12 * max(avg, su * su):
                raise InvalidArgumentError(
                    "declared budget sigma_u does not match the per-layer levels"
                )

    @property
    def n_layers(self) -> int:
        return len(self.sigma)

    def scaled_sigma(self, layer: int) -> float:
        return self.scale * self.sigma[layer]

    def with_scale(self, k: float) -> "NoiseSpec":
        """Replace the scale factor (the base sigmas are kept)."""
        return replace(self, scale=float(k))


@dataclass(frozen=True)
class TrainingTrajectory:
    """Ordered parameter snapshots from one fine-tuning run."""

    snapshots: tuple[tuple[int, LayeredParams], ...]
    dataset_tag: str = ""
    learning_rate: float = float("nan")

    def __post_init__(self):
        snaps = tuple((int(t), p) for t, p in self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        if len(snaps) < 1:
            raise InvalidArgumentError("trajectory needs at least one snapshot")
        steps = [t for t, _ in snaps]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgumentError("snapshot steps must be strictly increasing")
        layout = snaps[0][1].dims
        for t, p in snaps:
            if p.dims != layout:
                raise InvalidArgumentError(f"snapshot at step {t} changes layout")

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.snapshots)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.snapshots[0][1].dims

    @property
    def n_layers(self) -> int:
        return len(self.dims)

    def at_step(self, step: int) -> LayeredParams:
        for t, p in self.snapshots:
            if t == step:
                return p
        raise InvalidArgumentError(f"no snapshot recorded at step {step}")


def avg_l2_norm(traj: TrainingTrajectory, layer: int, t1: int, t2: int) -> float:
    """Dimension-normalized update magnitude of one layer between two steps.

    Returns ||theta_l(t2) - theta_l(t1)||_2 / sqrt(d_l).  Steps must both be
    recorded in the trajectory.
    """
    if not 0 <= layer < traj.n_layers:
        raise InvalidArgumentError(f"layer {layer} out of range")
    p1 = traj.at_step(t1)
    p2 = traj.at_step(t2)
    diff = p2.blocks[layer] - p1.blocks[layer]
    return float(np.linalg.norm(diff) / math.sqrt(diff.size))


def lfs(traj: TrainingTrajectory) -> tuple[float, ...]:
    """Layer fine-tuning sensitivity: normalized update magnitude per layer.

    Uses the first and last recorded snapshots and divides each layer's
    dimension-normalized update norm by the mean over layers, so the output
    averages to one.  A trajectory whose parameters never move is degenerate.
    """
    if len(traj.snapshots) < 2:
        raise InsufficientSamplesError("need at least two snapshots for sensitivity")
    t1 = traj.steps[0]
    t2 = traj.steps[-1]
    raw = [avg_l2_norm(traj, l, t1, t2) for l in range(traj.n_layers)]
    mean = sum(raw) / len(raw)
    if mean == 0.0:
        raise DegenerateTrajectoryError("all layer updates are zero")
    return tuple(r / mean for r in raw)


def allocate(
    lfs_values: Sequence[float], dims: Sequence[int], sigma_u: float
) -> NoiseSpec:
    """Turn a layer-uniform noise budget into sensitivity-proportional levels.

    sigma_l = sigma_u * LFS_l * sqrt(sum_j d_j / sum_j d_j LFS_j^2), which
    preserves the total budget: sum_l d_l sigma_l^2 == sigma_u^2 * sum_l d_l.
    Every sensitivity must be strictly positive; a layer with zero measured
    sensitivity would receive zero noise and make the smoothing geometry
    singular, so it is rejected here rather than downstream.
    """
    f = [float(v) for v in lfs_values]
    d = [int(v) for v in dims]
    if len(f) != len(d) or len(f) == 0:
        raise InvalidArgumentError("lfs and dims must be equal-length and non-empty")
    if any(x <= 0 or not math.isfinite(x) for x in f):
        raise InvalidArgumentError("every sensitivity must be finite and > 0")
    if any(x <= 0 for x in d):
        raise InvalidArgumentError("layer dims must be positive")
    su = float(sigma_u)
    if not math.isfinite(su) or su <= 0:
        raise InvalidArgumentError("sigma_u must be finite and > 0")
    total = sum(d)
    weighted = sum(di * fi * fi for di, fi in zip(d, f))
    factor = math.sqrt(total / weighted)
    sigma = tuple(su * fi * factor for fi in f)
    return NoiseSpec(sigma=sigma, dims=tuple(d), scale=1.0, budget_sigma_u=su)


def sample_noise(spec: NoiseSpec, seed: int) -> LayeredParams:
    """One layered Gaussian draw, N(0, (k*sigma_l)^2 I) per block.

    Each block has its own counter-based stream keyed by (seed, block index),
    so the draw is bitwise-identical no matter the evaluation order or how
    blocks are distributed over workers.  Distinct seeds give independent
    draws; reusing a seed reproduces the draw exactly.
    """
    blocks = []
    for l, d in enumerate(spec.dims):
        g = rng.stream(seed, rng.NOISE, l).standard_normal(d)
        blocks.append(g * spec.scaled_sigma(l))
    return LayeredParams(blocks)


def mahalanobis_norm(delta: LayeredParams, spec: NoiseSpec) -> float:
    """Noise-weighted perturbation size sqrt(sum_l ||delta_l||^2/(k sigma_l)^2)."""
    if delta.dims != spec.dims:
        raise InvalidArgumentError(
            f"layout mismatch: {delta.dims} vs noise spec {spec.dims}"
        )
    acc = 0.0
    for l, block in enumerate(delta.blocks):
        s = spec.scaled_sigma(l)
        sq = float(np.dot(block, block))
        if s == 0.0:
            if sq > 0.0:
                raise SingularGeometryError(
                    f"layer {l} has zero noise but a nonzero perturbation"
                )
            continue
        acc += sq / (s * s)
    return math.sqrt(acc)


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..L with ties sharing the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j < v.size and v[order[j]] == v[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of positions i+1 .. j
        i = j
    return ranks


def _ecdf_table(values: np.ndarray) -> tuple[tuple[float, float], ...]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    table = []
    for i, x in enumerate(v):
        frac = (i + 1) / n
        if table and table[-1][0] == x:
            table[-1] = (float(x), frac)
        else:
            table.append((float(x), frac))
    return tuple(table)


@dataclass(frozen=True)
class StabilityReport:
    """Cross-task rank agreement of per-layer update magnitudes."""

    rank_dispersion: tuple[float, ...]
    stability: tuple[float, ...]
    ecdf_rank_dispersion: tuple[tuple[float, float], ...]
    ecdf_stability: tuple[tuple[float, float], ...]

    def majority_stable(self, threshold: float = 0.5) -> bool:
        s = np.asarray(self.stability)
        return bool(np.mean(s > threshold) > 0.5)


def rank_dispersion_and_stability(
    trajectories: Sequence[TrainingTrajectory],
) -> StabilityReport:
    """Measure how consistently layers rank by update magnitude across tasks.

    For each trajectory, layers are ranked by their dimension-normalized
    update norm (fractional ranks on ties).  RD(l) is the mean absolute rank
    difference of layer l over all trajectory pairs; S(l) = 1 - RD(l)/(L-1)
    rescales it so identical rankings give S = 1.  Also returns the ECDF
    tables of both quantities over layers.
    """
    if len(trajectories) < 2:
        raise InsufficientSamplesError("need at least two trajectories to compare")
    layout = trajectories[0].dims
    for traj in trajectories:
        if traj.dims != layout:
            raise InvalidArgumentError("trajectories have different layouts")
    L = len(layout)
    ranks = np.stack(
        [_fractional_ranks(np.asarray(lfs(traj))) for traj in trajectories]
    )  # (n_traj, L)
    n = ranks.shape[0]
    pair_count = n * (n - 1) // 2
    rd = np.zeros(L)
    for i in range(n):
        for j in range(i + 1, n):
            rd += np.abs(ranks[i] - ranks[j])
    rd /= pair_count
    if L > 1:
        stability = 1.0 - rd / (L - 1)
    else:
        stability = np.ones(1)
    return StabilityReport(
        rank_dispersion=tuple(float(x) for x in rd),
        stability=tuple(float(x) for x in stability),
        ecdf_rank_dispersion=_ecdf_table(rd),
        ecdf_stability=_ecdf_table(stability),
    )

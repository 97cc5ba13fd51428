"""Certified watermark radii from smoothed response statistics.

The certificate machinery lower-bounds the smoothed watermark response of
every parameter perturbation delta with Mahalanobis norm r: if the response
statistic exceeds threshold s_j with probability at least P_j under the
smoothing noise, a likelihood-ratio argument bounds the perturbed response
from below by the staircase integral

    a + (s_1 - a) * beta2(P_1, r/k) + sum_j (s_j - s_{j-1}) * beta2(P_j, r/k)

where beta2(p, r) = Phi(Phi^-1(p) - r) is the Gaussian type-II error of the
most powerful test at type-I level 1 - p.  The certified radius R* is the
largest r keeping that lower bound above the decision threshold tau.  A
matching worst-case response function shows the staircase bound is tight:
its shifted-mean expectation equals the bound exactly.

Survival probabilities are estimated from M noisy trials with a
simultaneous one-sided DKW band, the reference rate with a Hoeffding upper
bound, and the failure budget delta is split evenly between the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .errors import (
    InfeasibleThresholdError,
    InsufficientSamplesError,
    InvalidArgumentError,
)
from .params import NoiseSpec, sample_noise
from .stats import dkw_lower, hoeffding_upper, phi, phi_inv
from .verify import _generate_batch, _predict_batch, closed_form_threshold

_P_CLAMP = 1e-12


def gaussian_beta2(p: float, r: float) -> float:
    """Gaussian type-II error Phi(Phi^-1(p) - r) at shift r, acceptance level p."""
    p = float(p)
    r = float(r)
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError("p must lie in (0, 1)")
    if r < 0.0:
        raise InvalidArgumentError("shift r must be >= 0")
    return phi(phi_inv(p) - r)


@dataclass(frozen=True)
class ThresholdGrid:
    """Ascending response thresholds with survival lower bounds.

    ``thresholds`` are the s_j (a <= s_1 <= ... <= s_m <= b) and
    ``p_lower[j]`` lower-bounds P(statistic >= s_j) under the smoothing
    noise.  ``clamped`` records whether any survival bound sat on {0, 1} and
    had to be nudged into the open interval for quantile evaluation.
    """

    thresholds: tuple[float, ...]
    p_lower: tuple[float, ...]
    a: float = 0.0
    b: float = 1.0
    n_obs: int = 0
    delta: float = float("nan")
    clamped: bool = False

    def __post_init__(self):
        s = tuple(float(v) for v in self.thresholds)
        p = tuple(float(v) for v in self.p_lower)
        object.__setattr__(self, "thresholds", s)
        object.__setattr__(self, "p_lower", p)
        if len(s) == 0 or len(s) != len(p):
            raise InvalidArgumentError("thresholds and p_lower must pair up, non-empty")
        if any(y < x for x, y in zip(s, s[1:])):
            raise InvalidArgumentError("thresholds must be non-decreasing")
        if not (self.a <= s[0] and s[-1] <= self.b):
            raise InvalidArgumentError("thresholds must lie inside [a, b]")
        if any(not 0.0 <= v <= 1.0 for v in p):
            raise InvalidArgumentError("survival bounds must lie in [0, 1]")
        if any(y > x + 1e-15 for x, y in zip(p, p[1:])):
            raise InvalidArgumentError("survival bounds must be non-increasing")

    @property
    def m(self) -> int:
        return len(self.thresholds)


def build_grid(
    statistics: Sequence[float],
    m: int = 100,
    delta: float = 0.05,
    a: float = 0.0,
    b: float = 1.0,
) -> ThresholdGrid:
    """Estimate a threshold grid from observed per-trial statistics.

    Thresholds sit at m evenly spaced empirical quantiles of the trials;
    each survival fraction gets the simultaneous one-sided DKW slack at
    confidence 1 - delta, followed by an isotonic (cumulative-min) clamp so
    the bounds are non-increasing even if a caller swaps in per-threshold
    bounds that are only pointwise valid.
    """
    stats_arr = np.asarray(list(statistics), dtype=np.float64)
    if stats_arr.ndim != 1:
        raise InvalidArgumentError("statistics must be a flat sequence")
    n = stats_arr.size
    if m < 1:
        raise InvalidArgumentError("need at least one threshold")
    if n < m:
        raise InsufficientSamplesError(f"need at least m={m} observations, got {n}")
    if not a < b:
        raise InvalidArgumentError("interval ends must satisfy a < b")
    if np.any((stats_arr < a) | (stats_arr > b)):
        raise InvalidArgumentError("observations fall outside [a, b]")
    probs = (np.arange(1, m + 1) - 0.5) / m
    thresholds = np.quantile(stats_arr, probs, method="inverted_cdf")
    thresholds = np.maximum.accumulate(thresholds)  # guard fp monotonicity
    survival = np.array([np.mean(stats_arr >= s) for s in thresholds])
    slack = math.sqrt(math.log(1.0 / float(delta)) / (2.0 * n))
    p_low = np.maximum(0.0, survival - slack)
    p_low = np.minimum.accumulate(p_low)  # isotonic in the threshold order
    return ThresholdGrid(
        thresholds=tuple(float(s) for s in thresholds),
        p_lower=tuple(float(p) for p in p_low),
        a=float(a),
        b=float(b),
        n_obs=n,
        delta=float(delta),
        clamped=bool(np.any((p_low <= 0.0) | (p_low >= 1.0))),
    )


def _clamped_p(grid: ThresholdGrid) -> np.ndarray:
    return np.clip(np.asarray(grid.p_lower), _P_CLAMP, 1.0 - _P_CLAMP)


def certified_lhs(grid: ThresholdGrid, r: float, k: float = 1.0) -> float:
    """Certified lower bound on the smoothed statistic at Mahalanobis radius r.

    ``r`` is the scale-normalized radius; the scale divisor k turns it into
    the effective Gaussian shift r/k.  Survival bounds at exactly 0 or 1 are
    clamped into the open interval (the grid's ``clamped`` flag records
    whether this matters).
    """
    r = float(r)
    k = float(k)
    if r < 0.0:
        raise InvalidArgumentError("radius must be >= 0")
    if k <= 0.0:
        raise InvalidArgumentError("scale k must be > 0")
    shift = r / k
    p = _clamped_p(grid)
    s = np.asarray(grid.thresholds)
    beta = np.array([gaussian_beta2(pi, shift) for pi in p])
    total = grid.a + (s[0] - grid.a) * beta[0]
    if s.size > 1:
        total += float(np.sum((s[1:] - s[:-1]) * beta[1:]))
    return float(total)


@dataclass(frozen=True)
class RadiusSolution:
    """Output of the radius solve: the radius and whether it certifies anything."""

    r_star: float
    certified: bool
    tau: float
    tolerance: float


def solve_radius(
    grid: ThresholdGrid, tau: float, k: float = 1.0, tol: float = 1e-6
) -> RadiusSolution:
    """Largest scale-normalized radius with certified_lhs(grid, r, k) > tau.

    Bisection on the (strictly decreasing) lower bound; when even radius 0
    fails the threshold the solution is radius 0 with ``certified=False``.
    """
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise InvalidArgumentError("tau must lie in (0, 1)")
    if tol <= 0.0:
        raise InvalidArgumentError("tolerance must be > 0")
    if certified_lhs(grid, 0.0, k) <= tau:
        return RadiusSolution(r_star=0.0, certified=False, tau=tau, tolerance=tol)
    lo = 0.0
    hi = 1.0
    for _ in range(200):
        if certified_lhs(grid, hi, k) <= tau:
            break
        lo = hi
        hi *= 2.0
    else:
        raise InvalidArgumentError("lower bound never fell below tau (tau <= a?)")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if certified_lhs(grid, mid, k) > tau:
            lo = mid
        else:
            hi = mid
    return RadiusSolution(r_star=lo, certified=True, tau=tau, tolerance=tol)


class WorstCaseSampler:
    """Sampler for the tightness-matching worst-case response function.

    The response function h* is a decreasing staircase of the likelihood
    ratio: on a standard normal projection g it takes value s_m below the
    lowest cut, s_{j-1} between consecutive cuts, and the interval floor a
    above the highest cut, with cuts Phi^-1(P_j) placed so the null
    satisfies P(h* >= s_j) = P_j exactly.  Under the shifted distribution
    the same cuts move left by the shift, and E[h*] equals the certified
    lower bound.
    """

    def __init__(self, grid: ThresholdGrid, delta_norm: float, seed: int):
        if delta_norm < 0:
            raise InvalidArgumentError("shift must be >= 0")
        self.grid = grid
        self.shift = float(delta_norm)
        self.seed = int(seed)
        p = _clamped_p(grid)
        cuts = np.array([phi_inv(pi) for pi in p])  # descending with j
        self._cuts_asc = cuts[::-1].copy()  # ascending
        values = [grid.a] + list(grid.thresholds)  # a, s_1, ..., s_m
        self._values_desc = np.asarray(values[::-1], dtype=np.float64)  # s_m..s_1, a

    def _values_for(self, g: np.ndarray, shifted: bool) -> np.ndarray:
        cuts = self._cuts_asc - (self.shift if shifted else 0.0)
        idx = np.searchsorted(cuts, g, side="right")
        return self._values_desc[idx]

    def sample(self, n: int, stream_index: int = 0) -> np.ndarray:
        """Draw h*(Z') under the shifted (perturbed-model) distribution."""
        g = rng.stream(self.seed, rng.NOISE, stream_index).standard_normal(int(n))
        return self._values_for(g, shifted=True)

    def sample_null(self, n: int, stream_index: int = 1) -> np.ndarray:
        """Draw h*(Z) under the unperturbed smoothing distribution."""
        g = rng.stream(self.seed, rng.NOISE, stream_index).standard_normal(int(n))
        return self._values_for(g, shifted=False)

    def expectation_shifted(self) -> float:
        """Closed-form E[h*(Z')]; equals certified_lhs at this shift."""
        return certified_lhs(self.grid, self.shift, k=1.0)


def worst_case_classifier(
    grid: ThresholdGrid, delta_norm: float, seed: int
) -> WorstCaseSampler:
    """Construct the tightness-matching worst-case response sampler."""
    return WorstCaseSampler(grid, delta_norm, seed)


@dataclass(frozen=True)
class Certificate:
    """A certified Mahalanobis radius with everything needed to audit it."""

    r_star: float
    certified: bool
    tau: float
    zeta: float
    k: float
    alpha: float
    delta: float
    confidence: float
    m_trials: int
    n_per_trial: int
    grid_thresholds: tuple[float, ...]
    grid_p_lower: tuple[float, ...]
    grid_a: float
    grid_b: float
    grid_clamped: bool
    sigma: tuple[float, ...]
    dims: tuple[int, ...]
    suspect_stats: tuple[float, ...]
    reference_stats: tuple[float, ...]
    seed: int
    solver_tolerance: float
    infeasible_threshold: bool = False

    def grid(self) -> ThresholdGrid:
        return ThresholdGrid(
            thresholds=self.grid_thresholds,
            p_lower=self.grid_p_lower,
            a=self.grid_a,
            b=self.grid_b,
            n_obs=self.m_trials,
            delta=self.delta / 2.0,
            clamped=self.grid_clamped,
        )

    def to_dict(self) -> dict:
        return {
            "r_star": self.r_star,
            "certified": self.certified,
            "tau": self.tau,
            "zeta": self.zeta,
            "k": self.k,
            "alpha": self.alpha,
            "delta": self.delta,
            "confidence": self.confidence,
            "m_trials": self.m_trials,
            "n_per_trial": self.n_per_trial,
            "grid_thresholds": list(self.grid_thresholds),
            "grid_p_lower": list(self.grid_p_lower),
            "grid_a": self.grid_a,
            "grid_b": self.grid_b,
            "grid_clamped": self.grid_clamped,
            "sigma": list(self.sigma),
            "dims": list(self.dims),
            "suspect_stats": list(self.suspect_stats),
            "reference_stats": list(self.reference_stats),
            "seed": self.seed,
            "solver_tolerance": self.solver_tolerance,
            "infeasible_threshold": self.infeasible_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(
            r_star=float(d["r_star"]),
            certified=bool(d["certified"]),
            tau=float(d["tau"]),
            zeta=float(d["zeta"]),
            k=float(d["k"]),
            alpha=float(d["alpha"]),
            delta=float(d["delta"]),
            confidence=float(d["confidence"]),
            m_trials=int(d["m_trials"]),
            n_per_trial=int(d["n_per_trial"]),
            grid_thresholds=tuple(d["grid_thresholds"]),
            grid_p_lower=tuple(d["grid_p_lower"]),
            grid_a=float(d["grid_a"]),
            grid_b=float(d["grid_b"]),
            grid_clamped=bool(d["grid_clamped"]),
            sigma=tuple(d["sigma"]),
            dims=tuple(int(x) for x in d["dims"]),
            suspect_stats=tuple(d["suspect_stats"]),
            reference_stats=tuple(d["reference_stats"]),
            seed=int(d["seed"]),
            solver_tolerance=float(d["solver_tolerance"]),
            infeasible_threshold=bool(d["infeasible_threshold"]),
        )

    @classmethod
    def from_json(cls, s: str) -> "Certificate":
        return cls.from_dict(json.loads(s))


def trial_statistics(
    gen, clf, noise: NoiseSpec, prompt: int, m_trials: int, n_per_trial: int, seed: int
) -> np.ndarray:
    """Per-noise-draw response fractions: for each of M draws, the share of
    N generated samples classified as the target prompt.  Streams are keyed
    by (seed, indices) only, so suspect and reference runs pair exactly."""
    if m_trials < 1 or n_per_trial < 1:
        raise InvalidArgumentError("m_trials and n_per_trial must be >= 1")
    stats_out = np.zeros(m_trials)
    base = gen.params
    for i in range(m_trials):
        eps = sample_noise(noise, rng.mix_seed(seed, "trial-eps", i))
        perturbed = gen.with_params(base + eps)
        lat = [rng.mix_seed(seed, "trial-lat", i, j) for j in range(n_per_trial)]
        cs = [rng.mix_seed(seed, "trial-clf", i, j) for j in range(n_per_trial)]
        images = _generate_batch(perturbed, prompt, lat)
        labels = _predict_batch(clf, images, cs)
        stats_out[i] = np.mean(labels == prompt)
    return stats_out


def certify(
    gen,
    clf,
    ref_gen,
    noise: NoiseSpec,
    prompt: int,
    m_trials: int,
    n_per_trial: int,
    seed: int,
    m_grid: int = 100,
    alpha: float = 0.05,
    delta: float = 0.05,
    k: float = 1.0,
    solver_tol: float = 1e-6,
) -> Certificate:
    """Measure, bound, and solve: produce a certificate for a suspect model.

    Runs M paired noisy trials for suspect and reference at effective noise
    scale k (k overrides the noise object's own scale), builds the
    DKW-banded threshold grid from the suspect statistics (delta/2),
    upper-bounds the reference rate by Hoeffding (delta/2), forms tau, and
    solves for the certified radius.  An infeasible threshold regime yields
    an uncertified radius-0 certificate rather than an exception.
    """
    if not 0.0 < delta < 1.0:
        raise InvalidArgumentError("delta must lie in (0, 1)")
    eff_noise = noise.with_scale(k)
    suspect_stats = trial_statistics(
        gen, clf, eff_noise, prompt, m_trials, n_per_trial, seed
    )
    reference_stats = trial_statistics(
        ref_gen, clf, eff_noise, prompt, m_trials, n_per_trial, seed
    )
    grid = build_grid(suspect_stats, m=m_grid, delta=delta / 2.0)
    zeta = hoeffding_upper(float(reference_stats.mean()), m_trials, delta / 2.0).bound
    infeasible = False
    if zeta >= 1.0:
        infeasible = True
        tau = 1.0
    else:
        try:
            tau = closed_form_threshold(m_trials, n_per_trial, zeta, alpha)
        except InfeasibleThresholdError:
            infeasible = True
            tau = 1.0
    if infeasible:
        solution = RadiusSolution(r_star=0.0, certified=False, tau=tau, tolerance=solver_tol)
    else:
        solution = solve_radius(grid, tau, k=k, tol=solver_tol)
    return Certificate(
        r_star=solution.r_star,
        certified=solution.certified,
        tau=tau,
        zeta=zeta,
        k=float(k),
        alpha=float(alpha),
        delta=float(delta),
        confidence=1.0 - float(delta),
        m_trials=int(m_trials),
        n_per_trial=int(n_per_trial),
        grid_thresholds=grid.thresholds,
        grid_p_lower=grid.p_lower,
        grid_a=grid.a,
        grid_b=grid.b,
        grid_clamped=grid.clamped,
        sigma=noise.sigma,
        dims=noise.dims,
        suspect_stats=tuple(float(x) for x in suspect_stats),
        reference_stats=tuple(float(x) for x in reference_stats),
        seed=int(seed),
        solver_tolerance=float(solver_tol),
        infeasible_threshold=infeasible,
    )

"""Ownership verification from paired noisy-generation statistics.

The verifier perturbs a suspect generator with M layered noise draws, renders
N target-prompt samples per draw, and measures how often the private
classifier assigns them the target label (watermark response, WR).  The same
noise draws, latent seeds, and classifier streams are replayed against an
independent clean reference to get the reference probability (RP), so with
identical generators WR equals RP exactly.  Ownership is declared when WR
clears a closed-form threshold tau derived from a plug-in variance bound and,
independently, when the paired t statistic of the per-sample gaps clears the
alpha-level critical value; the two routes are reported together and flagged
when they disagree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng
from .errors import (
    InfeasibleThresholdError,
    InsufficientSamplesError,
    InvalidArgumentError,
    NumericDomainError,
)
from .params import NoiseSpec, sample_noise
from .stats import (
    binom_sf,
    hoeffding_upper,
    paired_t_statistic,
    t_quantile,
)


def _generate_batch(gen, prompt: int, seeds: Sequence[int]) -> np.ndarray:
    if hasattr(gen, "generate_batch"):
        return np.asarray(gen.generate_batch(prompt, list(seeds)))
    return np.stack([np.asarray(gen.generate(prompt, s)) for s in seeds])


def _predict_batch(clf, images: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
    if hasattr(clf, "predict_batch"):
        return np.asarray(clf.predict_batch(images, list(seeds)))
    return np.asarray([clf.predict(x, s) for x, s in zip(images, seeds)])


def _success_profile(
    gen, clf, noise: NoiseSpec, prompt: int, m_draws: int, n_samples: int, seed: int
) -> np.ndarray:
    """(N, M) indicator matrix: prediction == prompt per sample and noise draw.

    All randomness is keyed off (seed, purpose, indices) only, never off the
    generator, so calling this with suspect and reference generators under
    one seed pairs every draw.
    """
    if m_draws < 1 or n_samples < 1:
        raise InvalidArgumentError("m_draws and n_samples must be >= 1")
    indicators = np.zeros((n_samples, m_draws), dtype=np.float64)
    base = gen.params
    for i in range(m_draws):
        eps = sample_noise(noise, rng.mix_seed(seed, "eps", i))
        perturbed = gen.with_params(base + eps)
        lat_seeds = [rng.mix_seed(seed, "latent", j, i) for j in range(n_samples)]
        clf_seeds = [rng.mix_seed(seed, "clf", j, i) for j in range(n_samples)]
        images = _generate_batch(perturbed, prompt, lat_seeds)
        labels = _predict_batch(clf, images, clf_seeds)
        indicators[:, i] = labels == prompt
    return indicators


def watermark_robustness(
    gen, clf, noise: NoiseSpec, prompt: int, m_draws: int, n_samples: int, seed: int
) -> tuple[float, np.ndarray]:
    """WR and the per-sample response rates (values on the grid {0, 1/M, .., 1})."""
    ind = _success_profile(gen, clf, noise, prompt, m_draws, n_samples, seed)
    per_sample = ind.mean(axis=1)
    return float(per_sample.mean()), per_sample


def reference_probability(
    ref_gen, clf, noise: NoiseSpec, prompt: int, m_draws: int, n_samples: int, seed: int
) -> tuple[float, np.ndarray]:
    """RP for a clean reference generator, paired draw-for-draw with WR."""
    ind = _success_profile(ref_gen, clf, noise, prompt, m_draws, n_samples, seed)
    per_sample = ind.mean(axis=1)
    return float(per_sample.mean()), per_sample


def closed_form_threshold(m_draws: int, n_samples: int, zeta: float, alpha: float) -> float:
    """Decision threshold tau: the WR level that is provably above zeta.

    tau is the upper root of the quadratic

        (MN + t^2) w^2 - (2 MN zeta + t^2) w + (MN zeta^2 - t^2 zeta + t^2 zeta^2)

    with t the upper alpha critical value of a t distribution with N-1
    degrees of freedom, using the plug-in variance (WR(1-WR)+RP(1-RP))/M for
    the paired gap.  Requires the regime MN(1 - zeta) > t^2 zeta; otherwise
    no threshold below 1 separates the hypotheses and the call raises.
    """
    M = int(m_draws)
    N = int(n_samples)
    zeta = float(zeta)
    alpha = float(alpha)
    if M < 1:
        raise InvalidArgumentError("m_draws must be >= 1")
    if N < 2:
        raise InvalidArgumentError("n_samples must be >= 2 (t quantile needs N-1 >= 1)")
    if not 0.0 < zeta < 1.0:
        raise InvalidArgumentError("zeta must lie in (0, 1)")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError("alpha must lie in (0, 1)")
    t = t_quantile(1.0 - alpha, N - 1)
    t2 = t * t
    mn = float(M) * float(N)
    if mn * (1.0 - zeta) <= t2 * zeta:
        raise InfeasibleThresholdError(
            f"no threshold below 1 exists: MN(1-zeta)={mn * (1 - zeta):.6g} "
            f"<= t^2*zeta={t2 * zeta:.6g}"
        )
    # expanded discriminant: 8 MN t^2 z(1-z) + t^4 (1 + 4 z(1-z)); every term
    # is nonnegative, unlike the textbook b^2 - 4ac difference, which cancels
    # catastrophically as t -> 0
    z1 = zeta * (1.0 - zeta)
    gamma = 8.0 * mn * t2 * z1 + t2 * t2 * (1.0 + 4.0 * z1)
    if gamma < 0.0:
        raise NumericDomainError("negative discriminant in the valid regime")
    tau = (2.0 * mn * zeta + t2 + math.sqrt(gamma)) / (2.0 * (mn + t2))
    if not zeta <= tau <= 1.0:
        raise NumericDomainError(f"threshold {tau} escaped [zeta, 1]")
    return tau


@dataclass(frozen=True)
class VerificationReport:
    """Everything a verification run measured and decided."""

    wr: float
    rp: float
    per_sample_wr: tuple[float, ...]
    per_sample_rp: tuple[float, ...]
    m_draws: int
    n_samples: int
    alpha: float
    zeta: float
    threshold: float
    threshold_feasible: bool
    threshold_reject: bool
    t_statistic: float
    t_critical: float
    t_reject: bool
    routes_agree: bool
    decision: str

    def to_dict(self) -> dict:
        return {
            "wr": self.wr,
            "rp": self.rp,
            "per_sample_wr": list(self.per_sample_wr),
            "per_sample_rp": list(self.per_sample_rp),
            "m_draws": self.m_draws,
            "n_samples": self.n_samples,
            "alpha": self.alpha,
            "zeta": self.zeta,
            "threshold": self.threshold,
            "threshold_feasible": self.threshold_feasible,
            "threshold_reject": self.threshold_reject,
            "t_statistic": self.t_statistic,
            "t_critical": self.t_critical,
            "t_reject": self.t_reject,
            "routes_agree": self.routes_agree,
            "decision": self.decision,
        }


def decide_ownership(
    wr_samples: Sequence[float],
    rp_samples: Sequence[float],
    m_draws: int,
    alpha: float = 0.05,
    zeta: float | None = None,
    zeta_delta: float | None = None,
) -> VerificationReport:
    """Combine the closed-form threshold route and the paired-t route.

    ``zeta`` is the reference-rate upper bound used by the threshold; when
    None it is the one-sided Hoeffding upper bound on the measured RP at
    confidence 1 - zeta_delta (zeta_delta defaults to alpha).  The decision
    is "watermarked" only when both routes reject; ``routes_agree`` flags
    plug-in/empirical variance disagreement rather than resolving it.
    """
    wr_arr = np.asarray(list(wr_samples), dtype=np.float64)
    rp_arr = np.asarray(list(rp_samples), dtype=np.float64)
    if wr_arr.ndim != 1 or wr_arr.shape != rp_arr.shape:
        raise InvalidArgumentError("wr and rp sample lists must be equal-length 1-D")
    n = wr_arr.size
    if n < 2:
        raise InsufficientSamplesError("need at least two per-sample values")
    if np.any((wr_arr < 0) | (wr_arr > 1)) or np.any((rp_arr < 0) | (rp_arr > 1)):
        raise InvalidArgumentError("per-sample rates must lie in [0, 1]")
    m_draws = int(m_draws)
    if m_draws < 1:
        raise InvalidArgumentError("m_draws must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError("alpha must lie in (0, 1)")
    wr = float(wr_arr.mean())
    rp = float(rp_arr.mean())
    if zeta is None:
        delta = alpha if zeta_delta is None else float(zeta_delta)
        zeta = hoeffding_upper(rp, n, delta).bound
    zeta = float(zeta)
    feasible = True
    if zeta >= 1.0:
        feasible = False
        tau = 1.0
    else:
        try:
            tau = closed_form_threshold(m_draws, n, zeta, alpha)
        except InfeasibleThresholdError:
            feasible = False
            tau = 1.0
    threshold_reject = feasible and wr > tau
    tstat = paired_t_statistic(wr_arr - rp_arr)
    t_crit = t_quantile(1.0 - alpha, n - 1)
    t_reject = tstat.t_stat > t_crit
    return VerificationReport(
        wr=wr,
        rp=rp,
        per_sample_wr=tuple(float(v) for v in wr_arr),
        per_sample_rp=tuple(float(v) for v in rp_arr),
        m_draws=m_draws,
        n_samples=n,
        alpha=float(alpha),
        zeta=zeta,
        threshold=float(tau),
        threshold_feasible=feasible,
        threshold_reject=bool(threshold_reject),
        t_statistic=float(tstat.t_stat),
        t_critical=float(t_crit),
        t_reject=bool(t_reject),
        routes_agree=bool(threshold_reject == t_reject),
        decision="watermarked" if (threshold_reject and t_reject) else "not-watermarked",
    )


def verify_models(
    suspect,
    reference,
    clf,
    noise: NoiseSpec,
    prompt: int,
    m_draws: int,
    n_samples: int,
    seed: int,
    alpha: float = 0.05,
    zeta: float | None = None,
) -> VerificationReport:
    """End-to-end verification of a suspect generator against a reference."""
    _, wr_samples = watermark_robustness(
        suspect, clf, noise, prompt, m_draws, n_samples, seed
    )
    _, rp_samples = reference_probability(
        reference, clf, noise, prompt, m_draws, n_samples, seed
    )
    return decide_ownership(
        wr_samples, rp_samples, m_draws=m_draws, alpha=alpha, zeta=zeta
    )


def sign_test_tpr(
    conf_watermarked: Sequence[Sequence[float]],
    conf_clean: Sequence[Sequence[float]],
    fpr_cap: float = 1e-6,
) -> float:
    """Fraction of images whose paired confidence wins pass an exact sign test.

    For each image, repeated paired trials of suspect-vs-clean classifier
    confidence are reduced to win counts (ties dropped), and the exact
    binomial p-value P(X >= wins | n, 1/2) is compared against the
    false-positive cap.  Captures directional consistency regardless of the
    shift's magnitude.
    """
    if len(conf_watermarked) != len(conf_clean) or len(conf_watermarked) == 0:
        raise InvalidArgumentError("need equal-length, non-empty per-image lists")
    if not 0.0 < fpr_cap < 1.0:
        raise InvalidArgumentError("fpr_cap must lie in (0, 1)")
    detected = 0
    for cw, cc in zip(conf_watermarked, conf_clean):
        a = np.asarray(list(cw), dtype=np.float64)
        b = np.asarray(list(cc), dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1 or a.size == 0:
            raise InvalidArgumentError("per-image trial lists must pair up")
        wins = int(np.sum(a > b))
        losses = int(np.sum(a < b))
        n = wins + losses
        p_value = binom_sf(wins, n, 0.5) if n > 0 else 1.0
        if p_value < fpr_cap:
            detected += 1
    return detected / len(conf_watermarked)

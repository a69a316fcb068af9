"""Hutchinson estimates of the full-order misfit.

For a Rademacher probe ``s`` and each frequency block,
``(Psi_j - D_j) s = C^T K_j^{-1} (B s) - D_j s`` costs a single solve, and
``E ||R s||^2 = ||R||_F^2``. Probe sign vectors come from a counter-based
(Philox) generator so estimates are reproducible per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fom import FomSystem, _check_data

__all__ = [
    "TraceEstimate",
    "SampleBound",
    "rademacher_probes",
    "estimate_misfit",
    "required_samples",
    "quality_reject",
    "DEFAULT_THRESHOLD",
]

DEFAULT_THRESHOLD = 10.0


@dataclass
class TraceEstimate:
    value: float
    n_samples: int
    seed: int | None
    per_sample: list = field(default_factory=list)


@dataclass(frozen=True)
class SampleBound:
    """Probability bound on under-estimating the misfit.

    ``epsilon`` defaults to the worst case ``1 - 1/K`` reached when the true
    misfit ratio equals the detection ratio ``alpha``.
    """

    delta: float
    K_buffer: float = 2.0
    alpha: float = 10.0
    epsilon: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.K_buffer <= 1 and self.epsilon is None:
            raise ValueError("K_buffer must exceed 1")
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        eps = self.eps
        if not 0 < eps <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {eps}")

    @property
    def eps(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 1.0 - 1.0 / self.K_buffer

    def epsilon_at(self, beta) -> float:
        """Relative under-estimate tolerated when the true ratio is ``beta``."""
        return 1.0 - self.alpha / (self.K_buffer * beta)


def rademacher_probes(n_src, n_samples, seed) -> np.ndarray:
    """``(n_samples, n_src)`` array of +-1 entries."""
    rng = np.random.Generator(np.random.Philox(seed))
    return 2.0 * rng.integers(0, 2, size=(n_samples, n_src)) - 1.0


def estimate_misfit(sys: FomSystem, mu, data, n_samples=1, seed=0, probes=None,
                    context="estimate") -> TraceEstimate:
    """Estimate ``F = 0.5 ||M(p) - D||_F^2`` with one large solve per sample and frequency.

    ``probes`` overrides the random signs; each row is used for every frequency
    block when given as ``(n_samples, n_src)``, or per frequency when given as
    ``(n_samples, n_freq, n_src)``.
    """
    if n_samples < 1 and probes is None:
        raise ValueError("need at least one sample")
    data = _check_data(sys, data)
    n_src, n_freq = sys.n_src, sys.n_freq
    if probes is None:
        S = rademacher_probes(n_src, n_samples * n_freq, seed).reshape(n_samples, n_freq, n_src)
    else:
        S = np.asarray(probes, dtype=float)
        if S.ndim == 2:
            S = np.repeat(S[:, None, :], n_freq, axis=1)
        if S.shape[1:] != (n_freq, n_src):
            raise ValueError(f"probes have shape {S.shape}, expected (N, {n_freq}, {n_src})")
        n_samples = S.shape[0]
    per_sample = np.zeros(n_samples)
    for j, w in enumerate(sys.frequencies):
        Dj = data[:, j * n_src:(j + 1) * n_src]
        Sj = S[:, j, :].T  # (n_src, N)
        X = sys.solve(w, mu, sys.B @ Sj, context=context)
        Z = sys.C.T @ X - Dj @ Sj
        per_sample += np.sum(np.abs(Z) ** 2, axis=0)
    return TraceEstimate(0.5 * float(per_sample.mean()), int(n_samples), seed, per_sample.tolist())


def required_samples(bound: SampleBound) -> int:
    """``ceil(6 eps^-2 ln(1/delta))`` samples."""
    eps = bound.eps
    # guard against 16.999999... from round-off in the log
    return max(1, math.ceil(6.0 / eps**2 * math.log(1.0 / bound.delta) - 1e-9))


def quality_reject(f_rom, est, threshold=DEFAULT_THRESHOLD) -> bool:
    """True when the estimate exceeds the reduced misfit by ``threshold`` or more."""
    if f_rom <= 0:
        raise ValueError(f"reduced misfit must be positive, got {f_rom}")
    value = est.value if isinstance(est, TraceEstimate) else float(est)
    return value / f_rom >= threshold

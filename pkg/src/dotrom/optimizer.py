"""Trust-region Gauss-Newton steps on a truncated SVD of the Jacobian.

The step solves the trust-region subproblem for the Gauss-Newton model
restricted to the leading right singular vectors of ``J``. Singular values
below ``tau * sigma_max`` are discarded, and when a noise floor is given the
subspace is cut further at the first index whose model residual reaches the
floor, so steps do not fit the noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "TrustRegionState",
    "Step",
    "Decision",
    "local_model",
    "propose_step",
    "accept_step",
]

RHO = 1e-4
RADIUS_MIN = 1e-8
RADIUS_MAX = 1e3


@dataclass
class TrustRegionState:
    p_c: np.ndarray
    f_c: float
    radius: float = 1.0
    rho_k: float = RHO
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("trust-region radius must be positive")
        if not 0 < self.rho_k < 1:
            raise ValueError("rho_k must lie in (0, 1)")
        self.p_c = np.asarray(self.p_c, dtype=float).copy()


@dataclass
class Step:
    s: np.ndarray
    predicted: float
    norm: float
    hit_boundary: bool
    rank: int

    @property
    def is_zero(self) -> bool:
        return self.norm == 0.0


@dataclass
class Decision:
    accepted: bool
    ratio: float
    radius: float


def local_model(r_c, J_c, s) -> float:
    """``0.5 r^T r + r^T J s + 0.5 s^T J^T J s``."""
    r_c = np.asarray(r_c, dtype=float)
    Js = np.asarray(J_c, dtype=float) @ np.asarray(s, dtype=float)
    return 0.5 * float(r_c @ r_c) + float(r_c @ Js) + 0.5 * float(Js @ Js)


def _subproblem(sig, g, radius):
    """Minimize ``||g + diag(sig) z||`` over ``||z|| <= radius``; returns ``(z, hit)``."""
    z = -g / sig
    if np.linalg.norm(z) <= radius:
        return z, False

    def excess(lam):
        return np.linalg.norm(sig * g / (sig**2 + lam)) - radius

    hi = np.linalg.norm(sig * g) / radius
    lam = brentq(excess, 0.0, hi, xtol=1e-14 * max(hi, 1.0), rtol=1e-12, maxiter=200)
    z = -sig * g / (sig**2 + lam)
    # scale onto the sphere exactly; brentq leaves a tiny relative slack
    z *= radius / np.linalg.norm(z)
    return z, True


def propose_step(state: TrustRegionState, r_c, J_c, noise_floor=None, tau=1e-8) -> Step:
    """Candidate step inside the trust region.

    A zero Jacobian (or a zero gradient) returns the zero step, which signals
    stationarity to the caller.
    """
    r_c = np.asarray(r_c, dtype=float)
    J_c = np.asarray(J_c, dtype=float)
    if not np.all(np.isfinite(J_c)):
        raise ValueError("Jacobian contains non-finite entries")
    n_p = J_c.shape[1]
    zero = Step(np.zeros(n_p), 0.0, 0.0, False, 0)
    if not np.any(J_c):
        return zero
    U, sig, Vt = np.linalg.svd(J_c, full_matrices=False)
    keep = sig > tau * sig[0]
    U, sig, Vt = U[:, keep], sig[keep], Vt[keep]
    g = U.T @ r_c
    if not np.any(g):
        return zero
    k = sig.size
    if noise_floor is not None:
        rr = float(r_c @ r_c)
        tail = rr - np.cumsum(g**2)
        hits = np.nonzero(tail <= noise_floor**2)[0]
        if hits.size:
            k = int(hits[0]) + 1
    z, hit = _subproblem(sig[:k], g[:k], state.radius)
    s = Vt[:k].T @ z
    Js = U[:, :k] @ (sig[:k] * z)
    predicted = -(float(r_c @ Js) + 0.5 * float(Js @ Js))
    return Step(s, max(predicted, 0.0), float(np.linalg.norm(s)), hit, k)


def accept_step(state: TrustRegionState, f_new, predicted, step: Step | None = None) -> Decision:
    """Sufficient-decrease test and radius update; mutates ``state`` on acceptance.

    The radius doubles after a boundary step with ratio >= 0.75 and shrinks to a
    quarter of ``min(radius, ||s||)`` after a rejection.
    """
    actual = state.f_c - f_new
    ratio = actual / predicted if predicted > 0 else (np.inf if actual > 0 else -np.inf)
    accepted = predicted > 0 and actual >= state.rho_k * predicted
    step_norm = step.norm if step is not None else state.radius
    hit = step.hit_boundary if step is not None else True
    if not accepted:
        state.radius = 0.25 * min(state.radius, step_norm)
    elif ratio >= 0.75 and hit:
        state.radius = 2.0 * state.radius
    state.radius = float(np.clip(state.radius, RADIUS_MIN, RADIUS_MAX))
    if accepted:
        if step is not None:
            state.p_c = state.p_c + step.s
        state.f_c = float(f_new)
    return Decision(bool(accepted), float(ratio), state.radius)

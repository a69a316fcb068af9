"""Basis updates triggered when the reduced model is rejected.

Interpolatory updates add ``K^{-1} B`` and ``K^{-T} C`` at a point, which
restores exact interpolation there. Residual-driven updates look at the part
of ``B`` outside ``range(K V)``: with ``K V = Q R`` and the SVD
``(I - Q Q^H) B = U S Y^H``, solving ``K x = u_i`` for the leading ``r``
left singular vectors shrinks ``||(I - Q Q^H) B||_F`` by the Eckart-Young
tail ratio. The adjoint side works the same with ``K^T W`` and ``C``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fom import FomSystem
from .rom import RomBasis

__all__ = [
    "UpdatePolicy",
    "SideDiagnostics",
    "ResidualDiagnostics",
    "UpdateBreakdownError",
    "interpolatory_update",
    "residual_diagnostics",
    "choose_rank",
    "residual_update",
    "skew_component_norm",
    "projection_residuals",
]

logger = logging.getLogger(__name__)

# residual norms below this fraction of ||B||_F are treated as exact
NEGLIGIBLE = 1e-10


class UpdateBreakdownError(RuntimeError):
    """The residual update failed to reach its guaranteed reduction."""


@dataclass(frozen=True)
class UpdatePolicy:
    kind: str = "residual-driven"
    location: str = "proposed-point"
    epsilon_trunc: float = 1.0 / 20.0

    def __post_init__(self):
        if self.kind not in ("interpolatory", "residual-driven", "none"):
            raise ValueError(f"unknown update kind {self.kind!r}")
        if self.location not in ("current-point", "proposed-point", "both"):
            raise ValueError(f"unknown update location {self.location!r}")
        if self.kind == "residual-driven" and not 0 < self.epsilon_trunc < 1:
            raise ValueError("epsilon_trunc must lie in (0, 1)")


@dataclass
class SideDiagnostics:
    """One frequency, one side (forward uses ``B``, adjoint uses ``C``)."""

    omega: float
    Q: np.ndarray = field(repr=False)
    U: np.ndarray = field(repr=False)
    singular_values: np.ndarray
    eta_norm: float
    r_chosen: int = 0


@dataclass
class ResidualDiagnostics:
    per_frequency: list
    adjoint: list

    @property
    def eta_norms(self) -> np.ndarray:
        return np.array([d.eta_norm for d in self.per_frequency])

    @property
    def complement_norm(self) -> float:
        """Frobenius norm of the stacked orthogonal-complement parts over frequencies."""
        return float(np.sqrt(np.sum(self.eta_norms**2)))

    def to_record(self) -> dict:
        return {
            "eta_norms": self.eta_norms.tolist(),
            "singular_values": [d.singular_values.tolist() for d in self.per_frequency],
            "r_chosen": [d.r_chosen for d in self.per_frequency],
            "adjoint_eta_norms": [d.eta_norm for d in self.adjoint],
            "adjoint_r_chosen": [d.r_chosen for d in self.adjoint],
        }


def interpolatory_update(sys: FomSystem, basis: RomBasis, mu, context="basis-update"):
    """Add forward and adjoint states at ``mu`` for every frequency; returns columns added."""
    added = 0
    for w in sys.frequencies:
        X = sys.forward_states(w, mu, context)
        Y = sys.adjoint_states(w, mu, context)
        added += basis.extend(X, Y)
        basis.interp_points.append((w, np.asarray(mu, dtype=float).copy()))
    return added


def _side(K_basis, rhs, omega):
    Q, _ = np.linalg.qr(K_basis, mode="reduced")
    P = rhs - Q @ (Q.conj().T @ rhs)
    U, s, _ = np.linalg.svd(P, full_matrices=False)
    return SideDiagnostics(omega, Q, U, s, float(np.linalg.norm(P)))


def residual_diagnostics(sys: FomSystem, basis: RomBasis, mu, adjoint=True) -> ResidualDiagnostics:
    """Thin QR of ``K V`` (and ``K^T W``) plus the SVD of the orthogonal-complement parts.

    Uses only full-order mat-vecs; nothing is charged to the ledger.
    """
    if basis.n_r == 0:
        raise ValueError("residual diagnostics need a nonempty basis")
    fwd, adj = [], []
    for w in sys.frequencies:
        K = sys.operator(w, mu)
        fwd.append(_side(K @ basis.V, sys.B, w))
        if adjoint:
            adj.append(_side(K.T @ basis.W, sys.C, w))
    return ResidualDiagnostics(fwd, adj)


def choose_rank(singular_values, epsilon, atol=0.0) -> int:
    """Smallest ``r`` with ``sqrt(sum_{i>r} s_i^2 / sum_i s_i^2) < epsilon``.

    Singular values at or below ``atol`` count as zero (round-off residuals).
    """
    s = np.asarray(singular_values, dtype=float)
    s2 = np.where(s > atol, s, 0.0) ** 2
    total = s2.sum()
    if total == 0.0:
        return 0
    tail = total - np.cumsum(s2)
    # tail[r-1] is the energy left after keeping r vectors
    ratios = np.sqrt(np.clip(np.concatenate([[total], tail]), 0.0, None) / total)
    r = int(np.argmax(ratios < epsilon))
    if ratios[r] >= epsilon:
        return s2.size
    return r


def projection_residuals(sys: FomSystem, basis: RomBasis, mu) -> list:
    """``(I - T_j) B`` per frequency, ``T_j = K V (W^T K V)^{-1} W^T`` the skew projector.

    Stacked over frequencies these columns form ``H`` in the bound
    ``| ||R||_F - ||R_hat||_F | <= kappa(p) ||H||_F``.
    """
    out = []
    for w in sys.frequencies:
        KV = sys.operator(w, mu) @ basis.V
        TB = KV @ np.linalg.solve(basis.W.T @ KV, basis.W.T @ sys.B)
        out.append(sys.B - TB)
    return out


def skew_component_norm(sys: FomSystem, basis: RomBasis, mu, omega=0.0) -> float:
    """``||(Q Q^H - T) B||_F`` with ``T = K V (W^T K V)^{-1} W^T``; monitored only."""
    K = sys.operator(omega, mu)
    KV = K @ basis.V
    Q, _ = np.linalg.qr(KV, mode="reduced")
    Kr = basis.W.T @ KV
    TB = KV @ np.linalg.solve(Kr, basis.W.T @ sys.B)
    return float(np.linalg.norm(Q @ (Q.conj().T @ sys.B) - TB))


def residual_update(sys: FomSystem, basis: RomBasis, mu, policy: UpdatePolicy,
                    diagnostics: ResidualDiagnostics | None = None, context="basis-update",
                    check=True):
    """Extend the basis with ``K^{-1} u_i`` (and ``K^{-T}`` adjoint analogs).

    Returns ``(added, before, after)`` where ``before``/``after`` are the
    diagnostics at ``mu`` around the update; ``after`` is ``None`` when
    ``check`` is off.
    """
    eps = policy.epsilon_trunc
    if diagnostics is None:
        diagnostics = residual_diagnostics(sys, basis, mu)
    fwd_dirs, adj_dirs = [], []
    for d in diagnostics.per_frequency:
        d.r_chosen = choose_rank(d.singular_values, eps, NEGLIGIBLE * np.linalg.norm(sys.B))
        if d.r_chosen:
            fwd_dirs.append(sys.solve(d.omega, mu, d.U[:, :d.r_chosen], context=context))
    for d in diagnostics.adjoint:
        d.r_chosen = choose_rank(d.singular_values, eps, NEGLIGIBLE * np.linalg.norm(sys.C))
        if d.r_chosen:
            adj_dirs.append(sys.solve(d.omega, mu, d.U[:, :d.r_chosen], adjoint=True, context=context))
    fwd = np.hstack(fwd_dirs) if fwd_dirs else None
    adj = np.hstack(adj_dirs) if adj_dirs else None
    added = 0
    if fwd is not None or adj is not None:
        added = basis.extend(fwd, adj)
    after = None
    if check:
        after = residual_diagnostics(sys, basis, mu, adjoint=bool(diagnostics.adjoint))
        for old, new in zip(diagnostics.per_frequency + diagnostics.adjoint,
                            after.per_frequency + after.adjoint):
            if new.eta_norm > eps * old.eta_norm + NEGLIGIBLE * max(1.0, old.eta_norm):
                raise UpdateBreakdownError(
                    f"residual norm {new.eta_norm:.3e} exceeds {eps} x {old.eta_norm:.3e} at omega={old.omega}"
                )
    logger.debug("residual update at |mu|=%.3g added %d columns", np.linalg.norm(mu), added)
    return added, diagnostics, after

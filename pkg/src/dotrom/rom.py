"""Interpolatory Petrov-Galerkin reduced models.

``V`` and ``W`` hold orthonormal columns; in one-sided mode they are the same
array. Reduced operators follow ``E_r = W^T E V``, ``A_r = W^T A V``,
``B_r = W^T B`` and ``C_r = V^T C``; the absorption part ``W^T A1(p) V`` is
formed per parameter from the stored bases, which never triggers a
full-order solve.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .fom import FomSystem, MisfitEval, _LRU, field_key

__all__ = [
    "RomBasis",
    "RomSystem",
    "ReducedSystemError",
    "orthonormalize_into",
    "build_basis",
    "project",
    "reduced_misfit",
    "reduced_jacobian",
    "reduced_response",
]

DROP_TOL = 1e-10


class ReducedSystemError(RuntimeError):
    """The projected operator ``K_r(omega; p)`` is singular (basis degeneracy)."""


def orthonormalize_into(Q, X, drop_tol=DROP_TOL):
    """Append the columns of ``X`` to the orthonormal ``Q``, dropping dependent ones.

    Each column is orthogonalized twice against the current basis; it is kept
    only if its remaining norm exceeds ``drop_tol`` times its incoming norm.
    Returns the extended basis and the number of columns added.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    dtype = np.result_type(Q.dtype, X.dtype)
    Q = Q.astype(dtype, copy=False)
    added = []
    for x in X.T:
        x = x.astype(dtype, copy=True)
        norm0 = np.linalg.norm(x)
        if norm0 == 0.0:
            continue
        for _ in range(2):
            if Q.shape[1]:
                x -= Q @ (Q.conj().T @ x)
            if added:
                A = np.column_stack(added)
                x -= A @ (A.conj().T @ x)
        norm = np.linalg.norm(x)
        if norm > drop_tol * norm0:
            added.append(x / norm)
    if not added:
        return Q, 0
    return np.hstack([Q, np.column_stack(added)]), len(added)


class RomBasis:
    """Projection bases with their interpolation history."""

    def __init__(self, n, mode="one-sided", dtype=float, drop_tol=DROP_TOL):
        if mode not in ("one-sided", "two-sided"):
            raise ValueError(f"unknown projection mode {mode!r}")
        self.n = n
        self.mode = mode
        self.drop_tol = drop_tol
        self._V = np.zeros((n, 0), dtype=dtype)
        self._W = self._V
        self.interp_points = []
        self._lock = threading.Lock()

    @property
    def V(self) -> np.ndarray:
        return self._V

    @property
    def W(self) -> np.ndarray:
        return self._V if self.mode == "one-sided" else self._W

    @property
    def n_r(self) -> int:
        return self._V.shape[1]

    def extend(self, forward, adjoint=None) -> int:
        """Add forward (and adjoint) directions; returns the number of new columns.

        One-sided mode pools both families into ``V = W``. Two-sided mode extends
        ``V`` with the forward and ``W`` with the adjoint family, then pads the
        shorter basis from the other family so both keep the same width.
        """
        with self._lock:
            if self.mode == "one-sided":
                blocks = [b for b in (forward, adjoint) if b is not None]
                X = np.hstack([np.atleast_2d(np.asarray(b).T).T for b in blocks])
                self._V, k = orthonormalize_into(self._V, X, self.drop_tol)
                self._W = self._V
                return k
            n_before = self._V.shape[1]
            if forward is not None:
                self._V, _ = orthonormalize_into(self._V, forward, self.drop_tol)
            if adjoint is not None:
                self._W, _ = orthonormalize_into(self._W, adjoint, self.drop_tol)
            self._balance()
            return self._V.shape[1] - n_before

    def _balance(self):
        rng = np.random.default_rng(self._V.shape[1] + 7 * self._W.shape[1])
        while self._V.shape[1] != self._W.shape[1]:
            short_is_v = self._V.shape[1] < self._W.shape[1]
            short, long_ = (self._V, self._W) if short_is_v else (self._W, self._V)
            need = long_.shape[1] - short.shape[1]
            short, k = orthonormalize_into(short, long_[:, -need:], self.drop_tol)
            if k == 0:
                short, k = orthonormalize_into(short, rng.standard_normal((self.n, need)), self.drop_tol)
            if short_is_v:
                self._V = short
            else:
                self._W = short

    def snapshot(self) -> "RomBasis":
        """Frozen copy for concurrent reduced evaluations."""
        other = RomBasis(self.n, self.mode, self._V.dtype, self.drop_tol)
        other._V = self._V.copy()
        other._W = other._V if self.mode == "one-sided" else self._W.copy()
        other.interp_points = list(self.interp_points)
        return other

    def save(self, path) -> None:
        """Write the bases to an ``.npz`` container (shapes are stored with the arrays)."""
        pts = [np.asarray(p, dtype=float) for _, p in self.interp_points]
        omegas = np.array([w for w, _ in self.interp_points], dtype=float)
        np.savez(Path(path), V=self._V, W=self.W, mode=np.array(self.mode), drop_tol=self.drop_tol,
                 omegas=omegas, points=np.array(pts) if pts else np.zeros((0, 0)))

    @classmethod
    def load(cls, path) -> "RomBasis":
        with np.load(Path(path), allow_pickle=False) as z:
            basis = cls(z["V"].shape[0], str(z["mode"]), z["V"].dtype, float(z["drop_tol"]))
            basis._V = z["V"].copy()
            basis._W = basis._V if basis.mode == "one-sided" else z["W"].copy()
            basis.interp_points = [(float(w), p.copy()) for w, p in zip(z["omegas"], z["points"])]
        return basis


def build_basis(sys: FomSystem, points, mode="one-sided", context="offline", basis=None) -> RomBasis:
    """Basis interpolating ``K^{-1} B`` and ``K^{-T} C`` at every (frequency, field) pair.

    ``points`` holds nodal absorption fields. States already solved at a point
    (for instance during a full-order optimization prefix) are taken from the
    system's cache without a new charge.
    """
    if basis is None:
        basis = RomBasis(sys.n, mode, complex if sys.is_complex else float)
    for mu in points:
        for w in sys.frequencies:
            X = sys.forward_states(w, mu, context)
            Y = sys.adjoint_states(w, mu, context)
            basis.extend(X, Y)
            basis.interp_points.append((w, np.asarray(mu, dtype=float).copy()))
    return basis


@dataclass(eq=False)
class RomSystem:
    """Projected operators bound to a frozen copy of the bases."""

    V: np.ndarray
    W: np.ndarray
    E_r: np.ndarray
    A0_r: np.ndarray
    B_r: np.ndarray
    C_r: np.ndarray
    weights: np.ndarray
    frequencies: tuple
    nu: float = 1.0
    _cache: _LRU = field(default_factory=lambda: _LRU(8), repr=False)

    @property
    def n_r(self) -> int:
        return self.A0_r.shape[0]

    @property
    def n_src(self) -> int:
        return self.B_r.shape[1]

    @property
    def n_det(self) -> int:
        return self.C_r.shape[1]

    @property
    def is_complex(self) -> bool:
        return any(w != 0 for w in self.frequencies)

    def A1_r(self, mu) -> np.ndarray:
        d = self.weights * np.asarray(mu, dtype=float)
        return (self.W.T * d) @ self.V

    def A_r(self, mu) -> np.ndarray:
        return self.A0_r + self.A1_r(mu)

    def K_r(self, omega, mu) -> np.ndarray:
        K = self.A_r(mu)
        if omega != 0:
            K = K + (1j * omega / self.nu) * self.E_r
        return K

    def states(self, omega, mu):
        """Reduced ``(K_r^{-1} B_r, K_r^{-T} C_r)``, cached per (omega, mu)."""
        key = (omega, field_key(mu))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        K = self.K_r(omega, mu)
        if self.n_r == 0:
            raise ReducedSystemError("empty reduced basis")
        lu, piv = sla.lu_factor(K, check_finite=True)
        d = np.abs(np.diag(lu))
        if d.min() <= 1e-14 * d.max():
            raise ReducedSystemError(f"reduced operator singular at omega={omega} (n_r={self.n_r})")
        X = sla.lu_solve((lu, piv), self.B_r)
        Y = sla.lu_solve((lu, piv), self.C_r, trans=1)
        self._cache.put(key, (X, Y))
        return X, Y


def project(sys: FomSystem, basis: RomBasis) -> RomSystem:
    """Galerkin/Petrov-Galerkin projection of the full-order operators."""
    V = basis.V.copy()
    W = V if basis.mode == "one-sided" else basis.W.copy()
    return RomSystem(
        V=V,
        W=W,
        E_r=W.T @ (sys.E @ V),
        A0_r=W.T @ (sys.A0 @ V),
        B_r=W.T @ sys.B,
        C_r=V.T @ sys.C,
        weights=sys.weights,
        frequencies=sys.frequencies,
        nu=sys.mesh.nu,
    )


def reduced_response(romsys: RomSystem, omega, mu) -> np.ndarray:
    X, _ = romsys.states(omega, mu)
    return romsys.C_r.T @ X


def reduced_misfit(romsys: RomSystem, mu, data) -> MisfitEval:
    data = np.asarray(data)
    expected = (romsys.n_det, romsys.n_src * len(romsys.frequencies))
    if data.shape != expected:
        raise ValueError(f"data has shape {data.shape}, expected {expected}")
    M = np.hstack([reduced_response(romsys, w, mu) for w in romsys.frequencies])
    if not romsys.is_complex and np.iscomplexobj(M):
        M = M.real
    R = M - data
    return MisfitEval(M, R, 0.5 * float(np.vdot(R, R).real))


def reduced_jacobian(romsys: RomSystem, mu, dmu) -> np.ndarray:
    """Reduced-model Jacobian, same layout as :func:`dotrom.fom.full_jacobian`."""
    dA = romsys.weights[:, None] * np.asarray(dmu)
    blocks = []
    for w in romsys.frequencies:
        X, Y = romsys.states(w, mu)
        # lift to full length: -(W Y)^T diag(dA_l) (V X)
        Xf = romsys.V @ X
        Yf = romsys.W @ Y
        blocks.append(-np.einsum("ni,nl,nj->ijl", Yf, dA, Xf, optimize=True))
    J = np.concatenate(blocks, axis=1)
    if not romsys.is_complex and np.iscomplexobj(J):
        J = J.real
    return J

"""Full-order diffusion forward model.

Node-based finite differences on a rectangle. The top and bottom rows are
homogeneous Dirichlet, the left and right columns carry the Robin condition
``eta + 2 a D d(eta)/dn = 0`` eliminated through a ghost node. Robin rows are
scaled by 1/2 (half cells) so that the diffusion matrix stays symmetric.

Every full-order linear solve goes through :meth:`FomSystem.solve`, which
charges one unit per right-hand-side column to the system's
:class:`SolveLedger`.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "CONTEXTS",
    "MeshConfig",
    "Placement",
    "SolveLedger",
    "FomSystem",
    "MisfitEval",
    "SingularSystemError",
    "assemble",
    "solve_shifted",
    "frequency_response",
    "full_misfit",
    "full_jacobian",
    "flatten_residual",
    "flatten_jacobian",
    "export_triplets",
]

CONTEXTS = ("function-eval", "jacobian", "estimate", "basis-update", "offline", "audit")

_EDGES = ("top", "bottom", "left", "right")


class SingularSystemError(RuntimeError):
    """Raised when ``K(omega; p)`` cannot be factorized."""

    def __init__(self, omega, key, message):
        super().__init__(f"K(omega={omega!r}) singular for absorption field {key[:12]}: {message}")
        self.omega = omega
        self.key = key


@dataclass(frozen=True)
class MeshConfig:
    """Grid and physical constants of the forward problem."""

    nx: int = 51
    ny: int = 51
    domain_extent: tuple[float, float] = (10.0, 10.0)
    a: float = 1.0
    nu: float = 1.0
    diffusion_value: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("nx and ny must be integers")
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"mesh must be at least 8x8, got {self.nx}x{self.ny}")
        if min(self.domain_extent) <= 0:
            raise ValueError("domain_extent must be positive")
        if self.a <= 0 or self.nu <= 0 or self.diffusion_value <= 0:
            raise ValueError("a, nu and diffusion_value must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.domain_extent[0] / (self.nx - 1), self.domain_extent[1] / (self.ny - 1))

    def node_coordinates(self) -> np.ndarray:
        """Physical coordinates of all nodes, shape ``(n, 2)``, row-major in y."""
        x = np.linspace(0.0, self.domain_extent[0], self.nx)
        y = np.linspace(0.0, self.domain_extent[1], self.ny)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def index(self, i, j):
        return j * self.nx + i


@dataclass(frozen=True)
class Placement:
    """Point sources or detectors along one edge.

    ``positions`` are fractions of the edge length in (0, 1). ``depth`` is the
    physical distance from the edge to the node carrying the footprint; the
    default is one grid spacing on Dirichlet edges (a footprint on a Dirichlet
    node would be decoupled) and zero on Robin edges.
    """

    edge: str
    positions: tuple[float, ...]
    depth: float | None = None

    @classmethod
    def uniform(cls, edge: str, count: int, depth: float | None = None) -> "Placement":
        pos = tuple((np.arange(count) + 0.5) / count)
        return cls(edge, pos, depth)

    def nodes(self, mesh: MeshConfig) -> np.ndarray:
        if self.edge not in _EDGES:
            raise ValueError(f"unknown edge {self.edge!r}, expected one of {_EDGES}")
        pos = np.asarray(self.positions, dtype=float)
        if pos.size == 0:
            raise ValueError("placement needs at least one position")
        if np.any(pos <= 0.0) or np.any(pos >= 1.0):
            raise ValueError(f"placement positions must lie strictly inside the edge, got {pos}")
        hx, hy = mesh.spacing
        if self.edge in ("top", "bottom"):
            h, n_along, n_across = hy, mesh.nx, mesh.ny
        else:
            h, n_along, n_across = hx, mesh.ny, mesh.nx
        depth = self.depth
        if depth is None:
            depth = h if self.edge in ("top", "bottom") else 0.0
        offset = int(round(depth / h))
        if abs(offset * h - depth) > 1e-9 * max(h, 1.0):
            raise ValueError(f"depth {depth} is not a multiple of the grid spacing {h}")
        if self.edge in ("top", "bottom"):
            if offset < 1 or offset > n_across - 2:
                raise ValueError("placement off the boundary layer: depth must be >= one spacing on Dirichlet edges")
        elif offset > n_across - 1:
            raise ValueError("placement depth exceeds the domain")
        along = np.rint(pos * (n_along - 1)).astype(int)
        if self.edge in ("left", "right") and (np.any(along < 1) or np.any(along > n_along - 2)):
            raise ValueError("placement on a Robin edge falls onto a Dirichlet corner")
        if self.edge == "top":
            return mesh.index(along, mesh.ny - 1 - offset)
        if self.edge == "bottom":
            return mesh.index(along, offset)
        if self.edge == "left":
            return mesh.index(offset, along)
        return mesh.index(mesh.nx - 1 - offset, along)


class SolveLedger:
    """Thread-safe count of large solves by context."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = {c: 0 for c in CONTEXTS}

    def charge(self, context: str, k: int) -> None:
        if context not in self._counts:
            raise ValueError(f"unknown ledger context {context!r}")
        if k < 0:
            raise ValueError("cannot charge a negative number of solves")
        with self._lock:
            self._counts[context] += int(k)

    @property
    def count_by_context(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def snapshot(self) -> dict:
        counts = self.count_by_context
        return {"count_by_context": counts, "total": sum(counts.values())}

    def __getitem__(self, context: str) -> int:
        return self.count_by_context[context]

    def __repr__(self):
        return f"SolveLedger(total={self.total}, {self.count_by_context})"


def field_key(mu: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(mu, dtype=float).tobytes(), digest_size=16).hexdigest()


class _LRU:
    def __init__(self, size):
        self.size = size
        self.data = OrderedDict()

    def get(self, key):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        return None

    def put(self, key, value):
        self.data[key] = value
        self.data.move_to_end(key)
        while len(self.data) > self.size:
            self.data.popitem(last=False)


@dataclass(eq=False)
class FomSystem:
    """Assembled operators ``K(omega; mu) = i omega/nu E + A0 + diag(w * mu)``.

    ``weights`` carries the cell weights applied to the absorption field
    (1 inside, 1/2 on Robin rows, 0 on Dirichlet rows) so that ``A1`` is the
    diagonal ``weights * mu``.
    """

    mesh: MeshConfig
    E: sp.csr_matrix
    A0: sp.csr_matrix
    B: np.ndarray
    C: np.ndarray
    weights: np.ndarray
    frequencies: tuple[float, ...] = (0.0,)
    source_nodes: np.ndarray | None = None
    detector_nodes: np.ndarray | None = None
    ledger: SolveLedger = field(default_factory=SolveLedger)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._factors = _LRU(6)
        self._states = _LRU(32)

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    @property
    def n_src(self) -> int:
        return self.B.shape[1]

    @property
    def n_det(self) -> int:
        return self.C.shape[1]

    @property
    def n_freq(self) -> int:
        return len(self.frequencies)

    @property
    def is_complex(self) -> bool:
        return any(w != 0 for w in self.frequencies)

    def absorption_diagonal(self, mu) -> np.ndarray:
        """Diagonal of ``A1`` for a nodal absorption field."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n,):
            raise ValueError(f"absorption field must have shape ({self.n},), got {mu.shape}")
        return self.weights * mu

    def A(self, mu) -> sp.csr_matrix:
        return (self.A0 + sp.diags(self.absorption_diagonal(mu))).tocsr()

    def operator(self, omega, mu) -> sp.csc_matrix:
        K = self.A(mu)
        if omega != 0:
            K = K + (1j * omega / self.mesh.nu) * self.E
        return K.tocsc()

    def _factor(self, omega, mu, key):
        fkey = (omega, key)
        with self._lock:
            lu = self._factors.get(fkey)
        if lu is None:
            K = self.operator(omega, mu)
            try:
                lu = splu(K)
            except RuntimeError as exc:
                raise SingularSystemError(omega, key, str(exc)) from exc
            # SuperLU does not always flag exact singularity; check the pivots.
            diag = np.abs(lu.U.diagonal())
            if not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * diag.max():
                raise SingularSystemError(omega, key, "zero or tiny pivot in LU factorization")
            with self._lock:
                self._factors.put(fkey, lu)
        return lu

    def solve(self, omega, mu, rhs, adjoint=False, context="function-eval") -> np.ndarray:
        """Solve ``K X = rhs`` (or ``K^T X = rhs``), charging one solve per column."""
        rhs = np.asarray(rhs)
        vector = rhs.ndim == 1
        R = rhs[:, None] if vector else rhs
        if R.shape[0] != self.n:
            raise ValueError(f"rhs has {R.shape[0]} rows, system has {self.n}")
        key = field_key(mu)
        lu = self._factor(omega, mu, key)
        if omega == 0 and np.iscomplexobj(R):
            X = lu.solve(np.ascontiguousarray(R.real)) + 1j * lu.solve(np.ascontiguousarray(R.imag))
        else:
            dtype = complex if (omega != 0 or np.iscomplexobj(R)) else float
            X = lu.solve(np.ascontiguousarray(R, dtype=dtype), trans="T" if adjoint else "N")
        self.ledger.charge(context, R.shape[1])
        return X[:, 0] if vector else X

    def _states_for(self, omega, mu, adjoint, context):
        key = (omega, field_key(mu), adjoint)
        with self._lock:
            X = self._states.get(key)
        if X is None:
            X = self.solve(omega, mu, self.C if adjoint else self.B, adjoint=adjoint, context=context)
            with self._lock:
                self._states.put(key, X)
        return X

    def forward_states(self, omega, mu, context="function-eval") -> np.ndarray:
        """``K^{-1} B``; cached per (omega, mu) so repeated requests cost nothing."""
        return self._states_for(omega, mu, False, context)

    def adjoint_states(self, omega, mu, context="jacobian") -> np.ndarray:
        """``K^{-T} C``; cached like :meth:`forward_states`."""
        return self._states_for(omega, mu, True, context)

    def has_states(self, omega, mu, adjoint=False) -> bool:
        with self._lock:
            return self._states.get((omega, field_key(mu), adjoint)) is not None

    def clear_caches(self):
        with self._lock:
            self._factors = _LRU(6)
            self._states = _LRU(32)


def assemble(config: MeshConfig, sources: Placement, detectors: Placement,
             frequencies: Sequence[float] = (0.0,)) -> FomSystem:
    """Assemble ``E``, ``A0``, ``B`` and ``C`` for the given placements."""
    nx, ny = config.nx, config.ny
    hx, hy = config.spacing
    D = config.diffusion_value
    n = config.n
    cx, cy = D / hx**2, D / hy**2

    J, I = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    I, J = I.ravel(), J.ravel()
    k = J * nx + I
    dirichlet = (J == 0) | (J == ny - 1)
    robin = ~dirichlet & ((I == 0) | (I == nx - 1))
    interior = ~dirichlet & ~robin

    weights = np.where(dirichlet, 0.0, np.where(robin, 0.5, 1.0))

    diag = np.empty(n)
    diag[interior] = 2 * cx + 2 * cy
    diag[robin] = cx + cy + 1.0 / (2 * config.a * hx)
    diag[dirichlet] = 2 * cx + 2 * cy

    rows, cols, vals = [k], [k], [diag]
    free = ~dirichlet
    # horizontal couplings between free nodes (i, i+1); never touch Dirichlet rows
    h_mask = free & (I < nx - 1)
    rows += [k[h_mask], k[h_mask] + 1]
    cols += [k[h_mask] + 1, k[h_mask]]
    vals += [np.full(h_mask.sum(), -cx)] * 2
    # vertical couplings (j, j+1) between free nodes; Robin-Robin pairs carry the half-cell weight
    v_mask = free & (J < ny - 2)
    up = k[v_mask] + nx
    wv = np.where(robin[v_mask], 0.5, 1.0) * -cy
    rows += [k[v_mask], up]
    cols += [up, k[v_mask]]
    vals += [wv, wv]

    A0 = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    A0.sum_duplicates()
    E = sp.diags(weights).tocsr()

    src = np.asarray(sources.nodes(config))
    det = np.asarray(detectors.nodes(config))
    B = np.zeros((n, src.size))
    B[src, np.arange(src.size)] = 1.0
    C = np.zeros((n, det.size))
    C[det, np.arange(det.size)] = 1.0
    return FomSystem(config, E, A0, B, C, weights, tuple(float(w) for w in frequencies),
                     source_nodes=src, detector_nodes=det)


def solve_shifted(sys: FomSystem, omega, mu, rhs, adjoint=False, context="function-eval"):
    """Module-level alias of :meth:`FomSystem.solve`."""
    return sys.solve(omega, mu, rhs, adjoint=adjoint, context=context)


def frequency_response(sys: FomSystem, omega, mu, context="function-eval") -> np.ndarray:
    """``Psi(omega) = C^T K^{-1} B`` using whichever side needs fewer solves."""
    if sys.n_src <= sys.n_det:
        X = sys.forward_states(omega, mu, context)
        return sys.C.T @ X
    Y = sys.adjoint_states(omega, mu, context)
    return (sys.B.T @ Y).T


@dataclass
class MisfitEval:
    """Predicted observations, residual and objective ``F = 0.5 ||R||_F^2``."""

    M: np.ndarray
    R: np.ndarray
    F: float

    @property
    def norm(self) -> float:
        return float(np.sqrt(2.0 * self.F))

    @property
    def r(self) -> np.ndarray:
        return flatten_residual(self.R)


def _check_data(sys, data):
    data = np.asarray(data)
    expected = (sys.n_det, sys.n_src * sys.n_freq)
    if data.shape != expected:
        raise ValueError(f"data has shape {data.shape}, expected {expected}")
    return data


def full_misfit(sys: FomSystem, mu, data, context="function-eval") -> MisfitEval:
    """Full-order ``M(p)``, ``R = M - D`` and ``F``."""
    data = _check_data(sys, data)
    M = np.hstack([frequency_response(sys, w, mu, context) for w in sys.frequencies])
    if not sys.is_complex:
        M = M.real if np.iscomplexobj(M) else M
    R = M - data
    return MisfitEval(M, R, 0.5 * float(np.vdot(R, R).real))


def full_jacobian(sys: FomSystem, mu, dmu, context="jacobian") -> np.ndarray:
    """Jacobian of ``R`` with respect to the parameters, shape ``(n_det, n_src*n_freq, n_p)``.

    ``dmu`` is the ``(n, n_p)`` derivative of the nodal absorption field. States
    already computed at ``mu`` are reused from the cache.
    """
    dA = sys.weights[:, None] * np.asarray(dmu)
    blocks = []
    for w in sys.frequencies:
        X = sys.forward_states(w, mu, context)
        Y = sys.adjoint_states(w, mu, context)
        # dPsi/dp_l = -Y^T diag(dA_l) X
        blocks.append(-np.einsum("ni,nl,nj->ijl", Y, dA, X, optimize=True))
    J = np.concatenate(blocks, axis=1)
    if not sys.is_complex and np.iscomplexobj(J):
        J = J.real
    return J


def flatten_residual(R) -> np.ndarray:
    """Row-major flattening; complex residuals stacked as ``[Re; Im]``."""
    R = np.asarray(R)
    if np.iscomplexobj(R):
        return np.concatenate([R.real.ravel(), R.imag.ravel()])
    return R.ravel()


def flatten_jacobian(J) -> np.ndarray:
    """Flatten ``(n_det, n_cols, n_p)`` consistently with :func:`flatten_residual`."""
    J = np.asarray(J)
    m = J.shape[0] * J.shape[1]
    if np.iscomplexobj(J):
        return np.vstack([J.real.reshape(m, -1), J.imag.reshape(m, -1)])
    return J.reshape(m, -1)


def export_triplets(matrix, path) -> None:
    """Write a sparse matrix as ``row col value`` lines (1 header line with the shape)."""
    M = sp.coo_matrix(matrix)
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for i, j, v in zip(M.row, M.col, M.data):
            fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")

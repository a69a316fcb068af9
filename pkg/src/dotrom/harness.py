"""Synthetic experiments: data generation, method matrices and percentile tables.

The truth absorption is a polygon rasterized on the nodes (not a PaLS field),
with a small uniform perturbation on both regions. Repeats use distinct seeds
derived from a master seed; every method row sees the same data for a given
repeat, so rows are paired.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolygonPath

from .driver import InversionConfig, InversionResult, run_inversion
from .fom import FomSystem, MeshConfig, Placement, assemble, full_misfit
from .pals import PalsModel, absorption_field, initial_parameters
from .updates import UpdatePolicy

__all__ = [
    "KITE",
    "MethodRow",
    "DEFAULT_ROWS",
    "ExperimentSpec",
    "SyntheticData",
    "build_system",
    "truth_field",
    "generate_data",
    "repeat_seed",
    "run_row",
    "run_matrix",
    "percentile_table",
    "export_reconstruction",
    "write_table",
]

logger = logging.getLogger(__name__)

# normalized coordinates
KITE = ((0.38, 0.5), (0.55, 0.64), (0.68, 0.52), (0.55, 0.38))

PERCENTILES = (0, 25, 50, 75, 100)


@dataclass(frozen=True)
class MethodRow:
    name: str
    init_mode: str
    kind: str = "none"
    location: str = "proposed-point"

    def policy(self, epsilon_trunc=1.0 / 20.0) -> UpdatePolicy:
        return UpdatePolicy(self.kind, self.location, epsilon_trunc)


DEFAULT_ROWS = (
    MethodRow("full-order", "full-order"),
    MethodRow("3-point no-updates", "3-point"),
    MethodRow("3-point interpolatory x_p", "3-point", "interpolatory"),
    MethodRow("3-point residual x_p", "3-point", "residual-driven"),
    MethodRow("1-point interpolatory x_p", "1-point", "interpolatory"),
    MethodRow("1-point residual x_p", "1-point", "residual-driven"),
)

CURRENT_POINT_ROWS = (
    MethodRow("3-point interpolatory x_c", "3-point", "interpolatory", "current-point"),
    MethodRow("3-point residual x_c", "3-point", "residual-driven", "current-point"),
    MethodRow("1-point interpolatory x_c", "1-point", "interpolatory", "current-point"),
    MethodRow("1-point residual x_c", "1-point", "residual-driven", "current-point"),
)


@dataclass
class ExperimentSpec:
    """Everything needed to regenerate a table from a master seed."""

    mesh: MeshConfig = field(default_factory=MeshConfig)
    n_sources: int = 16
    n_detectors: int = 16
    source_edge: str = "top"
    detector_edge: str = "bottom"
    frequencies: tuple = (0.0,)
    truth: tuple = KITE
    mu_in: float = 0.15
    mu_out: float = 0.005
    inhomogeneity_amplitude: float = 0.05
    noise_permille: float = 1.0
    repeats: int = 11
    seed: int = 2024
    n_bumps: int = 9
    eps_heaviside: float = 0.1
    level: float = 0.2
    init_radius: float = 0.15
    init_spacing: float = 0.08
    discrepancy_factor: float = 1.1
    threshold: float = 10.0
    n_samples: int = 1
    epsilon_trunc: float = 1.0 / 20.0
    max_iterations: int = 200
    method_rows: tuple = DEFAULT_ROWS

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.noise_permille <= 0:
            raise ValueError("noise_permille must be positive")
        if len(self.truth) < 3:
            raise ValueError("truth polygon needs at least three vertices")
        if not 0 <= self.inhomogeneity_amplitude < 1:
            raise ValueError("inhomogeneity_amplitude must lie in [0, 1)")

    def pals(self) -> PalsModel:
        return PalsModel(n_bumps=self.n_bumps, level=self.level, eps_heaviside=self.eps_heaviside,
                         mu_in=self.mu_in, mu_out=self.mu_out, extent=tuple(self.mesh.domain_extent))

    def initial_parameters(self) -> np.ndarray:
        return initial_parameters(self.pals(), spacing=self.init_spacing, radius=self.init_radius)

    def config(self, row: MethodRow, noise_level, seed) -> InversionConfig:
        return InversionConfig(noise_level=noise_level, discrepancy_factor=self.discrepancy_factor,
                               threshold=self.threshold, n_samples=self.n_samples,
                               policy=row.policy(self.epsilon_trunc), init_mode=row.init_mode,
                               max_iterations=self.max_iterations, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method_rows"] = [asdict(r) for r in self.method_rows]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "mesh" in d and isinstance(d["mesh"], dict):
            m = dict(d["mesh"])
            if "domain_extent" in m:
                m["domain_extent"] = tuple(m["domain_extent"])
            d["mesh"] = MeshConfig(**m)
        if "method_rows" in d:
            d["method_rows"] = tuple(r if isinstance(r, MethodRow) else MethodRow(**r) for r in d["method_rows"])
        for key in ("truth", "frequencies"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in d[key])
        return cls(**d)


@dataclass
class SyntheticData:
    D: np.ndarray
    M: np.ndarray
    noise: np.ndarray
    truth_mu: np.ndarray
    seed: int

    @property
    def noise_level(self) -> float:
        """Frobenius norm of the added noise."""
        return float(np.linalg.norm(self.noise))

    @property
    def noise_ratio(self) -> float:
        return float(np.linalg.norm(self.D - self.M) / np.linalg.norm(self.M))


def build_system(spec: ExperimentSpec) -> FomSystem:
    """Fresh system with its own solve ledger."""
    return assemble(spec.mesh, Placement.uniform(spec.source_edge, spec.n_sources),
                    Placement.uniform(spec.detector_edge, spec.n_detectors), spec.frequencies)


def repeat_seed(master, repeat) -> int:
    return int(np.random.SeedSequence([master, repeat]).generate_state(1)[0])


def truth_field(spec: ExperimentSpec, seed) -> np.ndarray:
    """Rasterized polygon with uniform relative perturbations of both values."""
    pts = spec.mesh.node_coordinates() / np.asarray(spec.mesh.domain_extent)
    inside = PolygonPath(np.asarray(spec.truth, dtype=float)).contains_points(pts)
    rng = np.random.default_rng(seed)
    base = np.where(inside, spec.mu_in, spec.mu_out)
    return base * (1.0 + spec.inhomogeneity_amplitude * rng.uniform(-1.0, 1.0, base.size))


def generate_data(spec: ExperimentSpec, seed=None, sys: FomSystem | None = None) -> SyntheticData:
    """Noisy synthetic measurements for one repeat.

    White noise is rescaled so that ``||D - M||_F / ||M||_F`` equals
    ``noise_permille / 1000``. The truth solves are charged to the system's
    ``offline`` context; pass a scratch system to keep run ledgers clean.
    """
    seed = spec.seed if seed is None else int(seed)
    sys = sys or build_system(spec)
    mu = truth_field(spec, seed)
    zeros = np.zeros((sys.n_det, sys.n_src * sys.n_freq))
    M = full_misfit(sys, mu, zeros, context="offline").M
    rng = np.random.default_rng([seed, 1])
    noise = rng.standard_normal(M.shape)
    if np.iscomplexobj(M):
        noise = noise + 1j * rng.standard_normal(M.shape)
    noise *= spec.noise_permille / 1000.0 * np.linalg.norm(M) / np.linalg.norm(noise)
    return SyntheticData(M + noise, M, noise, mu, seed)


def run_row(spec: ExperimentSpec, row: MethodRow, data: SyntheticData, seed=None) -> InversionResult:
    sys = build_system(spec)
    config = spec.config(row, data.noise_level, data.seed if seed is None else seed)
    return run_inversion(sys, spec.pals(), data.D, config, p0=spec.initial_parameters())


def _full_norm(spec, result, data):
    if result.final_full_norm is not None:
        return result.final_full_norm
    sys = build_system(spec)
    mu = absorption_field(spec.pals(), result.p, spec.mesh.node_coordinates())
    return full_misfit(sys, mu, data.D, context="audit").norm


def _run_repeat(args):
    spec, repeat = args
    seed = repeat_seed(spec.seed, repeat)
    data = generate_data(spec, seed)
    records = []
    for row in spec.method_rows:
        res = run_row(spec, row, data)
        rec = res.summary()
        rec.update(row=row.name, repeat=repeat, seed=seed,
                   post_hoc_full_norm=_full_norm(spec, res, data),
                   ledger=res.ledger, history=res.history, p=res.p.tolist())
        records.append(rec)
    return records


def run_matrix(spec: ExperimentSpec, out_dir=None, workers=1) -> dict:
    """Run every method row for every repeat; returns ``{"runs": [...], "table": [...]}``.

    With ``out_dir`` each run's ledger and history are written to
    ``runs/<row>/<repeat>.json`` and the table to ``table.csv``.
    """
    jobs = [(spec, r) for r in range(spec.repeats)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_run_repeat, jobs))
    else:
        chunks = [_run_repeat(j) for j in jobs]
    runs = [rec for chunk in chunks for rec in chunk]
    table = percentile_table(runs, [r.name for r in spec.method_rows])
    result = {"spec": spec.to_dict(), "runs": runs, "table": table}
    if out_dir is not None:
        out = Path(out_dir)
        for rec in runs:
            path = out / "runs" / rec["row"].replace(" ", "_") / f"{rec['repeat']:03d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(rec, indent=1, default=_jsonable))
        write_table(table, out / "table.csv")
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, default=_jsonable))
    return result


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def percentile_table(runs, row_names=None) -> list:
    """Per-row min/25/50/75/max of total and amortized solves.

    Percentiles use the Weibull plotting positions, so 11 repeats map the
    quartiles onto the 3rd, 6th and 9th order statistics. A row whose runs
    fail to converge in a majority of repeats is flagged.
    """
    names = row_names or list(dict.fromkeys(r["row"] for r in runs))
    table = []
    for name in names:
        rows = [r for r in runs if r["row"] == name]
        if not rows:
            continue
        total = np.array([r["total_solves"] for r in rows], dtype=float)
        amort = np.array([r["amortized_solves"] for r in rows], dtype=float)
        n_conv = sum(bool(r["converged"]) for r in rows)
        entry = {"row": name, "repeats": len(rows), "converged": n_conv, "flagged": n_conv * 2 <= len(rows)}
        for label, values in (("total", total), ("amortized", amort)):
            pct = np.percentile(values, PERCENTILES, method="weibull") if len(values) > 1 else np.repeat(values, 5)
            for q, v in zip(PERCENTILES, pct):
                entry[f"{label}_p{q}"] = float(v)
        table.append(entry)
    return table


def write_table(table, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
        writer.writeheader()
        writer.writerows(table)


def _write_grid(path, field_values, mesh):
    np.savetxt(path, np.asarray(field_values).reshape(mesh.ny, mesh.nx), delimiter=",", fmt="%.17g")


def export_reconstruction(spec: ExperimentSpec, p, truth_mu, out_dir, p0=None) -> dict:
    """Write reconstruction and truth grids (CSV, rows along y) and the relative field errors."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pts = spec.mesh.node_coordinates()
    mu = absorption_field(spec.pals(), p, pts)
    truth_mu = np.asarray(truth_mu, dtype=float)
    _write_grid(out / "reconstruction.csv", mu, spec.mesh)
    _write_grid(out / "truth.csv", truth_mu, spec.mesh)
    summary = {"field_error": float(np.linalg.norm(mu - truth_mu) / np.linalg.norm(truth_mu))}
    if p0 is not None:
        mu0 = absorption_field(spec.pals(), p0, pts)
        summary["initial_field_error"] = float(np.linalg.norm(mu0 - truth_mu) / np.linalg.norm(truth_mu))
    (out / "field_error.json").write_text(json.dumps(summary, indent=1))
    return summary

"""Reduced-model inversion with estimate-driven basis updates.

The loop proposes trust-region steps on the current reduced model, checks
every trial point with a Hutchinson estimate of the full-order misfit, and
rejects the point (updating the basis) when the estimate exceeds the reduced
misfit by the quality threshold. Otherwise the trust region decides.

When the reduced misfit drops below the tolerance, one full-order evaluation
at the final point audits the result. If the audit fails and updates are
enabled, the basis is updated at the current point and the loop resumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fom import FomSystem, MisfitEval, flatten_jacobian, full_jacobian, full_misfit
from .optimizer import RADIUS_MIN, TrustRegionState, accept_step, propose_step
from .pals import PalsModel, absorption_field, absorption_jacobian, initial_parameters
from .rom import RomBasis, build_basis, project, reduced_jacobian, reduced_misfit
from .trace_est import DEFAULT_THRESHOLD, estimate_misfit, quality_reject
from .updates import UpdatePolicy, interpolatory_update, residual_update

__all__ = [
    "InversionConfig",
    "InversionResult",
    "Evaluation",
    "FullOrderModel",
    "ReducedOrderModel",
    "build_initial_rom",
    "run_inversion",
    "NonConvergenceWarning",
]

logger = logging.getLogger(__name__)

INIT_MODES = ("full-order", "1-point", "3-point")


class NonConvergenceWarning(UserWarning):
    pass


@dataclass
class InversionConfig:
    """Settings of one inversion run.

    ``noise_level`` is the Frobenius norm of the data noise; the run stops when
    the misfit norm ``||R||_F`` drops below ``discrepancy_factor * noise_level``.
    A policy of kind ``"none"`` disables both the estimates and the updates.
    """

    noise_level: float
    discrepancy_factor: float = 1.1
    threshold: float = DEFAULT_THRESHOLD
    n_samples: int = 1
    policy: UpdatePolicy = field(default_factory=UpdatePolicy)
    init_mode: str = "1-point"
    projection: str = "one-sided"
    max_iterations: int = 200
    prefix_iterations: int = 30
    seed: int = 0
    radius: float = 1.0
    audit: bool = True
    audit_restarts: int = 3
    stall_window: int = 5
    stall_decrease: float = 0.1

    def __post_init__(self):
        if self.noise_level <= 0 or self.discrepancy_factor <= 0:
            raise ValueError("tolerance must be positive")
        if not self.threshold > 1:
            raise ValueError("quality threshold must exceed 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.stall_window < 1 or not 0 <= self.stall_decrease < 1:
            raise ValueError("stall_window must be positive and stall_decrease in [0, 1)")

    @property
    def tol_o(self) -> float:
        return self.discrepancy_factor * self.noise_level

    @property
    def updates_enabled(self) -> bool:
        return self.init_mode != "full-order" and self.policy.kind != "none"


@dataclass
class Evaluation:
    p: np.ndarray
    mu: np.ndarray
    misfit: MisfitEval

    @property
    def F(self) -> float:
        return self.misfit.F

    @property
    def norm(self) -> float:
        return self.misfit.norm


class FullOrderModel:
    def __init__(self, sys: FomSystem, pals: PalsModel, data):
        self.sys, self.pals, self.data = sys, pals, np.asarray(data)
        self.points = sys.mesh.node_coordinates()

    def field(self, p):
        return absorption_field(self.pals, p, self.points)

    def evaluate(self, p, context="function-eval") -> Evaluation:
        mu = self.field(p)
        return Evaluation(np.asarray(p, dtype=float).copy(), mu, full_misfit(self.sys, mu, self.data, context))

    def jacobian(self, ev: Evaluation, context="jacobian") -> np.ndarray:
        _, dmu = absorption_jacobian(self.pals, ev.p, self.points)
        return flatten_jacobian(full_jacobian(self.sys, ev.mu, dmu, context))


class ReducedOrderModel(FullOrderModel):
    def __init__(self, sys: FomSystem, pals: PalsModel, data, basis: RomBasis):
        super().__init__(sys, pals, data)
        self.basis = basis
        self.romsys = project(sys, basis)

    def evaluate(self, p, context=None) -> Evaluation:
        mu = self.field(p)
        return Evaluation(np.asarray(p, dtype=float).copy(), mu, reduced_misfit(self.romsys, mu, self.data))

    def jacobian(self, ev: Evaluation, context=None) -> np.ndarray:
        _, dmu = absorption_jacobian(self.pals, ev.p, self.points)
        return flatten_jacobian(reduced_jacobian(self.romsys, ev.mu, dmu))


@dataclass
class InversionResult:
    p: np.ndarray
    converged: bool
    reason: str
    history: list
    ledger: dict
    tol_o: float
    noise_level: float
    init_mode: str
    final_model_norm: float
    final_full_norm: float | None
    basis_dim: int | None = None
    n_rejections: int = 0
    audits: list = field(default_factory=list)
    initial_p: np.ndarray | None = None

    @property
    def total_solves(self) -> int:
        return self.ledger["total"]

    @property
    def amortized_solves(self) -> int:
        return self.ledger["total"] - self.ledger["count_by_context"]["offline"]

    @property
    def audit_solves(self) -> int:
        return self.ledger["count_by_context"]["audit"]

    def summary(self) -> dict:
        return {
            "init_mode": self.init_mode,
            "converged": self.converged,
            "reason": self.reason,
            "total_solves": self.total_solves,
            "amortized_solves": self.amortized_solves,
            "audit_solves": self.audit_solves,
            "final_model_norm": self.final_model_norm,
            "final_full_norm": self.final_full_norm,
            "tol_o": self.tol_o,
            "noise_level": self.noise_level,
            "basis_dim": self.basis_dim,
            "n_rejections": self.n_rejections,
            "iterations": sum(1 for h in self.history if h["event"] in ("step", "rejection")),
        }


def _check_seed(config, counter):
    return int(np.random.SeedSequence([config.seed, counter]).generate_state(1)[0])


class _Run:
    """Mutable bookkeeping shared by the phases of one inversion."""

    def __init__(self, sys, pals, data, config):
        self.sys, self.pals, self.data, self.config = sys, pals, np.asarray(data), config
        self.history = []
        self.iteration = 0
        self.checks = 0
        self.rejections = 0

    def record(self, event, state, model_F, **extra):
        rec = {
            "iteration": self.iteration,
            "event": event,
            "f_model": float(model_F),
            "misfit_ratio": float(np.sqrt(2 * model_F) / self.config.noise_level),
            "radius": float(state.radius),
            "solves": self.sys.ledger.total,
        }
        rec.update(extra)
        self.history.append(rec)
        return rec

    def update(self, basis, points):
        """Apply the configured update at each nodal field in ``points``."""
        policy = self.config.policy
        added = 0
        records = []
        for mu in points:
            if policy.kind == "interpolatory":
                k = interpolatory_update(self.sys, basis, mu)
                records.append({"added": k})
            else:
                k, before, after = residual_update(self.sys, basis, mu, policy)
                rec = before.to_record()
                rec["added"] = k
                rec["eta_norms_after"] = after.eta_norms.tolist() if after is not None else None
                records.append(rec)
            added += k
        return added, records


STALL_RADIUS = 1e-4


def _stalled(recent, state, cfg) -> bool:
    """Less than ``stall_decrease`` relative decrease over the last window, or a collapsed radius."""
    if state.radius <= RADIUS_MIN:
        return True
    if len(recent) <= cfg.stall_window:
        return False
    old, new = recent[-cfg.stall_window - 1], recent[-1]
    return new > (1.0 - cfg.stall_decrease) * old


def _iterate(run: _Run, model, state, ev_c, J_c, basis=None, stop_after_accepts=None):
    """Trust-region loop. Returns ``(model, ev_c, J_c, reason)``."""
    cfg = run.config
    sys = run.sys
    use_estimates = basis is not None and cfg.policy.kind != "none"
    accepts = 0
    recent = [ev_c.F]
    while ev_c.norm >= cfg.tol_o:
        if use_estimates and _stalled(recent, state, cfg):
            # the reduced objective barely moves: refresh the basis where we stand
            n_before = basis.n_r
            run.rejections += 1
            added, details = run.update(basis, [ev_c.mu])
            model = ReducedOrderModel(sys, run.pals, run.data, basis)
            ev_c = model.evaluate(state.p_c)
            J_c = model.jacobian(ev_c)
            state.f_c = ev_c.F
            state.radius = max(state.radius, cfg.radius * STALL_RADIUS)
            run.record("stall-update", state, ev_c.F, n_r_before=n_before, n_r=basis.n_r, added=added,
                       update=details)
            if added == 0:
                return model, ev_c, J_c, "stationary"
            recent = [ev_c.F]
            continue
        if run.iteration >= cfg.max_iterations:
            return model, ev_c, J_c, "max-iterations"
        run.iteration += 1
        step = propose_step(state, ev_c.misfit.r, J_c, noise_floor=cfg.noise_level)
        if step.is_zero:
            return model, ev_c, J_c, "stationary"
        p_p = state.p_c + step.s
        t0 = sys.ledger.total
        ev_p = model.evaluate(p_p, "function-eval")
        t1 = sys.ledger.total
        f_est = None
        charges = {"eval_solves": t1 - t0}
        if use_estimates:
            seed = _check_seed(cfg, run.checks)
            run.checks += 1
            est = estimate_misfit(sys, ev_p.mu, run.data, cfg.n_samples, seed)
            f_est = est.value
            charges["estimate_solves"] = sys.ledger.total - t1
            charges["estimate_seed"] = seed
            reject = quality_reject(ev_p.F, est, cfg.threshold) if ev_p.F > 0 else est.value > 0
            if reject:
                run.rejections += 1
                where = {"current-point": [ev_c.mu], "proposed-point": [ev_p.mu],
                         "both": [ev_c.mu, ev_p.mu]}[cfg.policy.location]
                n_before = basis.n_r
                added, details = run.update(basis, where)
                if added == 0:
                    # nothing new to learn from this point; treat as a failed step
                    state.radius = max(0.25 * min(state.radius, step.norm), RADIUS_MIN)
                model = ReducedOrderModel(sys, run.pals, run.data, basis)
                ev_c = model.evaluate(state.p_c)
                J_c = model.jacobian(ev_c)
                state.f_c = ev_c.F
                recent = [ev_c.F]
                run.record("rejection", state, ev_p.F, f_est=f_est, step_norm=step.norm,
                           accepted=False, n_r_before=n_before, n_r=basis.n_r, added=added,
                           f_model_current=ev_c.F, update=details, **charges)
                continue
        decision = accept_step(state, ev_p.F, step.predicted, step)
        if decision.accepted:
            ev_c = ev_p
            t2 = sys.ledger.total
            J_c = model.jacobian(ev_c, "jacobian")
            charges["jacobian_solves"] = sys.ledger.total - t2
            accepts += 1
        run.record("step", state, ev_p.F, f_est=f_est, step_norm=step.norm, accepted=decision.accepted,
                   ratio=decision.ratio, predicted=step.predicted, rank=step.rank,
                   n_r=basis.n_r if basis is not None else None, **charges)
        recent.append(ev_c.F)
        if stop_after_accepts is not None and accepts >= stop_after_accepts:
            return model, ev_c, J_c, "prefix-done"
        if state.radius <= RADIUS_MIN and not use_estimates:
            return model, ev_c, J_c, "radius-collapse"
    return model, ev_c, J_c, "converged"


def build_initial_rom(sys: FomSystem, pals: PalsModel, data, config: InversionConfig, p0,
                      mode=None, run=None):
    """Initial basis for ``"1-point"`` or ``"3-point"`` mode.

    Returns ``(basis, state, ev_c, reason)``. The 3-point construction runs a
    full-order prefix of two accepted trust-region steps and interpolates the
    three iterates; their states come from the solve cache so the basis itself
    costs nothing beyond the prefix. Solves at ``p0`` are charged as offline.
    """
    mode = mode or config.init_mode
    run = run or _Run(sys, pals, data, config)
    fom = FullOrderModel(sys, pals, data)
    ev0 = fom.evaluate(p0, "offline")
    state = TrustRegionState(np.asarray(p0, dtype=float), ev0.F, radius=config.radius)
    projection = config.projection
    if mode == "1-point":
        basis = build_basis(sys, [ev0.mu], projection, context="offline")
        return basis, state, ev0, "built"
    if mode != "3-point":
        raise ValueError(f"unknown ROM construction {mode!r}")
    J0 = fom.jacobian(ev0, "offline")
    points = [ev0.mu]
    ev_c, J_c, reason = ev0, J0, "built"
    cap = run.config.max_iterations
    run.config.max_iterations = min(cap, run.iteration + config.prefix_iterations)
    try:
        for _ in range(2):
            _, ev_c, J_c, reason = _iterate(run, fom, state, ev_c, J_c, stop_after_accepts=1)
            if reason != "prefix-done":
                break
            points.append(ev_c.mu)
    finally:
        run.config.max_iterations = cap
    if reason not in ("prefix-done", "converged"):
        raise RuntimeError(f"full-order prefix stopped early ({reason}) after {len(points)} points")
    basis = build_basis(sys, points, projection, context="function-eval")
    return basis, state, ev_c, "converged" if reason == "converged" else "built"


def run_inversion(sys: FomSystem, pals: PalsModel, data, config: InversionConfig, p0=None,
                  basis: RomBasis | None = None) -> InversionResult:
    """Run one inversion in the configured mode (full-order, 1-point or 3-point ROM).

    A prebuilt ``basis`` (for instance loaded from an offline checkpoint)
    replaces the initial construction; its solves are not charged again.
    """
    if p0 is None:
        p0 = initial_parameters(pals)
    p0 = np.asarray(p0, dtype=float)
    run = _Run(sys, pals, data, config)

    if config.init_mode == "full-order":
        model = FullOrderModel(sys, pals, data)
        ev_c = model.evaluate(p0, "offline")
        J_c = model.jacobian(ev_c, "offline")
        state = TrustRegionState(p0, ev_c.F, radius=config.radius)
        run.record("start", state, ev_c.F)
        model, ev_c, J_c, reason = _iterate(run, model, state, ev_c, J_c)
        return InversionResult(state.p_c, reason == "converged", reason, run.history, sys.ledger.snapshot(),
                               config.tol_o, config.noise_level, config.init_mode, ev_c.norm, ev_c.norm,
                               initial_p=p0)

    if basis is None:
        basis, state, ev_start, status = build_initial_rom(sys, pals, data, config, p0, run=run)
    else:
        state = TrustRegionState(p0, 0.0, radius=config.radius)
        status = "built"
    if status == "converged":
        # the full-order prefix already met the tolerance
        return InversionResult(state.p_c, True, "converged", run.history, sys.ledger.snapshot(), config.tol_o,
                               config.noise_level, config.init_mode, ev_start.norm, ev_start.norm,
                               basis_dim=basis.n_r, initial_p=p0)
    model = ReducedOrderModel(sys, pals, data, basis)
    ev_c = model.evaluate(state.p_c)
    J_c = model.jacobian(ev_c)
    state.f_c = ev_c.F
    run.record("start", state, ev_c.F, n_r=basis.n_r)

    audits = []
    restarts = 0
    while True:
        model, ev_c, J_c, reason = _iterate(run, model, state, ev_c, J_c, basis=basis)
        if not config.audit:
            converged = reason == "converged"
            full_norm = None
            break
        audit = full_misfit(sys, ev_c.mu, data, context="audit")
        passed = audit.norm < config.tol_o
        audits.append({"iteration": run.iteration, "full_norm": audit.norm, "model_norm": ev_c.norm,
                       "passed": passed, "reason": reason})
        run.record("audit", state, ev_c.F, f_full=audit.F, passed=passed)
        full_norm = audit.norm
        if passed or reason != "converged" or not config.updates_enabled or restarts >= config.audit_restarts:
            converged = passed and reason == "converged"
            if reason == "converged" and not passed:
                reason = "audit-failed"
            break
        restarts += 1
        run.rejections += 1
        added, details = run.update(basis, [ev_c.mu])
        model = ReducedOrderModel(sys, pals, data, basis)
        ev_c = model.evaluate(state.p_c)
        J_c = model.jacobian(ev_c)
        state.f_c = ev_c.F
        run.record("audit-update", state, ev_c.F, added=added, n_r=basis.n_r, update=details)

    if not converged:
        logger.info("inversion stopped without convergence: %s", reason)
    return InversionResult(state.p_c, converged, reason, run.history, sys.ledger.snapshot(), config.tol_o,
                           config.noise_level, config.init_mode, ev_c.norm, full_norm, basis_dim=basis.n_r,
                           n_rejections=run.rejections, audits=audits, initial_p=p0)

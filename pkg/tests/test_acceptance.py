"""Acceptance criteria 1-9, one PASS/FAIL line each (see the terminal summary)."""

import itertools
import os
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from conftest import ACCEPTANCE_LINES, field, field_and_jacobian, make_pals, make_system, random_params
from dotrom.fom import MeshConfig, flatten_jacobian, frequency_response, full_jacobian, full_misfit
from dotrom.harness import DEFAULT_ROWS, ExperimentSpec, build_system, run_matrix
from dotrom.pals import absorption_field, absorption_jacobian
from dotrom.rom import build_basis, project, reduced_jacobian, reduced_misfit, reduced_response
from dotrom.trace_est import SampleBound, estimate_misfit, required_samples
from dotrom.updates import UpdatePolicy, projection_residuals, residual_update

FULL, THREE_NONE, THREE_INTERP, THREE_RES, ONE_INTERP, ONE_RES = (r.name for r in DEFAULT_ROWS)
THREE_POINT = (THREE_NONE, THREE_INTERP, THREE_RES)
MATRIX_BUDGET = 15 * 60.0


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_criterion_1_hutchinson_exhaustive():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    sys = make_system(13, n_src=3, n_det=3)
    pals = make_pals(sys)
    data = full_misfit(sys, field(sys, pals, random_params(pals, rng)), np.zeros((3, 3))).M
    mu = field(sys, pals, random_params(pals, rng))
    probes = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
    est = estimate_misfit(sys, mu, data, probes=probes)
    exact = np.linalg.norm(full_misfit(sys, mu, data).R) ** 2
    err = abs(np.mean(est.per_sample) - exact) / exact
    elapsed = time.perf_counter() - t0
    report(1, err <= 1e-12 and elapsed < 5, f"relative error {err:.1e} over 8 probes, {elapsed:.2f}s")


def test_criterion_2_sample_bound():
    got = tuple(required_samples(SampleBound(delta, K_buffer=2)) for delta in (0.5, 0.25))
    report(2, got == (17, 34), f"required_samples gives {got}, expected (17, 34)")


def desk_33():
    spec = ExperimentSpec(mesh=MeshConfig(33, 33))
    return spec, build_system(spec), spec.pals()


def test_criterion_3_interpolation_exactness():
    t0 = time.perf_counter()
    spec, sys, pals = desk_33()
    mu0, dmu0 = absorption_jacobian(pals, spec.initial_parameters(), spec.mesh.node_coordinates())
    rs = project(sys, build_basis(sys, [mu0]))
    err_psi = rel(reduced_response(rs, 0.0, mu0), frequency_response(sys, 0.0, mu0))
    err_grad = rel(reduced_jacobian(rs, mu0, dmu0), full_jacobian(sys, mu0, dmu0))
    elapsed = time.perf_counter() - t0
    ok = err_psi <= 1e-8 and err_grad <= 1e-5 and elapsed < 30
    report(3, ok, f"response {err_psi:.1e}, gradient {err_grad:.1e}, {elapsed:.1f}s")


def complement_norm(K, V, B):
    Q = scipy.linalg.orth(K @ V)
    return np.linalg.norm(B - Q @ (Q.T @ B))


def test_criterion_4_residual_update_guarantee():
    t0 = time.perf_counter()
    spec, sys, pals = desk_33()
    X = spec.mesh.node_coordinates()
    base = build_basis(sys, [absorption_field(pals, spec.initial_parameters(), X)])
    rng = np.random.default_rng(4)
    params = [random_params(pals, rng) for _ in range(20)]
    worst, n_checked = -np.inf, 0
    for eps in (1 / 10, 1 / 20, 1 / 100):
        for p in params:
            mu = absorption_field(pals, p, X)
            basis = base.snapshot()
            K = sys.operator(0.0, mu).toarray()
            old = complement_norm(K, basis.V, sys.B)
            residual_update(sys, basis, mu, UpdatePolicy(epsilon_trunc=eps))
            new = complement_norm(K, basis.V, sys.B)
            worst = max(worst, new - (eps * old + 1e-10))
            n_checked += 1
    elapsed = time.perf_counter() - t0
    report(4, worst <= 0 and elapsed < 120,
           f"{n_checked} updates, worst slack {worst:.1e} (must be <= 0), {elapsed:.1f}s")


def test_criterion_5_error_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    sys = make_system(13, n_src=3, n_det=3)
    pals = make_pals(sys)
    basis = build_basis(sys, [field(sys, pals, random_params(pals, rng))])
    rs = project(sys, basis)
    data = full_misfit(sys, field(sys, pals, random_params(pals, rng)), np.zeros((3, 3))).M
    violations, ratios = 0, []
    for _ in range(20):
        mu = field(sys, pals, random_params(pals, rng))
        kappa = np.linalg.norm(sys.C.T @ np.linalg.inv(sys.operator(0.0, mu).toarray()), 2)
        H = np.hstack(projection_residuals(sys, basis, mu))
        gap = abs(full_misfit(sys, mu, data).norm - reduced_misfit(rs, mu, data).norm)
        bound = kappa * np.linalg.norm(H)
        violations += gap > bound
        ratios.append(gap / bound)
    elapsed = time.perf_counter() - t0
    report(5, violations == 0 and elapsed < 60,
           f"{violations} violations in 20 draws, max gap/bound {max(ratios):.2f}, {elapsed:.1f}s")


FLOOR = 1e-4


def fd_mismatch(jac, resid, p, pals):
    """Largest relative column error of ``jac`` against central differences of ``resid``.

    The difference quotients are Richardson-extrapolated from steps ``h`` and
    ``h/2``. Columns of bumps that barely reach the transition band can be ten
    orders below the rest, where any quotient is round-off; those are measured
    against ``FLOOR`` times the largest column instead of their own norm.
    Returns the worst error and the number of such columns.
    """
    def central(ell, h):
        e = np.zeros_like(p)
        e[ell] = h
        return (resid(p + e) - resid(p - e)) / (2 * h)

    fds = []
    for ell in range(pals.n_params):
        h = 1e-4 * (1 + abs(p[ell]))
        fds.append((4 * central(ell, h / 2) - central(ell, h)) / 3)
    fds = np.column_stack(fds)
    norms = np.linalg.norm(fds, axis=0)
    scale = np.maximum(norms, FLOOR * norms.max())
    return float(np.max(np.linalg.norm(jac - fds, axis=0) / scale)), int(np.sum(norms < scale))


def test_criterion_6_jacobians_vs_finite_differences():
    t0 = time.perf_counter()
    spec, sys, pals = desk_33()
    X = spec.mesh.node_coordinates()
    rs = project(sys, build_basis(sys, [absorption_field(pals, spec.initial_parameters(), X)]))
    rng = np.random.default_rng(6)
    data = full_misfit(sys, absorption_field(pals, random_params(pals, rng), X),
                       np.zeros((sys.n_det, sys.n_src))).M
    worst_full = worst_rom = 0.0
    n_floored = 0
    for _ in range(5):
        p = random_params(pals, rng)
        mu, dmu = absorption_jacobian(pals, p, X)
        J = flatten_jacobian(full_jacobian(sys, mu, dmu))
        err, k = fd_mismatch(J, lambda q: full_misfit(sys, absorption_field(pals, q, X), data).r, p, pals)
        worst_full, n_floored = max(worst_full, err), n_floored + k
        Jr = flatten_jacobian(reduced_jacobian(rs, mu, dmu))
        err, k = fd_mismatch(Jr, lambda q: reduced_misfit(rs, absorption_field(pals, q, X), data).r, p, pals)
        worst_rom, n_floored = max(worst_rom, err), n_floored + k
    elapsed = time.perf_counter() - t0
    ok = worst_full <= 1e-5 and worst_rom <= 1e-5 and elapsed < 60
    report(6, ok, f"full {worst_full:.1e}, reduced {worst_rom:.1e} per column "
           f"({n_floored}/{10 * pals.n_params} columns below {FLOOR:g} of the largest), {elapsed:.1f}s")


# end-to-end desk experiment, shared by criteria 7-9


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    workers = os.cpu_count() or 1
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    spec = ExperimentSpec()
    matrix = run_matrix(spec, out_dir=out / "default", workers=workers)
    t1 = time.perf_counter()
    # lower noise makes the 3-point surrogate drift far enough to exercise criterion 8
    low = replace(spec, noise_permille=0.5, repeats=2,
                  method_rows=tuple(r for r in DEFAULT_ROWS if r.name in THREE_POINT))
    extra = run_matrix(low, out_dir=out / "low-noise", workers=workers)
    t2 = time.perf_counter()
    return {"spec": spec, "matrix": matrix, "extra": extra, "low": low,
            "matrix_time": t1 - t0, "total_time": t2 - t0}


def by_row(runs):
    rows = {}
    for r in runs:
        rows.setdefault(r["row"], []).append(r)
    return rows


@pytest.mark.slow
def test_criterion_7_desk_inversion(desk):
    runs = desk["matrix"]["runs"]
    rows = by_row(runs)
    assert all(len(v) == desk["spec"].repeats for v in rows.values())
    bad = [(r["row"], r["repeat"]) for r in runs
           if r["converged"] and r["post_hoc_full_norm"] > 1.1 * r["noise_level"] * (1 + 1e-12)]
    n_conv = {k: sum(r["converged"] for r in v) for k, v in rows.items()}
    med = {k: float(np.median([r["total_solves"] for r in v])) for k, v in rows.items()}
    amort = float(np.median([r["amortized_solves"] for r in rows[ONE_RES]]))
    ordering = all(med[ONE_RES] < med[k] < med[FULL] for k in THREE_POINT)
    cheap = amort <= 0.5 * med[FULL]
    fast = desk["total_time"] < MATRIX_BUDGET
    conv = ", ".join(f"{k} {n_conv[k]}/{len(rows[k])} med {med[k]:.0f}" for k in rows)
    report(7, not bad and ordering and cheap and fast,
           f"(a) {len(bad)} converged runs above 1.1x noise; (b) ordering {'holds' if ordering else 'fails'}; "
           f"(c) 1-point residual amortized median {amort:.0f} vs FOM median {med[FULL]:.0f}; "
           f"{desk['total_time'] / 60:.1f} min [{conv}]")


def drifted_cases(runs):
    """3-point no-update runs whose full-order objective is at least twice the reduced one."""
    for r in runs:
        if r["row"] == THREE_NONE and (r["post_hoc_full_norm"] / r["final_model_norm"]) ** 2 >= 2:
            yield r


@pytest.mark.slow
def test_criterion_8_updates_repair_drift(desk):
    runs = desk["matrix"]["runs"] + desk["extra"]["runs"]
    lookup = {(r["row"], r["noise_level"], r["repeat"]): r for r in runs}
    cases = list(drifted_cases(runs))
    failures = []
    for case in cases:
        for row in (THREE_INTERP, THREE_RES):
            rerun = lookup[(row, case["noise_level"], case["repeat"])]
            if not rerun["post_hoc_full_norm"] <= 1.1 * rerun["noise_level"]:
                failures.append((row, case["repeat"]))
    detail = ", ".join(f"ratio {(c['post_hoc_full_norm'] / c['final_model_norm']) ** 2:.2f}" for c in cases)
    report(8, bool(cases) and not failures,
           f"{len(cases)} drifted 3-point runs ({detail}); {len(failures)} not repaired by updates")


@pytest.mark.slow
def test_criterion_9_ledger_integrity(desk):
    n_samples = desk["spec"].n_samples
    n_freq = len(desk["spec"].frequencies)
    problems, n_steps, n_checks = [], 0, 0
    for r in desk["matrix"]["runs"] + desk["extra"]["runs"]:
        ledger = r["ledger"]
        if ledger["total"] != sum(ledger["count_by_context"].values()):
            problems.append((r["row"], r["repeat"], "total"))
        est = 0
        for h in r["history"]:
            if h["event"] not in ("step", "rejection"):
                continue
            if "estimate_solves" in h:
                n_checks += 1
                est += h["estimate_solves"]
                if h["estimate_solves"] != n_samples * n_freq:
                    problems.append((r["row"], r["repeat"], "estimate"))
            if h.get("n_r") is not None:
                n_steps += 1
                if h["eval_solves"] != 0 or h.get("jacobian_solves", 0) != 0:
                    problems.append((r["row"], r["repeat"], "reduced step"))
        if est != ledger["count_by_context"]["estimate"]:
            problems.append((r["row"], r["repeat"], "estimate context"))
    report(9, not problems and n_steps > 0 and n_checks > 0,
           f"{len(problems)} problems over {n_steps} reduced iterations and {n_checks} estimator checks")

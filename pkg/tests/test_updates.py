import itertools

import numpy as np
import pytest

from conftest import field, make_pals, make_system, random_params
from dotrom.fom import full_misfit
from dotrom.rom import RomBasis, build_basis, project, reduced_misfit
from dotrom.updates import (
    UpdatePolicy,
    choose_rank,
    interpolatory_update,
    projection_residuals,
    residual_diagnostics,
    residual_update,
    skew_component_norm,
)


@pytest.fixture
def problem(rng):
    sys = make_system(17, n_src=5, n_det=5)
    pals = make_pals(sys)
    p0, p1 = random_params(pals, rng), random_params(pals, rng)
    basis = build_basis(sys, [field(sys, pals, p0)])
    return sys, pals, basis, field(sys, pals, p0), field(sys, pals, p1)


def test_policy_validation():
    assert UpdatePolicy().kind == "residual-driven"
    assert UpdatePolicy().location == "proposed-point"
    assert UpdatePolicy().epsilon_trunc == pytest.approx(0.05)
    with pytest.raises(ValueError):
        UpdatePolicy(kind="greedy")
    with pytest.raises(ValueError):
        UpdatePolicy(location="elsewhere")
    with pytest.raises(ValueError):
        UpdatePolicy(epsilon_trunc=1.0)


def test_interpolatory_update_restores_exactness(problem, rng):
    sys, pals, basis, mu0, mu1 = problem
    n_r = basis.n_r
    assert interpolatory_update(sys, basis, mu0) == 0
    assert basis.n_r == n_r
    data = full_misfit(sys, mu0, np.zeros((5, 5))).M * (1 + 0.01 * rng.standard_normal((5, 5)))
    assert interpolatory_update(sys, basis, mu1) > 0
    F = full_misfit(sys, mu1, data).F
    assert abs(reduced_misfit(project(sys, basis), mu1, data).F - F) / F <= 1e-8
    eta = residual_diagnostics(sys, basis, mu1).eta_norms
    assert np.all(eta <= 1e-8 * np.linalg.norm(sys.B))


def test_added_directions_numerically_dependent(rng):
    # dense source and detector arrays on a 2-bump problem
    sys = make_system(33, n_src=31, n_det=31)
    pals = make_pals(sys, n_bumps=2)
    basis = build_basis(sys, [field(sys, pals, random_params(pals, rng))])
    added = interpolatory_update(sys, basis, field(sys, pals, random_params(pals, rng)))
    assert 0 < added < sys.n_freq * (sys.n_src + sys.n_det)


def test_diagnostics_against_dense_projector(rng):
    sys = make_system(13, n_src=3, n_det=3)
    pals = make_pals(sys)
    basis = build_basis(sys, [field(sys, pals, random_params(pals, rng))])
    mu = field(sys, pals, random_params(pals, rng))
    d = residual_diagnostics(sys, basis, mu).per_frequency[0]
    KV = sys.operator(0.0, mu).toarray() @ basis.V
    P = np.eye(sys.n) - KV @ np.linalg.pinv(KV)
    assert d.eta_norm == pytest.approx(np.linalg.norm(P @ sys.B), rel=1e-10)
    s = d.singular_values
    assert np.all(np.diff(s) <= 0) and s.min() >= 0
    assert d.eta_norm**2 == pytest.approx(np.sum(s**2), rel=1e-10)


def test_contained_range_gives_zero_residual(problem):
    sys, pals, basis, mu0, _ = problem
    diag = residual_diagnostics(sys, basis, mu0)
    assert diag.eta_norms[0] <= 1e-10 * np.linalg.norm(sys.B)
    assert skew_component_norm(sys, basis, mu0) <= 1e-10 * np.linalg.norm(sys.B)
    before = sys.ledger.total
    added, _, _ = residual_update(sys, basis, mu0, UpdatePolicy())
    assert added == 0 and sys.ledger.total == before


def test_choose_rank():
    assert choose_rank([0.0, 0.0], 0.1) == 0
    assert choose_rank([1.0, 0.0, 0.0], 0.1) == 1
    s = np.array([10.0, 3.0, 1.0, 0.1])
    assert choose_rank(s, 0.5) == 1
    assert choose_rank(s, 0.05) == 3
    assert choose_rank(s, 1e-6) == 4
    assert choose_rank(s, 1e-6, atol=0.5) == 3
    ranks = [choose_rank(s, e) for e in (0.5, 0.1, 0.05, 0.01, 1e-4)]
    assert ranks == sorted(ranks)


@pytest.mark.parametrize("eps", [1 / 10, 1 / 20, 1 / 100])
def test_residual_update_guarantee(problem, eps):
    sys, pals, basis, _, mu1 = problem
    before_solves = sys.ledger.total
    added, before, after = residual_update(sys, basis, mu1, UpdatePolicy(epsilon_trunc=eps))
    r = before.per_frequency[0].r_chosen + before.adjoint[0].r_chosen
    assert sys.ledger["basis-update"] == r
    assert sys.ledger.total - before_solves == r
    assert 0 < added <= r
    for old, new in zip(before.per_frequency + before.adjoint, after.per_frequency + after.adjoint):
        assert new.eta_norm <= eps * old.eta_norm + 1e-10


def test_residual_update_adjoint_side_two_sided(rng):
    sys = make_system(17, n_src=4, n_det=6)
    pals = make_pals(sys)
    basis = build_basis(sys, [field(sys, pals, random_params(pals, rng))], mode="two-sided")
    mu = field(sys, pals, random_params(pals, rng))
    _, before, after = residual_update(sys, basis, mu, UpdatePolicy(epsilon_trunc=0.1))
    assert basis.V.shape == basis.W.shape
    assert after.adjoint[0].eta_norm <= 0.1 * before.adjoint[0].eta_norm + 1e-10
    assert after.per_frequency[0].eta_norm <= 0.1 * before.per_frequency[0].eta_norm + 1e-10


def test_eckart_young_optimal_subset(rng):
    sys = make_system(13, n_src=4, n_det=4)
    pals = make_pals(sys)
    mu0 = field(sys, pals, random_params(pals, rng))
    mu = field(sys, pals, random_params(pals, rng))
    base = RomBasis(sys.n)
    base.extend(sys.forward_states(0.0, mu0))
    d = residual_diagnostics(sys, base, mu, adjoint=False).per_frequency[0]
    r = choose_rank(d.singular_values, 0.2)
    assert 0 < r < 4

    def post_eta(cols):
        trial = base.snapshot()
        trial.extend(sys.solve(0.0, mu, d.U[:, list(cols)]))
        return residual_diagnostics(sys, trial, mu, adjoint=False).eta_norms[0]

    best = post_eta(range(r))
    for subset in itertools.combinations(range(4), r):
        assert best <= post_eta(subset) + 1e-12


def test_residual_reduction_monotone_in_solves(problem):
    """More directions, more reduction: the decay seen at a rejected step."""
    sys, pals, basis, _, mu1 = problem
    d = residual_diagnostics(sys, basis, mu1, adjoint=False).per_frequency[0]
    ratios = []
    for r in range(1, 6):
        trial = basis.snapshot()
        trial.extend(sys.solve(0.0, mu1, d.U[:, :r]))
        ratios.append(residual_diagnostics(sys, trial, mu1, adjoint=False).eta_norms[0] / d.eta_norm)
    assert np.all(np.diff(ratios) <= 1e-12)
    assert ratios[-1] <= 1e-8


def test_residual_bound_with_dense_kappa(rng):
    sys = make_system(13, n_src=3, n_det=3, frequencies=(0.0, 0.6))
    pals = make_pals(sys)
    basis = build_basis(sys, [field(sys, pals, random_params(pals, rng))])
    rs = project(sys, basis)
    data = full_misfit(sys, field(sys, pals, random_params(pals, rng)), np.zeros((3, 6))).M
    for _ in range(10):
        mu = field(sys, pals, random_params(pals, rng))
        kappa = max(np.linalg.norm(sys.C.T @ np.linalg.inv(sys.operator(w, mu).toarray()))
                    for w in sys.frequencies)
        H = np.hstack(projection_residuals(sys, basis, mu))
        gap = abs(full_misfit(sys, mu, data).norm - reduced_misfit(rs, mu, data).norm)
        assert gap <= kappa * np.linalg.norm(H) * (1 + 1e-10)

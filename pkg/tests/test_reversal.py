import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmp_reversal.model import mirror_model
from pdmp_reversal.reversal import (
    TestFunction,
    adjoint_check,
    adjoint_report,
    adjoint_residual,
    default_battery,
    derive_reversed,
    double_reversal,
    duality_residual,
    kernel_normalization_report,
    left_continuation_residual,
    reversed_intensity_derivative,
    reversed_intensity_kernel_ratio,
    route_gap,
    sign_diagnostic,
)
from pdmp_reversal.stationary import solve_stationary_grid
from pdmp_reversal.zoo import tcp_reversed_intensity, zoo_build, zoo_spec


def _on(x, lo, hi):
    return (x >= lo) & (x <= hi)


def test_tcp_reversed_intensity_both_routes(tcp):
    x = tcp.density.grid
    sel = _on(x, 0.1, 8.0)
    kr = reversed_intensity_kernel_ratio(tcp.model, tcp.density)
    dv = reversed_intensity_derivative(tcp.model, tcp.density)
    want = 1 / x[sel]
    assert np.max(np.abs(kr[sel] - want)) < 1e-4
    assert np.max(np.abs(dv[sel] - want)) < 1e-4
    assert np.allclose(tcp.rev.lambda_star[sel], kr[sel])


def test_tcp_reversed_kernel_is_exponential_shift(tcp):
    # mu*_x has density e^{-(y - x)} on y > x
    x = tcp.density.grid
    K = tcp.rev.kernel_star
    for i in np.flatnonzero(_on(x, 0.5, 4.0))[::40]:
        above = x > x[i]
        assert np.max(np.abs(K[i, above] - np.exp(-(x[above] - x[i])))) < 1e-5
        assert np.max(np.abs(K[i, x < x[i]])) < 1e-12


@settings(max_examples=4, deadline=None)
@given(alpha=st.floats(0.0, 0.5), beta=st.floats(0.0, 1.0), dg=st.floats(1.0, 2.0))
def test_tcp_family_reversed_intensity(alpha, beta, dg):
    p = {"alpha": alpha, "beta_exp": beta, "g": alpha + dg}
    spec = zoo_spec("tcp", p)
    m = zoo_build(spec)
    d = solve_stationary_grid(m, n_nodes=768)
    x = d.grid
    a, b = d.quantile(np.array([0.01, 0.99]))
    sel = _on(x, a, b)
    want = tcp_reversed_intensity(spec.params, x)
    lam = reversed_intensity_kernel_ratio(m, d)
    assert np.max(np.abs(lam - want)[sel] / want[sel]) < 1e-4


def test_renewal_reverses_to_a_pure_boundary_process(renewal):
    rev = renewal.rev
    x = renewal.density.grid
    assert np.nanmax(np.abs(rev.lambda_star)) <= 1e-6
    (loc, rate), = rev.sigma_star
    assert loc == 0.0 and rate == pytest.approx(1.0, abs=1e-6)
    dens, pts = rev.boundary_kernel_star[0.0]
    assert renewal.density.quad.full @ np.abs(dens - np.exp(-x)) < 1e-3
    assert not pts


def test_mg1_reversed_intensity(mg1):
    x = mg1.density.grid
    sel = _on(x, 0.05, 6.0)
    assert np.max(np.abs(mg1.rev.lambda_star - 2.0)[sel]) < 1e-3


def test_mg1_reversed_jumps_land_on_the_atom(mg1):
    # reversed jumps from x > 0 go down by Exp(1) or land on 0 with probability e^{-x}
    x = mg1.density.grid
    hit = mg1.rev.point_jump_star[0.0]
    sel = _on(x, 0.2, 5.0)
    assert np.max(np.abs(hit - np.exp(-x))[sel]) < 1e-4


def test_kernel_rows_are_probabilities(zoo_case):
    assert kernel_normalization_report(zoo_case.rev).max_abs < 1e-6


def test_duality(zoo_case):
    rep = duality_residual(zoo_case.model, zoo_case.density, rev=zoo_case.rev)
    assert rep.max_abs < 1e-5
    assert rep.details["l1_piQ_piWstar"] < 1e-4
    assert rep.details["l1_piW_piQstar"] < 1e-4


def test_adjoint_catches_a_perturbed_density(tcp):
    # duality holds for any density by construction; the adjoint identity does not
    d = solve_stationary_grid(tcp.model, n_nodes=1536, tail=1e-14)
    d.values = d.values * (1 + 0.01 * np.sin(d.grid))
    d.values = d.values / (d.quad.full @ d.values)
    assert adjoint_report(tcp.model, d).max_rel > 1e-3
    assert left_continuation_residual(tcp.model, d).max_rel > 1e-3


@pytest.mark.parametrize("name", ["tcp", "renewal_age"])
def test_adjoint_identity(name):
    rep = adjoint_check(zoo_build(name))
    assert rep.max_rel < 1e-6
    assert len(rep.details["pairs"]) == len(default_battery()) ** 2


def test_adjoint_constants_give_zero(zoo_case):
    one = TestFunction("1", lambda u: np.ones_like(u), lambda u: np.zeros_like(u))
    rel, lhs, rhs = adjoint_residual(zoo_case.model, zoo_case.density, one, one, rev=zoo_case.rev)
    assert abs(lhs) < 1e-6 and abs(rhs) < 1e-6


def test_left_continuation_identity(zoo_case):
    if not zoo_case.model.increasing:
        pytest.skip("identity stated for increasing flows")
    assert left_continuation_residual(zoo_case.model, zoo_case.density, rev=zoo_case.rev).max_rel < 1e-5


def test_reversing_twice_recovers_the_model(zoo_case):
    rep = double_reversal(zoo_case.model, zoo_case.density, rev=zoo_case.rev)
    assert rep.details["lambda_gap"] < 1e-4
    assert rep.details["kernel_gap"] < 1e-4


def test_routes_agree_and_signs_match(zoo_case):
    assert route_gap(zoo_case.model, zoo_case.density, rev=zoo_case.rev).max_rel < 1e-3
    assert sign_diagnostic(zoo_case.model, zoo_case.density, rev=zoo_case.rev).nodes_flagged == 0


def test_mirror_commutes_with_reversal(tcp):
    mir = mirror_model(tcp.model)
    d = solve_stationary_grid(mir)
    rev = derive_reversed(mir, d)
    y = d.grid
    sel = _on(-y, 0.1, 8.0)
    assert np.max(np.abs(rev.lambda_star[sel] + 1 / y[sel])) < 1e-4
    assert math.isclose(d.mass(), 1.0, abs_tol=1e-12)


def test_flipped_sign_variant_is_wrong_for_mg1(mg1):
    # lambda + nu''/nu' would give 1 - 1 = 0 instead of the oracle value 2
    rep = route_gap(mg1.model, mg1.density, rev=mg1.rev)
    assert rep.details["flipped_sign_gap"] == pytest.approx(2.0, abs=1e-3)

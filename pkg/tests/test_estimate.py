import json
from fractions import Fraction

import numpy as np
import pytest

from pdmp_reversal.estimate import (
    CompareConfig,
    IntensityEstimate,
    compare_reversed,
    effective_sample_size,
    estimate_boundary_rate,
    estimate_intensity,
    estimate_kernel,
    realized_compensator,
    reversed_conditional_cdf,
)
from pdmp_reversal.reversal import derive_reversed
from pdmp_reversal.simulate import reverse_path, simulate_batch
from pdmp_reversal.stationary import solve_stationary_grid
from pdmp_reversal.zoo import tcp_reversed_survival, zoo_build, zoo_spec


@pytest.fixture
def tcp_paths(tcp):
    if not hasattr(tcp, "paths"):
        tcp.paths = simulate_batch(tcp.model, 40, 200.0, seed=31, density=tcp.density)
    return tcp.paths


def test_unit_intensity_is_recovered(tcp, tcp_paths):
    # lambda = 1 everywhere for the default tcp model
    edges = tcp.density.quantile(np.linspace(0.02, 0.98, 9))
    est = estimate_intensity(tcp_paths, edges, level=0.01 / 8)
    lo, hi = est.ci()
    assert np.all(est.occupied)
    assert np.all((lo <= 1.0) & (1.0 <= hi))


def test_ci_width_halves_when_exposure_quadruples():
    edges = np.array([0.0, 1.0])
    a = IntensityEstimate(edges, np.array([100]), [Fraction(100)])
    b = IntensityEstimate(edges, np.array([400]), [Fraction(400)])
    wa = np.diff(np.ravel(a.ci()))[0]
    wb = np.diff(np.ravel(b.ci()))[0]
    assert wb / wa == pytest.approx(0.5, abs=0.01)
    assert a.rate[0] == b.rate[0] == 1.0


def test_zero_count_ci():
    est = IntensityEstimate(np.array([0.0, 1.0]), np.array([0]), [Fraction(10)])
    lo, hi = est.ci()
    assert lo[0] == 0.0 and hi[0] == pytest.approx(-np.log(0.005) / 10, rel=1e-9)


def test_merge_is_exact_and_associative(tcp_paths):
    edges = np.linspace(0, 6, 13)
    parts = [estimate_intensity([t], edges) for t in tcp_paths[:6]]
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[0].merge(parts[1].merge(parts[2]))
    assert left.occupation == right.occupation
    assert np.array_equal(left.counts, right.counts)
    whole = estimate_intensity(tcp_paths[:6], edges)
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    assert acc.occupation == whole.occupation and np.array_equal(acc.counts, whole.counts)


def test_merge_rejects_other_cells():
    a = IntensityEstimate(np.array([0.0, 1.0]), np.array([1]), [Fraction(1)])
    b = IntensityEstimate(np.array([0.0, 2.0]), np.array([1]), [Fraction(1)])
    with pytest.raises(ValueError):
        a.merge(b)


def test_no_boundary_means_zero_rate(tcp_paths):
    br = estimate_boundary_rate(tcp_paths)
    assert br.count == 0 and br.rate == 0.0 and br.by_location == {}


def test_saturating_boundary_rate(saturating):
    trs = simulate_batch(saturating.model, 40, 100.0, seed=5, density=saturating.density)
    br = estimate_boundary_rate(trs)
    assert abs(br.rate - 2.0) < 4 * br.per_path_se
    assert br.ci[0] < br.rate < br.ci[1]
    assert list(br.by_location) == [2.0]


def test_kernel_histogram_rows(tcp, tcp_paths):
    edges = np.linspace(0, 8, 9)
    k = estimate_kernel(tcp_paths, edges)
    rows = k.rows[k.counts.sum(axis=1) > 0]
    assert np.allclose(rows.sum(axis=1), 1.0)
    # forward jumps only go down
    assert np.all(np.triu(k.counts, 1) == 0)


def test_realized_compensator_matches_counts(tcp, tcp_paths):
    rev = tcp.rev
    edges = tcp.density.quantile(np.linspace(0.05, 0.95, 6))
    rts = [reverse_path(t) for t in tcp_paths]
    comp = realized_compensator(rts, edges, rev)
    counts = estimate_intensity(rts, edges).counts
    z = (counts - comp) / np.sqrt(comp)
    assert np.max(np.abs(z)) < 3.5


def test_reversed_cdf_tcp(tcp):
    x = np.array([0.5, 1.0, 2.0, 2.0])
    y = np.array([0.7, 3.0, 2.5, 1.0])
    before, at = reversed_conditional_cdf(tcp.rev, x, y)
    want = np.where(y > x, -np.expm1(-(y - x)), 0.0)
    assert np.allclose(at, want, atol=3e-5)  # nu' is interpolated linearly
    assert np.allclose(before, at)


def test_reversed_cdf_tcp_weibull_type():
    # lambda = x, r = 1: the reversed jump from x survives past y with prob exp((x^2 - y^2)/2)
    spec = zoo_spec("tcp", {"beta_exp": 1.0})
    m = zoo_build(spec)
    rev = derive_reversed(m, solve_stationary_grid(m))
    x = np.array([0.5, 1.0, 1.5, 2.0])
    y = np.array([1.0, 1.8, 2.5, 3.0])
    _, at = reversed_conditional_cdf(rev, x, y)
    assert np.allclose(at, 1.0 - tcp_reversed_survival(spec.params, x, y), atol=1e-4)
    assert np.allclose(at, -np.expm1((x**2 - y**2) / 2), atol=1e-4)


def test_reversed_cdf_has_point_mass_for_mg1(mg1):
    before, at = reversed_conditional_cdf(mg1.rev, np.array([1.0]), np.array([0.0]))
    assert at[0] - before[0] == pytest.approx(np.exp(-1.0), abs=1e-4)


def test_effective_sample_size():
    rng = np.random.default_rng(0)
    iid = [rng.normal(size=5000) for _ in range(4)]
    assert effective_sample_size(iid) == pytest.approx(20000, rel=0.1)
    ar = []
    for _ in range(4):
        e = rng.normal(size=5000)
        s = np.empty_like(e)
        s[0] = e[0]
        for i in range(1, len(e)):
            s[i] = 0.5 * s[i - 1] + e[i]
        ar.append(s)
    # tau = (1 + phi) / (1 - phi) = 3
    assert effective_sample_size(ar) == pytest.approx(20000 / 3, rel=0.15)


def test_compare_reversed_small_run(tcp, tcp_paths):
    reports = compare_reversed(tcp_paths, tcp.rev)
    assert {r.target for r in reports} >= {"lambda_star", "kernel_star"}
    assert all(r.passed for r in reports), [(r.target, r.value, r.critical_value) for r in reports]
    blob = json.dumps([r.to_json() for r in reports])
    assert '"pass": true' in blob


def test_inflated_intensity_is_rejected(tcp, tcp_paths):
    reports = compare_reversed(tcp_paths, tcp.rev, CompareConfig(lambda_scale=1.2))
    lam = next(r for r in reports if r.target == "lambda_star")
    assert not lam.passed

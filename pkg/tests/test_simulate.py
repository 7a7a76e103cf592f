import json
import math

import numpy as np
import pytest
from scipy import stats

from pdmp_reversal.errors import ExplosionError
from pdmp_reversal.estimate import effective_sample_size
from pdmp_reversal.simulate import (
    FORCED,
    JUMP,
    JumpEvent,
    Trajectory,
    merge_occupations,
    occupation_measure,
    read_trajectory,
    reverse_path,
    sample_states,
    simulate_batch,
    simulate_path,
    trajectory_csv,
    trajectory_meta,
)
from pdmp_reversal.zoo import zoo_build


def test_same_seed_same_path(tcp):
    a = simulate_path(tcp.model, 1.0, 50.0, seed=7)
    b = simulate_path(tcp.model, 1.0, 50.0, seed=7)
    c = simulate_path(tcp.model, 1.0, 50.0, seed=8)
    assert a == b and a != c


def test_threads_do_not_change_batch(mg1):
    one = simulate_batch(mg1.model, 6, 30.0, seed=3, density=mg1.density, threads=1)
    many = simulate_batch(mg1.model, 6, 30.0, seed=3, density=mg1.density, threads=4)
    assert one == many


def test_stationary_init_needs_density(tcp):
    with pytest.raises(ValueError):
        simulate_path(tcp.model, "stationary", 1.0, seed=0)
    with pytest.raises(ValueError):
        simulate_path(tcp.model, 1.0, 0.0, seed=0)


def test_explosion_guard(tcp):
    with pytest.raises(ExplosionError):
        simulate_path(tcp.model, 1.0, 1000.0, seed=0, max_events=5)


def test_reverse_event_example():
    tr = Trajectory(start_state=1.0, end_state=4.0, horizon=10.0,
                    events=(JumpEvent(3.0, 5.0, 2.0, JUMP),), passive_boundary=0.0)
    rv = reverse_path(tr)
    assert rv.events == (JumpEvent(7.0, 2.0, 5.0, JUMP),)
    assert (rv.start_state, rv.end_state, rv.reversed) == (4.0, 1.0, True)


def test_reversed_jump_onto_passive_end_is_forced(renewal):
    tr = simulate_path(renewal.model, 0.3, 20.0, seed=1)
    rv = reverse_path(tr)
    assert all(e.kind == FORCED for e in rv.events)  # every renewal lands on 0
    assert all(e.pre == 0.0 for e in rv.events)


@pytest.mark.parametrize("name", ["tcp", "mg1", "saturating"])
def test_reverse_is_an_involution(request, name):
    s = request.getfixturevalue(name)
    tr = simulate_path(s.model, "stationary", 40.0, seed=11, density=s.density)
    back = reverse_path(reverse_path(tr))
    assert back.start_state == tr.start_state and back.end_state == tr.end_state
    assert back.reversed == tr.reversed and len(back.events) == len(tr.events)
    for e, f in zip(back.events, tr.events):
        assert (e.pre, e.post, e.kind) == (f.pre, f.post, f.kind)
        assert e.time == pytest.approx(f.time, abs=4 * math.ulp(tr.horizon))
    for a, b in zip(back.atom_intervals, tr.atom_intervals):
        assert np.allclose(a, b, atol=4 * math.ulp(tr.horizon))


def test_occupation_example(tcp):
    # r = 1 with no events: [0.5, 2.5] is crossed at unit speed
    tr = Trajectory(0.5, 2.5, 2.0, (), model=tcp.model)
    occ = occupation_measure(tr, np.array([0.0, 1.0, 2.0, 3.0]))
    assert np.allclose(occ.times, [0.5, 1.0, 0.5])
    assert occ.outside == 0.0


def test_occupation_saturating_example(saturating):
    # from 0 the flow 4 - 4e^-t needs ln(4/3) to reach 1
    tr = Trajectory(0.0, 4 - 4 * math.exp(-0.5), 0.5, (), model=saturating.model)
    occ = occupation_measure(tr, np.array([0.0, 1.0, 2.0]))
    assert occ.times[0] == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert occ.times.sum() + occ.outside == pytest.approx(0.5)


def test_occupation_accounts_for_all_time(mg1):
    trs = simulate_batch(mg1.model, 5, 100.0, seed=2, density=mg1.density)
    edges = np.linspace(0, 3, 13)
    occ = merge_occupations(occupation_measure(t, edges) for t in trs)
    assert occ.times.sum() + occ.outside + sum(occ.atoms.values()) == pytest.approx(occ.total, rel=1e-12)


def test_merge_is_order_independent(tcp):
    trs = simulate_batch(tcp.model, 6, 40.0, seed=4, density=tcp.density)
    edges = np.linspace(0, 6, 25)
    parts = [occupation_measure(t, edges) for t in trs]
    a = merge_occupations(parts)
    b = merge_occupations(parts[::-1])
    assert np.array_equal(a.times, b.times) and a.total == b.total


def test_csv_round_trip(mg1):
    tr = simulate_path(mg1.model, "stationary", 30.0, seed=5, density=mg1.density)
    meta = json.loads(json.dumps(trajectory_meta(tr)))
    back = read_trajectory(trajectory_csv(tr), meta, model=mg1.model)
    assert back == tr


def test_csv_rejects_unknown_kind():
    with pytest.raises(ValueError):
        read_trajectory("t,kind,pre,post\n1,teleport,0,1\n", {"start_state": 0, "end_state": 0, "horizon": 2})


def test_renewal_jump_rate():
    m = zoo_build("renewal_age")
    trs = simulate_batch(m, 20, 200.0, seed=9, init=0.0)
    n = sum(len(t.events) for t in trs)
    # Exp(1) renewals form a Poisson(1) stream
    assert abs(n - 4000) < 4 * math.sqrt(4000)


def test_forced_probability_from_zero(saturating):
    # no jump during the ln 2 it takes to reach gamma: probability e^-ln2 = 1/2
    n = 4000
    forced = 0
    for tr in simulate_batch(saturating.model, n, 1.0, seed=21, init=0.0):
        forced += tr.events[0].kind == FORCED if tr.events else 0
    assert abs(forced / n - 0.5) < 4 * math.sqrt(0.25 / n)


def test_occupation_converges_to_stationary_law(tcp):
    trs = simulate_batch(tcp.model, 40, 250.0, seed=13, density=tcp.density)
    series = [sample_states(t, np.arange(0.5, 250.0, 0.5)) for t in trs]
    n_eff = effective_sample_size(series)
    ks = stats.kstest(np.concatenate(series), lambda v: 1 - (1 + v) * np.exp(-v)).statistic
    assert ks < stats.kstwo.isf(0.001, int(n_eff))


def test_sample_states_on_reversed_path(tcp):
    tr = simulate_path(tcp.model, 1.0, 20.0, seed=3)
    rv = reverse_path(tr)
    t = np.array([0.3, 5.5, 11.1])
    assert np.allclose(sample_states(rv, t), sample_states(tr, 20.0 - t))


def test_atom_occupancy_matches_mass(mg1):
    trs = simulate_batch(mg1.model, 20, 300.0, seed=17, density=mg1.density)
    occ = merge_occupations(occupation_measure(t, np.array([0.0, 1.0])) for t in trs)
    frac = occ.atoms[0.0] / occ.total
    assert frac == pytest.approx(0.5, abs=0.03)

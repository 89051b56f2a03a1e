import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwfloer.measure_lab import (EmpiricalMeasure, GridMismatch, accumulate, action_of_measure,
                                 axis_distances, dirac_measure, grid_bound, measure_distance, read_measure,
                                 tightness_report, write_marginals_csv, write_measure)
from rwfloer.orbit_solver import find_orbit_family, solve_ensemble
from rwfloer.sample_space import make_walk, sample_coins
from rwfloer.torus_phase import HamiltonianSpec, pendulum

BINS = (8, 16, 16)
P = 4.0


@pytest.fixture(scope="module")
def ens():
    return solve_ensemble(pendulum(), 0.3, 32, 4, 40, steps=1, seeding="averaged")


def test_slices_are_probability_measures_and_periodic(ens):
    m = accumulate(ens, BINS, label="1-", P=grid_bound(ens.spec, ens.sigma))
    np.testing.assert_allclose(m.mass.sum(axis=(1, 2)), 1.0, atol=1e-14)
    assert np.array_equal(m.mass[0], m.mass[-1])
    assert np.all(m.mass >= 0)


def test_accumulate_independent_of_chunk(ens):
    Pb = grid_bound(ens.spec, ens.sigma)
    a = accumulate(ens, BINS, label="1+", P=Pb, chunk=7)
    b = accumulate(ens, BINS, label="1+", P=Pb, chunk=1000)
    assert np.array_equal(a.mass, b.mass)


def test_orbit_list_matches_ensemble():
    spec = pendulum()
    orbits = []
    for i in range(3):
        fam = find_orbit_family(spec, make_walk(sample_coins(32, 1, 4, i)), 0.3, steps=1, seeding="averaged")
        orbits.append(fam.labeled["1-"])
    e = solve_ensemble(spec, 0.3, 32, 4, 3, steps=1, seeding="averaged")
    Pb = grid_bound(spec, 0.3)
    a = accumulate(orbits, BINS, label="1-", P=Pb, spec=spec, sigma=0.3)
    b = accumulate(e, BINS, label="1-", P=Pb)
    np.testing.assert_allclose(a.mass, b.mass, atol=1e-15)


points = st.tuples(st.floats(0, 0.999), st.floats(-3.9, 3.9))


@given(a=points, b=points, c=points)
@settings(max_examples=40, deadline=None)
def test_distance_is_a_pseudometric(a, b, c):
    ma, mb, mc = (dirac_measure(x, 1, P, BINS) for x in (a, b, c))
    assert measure_distance(ma, ma) == 0.0
    assert measure_distance(ma, mb) == pytest.approx(measure_distance(mb, ma), abs=1e-15)
    assert measure_distance(ma, mc) <= measure_distance(ma, mb) + measure_distance(mb, mc) + 1e-12


def test_distance_of_shifted_diracs():
    dp = 2 * P / BINS[2]
    a = dirac_measure([0.1, 0.5 * dp], 1, P, BINS)
    b = dirac_measure([0.1, 4.5 * dp], 1, P, BINS)
    assert measure_distance(a, b) == pytest.approx(4 * dp)


def test_circle_distance_wraps():
    dq = 1 / BINS[1]
    a = dirac_measure([0.5 * dq, 0.0], 1, P, BINS)
    b = dirac_measure([1 - 0.5 * dq, 0.0], 1, P, BINS)
    assert axis_distances(a, b)[:, 0] == pytest.approx(dq)


def test_grid_mismatch():
    a = dirac_measure([0.1, 0.0], 1, P, BINS)
    b = dirac_measure([0.1, 0.0], 1, P, (8, 16, 32))
    with pytest.raises(GridMismatch):
        measure_distance(a, b)


def test_binary_roundtrip(tmp_path, ens):
    m = accumulate(ens, BINS, label="1-", P=grid_bound(ens.spec, ens.sigma))
    write_measure(m, tmp_path / "m.rwfm")
    back = read_measure(tmp_path / "m.rwfm")
    assert np.array_equal(back.mass, m.mass) and back.P == m.P and back.meta == m.meta
    write_marginals_csv(m, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").stat().st_size > 0


def test_free_action_of_measure():
    e = solve_ensemble(HamiltonianSpec(1), 0.5, 64, 1, 400, seeds_per_axis=1)
    m = accumulate(e, (8, 16, 128), label="1-", P=grid_bound(e.spec, 0.5))
    ref = float(np.nanmean(e.action["1-"]))
    assert action_of_measure(m, e.spec) == pytest.approx(ref, abs=0.02)


def test_tightness_report_fields(ens):
    rep = tightness_report(ens, "1-", 0.25, quantiles=(0.5, 0.99))
    assert rep["M"] == int(ens.valid("1-").sum())
    assert rep["c0"]["0.99"] >= rep["c0"]["0.5"] > 0


def test_rejects_three_dimensions():
    with pytest.raises(ValueError):
        dirac_measure([0.1] * 6, 3, P, BINS)

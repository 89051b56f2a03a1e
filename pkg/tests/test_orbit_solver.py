import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwfloer.orbit_solver import (FamilyCollapse, find_orbit_family, integrate_flow, label_positions,
                                  legendre_action, load_ensemble, newton_closed_orbit, orbit_labels,
                                  save_ensemble, shoot_residual, solve_ensemble, symplectic_action)
from rwfloer.sample_space import make_walk, sample_coins
from rwfloer.torus_phase import HamiltonianSpec, pendulum, product_cosine

FREE = HamiltonianSpec(1)


@given(n=st.sampled_from([4, 16, 64, 256]), sigma=st.floats(0, 2), index=st.integers(0, 10**5),
       q0=st.floats(0, 1))
@settings(max_examples=25, deadline=None)
def test_free_orbits_closed_form(n, sigma, index, q0):
    w = make_walk(sample_coins(n, 1, 7, index))
    orb = newton_closed_orbit(FREE, w, sigma, [q0, 0.0], with_path=False)
    s1 = sigma * w.end[0]
    assert orb.z0[1] == pytest.approx(s1, abs=1e-12)
    assert orb.action == pytest.approx(0.5 * s1**2, abs=1e-10)
    assert orb.newton_residual < 1e-10


@given(n=st.sampled_from([3, 8, 32]), sigma=st.floats(0, 2), p0=st.floats(-3, 3), q0=st.floats(-1, 1))
@settings(max_examples=20, deadline=None)
def test_free_shortcut_matches_rk4(n, sigma, p0, q0):
    # a vanishing perturbation forces the generic RK4 loop
    tiny = HamiltonianSpec(1, ({"k": (1,), "a": 1e-300},))
    w = make_walk(sample_coins(n, 1, 3, 0))
    fast = integrate_flow(FREE, w, sigma, [q0, p0])
    slow = integrate_flow(tiny, w, sigma, [q0, p0])
    np.testing.assert_allclose(fast.z, slow.z, atol=1e-12)
    assert fast.t.tolist() == slow.t.tolist()


def test_pendulum_without_noise_has_equilibria():
    w = make_walk(sample_coins(32, 1, 0))
    fam = find_orbit_family(pendulum(), w, 0.0, steps=4)
    acts = sorted(o.action for o in fam.orbits)
    assert len(acts) == 2
    assert acts == pytest.approx([-0.1, 0.1], abs=1e-10)
    lo = fam.labeled["1-"].z0
    assert min(lo[0] % 1.0, 1 - lo[0] % 1.0) < 1e-8


def test_rk4_self_convergence_order():
    spec = pendulum()
    w = make_walk(sample_coins(8, 1, 3))
    for z0 in ([0.2, 0.5], [0.7, -1.0]):
        # trajectories compared on the coarsest nodes; finest pair gives the order
        tr = [integrate_flow(spec, w, 0.3, z0, 8 * m).z[::m // 8] for m in (8, 16, 32)]
        e1, e2 = (np.abs(a - b).max() for a, b in zip(tr, tr[1:]))
        assert np.log2(e1 / e2) >= 3.9


def test_three_action_quadratures_agree():
    spec = pendulum()
    w = make_walk(sample_coins(16, 1, 5))
    fam = find_orbit_family(spec, w, 0.3, steps=4, substeps=32)
    for orb in fam.orbits:
        fine = newton_closed_orbit(spec, w, 0.3, orb.z0, substeps=16 * 64, with_path=False)
        flow_action = fine.action
        path = integrate_flow(spec, w, 0.3, fine.z0, 16 * 64)
        assert symplectic_action(path, spec, w, 0.3) == pytest.approx(flow_action, abs=1e-8)
        assert legendre_action(path, spec, w, 0.3) == pytest.approx(flow_action, abs=1e-8)


def test_orbit_closes_with_twist():
    spec = pendulum()
    w = make_walk(sample_coins(64, 1, 2))
    orb = newton_closed_orbit(spec, w, 0.3, [0.0, 0.3 * w.end[0]])
    z = orb.path.z
    assert z[-1, 0] - z[0, 0] == pytest.approx(0.3 * w.end[0], abs=1e-10)
    assert z[-1, 1] == pytest.approx(z[0, 1], abs=1e-10)
    assert np.abs(shoot_residual(spec, w, 0.3, orb.z0)).max() < 1e-10


def test_labels_cover_chain():
    assert orbit_labels(1) == ["1-", "1+"]
    assert orbit_labels(2) == ["1-", "1+", "2-", "2+"]
    assert label_positions(2, 1) == [0, 1]
    pos = label_positions(8, 2)
    assert pos[0] == 0 and pos[-1] == 7 and sorted(pos) == pos


def test_family_collapse_when_seeds_cannot_split():
    w = make_walk(sample_coins(16, 1, 1))
    with pytest.raises(FamilyCollapse):
        find_orbit_family(pendulum(), w, 0.3, steps=2, seeds_per_axis=1)


def test_free_family_is_morse_bott():
    w = make_walk(sample_coins(16, 1, 4))
    fam = find_orbit_family(FREE, w, 0.5, steps=2, seeds_per_axis=4)
    assert fam.morse_bott
    acts = [o.action for o in fam.orbits]
    assert np.ptp(acts) < 1e-12


def test_averaged_and_grid_seeding_agree():
    a = solve_ensemble(pendulum(), 0.3, 64, 5, 12, steps=1, seeding="averaged")
    g = solve_ensemble(pendulum(), 0.3, 64, 5, 12, steps=16, seeding="grid")
    both = (a.count >= 2) & (g.count >= 2)
    assert both.sum() >= 10
    for lab in a.action:
        np.testing.assert_allclose(a.action[lab][both], g.action[lab][both], atol=1e-9)


def test_product_cosine_family_in_two_dimensions():
    e = solve_ensemble(product_cosine(), 0.3, 32, 1, 3, steps=1, seeding="averaged")
    for row in range(3):
        acts = [e.action[lab][row] for lab in e.action]
        assert np.all(np.diff(acts) >= 0)
        assert e.count[row] >= 3


def test_ensemble_chunk_independent_and_roundtrip(tmp_path):
    a = solve_ensemble(pendulum(), 0.3, 32, 9, 10, steps=1, seeding="averaged", chunk=3)
    b = solve_ensemble(pendulum(), 0.3, 32, 9, 10, steps=1, seeding="averaged", chunk=10)
    for lab in a.z0:
        assert np.array_equal(a.z0[lab], b.z0[lab], equal_nan=True)
    path = tmp_path / "e.jsonl"
    save_ensemble(a, path)
    c = load_ensemble(path)
    for lab in a.z0:
        assert np.array_equal(a.z0[lab], c.z0[lab], equal_nan=True)
        assert np.array_equal(a.action[lab], c.action[lab], equal_nan=True)
    assert c.spec == a.spec and c.n == a.n and np.array_equal(c.count, a.count)
    save_ensemble(c, tmp_path / "f.jsonl")
    assert path.read_bytes() == (tmp_path / "f.jsonl").read_bytes()

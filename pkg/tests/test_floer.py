import numpy as np
import pytest

from rwfloer.floer import (FloerCylinder, _Grid, cylinder_energy, discrete_orbit, end_projections,
                           floer_residual, solve_cylinder, tau_profile)
from rwfloer.orbit_solver import find_orbit_family
from rwfloer.sample_space import make_walk, sample_coins
from rwfloer.torus_phase import HamiltonianSpec, choose_R, pendulum, product_cosine

FREE = HamiltonianSpec(1)


def _manufactured(S, Ns, Nt):
    s = np.linspace(-S, S, Ns + 1)[:, None]
    t = (np.arange(Nt + 1) / Nt)[None, :]
    U = np.empty((Ns + 1, Nt + 1, 2))
    U[..., 0] = 0.1 * np.tanh(s) + 0.05 * np.sin(2 * np.pi * t) / np.cosh(s)
    U[..., 1] = 0.1 * np.cos(2 * np.pi * t) / np.cosh(s)
    return U


def _exact_defect(S, Ns, Nt):
    """Continuous defect of the manufactured field at the cell midpoints (free K, sigma = 0)."""
    s = np.linspace(-S, S, Ns + 1)
    s = (0.5 * (s[1:] + s[:-1]))[:, None]
    t = (np.arange(Nt) / Nt)[None, :]
    sech, th = 1 / np.cosh(s), np.tanh(s)
    c, sn = np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)
    dsQ = 0.1 * sech**2 - 0.05 * sn * sech * th
    dtP = -0.2 * np.pi * sn * sech
    dtQ = 0.1 * np.pi * c * sech
    dsP = -0.1 * c * sech * th
    P = 0.1 * c * sech
    return np.stack([dsQ + dtP, dsP - dtQ + P], axis=-1)


def test_manufactured_solution_second_order():
    w = make_walk(sample_coins(8, 1, 0))
    errs = []
    for k in (1, 2, 4):
        Ns, Nt = 40 * k, 16 * k
        r = floer_residual(_manufactured(3.0, Ns, Nt), FREE, w, 0.0, tau=10.0, S=3.0)
        errs.append(np.abs(r - _exact_defect(3.0, Ns, Nt)).max())
    orders = [np.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(orders) > 1.9


def test_s_independent_orbit_is_a_solution():
    spec = pendulum()
    w = make_walk(sample_coins(64, 1, 3))
    fam = find_orbit_family(spec, w, 0.3, steps=1, with_paths=False, seeding="averaged")
    R = choose_R(w, 0.3, spec).R
    g = _Grid(spec, w, 0.3, 4.0, 20, 33, R)
    u = np.zeros((33, 2))
    u[:, 0] = fam.labeled["1-"].z0[0] + 0.3 * w.end[0] * g.t[:-1]
    u[:, 1] = fam.labeled["1-"].z0[1]
    u, res = discrete_orbit(g, u)
    assert res < 1e-10
    U = g.full(np.tile(u.reshape(-1), 21))
    assert np.abs(floer_residual(U, spec, w, 0.3, tau=10.0, S=4.0, R=R)).max() < 1e-10
    cyl = FloerCylinder(g.s, g.t, U, 4.0, 10.0, w.coins, 0.3, R)
    assert cylinder_energy(cyl) == 0.0


def test_end_conditions_count():
    spec = pendulum()
    w = make_walk(sample_coins(64, 1, 3))
    R = choose_R(w, 0.0, spec).R
    g = _Grid(spec, w, 0.0, 4.0, 20, 17, R)
    left, _ = discrete_orbit(g, np.zeros((17, 2)))
    right, _ = discrete_orbit(g, np.tile([0.5, 0.0], (17, 1)))
    Bm, Bp, info = end_projections(g, left, right)
    assert Bm.shape[0] + Bp.shape[0] == 2 * 17 - 1
    assert info["spectrum_gap_minus"] > 0.5


def test_pendulum_heteroclinic_energy():
    w = make_walk(sample_coins(64, 1, 0))
    cyl = solve_cylinder(pendulum(), w, 0.0, S=8.0, Ns=200, Nt=33)
    assert cyl.residual_norm < 1e-8
    assert cyl.energy == pytest.approx(0.2, rel=0.05)
    # twisted boundary is imposed exactly (sigma = 0: plain periodicity)
    assert np.array_equal(cyl.U[:, -1], cyl.U[:, 0])
    # qbar runs from the q = 0 equilibrium to a q = +-1/2 one
    assert abs(cyl.U[0, 0, 0]) < 1e-6 and abs(abs(cyl.U[-1, 0, 0]) - 0.5) < 1e-6


def test_grid_refinement_changes_energy_little():
    w = make_walk(sample_coins(64, 1, 0))
    coarse = solve_cylinder(pendulum(), w, 0.0, S=8.0, Ns=100, Nt=17)
    fine = solve_cylinder(pendulum(), w, 0.0, S=8.0, Ns=200, Nt=33)
    assert abs(fine.energy - coarse.energy) < 0.01 * fine.energy


def test_noisy_cylinder_energy_below_gap():
    w = make_walk(sample_coins(64, 1, 2))
    cyl = solve_cylinder(pendulum(), w, 0.3, S=8.0, Ns=200, Nt=65)
    gap = cyl.ends["action_plus"] - cyl.ends["action_minus"]
    assert cyl.residual_norm < 1e-8
    assert 1e-3 <= cyl.energy <= gap + 1e-3
    twist = 0.3 * w.end[0]
    np.testing.assert_allclose(cyl.U[:, -1, 0] - cyl.U[:, 0, 0], twist, atol=1e-15)
    np.testing.assert_array_equal(cyl.U[:, -1, 1], cyl.U[:, 0, 1])


def test_free_cylinder_is_constant():
    w = make_walk(sample_coins(32, 1, 6))
    cyl = solve_cylinder(FREE, w, 0.4, S=4.0, Ns=40, Nt=17)
    assert cyl.energy == 0.0
    assert cyl.residual_norm < 1e-12
    assert cyl.ends["degenerate"]


def test_guards():
    w = make_walk(sample_coins(32, 1, 6))
    with pytest.raises(ValueError):
        solve_cylinder(pendulum(), w, 0.3, Nt=64)
    with pytest.raises(ValueError):
        solve_cylinder(product_cosine(), make_walk(sample_coins(32, 2, 6)), 0.3)


def test_tau_profile_shape():
    s = np.linspace(-10, 10, 401)
    phi = tau_profile(s, 4.0)
    assert np.all(phi[np.abs(s) <= 2.0] == 1.0)
    assert np.all(phi[np.abs(s) >= 3.0] == 0.0)
    assert np.all((phi >= 0) & (phi <= 1))

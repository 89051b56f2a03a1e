"""Finite volumes for the Hamiltonian Fokker-Planck equation

    d rho/dt = -div_q(dH/dp rho) + div_p(dH/dq rho) + sigma^2/2 lap_q rho

on ``[0,1) x T^d x [-P, P]^d``: periodic in ``q``, zero flux through ``|p| = P``.
Densities are cell averages of shape ``(nq,)*d + (np,)*d``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e

from .measure_lab import EmpiricalMeasure, grid_bound
from .torus_phase import STEP_SLOPE, TWO_PI, HamiltonianSpec, grad_H


class CFLViolation(ValueError):
    pass


class NonConvergence(RuntimeError):
    def __init__(self, iters, defect):
        super().__init__(f"no periodic fixed point after {iters} periods (L1 defect {defect:.3e})")
        self.iters = iters
        self.defect = defect


@dataclass(frozen=True)
class FPGrid:
    spec: HamiltonianSpec
    sigma: float
    nq: int
    np_: int
    P: float
    nt: int          # time steps per period

    def __post_init__(self):
        if self.spec.d > 2:
            raise ValueError("Fokker-Planck grids are limited to d <= 2")
        adv, diff = self.cfl_numbers()
        if diff > 0.5:
            raise CFLViolation(f"diffusive number sigma^2 dt/dq^2 = {diff:.3f} exceeds 1/2")
        if adv + self.spec.d * diff > 1.0:
            raise CFLViolation(f"combined CFL number {adv + self.spec.d * diff:.3f} exceeds 1")

    @property
    def d(self):
        return self.spec.d

    @property
    def dq(self):
        return 1.0 / self.nq

    @property
    def dp(self):
        return 2.0 * self.P / self.np_

    @property
    def dt(self):
        return 1.0 / self.nt

    @property
    def cell(self):
        return (self.dq * self.dp) ** self.d

    @property
    def shape(self):
        return (self.nq,) * self.d + (self.np_,) * self.d

    def speed_bounds(self):
        """Sup bounds of ``|dH/dp|`` and ``|dH/dq|`` over the box, per axis."""
        amp = sum(abs(t.a) for t in self.spec.terms)
        wave = sum(abs(t.a) * TWO_PI * max(abs(v) for v in t.k) for t in self.spec.terms)
        return self.P + amp * STEP_SLOPE / self.spec.taper, wave

    def cfl_numbers(self):
        vq, vp = self.speed_bounds()
        adv = self.dt * self.d * (vq / self.dq + vp / self.dp)
        diff = self.sigma**2 * self.dt / self.dq**2
        return adv, diff

    @classmethod
    def build(cls, spec, sigma, nq=64, np_=64, P=None, safety=0.9):
        """Grid with the smallest step count per period that meets the CFL bounds."""
        if P is None:
            P = grid_bound(spec, sigma)
        probe = cls.__new__(cls)
        object.__setattr__(probe, "spec", spec)
        object.__setattr__(probe, "sigma", sigma)
        object.__setattr__(probe, "nq", nq)
        object.__setattr__(probe, "np_", np_)
        object.__setattr__(probe, "P", float(P))
        object.__setattr__(probe, "nt", 1)
        adv, diff = probe.cfl_numbers()
        nt = int(np.ceil(max(adv + spec.d * diff, 2.0 * diff) / safety))
        return cls(spec, float(sigma), nq, np_, float(P), max(nt, 1))

    # centres and faces
    def q_centers(self):
        return (np.arange(self.nq) + 0.5) * self.dq

    def p_centers(self):
        return -self.P + (np.arange(self.np_) + 0.5) * self.dp

    def mesh(self, q_shift=None, p_shift=None):
        """Points ``(q, p)`` at centres, optionally moved by half a cell along one axis."""
        d = self.d
        qs = [self.q_centers()] * d
        ps = [self.p_centers()] * d
        if q_shift is not None:
            qs[q_shift] = qs[q_shift] + 0.5 * self.dq
        if p_shift is not None:
            ps[p_shift] = ps[p_shift] + 0.5 * self.dp
        mesh = np.meshgrid(*(qs + ps), indexing="ij")
        pts = np.stack(mesh, axis=-1)
        return pts[..., :d], pts[..., d:]

    def velocities(self, t):
        """Face velocities: ``vq[a]`` at the upper q-face of each cell along axis ``a``
        and ``vp[a]`` at the upper p-face (zero on the outer boundary)."""
        d = self.d
        vq, vp = [], []
        for a in range(d):
            q, p = self.mesh(q_shift=a)
            _, gp = grad_H(self.spec, t, q, p)
            vq.append(gp[..., a])
            q, p = self.mesh(p_shift=a)
            gq, _ = grad_H(self.spec, t, q, p)
            v = -gq[..., a]
            idx = [slice(None)] * (2 * d)
            idx[d + a] = -1
            v[tuple(idx)] = 0.0
            vp.append(v)
        return vq, vp

    def uniform(self):
        rho = np.ones(self.shape)
        return rho / (rho.sum() * self.cell)

    def gaussian_profile(self, std=None):
        """Uniform in ``q`` times a discretised centred Gaussian in each ``p`` (cell averages)."""
        from scipy.stats import norm
        std = abs(self.sigma) if std is None else std
        if std <= 0:
            raise ValueError("Gaussian profile needs a positive width")
        edges = -self.P + np.arange(self.np_ + 1) * self.dp
        w = np.diff(norm.cdf(edges / std))
        prof = w / w.sum() / self.dp
        out = np.ones(self.shape)
        for a in range(self.d):
            shape = [1] * (2 * self.d)
            shape[self.d + a] = self.np_
            out = out * prof.reshape(shape)
        return out / (out.sum() * self.cell)


def _flux_div(rho, v, axis, width, periodic):
    """``-(F_{i+1/2} - F_{i-1/2}) / width`` for upwind ``F = v+ rho_i + v- rho_{i+1}``."""
    nxt = np.roll(rho, -1, axis=axis)
    if not periodic:
        idx = [slice(None)] * rho.ndim
        idx[axis] = -1
        nxt[tuple(idx)] = 0.0
    flux = np.maximum(v, 0.0) * rho + np.minimum(v, 0.0) * nxt
    return -(flux - np.roll(flux, 1, axis=axis) * _lower_mask(rho, axis, periodic)) / width


def _lower_mask(rho, axis, periodic):
    if periodic:
        return 1.0
    m = np.ones(rho.shape[axis])
    m[0] = 0.0
    shape = [1] * rho.ndim
    shape[axis] = -1
    return m.reshape(shape)


def _flux_div_T(phi, v, axis, width, periodic):
    """Transpose of :func:`_flux_div`: ``[v+_{i+1/2}(phi_{i+1}-phi_i) + v-_{i-1/2}(phi_i-phi_{i-1})] / width``."""
    nxt = np.roll(phi, -1, axis=axis)
    up = np.maximum(v, 0.0) * (nxt - phi)
    lo = np.roll(np.minimum(v, 0.0) * (nxt - phi), 1, axis=axis) * _lower_mask(phi, axis, periodic)
    if not periodic:
        idx = [slice(None)] * phi.ndim
        idx[axis] = -1
        up[tuple(idx)] = 0.0  # v vanishes on the outer face anyway
    return (up + lo) / width


def _laplace_q(rho, grid):
    out = np.zeros_like(rho)
    for a in range(grid.d):
        out += np.roll(rho, 1, axis=a) - 2.0 * rho + np.roll(rho, -1, axis=a)
    return 0.5 * grid.sigma**2 * out / grid.dq**2


def fp_apply(rho, grid: FPGrid, t: float, velocities=None):
    """Right-hand side of the scheme at time ``t``; sums to zero exactly (telescoping fluxes)."""
    vq, vp = grid.velocities(t) if velocities is None else velocities
    d = grid.d
    out = _laplace_q(rho, grid)
    for a in range(d):
        out += _flux_div(rho, vq[a], a, grid.dq, True)
        out += _flux_div(rho, vp[a], d + a, grid.dp, False)
    return out


def fp_adjoint(phi, grid: FPGrid, t: float, velocities=None):
    """Discrete transpose of :func:`fp_apply`: ``<fp_apply(rho), phi> = <rho, fp_adjoint(phi)>``."""
    vq, vp = grid.velocities(t) if velocities is None else velocities
    d = grid.d
    out = _laplace_q(phi, grid)
    for a in range(d):
        out += _flux_div_T(phi, vq[a], a, grid.dq, True)
        out += _flux_div_T(phi, vp[a], d + a, grid.dp, False)
    return out


@dataclass
class PeriodicDensity:
    grid: FPGrid
    slices: np.ndarray       # (nt+1, *shape); slices[0] == slices[-1]
    iterations: int
    defect: float

    def to_measure(self, T: int) -> EmpiricalMeasure:
        """Cell masses at ``T+1`` equally spaced times (``nt`` must be a multiple of ``T``)."""
        if self.grid.nt % T:
            raise ValueError(f"time steps {self.grid.nt} not a multiple of {T}")
        stride = self.grid.nt // T
        mass = self.slices[::stride] * self.grid.cell
        mass = mass / mass.sum(axis=tuple(range(1, mass.ndim)), keepdims=True)
        return EmpiricalMeasure(mass, self.grid.d, self.grid.P,
                                {"kind": "fp", "sigma": self.grid.sigma, "spec": self.grid.spec.digest()})


def _period(rho, grid, vel, record=None):
    dt = grid.dt
    for k in range(grid.nt):
        rho = rho + dt * fp_apply(rho, grid, k * dt, vel[k] if vel is not None else None)
        if record is not None:
            record[k + 1] = rho
    return rho


def period_map(rho, grid: FPGrid):
    vel = [grid.velocities(k * grid.dt) for k in range(grid.nt)]
    return _period(rho, grid, vel)


def periodic_solve(grid: FPGrid, power_iters: int = 1000, tol: float = 1e-9,
                   initial=None) -> PeriodicDensity:
    """Fixed point of the one-period map by power iteration.

    Starts from the uniform density unless ``initial`` is given; stops when
    successive periods differ by less than ``tol`` in L1.
    """
    rho = grid.uniform() if initial is None else np.asarray(initial, float) / (np.sum(initial) * grid.cell)
    if grid.spec.time_independent:
        v0 = grid.velocities(0.0)
        vel = [v0] * grid.nt
    else:
        vel = [grid.velocities(k * grid.dt) for k in range(grid.nt)]
    defect = np.inf
    for it in range(1, power_iters + 1):
        new = _period(rho, grid, vel)
        defect = float(np.abs(new - rho).sum() * grid.cell)
        rho = new
        if defect < tol:
            slices = np.empty((grid.nt + 1,) + grid.shape)
            slices[0] = rho
            _period(rho, grid, vel, record=slices)
            slices[-1] = slices[0]
            return PeriodicDensity(grid, slices, it, defect)
    raise NonConvergence(power_iters, defect)


def uniqueness_check(grid: FPGrid, power_iters: int = 1000, tol: float = 1e-9, rel: float = 1e-6):
    """Solve from the uniform and from a Gaussian start; flags disagreement."""
    a = periodic_solve(grid, power_iters, tol)
    b = periodic_solve(grid, power_iters, tol, initial=grid.gaussian_profile(max(abs(grid.sigma), 0.5)))
    gap = float(np.abs(a.slices[0] - b.slices[0]).sum() * grid.cell)
    return {"unique": gap <= rel, "l1_gap": gap, "first": a, "second": b}


# ---------------------------------------------------------------------------
# weak form
# ---------------------------------------------------------------------------

def smooth_measure(m: EmpiricalMeasure) -> EmpiricalMeasure:
    """One pass of the ``(1/4, 1/2, 1/4)`` kernel along every axis.

    Time and positions wrap around; momentum edges reflect, so mass is kept.
    """
    mass = m.mass[:-1]
    for ax in range(mass.ndim):
        if 1 <= ax <= m.d or ax == 0:
            mass = 0.25 * np.roll(mass, 1, axis=ax) + 0.5 * mass + 0.25 * np.roll(mass, -1, axis=ax)
        else:
            pad = np.concatenate([np.take(mass, [0], axis=ax), mass, np.take(mass, [-1], axis=ax)], axis=ax)
            n = mass.shape[ax]
            mass = (0.25 * np.take(pad, range(0, n), axis=ax) + 0.5 * mass
                    + 0.25 * np.take(pad, range(2, n + 2), axis=ax))
    full = np.concatenate([mass, mass[:1]], axis=0)
    return EmpiricalMeasure(full, m.d, m.P, dict(m.meta, smoothed=True))


@dataclass(frozen=True)
class TestFunction:
    m: int              # time frequency
    k: tuple            # position wave vector
    kind: str           # "cos" or "sin"
    order: tuple        # Hermite orders per momentum axis


def test_bank(d: int, count: int, kmax: int = 2, mmax: int = 1, lmax: int = 2):
    """Deterministic list of the first ``count`` test functions (constant excluded)."""
    if count < 1:
        raise ValueError("empty test bank")
    bank = []
    for lsum in range(lmax + 1):
        for order in itertools.product(range(lmax + 1), repeat=d):
            if sum(order) != lsum:
                continue
            for m in range(-mmax, mmax + 1):
                for k in itertools.product(range(-kmax, kmax + 1), repeat=d):
                    for kind in ("cos", "sin"):
                        if m == 0 and not any(k):
                            if kind == "sin" or lsum == 0:
                                continue
                        bank.append(TestFunction(m, tuple(k), kind, tuple(order)))
    if count > len(bank):
        raise ValueError(f"bank holds only {len(bank)} functions")
    return bank[:count]


def _hermite_profile(x, order):
    """``He_l(x) exp(-x^2/2)`` and its first two x-derivatives."""
    g = np.exp(-0.5 * x * x)
    c = np.zeros(order + 1)
    c[order] = 1.0
    h = hermite_e.hermeval(x, c)
    h1 = hermite_e.hermeval(x, hermite_e.hermeder(c)) if order else np.zeros_like(x)
    return h * g, (h1 - x * h) * g


def _apply_L(fn: TestFunction, spec, sigma, t, q, p, width):
    """``(d/dt + dH/dp . grad_q - dH/dq . grad_p + sigma^2/2 lap_q) phi`` at points."""
    d = spec.d
    theta = TWO_PI * (fn.m * t + q @ np.asarray(fn.k, float))
    if fn.kind == "cos":
        tr, dtr = np.cos(theta), -np.sin(theta)
    else:
        tr, dtr = np.sin(theta), np.cos(theta)
    prof = np.ones(p.shape[:-1])
    dprof = []
    parts = [_hermite_profile(p[..., a] / width, fn.order[a]) for a in range(d)]
    for a in range(d):
        prof = prof * parts[a][0]
    for a in range(d):
        other = np.ones(p.shape[:-1])
        for b in range(d):
            if b != a:
                other = other * parts[b][0]
        dprof.append(other * parts[a][1] / width)
    k = np.asarray(fn.k, float)
    gq, gp = grad_H(spec, t, q, p)
    dt_phi = TWO_PI * fn.m * dtr * prof
    grad_q = TWO_PI * dtr[..., None] * k * prof[..., None]
    lap_q = -(TWO_PI**2) * (k @ k) * tr * prof
    grad_p = np.stack([tr * dp_ for dp_ in dprof], axis=-1)
    return dt_phi + np.sum(gp * grad_q, axis=-1) - np.sum(gq * grad_p, axis=-1) + 0.5 * sigma**2 * lap_q


def weak_residual(m: EmpiricalMeasure, spec: HamiltonianSpec, sigma: float, bank=48,
                  width: float = 0.5, smooth: bool = True) -> float:
    """RMS over a test bank of ``|int int rho L phi|``, with ``L`` the adjoint generator plus ``d/dt``.

    ``bank`` is a count or an explicit list of :class:`TestFunction`.  Test
    functions are differentiated analytically; the measure is only smoothed
    (one ``(1/4, 1/2, 1/4)`` pass per axis, see :func:`smooth_measure`).
    """
    funcs = test_bank(spec.d, bank) if isinstance(bank, (int, np.integer)) else list(bank)
    if not funcs:
        raise ValueError("empty test bank")
    mm = smooth_measure(m) if smooth else m
    d = spec.d
    axes = [mm.q_centers()] * d + [mm.p_centers()] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2 * d)
    q, p = pts[:, :d], pts[:, d:]
    vals = np.zeros(len(funcs))
    for j, t in enumerate(mm.times[:-1]):
        w = mm.mass[j].reshape(-1)
        live = w != 0.0
        if not live.any():
            continue
        for i, fn in enumerate(funcs):
            vals[i] += np.dot(w[live], _apply_L(fn, spec, sigma, t, q[live], p[live], width))
    vals /= mm.T
    return float(np.sqrt(np.mean(vals**2)))


def density_measure(rho, grid: FPGrid, T: int = 64) -> EmpiricalMeasure:
    """Time-independent density as a measure with ``T+1`` identical slices."""
    mass = np.asarray(rho) * grid.cell
    mass = mass / mass.sum()
    return EmpiricalMeasure(np.broadcast_to(mass, (T + 1,) + mass.shape).copy(), grid.d, grid.P,
                            {"kind": "fp", "sigma": grid.sigma})

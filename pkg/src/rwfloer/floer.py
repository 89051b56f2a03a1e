"""Connecting cylinders between closed orbits (d = 1).

On ``[-S, S] x [0, 1]`` we solve

    dQ/ds + dP/dt + dKbar/dq = 0,    dP/ds - dQ/dt + dKbar/dp = 0,

i.e. ``d_s u = grad A(u)`` for the action ``A = int p dqbar/dt - Kbar dt``, with
``Kbar = |p|^2/2 + phi_tau(s) chi_R(|p|) F`` evaluated at ``q = qbar - sigma W(t)``.
Along ``s`` the action increases, so the cylinder runs from the lower-action
orbit at ``s = -S`` to the higher one at ``s = S``, and its energy
``int |d_s u|^2`` equals the action gap when ``phi_tau = 1``.

The ``t`` direction is periodic up to the twist ``qbar(s, 1) = qbar(s, 0) + sigma W(1)``;
only the nodes ``t_j = j/Nt, j < Nt`` are unknowns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .orbit_solver import ClosedOrbit, find_orbit_family, integrate_flow
from .sample_space import WalkPath, walk_at
from .torus_phase import HamiltonianSpec, choose_R, cutoff_parts, smooth_step

NEWTON_TOL = 1e-10
RESIDUAL_TARGET = 1e-8


class ContinuationStall(RuntimeError):
    def __init__(self, tau_good, tau_target, detail=""):
        super().__init__(f"Newton failed beyond tau={tau_good:.6g} (target {tau_target:.6g}) {detail}")
        self.tau_good = tau_good
        self.tau_target = tau_target


def tau_profile(s, tau):
    """Equal to 1 on ``|s| <= tau/2``, smoothly 0 for ``|s| >= tau/2 + 1``."""
    s = np.asarray(s, dtype=np.float64)
    return smooth_step(tau / 2 + 1 - s) * smooth_step(tau / 2 + 1 + s)


@dataclass
class FloerCylinder:
    s: np.ndarray            # (Ns+1,)
    t: np.ndarray            # (Nt+1,)
    U: np.ndarray            # (Ns+1, Nt+1, 2): (qbar, p) on the cover, column Nt is the twisted copy
    S: float
    tau: float
    omega: object            # CoinSequence
    sigma: float
    R: float
    energy: float = np.nan
    residual_norm: float = np.nan
    multiplier: float = 0.0
    pin: dict = field(default_factory=dict)
    ends: dict = field(default_factory=dict)

    @property
    def Ns(self):
        return len(self.s) - 1

    @property
    def Nt(self):
        return len(self.t) - 1


def _dt_matrix(Nt, ht):
    """Periodic central difference in ``t`` (dense, ``Nt x Nt``)."""
    D = np.zeros((Nt, Nt))
    for j in range(Nt):
        D[j, (j + 1) % Nt] += 1.0
        D[j, (j - 1) % Nt] -= 1.0
    return D / (2.0 * ht)


class _Grid:
    """Box scheme in ``s``, central differences in ``t``, for one (sample, grid) pair.

    Unknowns are all nodes ``U[i, j]``, ``0 <= i <= Ns``, ``0 <= j < Nt``, flattened
    as ``((i * Nt) + j) * 2 + c``.  The flow in ``s`` is ``d_s U = G(s, U)`` with

        G = (-D_t P - dKbar/dq,  D_t Q - dKbar/dp),

    imposed at cell midpoints ``s_{i+1/2}`` on the averaged state.
    """

    def __init__(self, spec, w: WalkPath, sigma, S, Ns, Nt, R):
        if spec.d != 1:
            raise ValueError("Floer cylinders are implemented for d = 1 only")
        self.spec, self.w, self.sigma = spec, w, float(sigma)
        self.S, self.Ns, self.Nt, self.R = float(S), int(Ns), int(Nt), float(R)
        self.hs = 2.0 * S / Ns
        self.ht = 1.0 / Nt
        self.s = -S + self.hs * np.arange(Ns + 1)
        self.smid = 0.5 * (self.s[1:] + self.s[:-1])
        self.t = np.arange(Nt + 1) / Nt
        self.wt = np.array([walk_at(w.values, w.coins.signs, tj)[0] for tj in self.t[:-1]])
        self.twist = self.sigma * float(w.end[0])
        self.size = 2 * (Ns + 1) * Nt
        self.Dt = _dt_matrix(Nt, self.ht)
        # linear part of G on one s-slice (interleaved Q, P) and its constant twist term
        Lt = np.zeros((2 * Nt, 2 * Nt))
        Lt[0::2, 1::2] = -self.Dt
        Lt[1::2, 0::2] = self.Dt
        self.Lt = Lt
        ct = np.zeros((Nt, 2))
        ct[-1, 1] += self.twist / (2 * self.ht)
        ct[0, 1] += self.twist / (2 * self.ht)
        self.ct = ct.reshape(-1)
        Dfwd = sp.diags([-np.ones(Ns), np.ones(Ns)], [0, 1], shape=(Ns, Ns + 1)) / self.hs
        Avg = sp.diags([0.5 * np.ones(Ns), 0.5 * np.ones(Ns)], [0, 1], shape=(Ns, Ns + 1))
        eye = sp.identity(2 * Nt)
        self.avg = sp.kron(Avg, eye).tocsr()
        self.lin = (sp.kron(Dfwd, eye) - sp.kron(Avg, sp.csr_matrix(Lt))).tocsr()

    def idx(self, i, j, c):
        return (i * self.Nt + j) * 2 + c

    def full(self, x):
        """Unknown vector -> (Ns+1, Nt+1, 2) field including the twisted column ``t = 1``."""
        U = np.empty((self.Ns + 1, self.Nt + 1, 2))
        U[:, :-1] = x.reshape(self.Ns + 1, self.Nt, 2)
        U[:, -1, 0] = U[:, 0, 0] + self.twist
        U[:, -1, 1] = U[:, 0, 1]
        return U

    def grad_K(self, V, phi, hessian=False):
        """``grad Kbar`` on states ``V`` of shape ``(..., Nt, 2)`` with profile weights ``phi``."""
        q = V[..., :1] - self.sigma * self.wt[:, None]
        p = V[..., 1:]
        _, gq, gp, H = cutoff_parts(self.spec, self.t[:-1], q, p, self.R)
        phi = np.asarray(phi, dtype=np.float64)
        g = np.empty(V.shape)
        g[..., 0] = phi * gq[..., 0]
        g[..., 1] = p[..., 0] + phi * gp[..., 0]
        if not hessian:
            return g
        Hb = phi[..., None, None] * H
        Hb[..., 1, 1] += 1.0
        return g, Hb

    def G(self, V, phi=1.0):
        """The s-flow on one slice ``V`` of shape ``(Nt, 2)``."""
        return (self.Lt @ V.reshape(-1) + self.ct - self.grad_K(V, phi).reshape(-1)).reshape(self.Nt, 2)

    def dG(self, V, phi=1.0):
        """Jacobian of :meth:`G` (symmetric, ``2Nt x 2Nt``)."""
        _, Hb = self.grad_K(V, phi, hessian=True)
        J = self.Lt.copy()
        for j in range(self.Nt):
            J[2 * j:2 * j + 2, 2 * j:2 * j + 2] -= Hb[j]
        return J

    def cell_residual(self, x, tau, jac=False):
        """Midpoint equations ``(U_{i+1} - U_i)/hs - G(s_{i+1/2}, avg)``, shape ``(Ns*2Nt,)``."""
        mid = (self.avg @ x).reshape(self.Ns, self.Nt, 2)
        phi = tau_profile(self.smid, tau)[:, None]
        if not jac:
            g = self.grad_K(mid, phi)
            return self.lin @ x - np.tile(self.ct, self.Ns) + g.reshape(-1)
        g, Hb = self.grad_K(mid, phi, hessian=True)
        r = self.lin @ x - np.tile(self.ct, self.Ns) + g.reshape(-1)
        blocks = np.ascontiguousarray(Hb.reshape(-1, 2, 2))
        nb = len(blocks)
        Hmat = sp.bsr_matrix((blocks, np.arange(nb), np.arange(nb + 1)), shape=(2 * nb, 2 * nb))
        J = self.lin + Hmat.tocsr() @ self.avg
        return r, J.tocsr()


def floer_residual(cyl_or_U, spec, w, sigma, tau=None, S=None, R=None):
    """Defect of the discretised equation at the cell midpoints ``s_{i+1/2}``.

    Returns an ``(Ns, Nt, 2)`` field: ``(U_{i+1} - U_i)/hs`` minus the flow at the
    averaged state, i.e. ``d_s u + J d_t u + grad Kbar`` up to sign.
    """
    if isinstance(cyl_or_U, FloerCylinder):
        U = cyl_or_U.U
        tau = cyl_or_U.tau if tau is None else tau
        S = cyl_or_U.S
        R = cyl_or_U.R if R is None else R
    else:
        U = np.asarray(cyl_or_U, dtype=np.float64)
        if tau is None or S is None:
            raise ValueError("raw fields need tau and S")
    if R is None:
        R = choose_R(w, sigma, spec).R
    g = _Grid(spec, w, sigma, S, U.shape[0] - 1, U.shape[1] - 1, R)
    x = U[:, :-1].reshape(-1)
    return g.cell_residual(x, tau).reshape(g.Ns, g.Nt, 2)


def cylinder_energy(cyl: FloerCylinder) -> float:
    """``sum_i hs * mean_j |(U_{i+1} - U_i) / hs|^2``: the midpoint rule on the box cells."""
    dU = np.diff(cyl.U[:, :-1], axis=0) / np.diff(cyl.s)[:, None, None]
    dens = np.sum(dU**2, axis=(1, 2)) / cyl.Nt
    return float(np.sum(dens * np.diff(cyl.s)))


# ---------------------------------------------------------------------------
# asymptotic orbits
# ---------------------------------------------------------------------------

def sample_orbit(orbit: ClosedOrbit, spec, w, sigma, Nt: int) -> np.ndarray:
    """Orbit values at ``t_j = j/Nt`` (``j < Nt``), linearly interpolated from RK4 nodes."""
    path = integrate_flow(spec, w, sigma, orbit.z0, 2 * w.n)
    tj = np.arange(Nt) / Nt
    return np.stack([np.interp(tj, path.t, path.z[:, c]) for c in range(2)], axis=1)


def discrete_orbit(g: _Grid, guess, tol=NEWTON_TOL, max_iter=30):
    """s-independent zero of the discrete flow ``G`` near ``guess`` (``(Nt, 2)``)."""
    u = np.array(guess, dtype=np.float64, copy=True)
    for _ in range(max_iter):
        r = g.G(u)
        if np.abs(r).max() < tol:
            break
        u = u - np.linalg.solve(g.dG(u), r.reshape(-1)).reshape(g.Nt, 2)
    return u, float(np.abs(g.G(u)).max())


def discrete_action(g: _Grid, u) -> float:
    """``sum_j ht (P_j (Q_{j+1} - Q_{j-1}) / (2 ht) - Kbar_j)`` with the twisted wrap."""
    Q = np.concatenate([[u[-1, 0] - g.twist], u[:, 0], [u[0, 0] + g.twist]])
    dq = (Q[2:] - Q[:-2]) / (2 * g.ht)
    q = u[:, :1] - g.sigma * g.wt[:, None]
    val, _, _, _ = cutoff_parts(g.spec, g.t[:-1], q, u[:, 1:], g.R)
    K = 0.5 * u[:, 1] ** 2 + val
    return float(g.ht * np.sum(u[:, 1] * dq - K))


def end_projections(g: _Grid, left, right):
    """Rows that must vanish on ``U(-S) - left`` and ``U(S) - right``.

    Near a nondegenerate end the linearised flow ``d_s xi = dG xi`` splits along the
    eigenvectors of the symmetric matrix ``dG``.  Decay towards ``s = -inf`` rules out
    the non-positive directions at the left end, decay towards ``+inf`` the
    non-negative ones at the right end.
    """
    lm, vm = np.linalg.eigh(g.dG(left))
    lp, vp = np.linalg.eigh(g.dG(right))
    return vm[:, lm <= 0].T, vp[:, lp >= 0].T, {"spectrum_gap_minus": float(np.min(np.abs(lm))),
                                               "spectrum_gap_plus": float(np.min(np.abs(lp)))}


def _pin_level(qm, qp):
    """Pin value for ``qbar(0, 0)``: an integer between the ends when it sits well inside."""
    lo, hi = min(qm, qp), max(qm, qp)
    k = np.ceil(lo)
    span = hi - lo
    if k <= hi and lo + 0.2 * span <= k <= hi - 0.2 * span:
        return float(k), "integer"
    return 0.5 * (lo + hi), "midpoint"


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class _System:
    """Square nonlinear system: box cells, projected ends and (optionally) the pin."""

    def __init__(self, g, left, right, Bm, Bp, pin_idx, pin_val):
        self.g, self.left, self.right = g, left.reshape(-1), right.reshape(-1)
        n2 = 2 * g.Nt
        last = g.size - n2
        self.Bm, self.Bp = Bm, Bp
        rows = [sp.hstack([sp.csr_matrix(Bm), sp.csr_matrix((Bm.shape[0], g.size - n2))]),
                sp.hstack([sp.csr_matrix((Bp.shape[0], last)), sp.csr_matrix(Bp)])]
        self.pin_idx, self.pin_val = pin_idx, pin_val
        if pin_idx is not None:
            rows.append(sp.csr_matrix(([1.0], ([0], [pin_idx])), shape=(1, g.size)))
        self.extra = sp.vstack(rows).tocsr()
        self.n2 = n2

    def __call__(self, x, tau, jac=False):
        g, n2 = self.g, self.n2
        parts = [self.Bm @ (x[:n2] - self.left), self.Bp @ (x[-n2:] - self.right)]
        if self.pin_idx is not None:
            parts.append([x[self.pin_idx] - self.pin_val])
        if not jac:
            return np.concatenate([g.cell_residual(x, tau)] + parts)
        r, J = g.cell_residual(x, tau, jac=True)
        return np.concatenate([r] + parts), sp.vstack([J, self.extra]).tocsc()


def _newton(system, x, tau, tol, max_iter):
    """Damped Newton with sparse LU; returns ``(x, history)`` or ``(None, history)``."""
    hist = []
    for _ in range(max_iter):
        F, J = system(x, tau, jac=True)
        norm = np.abs(F).max()
        hist.append(float(norm))
        if not np.isfinite(norm):
            return None, hist
        if norm < tol:
            return x, hist
        step = spsolve(J, -F)
        if not np.all(np.isfinite(step)):
            return None, hist
        a = 1.0
        for _ in range(10):
            xn = x + a * step
            if np.abs(system(xn, tau)).max() < norm:
                break
            a *= 0.5
        else:
            return None, hist
        x = xn
    return None, hist


def _free_cylinder(spec, w, sigma, S, Ns, Nt) -> FloerCylinder:
    """F empty: both ends are the same member of the Morse-Bott family, the cylinder is constant."""
    R = choose_R(w, sigma, spec).R
    g = _Grid(spec, w, sigma, S, Ns, Nt, R)
    u = np.zeros((Nt, 2))
    u[:, 1] = g.twist
    u[:, 0] = g.twist * g.t[:-1]
    u, res = discrete_orbit(g, u)
    x = np.tile(u.reshape(-1), Ns + 1)
    a = discrete_action(g, u)
    cyl = FloerCylinder(g.s, g.t, g.full(x), float(S), 2.0 * S + 2.0, w.coins, float(sigma), R,
                        residual_norm=float(np.abs(g.cell_residual(x, 2.0 * S + 2.0)).max()),
                        pin={"node": [Ns // 2, 0], "value": float(u[0, 0]), "kind": "degenerate",
                             "active": False},
                        ends={"degenerate": True, "orbit_residual_minus": res, "orbit_residual_plus": res,
                              "action_minus": a, "action_plus": a,
                              "discrete_action_minus": a, "discrete_action_plus": a})
    cyl.energy = cylinder_energy(cyl)
    return cyl


def solve_cylinder(spec: HamiltonianSpec, w: WalkPath, sigma: float, j: int = 1, S: float = 8.0,
                   Ns: int = 200, Nt: int = 129, tau_steps: int = 8, family=None,
                   tol: float = NEWTON_TOL, max_iter: int = 30) -> FloerCylinder:
    """Cylinder from orbit ``j-`` (lower action) to ``j+`` by continuation in ``tau``.

    ``tau`` ramps from 0 to ``2S + 2`` in ``tau_steps`` steps (failed steps are halved
    down to 1/1024 of the ramp).  At each ``tau`` the system is solved on the centred
    window ``|s| <= min(S, tau/2 + 1)`` of the final grid, so the first solve is short
    and nearly linear and the last one covers ``[-S, S]`` with the Hamiltonian fully
    switched on.  The ends are exact discrete orbits and only their decaying
    components are prescribed; the translation is fixed by pinning ``qbar`` at
    ``(s, t) = (0, 0)``.  ``Nt`` must be odd: for even ``Nt`` the central difference in
    ``t`` has a spurious checkerboard kernel.
    """
    if spec.d != 1:
        raise ValueError("Floer cylinders are implemented for d = 1 only")
    if j != 1:
        raise ValueError("d = 1 has the single orbit pair j = 1")
    if Nt % 2 == 0:
        raise ValueError("Nt must be odd")
    if Ns % 2:
        raise ValueError("Ns must be even")
    if spec.is_free:
        return _free_cylinder(spec, w, sigma, S, Ns, Nt)
    if family is None:
        family = find_orbit_family(spec, w, sigma, steps=1, with_paths=False, seeding="averaged")
    lo_orbit, hi_orbit = family.labeled["1-"], family.labeled["1+"]
    R = choose_R(w, sigma, spec).R
    g = _Grid(spec, w, sigma, S, Ns, Nt, R)
    left = sample_orbit(lo_orbit, spec, w, sigma, Nt)
    right = sample_orbit(hi_orbit, spec, w, sigma, Nt)
    shift = np.round(right[0, 0] - left[0, 0])
    right[:, 0] -= shift
    left, res_m = discrete_orbit(g, left)
    right, res_p = discrete_orbit(g, right)
    Bm, Bp, info = end_projections(g, left, right)
    ends = {"orbit_residual_minus": res_m, "orbit_residual_plus": res_p,
            "action_minus": lo_orbit.action, "action_plus": hi_orbit.action,
            "discrete_action_minus": discrete_action(g, left),
            "discrete_action_plus": discrete_action(g, right),
            "qbar0_minus": float(left[0, 0]), "qbar0_plus": float(right[0, 0]),
            "conditions": [int(Bm.shape[0]), int(Bp.shape[0])], **info}
    count = Bm.shape[0] + Bp.shape[0]
    if count not in (2 * Nt - 1, 2 * Nt):
        raise ContinuationStall(0.0, 2 * S + 2, f"(index count {count} for 2Nt={2 * Nt})")
    pin_val, kind = _pin_level(left[0, 0], right[0, 0])
    pin_on = count == 2 * Nt - 1

    i_mid = Ns // 2

    def window(tau):
        half = min(Ns // 2, int(np.ceil((tau / 2 + 1) / g.hs)))
        return i_mid - half, i_mid + half

    def build(lo, hi):
        sub = _Grid(spec, w, sigma, g.hs * (hi - lo) / 2, hi - lo, Nt, R)
        pin_idx = sub.idx(i_mid - lo, 0, 0) if pin_on else None
        return sub, _System(sub, left, right, Bm, Bp, pin_idx, pin_val)

    tau_final = 2.0 * S + 2.0
    ramp = tau_final / tau_steps
    min_step = tau_final / 1024.0
    # warm start on the whole grid: blend of the ends across |s| <= 1.5
    blend = smooth_step((g.s + 1.5) / 3.0)[:, None, None]
    Xfull = left[None] + blend * (right - left)[None]
    tau, step = 0.0, ramp
    history = []
    while True:
        lo, hi = window(tau)
        sub, system = build(lo, hi)
        # on the window the profile is identically 1, hence solve with tau_final
        x, hist = _newton(system, Xfull[lo:hi + 1].reshape(-1), tau_final, tol, max_iter)
        if x is None:
            if tau == 0.0:
                raise ContinuationStall(0.0, tau_final, "(initial solve)")
            tau -= step
            step *= 0.5
            if step < min_step:
                raise ContinuationStall(tau, tau_final)
            tau += step
            continue
        history.append((float(tau), len(hist)))
        Xfull[lo:hi + 1] = x.reshape(hi - lo + 1, Nt, 2)
        Xfull[:lo] = Xfull[lo]
        Xfull[hi + 1:] = Xfull[hi]
        if tau >= tau_final:
            break
        tau = min(tau_final, tau + step)
        step = min(ramp, 2 * step)
    x = Xfull.reshape(-1)
    U = g.full(x)
    res = float(np.abs(g.cell_residual(x, tau_final)).max())
    cyl = FloerCylinder(g.s, g.t, U, float(S), float(tau_final), w.coins, float(sigma), R,
                        residual_norm=res, multiplier=0.0,
                        pin={"node": [int(i_mid), 0], "value": pin_val, "kind": kind, "active": pin_on},
                        ends={**ends, "continuation": history})
    cyl.energy = cylinder_energy(cyl)
    return cyl


def cylinder_summary(cyl: FloerCylinder) -> dict:
    gap = cyl.ends.get("action_plus", np.nan) - cyl.ends.get("action_minus", np.nan)
    return {
        "seed": cyl.omega.seed, "sample": cyl.omega.index, "n": cyl.omega.n,
        "S": cyl.S, "Ns": cyl.Ns, "Nt": cyl.Nt, "tau": cyl.tau,
        "energy": cyl.energy, "residual": cyl.residual_norm, "multiplier": cyl.multiplier,
        "action_gap": gap, "slack": gap - cyl.energy, "pin": cyl.pin, "ends": cyl.ends,
    }


def write_cylinder_csv(cyl: FloerCylinder, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["s", "t", "qbar", "p"])
        for i, s in enumerate(cyl.s):
            for j, t in enumerate(cyl.t):
                out.writerow([repr(float(s)), repr(float(t)), repr(float(cyl.U[i, j, 0])),
                              repr(float(cyl.U[i, j, 1]))])


def write_cylinder_json(cyl: FloerCylinder, path) -> None:
    with open(path, "w") as fh:
        json.dump(cylinder_summary(cyl), fh, indent=2, sort_keys=True, default=float)

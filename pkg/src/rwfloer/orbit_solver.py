"""Closed random-walk Hamiltonian orbits by single shooting.

Everything runs on batches: a batch row is one initial point attached to one
walk sample (``sample_idx``).  Rows never interact, so results do not depend on
how samples are grouped into batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .sample_space import CoinSequence, WalkPath, sample_coin_block, walk_grid
from .torus_phase import HamiltonianSpec, choose_R_batch, energy_and_grad, eval_H, grad_H

OK, MAX_ITER, DIVERGED, SINGULAR = 0, 1, 2, 3
STATUS_NAMES = {OK: "ok", MAX_ITER: "max_iterations", DIVERGED: "divergence", SINGULAR: "singular_jacobian"}

NEWTON_TOL = 1e-10
FD_STEP = 1e-7
COND_LIMIT = 1e12
DEDUP_TOL = 1e-6


class OrbitError(RuntimeError):
    pass


class MaxIterations(OrbitError):
    pass


class Divergence(OrbitError):
    pass


class SingularJacobian(OrbitError):
    pass


class FamilyCollapse(OrbitError):
    def __init__(self, found: int, needed: int):
        super().__init__(f"only {found} distinct orbits survived deduplication, need {needed}")
        self.found = found
        self.needed = needed


_ERRORS = {MAX_ITER: MaxIterations, DIVERGED: Divergence, SINGULAR: SingularJacobian}


@dataclass
class LoopPath:
    t: np.ndarray          # (N+1,)
    z: np.ndarray          # (N+1, 2d): (qbar, p) on the cover
    d: int

    @property
    def qbar(self):
        return self.z[:, :self.d]

    @property
    def p(self):
        return self.z[:, self.d:]


@dataclass
class ClosedOrbit:
    coins: CoinSequence
    z0: np.ndarray
    action: float
    newton_residual: float
    label: str = ""
    path: LoopPath | None = None
    iterations: int = 0
    residual_history: list = field(default_factory=list)

    def record(self, sigma: float) -> dict:
        d = self.coins.d
        return {
            "seed": self.coins.seed, "sample": self.coins.index, "n": self.coins.n,
            "d": d, "sigma": sigma, "label": self.label, "action": self.action,
            "qbar0": self.z0[:d].tolist(), "p0": self.z0[d:].tolist(),
            "residual": self.newton_residual,
        }


@dataclass
class OrbitFamily:
    orbits: list                 # every distinct orbit, sorted by action
    labeled: dict                # label -> ClosedOrbit
    morse_bott: bool = False
    failures: dict = field(default_factory=dict)

    @property
    def actions(self):
        return np.array([o.action for o in self.orbits])


def orbit_labels(d: int) -> list:
    out = []
    for j in range(1, d + 1):
        out += [f"{j}-", f"{j}+"]
    return out


def label_positions(count: int, d: int) -> list:
    """Positions in an action-sorted list of ``count`` orbits for the 2d labels."""
    slots = 2 * d
    if count == 1:
        return [0] * slots
    return [int(np.floor(l * (count - 1) / (slots - 1) + 0.5)) for l in range(slots)]


# ---------------------------------------------------------------------------
# the flow
# ---------------------------------------------------------------------------

class WalkBatch:
    """Walk samples in array form: signs ``(M, n, d)`` and grid values ``(M, n+1, d)``."""

    def __init__(self, signs):
        self.signs = np.asarray(signs, dtype=np.float64)
        self.grid = walk_grid(self.signs)
        self.M, self.n, self.d = self.signs.shape
        self.rootn = np.sqrt(self.n)

    @classmethod
    def from_walks(cls, walks):
        return cls(np.stack([w.coins.signs for w in walks]))

    @property
    def end(self):
        return self.grid[:, -1, :]


def _vector_field(spec, sigma, t, z, w_t):
    """Drift and action density ``p . dK/dp - K`` at shifted position ``qbar - sigma W``."""
    d = spec.d
    q = z[:, :d] - sigma * w_t
    p = z[:, d:]
    H, gq, gp = energy_and_grad(spec, t, q, p)
    return np.concatenate([gp, -gq], axis=1), np.sum(p * gp, axis=1) - H


def flow(spec: HamiltonianSpec, sigma: float, walks: WalkBatch, z0, sample_idx=None,
               substeps: int = 2, record: bool = False, guard=None):
    """Classical RK4 on every kink interval ``[k/n, (k+1)/n]`` split ``substeps`` times.

    Returns ``(z1, action, diverged, trajectory)``; ``action`` is the integral of
    ``p dK/dp - K`` carried along as an extra RK4 component, ``trajectory`` is
    ``(B, n*substeps+1, 2d)`` when ``record`` else ``None``.
    """
    z = np.array(z0, dtype=np.float64, copy=True)
    B = z.shape[0]
    d = spec.d
    if sample_idx is None:
        sample_idx = np.arange(B)
    n = walks.n
    h = 1.0 / (n * substeps)
    grid = walks.grid[sample_idx]
    dW = walks.signs[sample_idx] / walks.rootn
    action = np.zeros(B)
    diverged = np.zeros(B, dtype=bool)
    traj = None
    if spec.is_free:
        # drift (p, 0) is constant along the path, where RK4 is exact
        p = z[:, d:]
        bad = np.zeros(B, dtype=bool) if guard is None else np.abs(p).max(axis=1) > guard
        if record:
            ts = np.arange(n * substeps + 1) * h
            traj = np.repeat(z[:, None], len(ts), axis=1)
            traj[:, :, :d] += ts[None, :, None] * p[:, None]
            traj[bad] = 0.0
        z1 = z.copy()
        z1[:, :d] += p
        z1[bad] = 0.0
        return z1, 0.5 * np.sum(p * p, axis=1), bad, traj
    if record:
        traj = np.empty((B, n * substeps + 1, 2 * d))
        traj[:, 0] = z
    step = 0
    for k in range(n):
        base = grid[:, k]
        slope = dW[:, k]
        for j in range(substeps):
            t0 = (k * substeps + j) * h
            w1 = base + (j / substeps) * slope
            wm = base + ((j + 0.5) / substeps) * slope
            w2 = base + ((j + 1.0) / substeps) * slope
            k1, a1 = _vector_field(spec, sigma, t0, z, w1)
            k2, a2 = _vector_field(spec, sigma, t0 + 0.5 * h, z + 0.5 * h * k1, wm)
            k3, a3 = _vector_field(spec, sigma, t0 + 0.5 * h, z + 0.5 * h * k2, wm)
            k4, a4 = _vector_field(spec, sigma, t0 + h, z + h * k3, w2)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            action += (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            step += 1
            if guard is not None:
                bad = np.abs(z[:, d:]).max(axis=1) > guard
                if bad.any():
                    diverged |= bad
                    z[bad] = 0.0
            if record:
                traj[:, step] = z
    return z, action, diverged, traj


def _residual(spec, sigma, walks, z0, sample_idx, substeps, guard):
    z1, action, bad, _ = flow(spec, sigma, walks, z0, sample_idx, substeps, guard=guard)
    d = spec.d
    r = np.empty_like(z0)
    r[:, :d] = z1[:, :d] - z0[:, :d] - sigma * walks.end[sample_idx]
    r[:, d:] = z1[:, d:] - z0[:, d:]
    r[bad] = np.inf
    return r, action, bad


def newton_batch(spec, sigma, walks: WalkBatch, z0, sample_idx=None, substeps: int = 2,
                 tol: float = NEWTON_TOL, max_iter: int = 50, fd_step: float = FD_STEP,
                 max_step: float = 0.5):
    """Damped Newton on the shooting defect for many rows at once.

    The step is the minimum-norm solution from a truncated SVD of the forward
    difference Jacobian, so the degenerate ``F = 0`` family (free ``qbar0``) is
    handled.  A row is declared singular only when its condition number exceeds
    ``1e12`` *and* the defect has a component the Jacobian cannot reach.

    Returns a dict of arrays: ``z``, ``residual``, ``action``, ``status``,
    ``iterations`` and ``history`` (``(B, max_iter+1)`` residual norms, NaN padded).
    """
    z = np.array(z0, dtype=np.float64, copy=True)
    B, dim = z.shape
    if sample_idx is None:
        sample_idx = np.arange(B)
    sample_idx = np.asarray(sample_idx)
    guard = 10.0 * (choose_R_batch(walks.grid, sigma, spec)[sample_idx] + 1.0)
    r, action, bad = _residual(spec, sigma, walks, z, sample_idx, substeps, guard)
    norm = np.abs(r).max(axis=1)
    status = np.full(B, -1)
    status[bad] = DIVERGED
    iters = np.zeros(B, dtype=int)
    history = np.full((B, max_iter + 1), np.nan)
    history[:, 0] = norm
    status[(status < 0) & (norm < tol)] = OK

    for it in range(1, max_iter + 1):
        act = np.flatnonzero(status < 0)
        if act.size == 0:
            break
        za = z[act]
        ia = sample_idx[act]
        ra = r[act]
        # forward-difference Jacobian, all perturbations in one flow
        pert = np.repeat(za[None], dim, axis=0)
        for j in range(dim):
            pert[j, :, j] += fd_step
        pr, _, pbad = _residual(spec, sigma, walks, pert.reshape(-1, dim),
                                np.tile(ia, dim), substeps, np.tile(guard[act], dim))
        pr = pr.reshape(dim, act.size, dim)
        jac = np.transpose((pr - ra[None]) / fd_step, (1, 2, 0))  # (A, eq, var)
        jbad = pbad.reshape(dim, act.size).any(axis=0) | ~np.isfinite(jac).all(axis=(1, 2))
        jac[jbad] = np.eye(dim)
        U, s, Vt = np.linalg.svd(jac)
        smax = s[:, :1]
        keep = s > COND_LIMIT ** -1 * smax
        coef = np.einsum("aij,ai->aj", U, -ra)
        unreachable = np.sqrt(np.sum(np.where(keep, 0.0, coef) ** 2, axis=1))
        singular = (~keep).any(axis=1) & (unreachable > 1e-3 * np.abs(ra).max(axis=1) + tol)
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        step = np.einsum("aji,aj->ai", Vt, inv * coef)
        big = np.abs(step).max(axis=1)
        step *= np.minimum(1.0, max_step / np.maximum(big, 1e-300))[:, None]

        # backtracking: accept the first halving that lowers the defect
        lam = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        new_z = za.copy()
        new_r = ra.copy()
        new_a = action[act].copy()
        old = np.abs(ra).max(axis=1)
        todo = np.flatnonzero(~(jbad | singular))
        for _ in range(12):
            if todo.size == 0:
                break
            trial = za[todo] + lam[todo, None] * step[todo]
            tr, ta, tb = _residual(spec, sigma, walks, trial, ia[todo], substeps, guard[act][todo])
            tn = np.abs(tr).max(axis=1)
            good = (~tb) & ((tn < old[todo]) | (tn < tol))
            g = todo[good]
            new_z[g] = trial[good]
            new_r[g] = tr[good]
            new_a[g] = ta[good]
            accepted[g] = True
            todo = todo[~good]
            lam[todo] *= 0.5
        z[act] = new_z
        r[act] = new_r
        action[act] = new_a
        norm_a = np.abs(new_r).max(axis=1)
        iters[act] = it
        history[act, it] = norm_a
        st = np.full(act.size, -1)
        # below tol, keep polishing while Newton still gains a factor 10
        settled = (norm_a < 1e-3 * tol) | ~accepted | (norm_a > 0.1 * old)
        st[(norm_a < tol) & settled] = OK
        st[(st < 0) & singular] = SINGULAR
        st[(st < 0) & jbad] = DIVERGED
        st[(st < 0) & ~accepted & ~singular & ~jbad] = MAX_ITER  # no descent possible
        status[act] = st
    status[status < 0] = MAX_ITER
    return {"z": z, "residual": np.abs(r).max(axis=1), "action": action,
            "status": status, "iterations": iters, "history": history}


# ---------------------------------------------------------------------------
# single-sample API
# ---------------------------------------------------------------------------

def _walks(w: WalkPath) -> WalkBatch:
    return WalkBatch(w.coins.signs[None])


def _substeps(n: int, substeps: int | None) -> int:
    if substeps is None:
        return 2
    if substeps < n or substeps % n:
        raise ValueError(f"substeps must be a positive multiple of n={n}, got {substeps}")
    return substeps // n


def integrate_flow(spec, w: WalkPath, sigma: float, z0, substeps: int | None = None) -> LoopPath:
    """Trajectory of ``z0 = (qbar0, p0)`` over one period; ``substeps`` is the total step count."""
    m = _substeps(w.n, substeps)
    walks = _walks(w)
    guard = 10.0 * (choose_R_batch(walks.grid, sigma, spec) + 1.0)
    _, _, bad, traj = flow(spec, sigma, walks, np.atleast_2d(z0), substeps=m, record=True, guard=guard)
    if bad[0]:
        raise Divergence("momentum left the guard region 10 (R + 1)")
    N = w.n * m
    return LoopPath(np.arange(N + 1) / N, traj[0], spec.d)


def shoot_residual(spec, w: WalkPath, sigma: float, z0, substeps: int | None = None) -> np.ndarray:
    """``(qbar(1) - qbar(0) - sigma W(1), p(1) - p(0))`` on the cover."""
    m = _substeps(w.n, substeps)
    walks = _walks(w)
    guard = 10.0 * (choose_R_batch(walks.grid, sigma, spec) + 1.0)
    r, _, bad = _residual(spec, sigma, walks, np.atleast_2d(np.asarray(z0, float)), np.arange(1), m, guard)
    if bad[0]:
        raise Divergence("momentum left the guard region 10 (R + 1)")
    return r[0]


def symplectic_action(orbit: ClosedOrbit | LoopPath, spec, w: WalkPath, sigma: float) -> float:
    """Composite Simpson rule for ``int p . dqbar/dt - K dt`` along the stored nodes.

    ``dqbar/dt`` is the flow velocity ``dK/dp`` at each node, which is exact on
    an orbit.
    """
    path = orbit.path if isinstance(orbit, ClosedOrbit) else orbit
    d = spec.d
    n = w.n
    ts = path.t
    idx = np.minimum(np.floor(ts * n).astype(int), n - 1)
    frac = ts * n - idx
    wt = w.values[idx] + frac[:, None] * w.coins.signs[idx] / np.sqrt(n)
    q = path.qbar - sigma * wt
    p = path.p
    vals = np.empty(len(ts))
    for i, t in enumerate(ts):
        _, gp = grad_H(spec, t, q[i:i + 1], p[i:i + 1])
        vals[i] = np.dot(p[i], gp[0]) - eval_H(spec, t, q[i:i + 1], p[i:i + 1])[0]
    return float(simpson(vals, x=ts))


def legendre_action(path: LoopPath, spec, w: WalkPath, sigma: float) -> float:
    """Action with ``dqbar/dt`` taken from the trajectory itself.

    The derivative is a fourth-order finite difference inside each kink
    interval (needs at least 4 steps per interval), so this is independent of
    the vector field used by :func:`symplectic_action`.
    """
    d = spec.d
    n = w.n
    N = len(path.t) - 1
    m = N // n
    if m < 4:
        raise ValueError("need at least 4 steps per kink interval")
    h = 1.0 / N
    qb = path.qbar
    deriv = np.empty_like(qb)
    for k in range(n):
        lo = k * m
        seg = qb[lo:lo + m + 1]
        dseg = np.empty_like(seg)
        # one-sided 5-point stencils at the ends, central inside
        for i in range(m + 1):
            if 2 <= i <= m - 2:
                c = [(i - 2, 1 / 12), (i - 1, -8 / 12), (i + 1, 8 / 12), (i + 2, -1 / 12)]
            elif i < 2:
                c = [(i + j, w_) for j, w_ in zip(range(5), _FWD5[i])]
            else:
                c = [(i - 4 + j, w_) for j, w_ in zip(range(5), _BWD5[m - i])]
            dseg[i] = sum(wt * seg[j] for j, wt in c) / h
        deriv[lo:lo + m + 1] = dseg
    ts = path.t
    idx = np.minimum(np.floor(ts * n).astype(int), n - 1)
    frac = ts * n - idx
    wt = w.values[idx] + frac[:, None] * w.coins.signs[idx] / np.sqrt(n)
    q = qb - sigma * wt
    p = path.p
    vals = np.array([np.dot(p[i], deriv[i]) - eval_H(spec, t, q[i:i + 1], p[i:i + 1])[0]
                     for i, t in enumerate(ts)])
    # Simpson per kink interval keeps full order across the kinks
    total = 0.0
    for k in range(n):
        lo = k * m
        total += simpson(vals[lo:lo + m + 1], x=ts[lo:lo + m + 1])
    return float(total)


# five-point one-sided first-derivative weights (offsets 0..4), rows: position 0 and 1
_FWD5 = [(-25 / 12, 48 / 12, -36 / 12, 16 / 12, -3 / 12),
         (-3 / 12, -10 / 12, 18 / 12, -6 / 12, 1 / 12)]
# mirrored for the right end, indexed by distance from the end (0 or 1)
_BWD5 = [(3 / 12, -16 / 12, 36 / 12, -48 / 12, 25 / 12),
         (-1 / 12, 6 / 12, -18 / 12, 10 / 12, 3 / 12)]


def newton_closed_orbit(spec, w: WalkPath, sigma: float, guess, substeps: int | None = None,
                        max_iter: int = 50, with_path: bool = True) -> ClosedOrbit:
    m = _substeps(w.n, substeps)
    out = newton_batch(spec, sigma, _walks(w), np.atleast_2d(np.asarray(guess, float)),
                       substeps=m, max_iter=max_iter)
    st = int(out["status"][0])
    if st != OK:
        raise _ERRORS[st](f"Newton failed ({STATUS_NAMES[st]}), residual {out['residual'][0]:.3e}")
    z0 = out["z"][0]
    orbit = ClosedOrbit(w.coins, z0, float(out["action"][0]), float(out["residual"][0]),
                        iterations=int(out["iterations"][0]),
                        residual_history=[float(v) for v in out["history"][0] if np.isfinite(v)])
    if with_path:
        orbit.path = integrate_flow(spec, w, sigma, z0, w.n * m)
        orbit.action = symplectic_action(orbit, spec, w, sigma)
    return orbit


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

def seed_grid(d: int, per_axis: int) -> np.ndarray:
    axes = [np.arange(per_axis) / per_axis] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def _wrapped(z, d):
    out = np.array(z, copy=True)
    out[..., :d] = np.mod(out[..., :d], 1.0)
    return out


def _distinct(zs, d, tol=DEDUP_TOL):
    keep = []
    for i, z in enumerate(zs):
        dup = False
        for j in keep:
            diff = z - zs[j]
            diff[:d] -= np.round(diff[:d])
            if np.abs(diff).max() < tol:
                dup = True
                break
        if not dup:
            keep.append(i)
    return keep


def averaged_perturbation(spec, sigma: float, walks: WalkBatch, qbar0) -> np.ndarray:
    """``Phi(qbar0) = int_0^1 F_t(qbar0 + t p0 - sigma W(t), p0) dt`` with ``p0 = sigma W(1)``.

    The perturbation averaged over the free orbits; its critical points locate
    the orbits that survive a small ``F`` (trapezoid rule on the kink nodes).
    Returns ``(M, len(qbar0))``.
    """
    n = walks.n
    ts = np.arange(n + 1) / n
    p0 = sigma * walks.end                                          # (M, d)
    base = ts[None, :, None] * p0[:, None, :] - sigma * walks.grid  # (M, n+1, d)
    out = np.empty((walks.M, len(qbar0)))
    env, _, _ = spec.envelope(p0)
    weights = np.full(n + 1, 1.0 / n)
    weights[[0, -1]] *= 0.5
    for j, q0 in enumerate(np.atleast_2d(qbar0)):
        vals = np.zeros((walks.M, n + 1))
        for i, t in enumerate(ts):
            vals[:, i] = spec.fourier(t, q0 + base[:, i])[0]
        out[:, j] = env * (vals @ weights)
    return out


def averaged_seeds(spec, sigma: float, walks: WalkBatch, resolution: int | None = None):
    """Approximate critical points of :func:`averaged_perturbation` on a periodic grid.

    ``d = 1``: local extrema.  ``d = 2``: local minima of the squared central-difference
    gradient over the 3x3 neighbourhood, which also catches saddles.  Returns a list
    of seed arrays ``(k, d)`` per sample; an empty entry means the averaged function
    is flat and the caller should fall back to a grid.
    """
    d = spec.d
    if d not in (1, 2):
        raise ValueError("averaged seeding is implemented for d <= 2")
    res = resolution or (64 if d == 1 else 24)
    grid = seed_grid(d, res)
    phi = averaged_perturbation(spec, sigma, walks, grid)
    scale = np.ptp(phi, axis=1)
    if d == 1:
        left, right = np.roll(phi, 1, axis=1), np.roll(phi, -1, axis=1)
        ext = ((phi < left) & (phi <= right)) | ((phi > left) & (phi >= right))
    else:
        f = phi.reshape(walks.M, res, res)
        g2 = sum((np.roll(f, -1, axis=a) - np.roll(f, 1, axis=a)) ** 2 for a in (1, 2))
        ext = np.ones_like(g2, dtype=bool)
        strict = np.zeros_like(ext)
        for da in (-1, 0, 1):
            for db in (-1, 0, 1):
                if da or db:
                    nb = np.roll(np.roll(g2, da, axis=1), db, axis=2)
                    ext &= g2 <= nb
                    strict |= g2 < nb
        ext = (ext & strict).reshape(walks.M, -1)
    return [grid[ext[i]] if scale[i] > 1e-14 else np.zeros((0, d)) for i in range(walks.M)]


def solve_families(spec, sigma: float, walks: WalkBatch, seeds_per_axis: int = 8,
                   steps: int = 32, substeps: int = 2, max_iter: int = 50,
                   seeding: str = "grid"):
    """Continuation ``eps: 0 -> 1`` of ``eps * F`` from the free family, all samples at once.

    ``seeding="grid"`` starts from ``seeds_per_axis**d`` uniform ``qbar0``;
    ``"averaged"`` starts from the critical points of the averaged perturbation
    (falls back to the grid when that function is flat).  Returns, per sample, a
    dict with sorted distinct ``z0``/``action``/``residual`` arrays, the number
    of failed seeds and the Morse-Bott flag.
    """
    d = spec.d
    M = walks.M
    grid_seeds = seed_grid(d, seeds_per_axis)
    if seeding == "grid" or spec.is_free:
        per_sample = [grid_seeds] * M
    elif seeding == "averaged":
        per_sample = [s if len(s) >= 2 else grid_seeds for s in averaged_seeds(spec, sigma, walks)]
    else:
        raise ValueError(f"unknown seeding {seeding!r}")
    counts = np.array([len(s) for s in per_sample])
    sample_idx = np.repeat(np.arange(M), counts)
    z = np.empty((len(sample_idx), 2 * d))
    z[:, :d] = np.concatenate(per_sample)
    z[:, d:] = sigma * walks.end[sample_idx]
    alive = np.ones(len(sample_idx), dtype=bool)
    morse_bott = spec.is_free
    ladder = [1.0] if morse_bott else [k / steps for k in range(1, steps + 1)]
    final_act = np.full(len(sample_idx), np.nan)
    final_res = np.full(len(sample_idx), np.inf)
    for eps in ladder:
        rows = np.flatnonzero(alive)
        out = newton_batch(spec.scaled(eps), sigma, walks, z[rows], sample_idx[rows],
                           substeps=substeps, max_iter=max_iter)
        z[rows] = out["z"]
        final_act[rows] = out["action"]
        final_res[rows] = out["residual"]
        alive[rows[out["status"] != OK]] = False
    starts = np.concatenate([[0], np.cumsum(counts)])
    results = []
    for i in range(M):
        mine = [r for r in range(starts[i], starts[i + 1]) if alive[r]]
        zs = _wrapped(z[mine], d)
        acts = final_act[mine]
        keep = list(range(len(mine))) if morse_bott else _distinct(zs, d)
        order = sorted(keep, key=lambda k: acts[k])
        results.append({
            "z0": zs[order], "action": acts[order], "residual": final_res[mine][order],
            "failed": int(counts[i] - len(mine)), "morse_bott": morse_bott,
        })
    return results


def find_orbit_family(spec, w: WalkPath, sigma: float, steps: int = 32, seeds_per_axis: int = 8,
                      substeps: int | None = None, with_paths: bool = True,
                      seeding: str = "grid") -> OrbitFamily:
    m = _substeps(w.n, substeps)
    res = solve_families(spec, sigma, _walks(w), seeds_per_axis, steps, m, seeding=seeding)[0]
    d = spec.d
    orbits = []
    for z0, a, r in zip(res["z0"], res["action"], res["residual"]):
        o = ClosedOrbit(w.coins, z0, float(a), float(r))
        if with_paths:
            o.path = integrate_flow(spec, w, sigma, z0, w.n * m)
            o.action = symplectic_action(o, spec, w, sigma)
        orbits.append(o)
    if res["morse_bott"]:
        labeled = {}
        for lab, o in zip(orbit_labels(d), orbits):
            labeled[lab] = o
            o.label = lab
        return OrbitFamily(orbits, labeled, True, {"failed_seeds": res["failed"]})
    if len(orbits) < d + 1:
        raise FamilyCollapse(len(orbits), d + 1)
    labeled = {}
    for lab, pos in zip(orbit_labels(d), label_positions(len(orbits), d)):
        labeled[lab] = orbits[pos]
        orbits[pos].label = orbits[pos].label or lab
    return OrbitFamily(orbits, labeled, False, {"failed_seeds": res["failed"]})


def label_family(result: dict, d: int) -> dict:
    """Label -> index into the sorted arrays of one :func:`solve_families` entry."""
    count = len(result["action"])
    if count == 0:
        return {}
    return dict(zip(orbit_labels(d), label_positions(count, d)))


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass
class OrbitEnsemble:
    """Labeled orbits for samples ``indices`` of one ``(n, seed)`` stream.

    Only starting points are kept; trajectories are recomputed on demand with
    :meth:`trajectories`, which keeps large ensembles cheap to store.
    """
    spec: HamiltonianSpec
    sigma: float
    n: int
    seed: int
    indices: np.ndarray      # (M,)
    z0: dict                 # label -> (M, 2d), NaN rows where the label is missing
    action: dict             # label -> (M,)
    residual: dict           # label -> (M,)
    count: np.ndarray        # distinct orbits found per sample
    substeps: int = 2

    @property
    def d(self):
        return self.spec.d

    @property
    def M(self):
        return len(self.indices)

    def signs(self, rows=None):
        idx = self.indices if rows is None else self.indices[rows]
        return sample_coin_block(self.n, self.d, self.seed, idx)

    def valid(self, label):
        return np.isfinite(self.action[label])

    def trajectories(self, label, rows):
        """``(len(rows), n*substeps+1, 2d)`` orbits on the cover plus walk values on the same nodes."""
        walks = WalkBatch(self.signs(rows))
        _, _, _, traj = flow(self.spec, self.sigma, walks, self.z0[label][rows],
                             substeps=self.substeps, record=True)
        N = self.n * self.substeps
        ts = np.arange(N + 1) / N
        idx = np.minimum(np.arange(N + 1) // self.substeps, self.n - 1)
        frac = (ts * self.n - idx)[None, :, None]
        wvals = walks.grid[:, idx] + frac * walks.signs[:, idx] / walks.rootn
        return traj, wvals

    def records(self):
        for lab in self.z0:
            for row, idx in enumerate(self.indices):
                if not np.isfinite(self.action[lab][row]):
                    continue
                z = self.z0[lab][row]
                yield {"seed": self.seed, "sample": int(idx), "n": self.n, "d": self.d,
                       "sigma": self.sigma, "label": lab, "action": float(self.action[lab][row]),
                       "qbar0": z[:self.d].tolist(), "p0": z[self.d:].tolist(),
                       "residual": float(self.residual[lab][row])}


def solve_ensemble(spec, sigma: float, n: int, seed: int, samples, seeds_per_axis: int = 8,
                   steps: int = 32, substeps: int = 2, chunk: int = 2000,
                   seeding: str = "grid", progress=None) -> OrbitEnsemble:
    """Orbit families for many samples, labeled by the action chain.

    ``samples`` is a count or an explicit array of sample indices.  Results are
    independent of ``chunk``.
    """
    indices = np.arange(samples) if np.isscalar(samples) else np.asarray(samples, dtype=np.int64)
    M = len(indices)
    d = spec.d
    labels = orbit_labels(d)
    z0 = {lab: np.full((M, 2 * d), np.nan) for lab in labels}
    act = {lab: np.full(M, np.nan) for lab in labels}
    res = {lab: np.full(M, np.nan) for lab in labels}
    count = np.zeros(M, dtype=int)
    for start in range(0, M, chunk):
        rows = np.arange(start, min(start + chunk, M))
        walks = WalkBatch(sample_coin_block(n, d, seed, indices[rows]))
        fams = solve_families(spec, sigma, walks, seeds_per_axis, steps, substeps, seeding=seeding)
        for row, fam in zip(rows, fams):
            count[row] = len(fam["action"])
            for lab, pos in label_family(fam, d).items():
                z0[lab][row] = fam["z0"][pos]
                act[lab][row] = fam["action"][pos]
                res[lab][row] = fam["residual"][pos]
        if progress is not None:
            progress(rows[-1] + 1, M)
    return OrbitEnsemble(spec, float(sigma), int(n), int(seed), indices, z0, act, res, count, substeps)


def save_ensemble(ens: OrbitEnsemble, path) -> None:
    """JSON lines: one header, then one record per (sample, label).  Floats round-trip exactly."""
    head = {"kind": "header", "spec": ens.spec.to_dict(), "sigma": ens.sigma, "n": ens.n,
            "seed": ens.seed, "indices": [int(i) for i in ens.indices],
            "count": [int(c) for c in ens.count], "substeps": ens.substeps,
            "labels": list(ens.z0)}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in ens.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_ensemble(path) -> OrbitEnsemble:
    with open(path) as fh:
        head = json.loads(fh.readline())
        if head.get("kind") != "header":
            raise ValueError(f"{path}: missing ensemble header")
        spec = HamiltonianSpec.from_dict(head["spec"])
        indices = np.asarray(head["indices"], dtype=np.int64)
        row_of = {int(i): r for r, i in enumerate(indices)}
        M, d = len(indices), spec.d
        z0 = {lab: np.full((M, 2 * d), np.nan) for lab in head["labels"]}
        act = {lab: np.full(M, np.nan) for lab in head["labels"]}
        res = {lab: np.full(M, np.nan) for lab in head["labels"]}
        for line in fh:
            rec = json.loads(line)
            r = row_of[rec["sample"]]
            lab = rec["label"]
            z0[lab][r] = rec["qbar0"] + rec["p0"]
            act[lab][r] = rec["action"]
            res[lab][r] = rec["residual"]
    return OrbitEnsemble(spec, float(head["sigma"]), int(head["n"]), int(head["seed"]), indices,
                         z0, act, res, np.asarray(head["count"], dtype=int), int(head["substeps"]))

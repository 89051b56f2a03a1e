"""Empirical time-periodic measures built from orbit ensembles.

A measure is a stack of phase-space histograms, one per time node ``j/T`` for
``j = 0..T`` (both ends kept, so periodicity can be checked directly).  Axes
are ordered ``(t, q_1..q_d, p_1..p_d)``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .orbit_solver import OrbitEnsemble
from .sample_space import holder_seminorm_batch, walk_grid
from .torus_phase import HamiltonianSpec, choose_R_batch, cutoff_gap_constant, energy_and_grad, grad_H

MAGIC = b"RWFM"
VERSION = 1
MAX_CELLS = 60_000_000


class GridMismatch(ValueError):
    pass


@dataclass
class EmpiricalMeasure:
    mass: np.ndarray            # (T+1, nq, ..., np, ...) float64, each slice sums to 1
    d: int
    P: float
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.mass.shape[0] - 1

    @property
    def nq(self) -> int:
        return self.mass.shape[1]

    @property
    def np_(self) -> int:
        return self.mass.shape[1 + self.d]

    @property
    def times(self):
        return np.arange(self.T + 1) / self.T

    @property
    def dq(self) -> float:
        return 1.0 / self.nq

    @property
    def dp(self) -> float:
        return 2.0 * self.P / self.np_

    def q_centers(self):
        return (np.arange(self.nq) + 0.5) * self.dq

    def p_centers(self):
        return -self.P + (np.arange(self.np_) + 0.5) * self.dp

    def bin_widths(self):
        return [self.dq] * self.d + [self.dp] * self.d

    def marginal(self, axis: int) -> np.ndarray:
        """``(T+1, bins)`` marginal along phase axis ``axis`` (0..2d-1)."""
        others = tuple(a for a in range(1, 2 * self.d + 1) if a != axis + 1)
        return self.mass.sum(axis=others)

    def same_grid(self, other: "EmpiricalMeasure") -> bool:
        return self.mass.shape == other.mass.shape and self.d == other.d and self.P == other.P


def _check_dims(d, bins):
    T, nq, np_ = bins
    if d > 2:
        raise ValueError("measure grids are limited to d <= 2")
    cells = (T + 1) * nq**d * np_**d
    if cells > MAX_CELLS:
        raise MemoryError(f"{cells} cells exceed the guard of {MAX_CELLS}")


def grid_bound(spec, sigma: float, sup_walk: float = 4.5) -> float:
    """Momentum half-width ``P = R + 1`` with ``R`` evaluated at ``sup|W| = sup_walk``.

    A fixed ``P`` keeps grids identical across the n-ladder; orbits never reach
    it (their momenta stay well inside ``R``), and deposits check this.
    """
    return float(1.0 + cutoff_gap_constant(spec.c1_bound) + abs(sigma) * sup_walk)


def default_P(spec, sigma, walk_values) -> float:
    return float(np.max(choose_R_batch(walk_values, sigma, spec)) + 1.0)


def _deposit(counts, z_t, w_t, sigma, d, nq, np_, P, kind):
    """Add integer counts for phase points ``z_t`` of shape ``(B, T+1, 2d)``."""
    q = z_t[..., :d] - sigma * w_t if kind == "u" else z_t[..., :d]
    p = z_t[..., d:]
    if np.any(np.abs(p) > P):
        raise ValueError(f"orbit momentum beyond the grid bound P={P}")
    iq = np.floor(np.mod(q, 1.0) * nq).astype(np.int64) % nq
    ip = np.minimum(np.floor((p + P) / (2 * P) * np_).astype(np.int64), np_ - 1)
    T1 = z_t.shape[1]
    flat = np.broadcast_to(np.arange(T1)[None, :], z_t.shape[:2]).astype(np.int64)
    for a in range(d):
        flat = flat * nq + iq[..., a]
    for a in range(d):
        flat = flat * np_ + ip[..., a]
    counts += np.bincount(flat.ravel(), minlength=counts.size).reshape(counts.shape)


def _close_loop(z, w, kind):
    """For ``u`` the last slice is the first one: orbits close up, and reusing
    the ``t = 0`` point keeps points on bin edges from splitting across slices."""
    if kind == "u":
        z[:, -1] = z[:, 0]
        w[:, -1] = w[:, 0]


def _slice_nodes(N, T):
    """Fractional node positions of the slice times ``j/T`` on an ``N``-step grid."""
    pos = np.arange(T + 1) * N / T
    lo = np.minimum(np.floor(pos).astype(int), N - 1)
    return lo, pos - lo


def accumulate(source, bins=(64, 64, 64), label: str | None = None, P: float | None = None,
               kind: str = "u", chunk: int = 1000, spec=None, sigma=None) -> EmpiricalMeasure:
    """Histogram of ``u(omega, t)`` over samples and time nodes.

    ``source`` is an :class:`OrbitEnsemble` (with ``label``) or a list of
    :class:`ClosedOrbit` objects carrying paths (with ``spec`` and ``sigma``),
    which must share one label.  ``kind="u"`` bins the physical position
    ``qbar - sigma W``; ``"ubar"`` bins ``qbar`` itself.  Counts stay integers
    until the final normalisation, so the result does not depend on ``chunk``.
    """
    if kind not in ("u", "ubar"):
        raise ValueError("kind must be 'u' or 'ubar'")
    if isinstance(source, OrbitEnsemble):
        return _accumulate_ensemble(source, bins, label, P, kind, chunk)
    if spec is None or sigma is None:
        raise ValueError("orbit lists need spec and sigma")
    orbits = list(source)
    if label is not None and any(o.label != label for o in orbits):
        raise ValueError(f"orbits do not all carry label {label!r}")
    return accumulate_orbits(orbits, spec, sigma, bins, P, kind)


def accumulate_orbits(orbits, spec: HamiltonianSpec, sigma: float, bins=(64, 64, 64),
                      P: float | None = None, kind: str = "u") -> EmpiricalMeasure:
    """Same as :func:`accumulate` for a list of :class:`ClosedOrbit` with paths."""
    orbits = list(orbits)
    if not orbits:
        raise ValueError("empty ensemble")
    labels = {o.label for o in orbits}
    if len(labels) > 1:
        raise ValueError(f"mixed labels in ensemble: {sorted(labels)}")
    d = spec.d
    _check_dims(d, bins)
    T, nq, np_ = bins
    grids = np.stack([walk_grid(o.coins.signs) for o in orbits])
    if P is None:
        P = default_P(spec, sigma, grids)
    counts = np.zeros((T + 1,) + (nq,) * d + (np_,) * d, dtype=np.int64)
    for o, g in zip(orbits, grids):
        N = len(o.path.t) - 1
        n = o.coins.n
        lo, frac = _slice_nodes(N, T)
        z = o.path.z[lo] + frac[:, None] * (o.path.z[lo + 1] - o.path.z[lo])
        ts = np.arange(T + 1) / T
        k = np.minimum(np.floor(ts * n).astype(int), n - 1)
        w = g[k] + (ts * n - k)[:, None] * o.coins.signs[k] / np.sqrt(n)
        z, w = z[None].copy(), w[None].copy()
        _close_loop(z, w, kind)
        _deposit(counts, z, w, sigma, d, nq, np_, P, kind)
    meta = {"n": orbits[0].coins.n, "M": len(orbits), "label": orbits[0].label,
            "sigma": sigma, "spec": spec.digest(), "kind": kind}
    return EmpiricalMeasure(counts / len(orbits), d, float(P), meta)


def _accumulate_ensemble(ens: OrbitEnsemble, bins, label, P, kind, chunk):
    if label is None:
        raise ValueError("an ensemble holds several labels; pass label=")
    if label not in ens.z0:
        raise ValueError(f"unknown label {label!r}")
    d = ens.d
    _check_dims(d, bins)
    T, nq, np_ = bins
    rows = np.flatnonzero(ens.valid(label))
    if rows.size == 0:
        raise ValueError(f"no orbits with label {label!r}")
    if P is None:
        P = default_P(ens.spec, ens.sigma, walk_grid(ens.signs(rows)))
    counts = np.zeros((T + 1,) + (nq,) * d + (np_,) * d, dtype=np.int64)
    N = ens.n * ens.substeps
    lo, frac = _slice_nodes(N, T)
    for start in range(0, rows.size, chunk):
        part = rows[start:start + chunk]
        traj, wvals = ens.trajectories(label, part)
        f = frac[None, :, None]
        z = traj[:, lo] + f * (traj[:, lo + 1] - traj[:, lo])
        w = wvals[:, lo] + f * (wvals[:, lo + 1] - wvals[:, lo])
        _close_loop(z, w, kind)
        _deposit(counts, z, w, ens.sigma, d, nq, np_, P, kind)
    meta = {"n": ens.n, "M": int(rows.size), "label": label, "sigma": ens.sigma,
            "spec": ens.spec.digest(), "seed": ens.seed, "kind": kind}
    return EmpiricalMeasure(counts / rows.size, d, float(P), meta)


def dirac_measure(points, d: int, P: float, bins=(64, 64, 64)) -> EmpiricalMeasure:
    """Unit mass at the bins of ``points`` (one phase point per slice, or one for all)."""
    _check_dims(d, bins)
    T, nq, np_ = bins
    pts = np.broadcast_to(np.atleast_2d(np.asarray(points, float)), (T + 1, 2 * d))
    counts = np.zeros((T + 1,) + (nq,) * d + (np_,) * d, dtype=np.int64)
    _deposit(counts, pts[None], np.zeros((1, T + 1, d)), 0.0, d, nq, np_, P, "u")
    return EmpiricalMeasure(counts.astype(float), d, float(P), {"M": 1})


# ---------------------------------------------------------------------------
# distances and functionals
# ---------------------------------------------------------------------------

def _w1_line(a, b, width):
    return np.abs(np.cumsum(a - b, axis=-1)).sum(axis=-1) * width


def _w1_circle(a, b, width):
    # on the circle W1 = min_c sum |D - c| width, minimised at a median of D
    D = np.cumsum(a - b, axis=-1)
    c = np.median(D, axis=-1, keepdims=True)
    return np.abs(D - c).sum(axis=-1) * width


def axis_distances(a: EmpiricalMeasure, b: EmpiricalMeasure) -> np.ndarray:
    """``(T, 2d)`` one-dimensional W1 per periodic time slice and phase axis."""
    if not a.same_grid(b):
        raise GridMismatch(f"grids differ: {a.mass.shape}/P={a.P} vs {b.mass.shape}/P={b.P}")
    out = np.empty((a.T, 2 * a.d))
    for ax in range(2 * a.d):
        ma = a.marginal(ax)[:-1]
        mb = b.marginal(ax)[:-1]
        if ax < a.d:
            out[:, ax] = _w1_circle(ma, mb, a.dq)
        else:
            out[:, ax] = _w1_line(ma, mb, a.dp)
    return out


def measure_distance(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Sliced W1: mean over the periodic time slices of the sum over phase axes.

    Summing the axes makes a pure shift by ``delta`` along one axis cost exactly
    ``delta``.  Position axes use the circular distance.
    """
    return float(axis_distances(a, b).sum(axis=1).mean())


def _phase_centers(m: EmpiricalMeasure):
    d = m.d
    axes = [m.q_centers()] * d + [m.p_centers()] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, 2 * d)
    return pts[:, :d], pts[:, d:]


def action_of_measure(m: EmpiricalMeasure, spec: HamiltonianSpec) -> float:
    """``int_0^1 sum_bins (p . dH/dp - H)(t, q, p) * mass dt`` at bin centres.

    Time integration is the mean over the periodic slices (trapezoid rule on a
    periodic integrand).
    """
    q, p = _phase_centers(m)
    total = 0.0
    for j, t in enumerate(m.times[:-1]):
        H, _, gp = energy_and_grad(spec, t, q, p)
        total += np.dot(m.mass[j].ravel(), np.sum(p * gp, axis=1) - H)
    return float(total / m.T)


# ---------------------------------------------------------------------------
# tightness diagnostics
# ---------------------------------------------------------------------------

def velocity_paths(ens: OrbitEnsemble, label: str, rows):
    """``d/dt ubar = (dK/dp, -dK/dq)`` on every integration node, ``(B, N+1, 2d)``."""
    traj, wvals = ens.trajectories(label, rows)
    d = ens.d
    N = traj.shape[1] - 1
    ts = np.arange(N + 1) / N
    vel = np.empty_like(traj)
    for i, t in enumerate(ts):
        q = traj[:, i, :d] - ens.sigma * wvals[:, i]
        gq, gp = grad_H(ens.spec, t, q, traj[:, i, d:])
        vel[:, i, :d] = gp
        vel[:, i, d:] = -gq
    return vel, ts


def tightness_report(ens: OrbitEnsemble, label: str, alpha: float = 0.25, rows=None,
                     quantiles=(0.5, 0.9, 0.99)) -> dict:
    """Quantiles over samples of the sup norm and Hölder-``alpha`` seminorm of ``d/dt ubar``."""
    if rows is None:
        rows = np.flatnonzero(ens.valid(label))
    vel, ts = velocity_paths(ens, label, rows)
    c0 = np.abs(vel).max(axis=(1, 2))
    hold = holder_seminorm_batch(vel, ts, alpha)
    return {
        "n": ens.n, "M": int(len(rows)), "label": label, "alpha": alpha,
        "c0": {str(q): float(v) for q, v in zip(quantiles, np.quantile(c0, quantiles))},
        "holder": {str(q): float(v) for q, v in zip(quantiles, np.quantile(hold, quantiles))},
    }


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

def write_measure(m: EmpiricalMeasure, path) -> None:
    """Flat binary: magic, version, ndim, dims, metadata JSON, float64 payload (C order)."""
    meta = dict(m.meta, d=m.d, P=m.P)
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, m.mass.ndim))
        fh.write(struct.pack(f"<{m.mass.ndim}I", *m.mass.shape))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(m.mass, dtype="<f8").tobytes())


def read_measure(path) -> EmpiricalMeasure:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a measure file")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        (size,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(size))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    if payload.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated payload")
    d = int(meta.pop("d"))
    P = float(meta.pop("P"))
    return EmpiricalMeasure(payload.reshape(dims).astype(np.float64), d, P, meta)


def write_marginals_csv(m: EmpiricalMeasure, path) -> None:
    """Long format: ``t, axis, center, mass`` for every slice and phase axis."""
    names = [f"q{i + 1}" for i in range(m.d)] + [f"p{i + 1}" for i in range(m.d)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "axis", "center", "mass"])
        for ax, name in enumerate(names):
            centers = m.q_centers() if ax < m.d else m.p_centers()
            marg = m.marginal(ax)
            for j, t in enumerate(m.times):
                for c, v in zip(centers, marg[j]):
                    out.writerow([repr(float(t)), name, repr(float(c)), repr(float(v))])

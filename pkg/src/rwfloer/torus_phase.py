"""Hamiltonians on T*T^d: ``H_t(q, p) = |p|^2/2 + F_t(q, p)``.

``F`` is a finite Fourier sum in ``(q, t)`` times a radial momentum envelope,
so gradients, Hessians and the C^1 bound are all available in closed form.

Sign convention for the walk-shifted Hamiltonian: positions on the lifted
loop are ``qbar = q + sigma * W(t)``, hence ``K_t(qbar, p) = H_t(qbar - sigma W(t), p)``
and closed orbits satisfy ``qbar(1) = qbar(0) + sigma W(1)``.  With ``F = 0``
this makes the contractible orbits exactly ``p = sigma W(1)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

TWO_PI = 2.0 * np.pi
# max of the smooth step's derivative, attained at x = 1/2
STEP_SLOPE = 2.0


def smooth_step(x, order: int = 0):
    """C^infinity step: 0 for x <= 0, 1 for x >= 1, logistic in between.

    ``psi(x) = expit(1/(1-x) - 1/x)``; ``order`` selects value, first or second
    derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    inside = (x > 0.0) & (x < 1.0)
    xc = np.where(inside, x, 0.5)
    y = 1.0 / (1.0 - xc) - 1.0 / xc
    psi = expit(y)
    if order == 0:
        return np.where(x >= 1.0, 1.0, np.where(inside, psi, 0.0))
    dy = 1.0 / (1.0 - xc) ** 2 + 1.0 / xc**2
    g = psi * (1.0 - psi)
    if order == 1:
        return np.where(inside, g * dy, 0.0)
    if order == 2:
        d2y = 2.0 / (1.0 - xc) ** 3 - 2.0 / xc**3
        return np.where(inside, g * (1.0 - 2.0 * psi) * dy**2 + g * d2y, 0.0)
    raise ValueError("order must be 0, 1 or 2")


def _radial(p, profile):
    """Value, gradient and Hessian of ``f(|p|)`` given ``profile(r, order)``.

    Profiles used here are flat near ``r = 0`` so the origin needs no care.
    """
    r = np.linalg.norm(p, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    f0 = profile(r, 0)
    f1 = profile(r, 1)
    f2 = profile(r, 2)
    u = p / safe[..., None]
    grad = f1[..., None] * u
    d = p.shape[-1]
    eye = np.eye(d)
    uu = u[..., :, None] * u[..., None, :]
    hess = f2[..., None, None] * uu + (f1 / safe)[..., None, None] * (eye - uu)
    return f0, grad, hess


@dataclass(frozen=True)
class FourierTerm:
    k: tuple
    m: int = 0
    a: float = 0.0
    phase: float = 0.0


@dataclass(frozen=True)
class HamiltonianSpec:
    d: int
    terms: tuple = ()
    plateau: float = 4.0
    taper: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.taper <= 0 or self.plateau < 0:
            raise ValueError("envelope needs plateau >= 0 and taper > 0")
        terms = tuple(t if isinstance(t, FourierTerm) else FourierTerm(**t) for t in self.terms)
        for t in terms:
            if len(t.k) != self.d:
                raise ValueError(f"wave vector {t.k} does not match d={self.d}")
            if int(t.m) != t.m:
                raise ValueError("time frequencies must be integers")
        object.__setattr__(self, "terms", tuple(
            FourierTerm(tuple(int(v) for v in t.k), int(t.m), float(t.a), float(t.phase))
            for t in terms))

    # ---- bookkeeping -------------------------------------------------
    @property
    def is_free(self) -> bool:
        return all(t.a == 0.0 for t in self.terms)

    @property
    def time_independent(self) -> bool:
        return all(t.m == 0 for t in self.terms)

    @property
    def c1_bound(self) -> float:
        """``sup|F| + sup|grad_q F| + sup|grad_p F|`` bounded termwise."""
        amp = sum(abs(t.a) for t in self.terms)
        wave = sum(abs(t.a) * TWO_PI * np.linalg.norm(t.k) for t in self.terms)
        return float(amp + wave + amp * STEP_SLOPE / self.taper)

    def scaled(self, factor: float) -> "HamiltonianSpec":
        terms = tuple(FourierTerm(t.k, t.m, t.a * factor, t.phase) for t in self.terms)
        return HamiltonianSpec(self.d, terms, self.plateau, self.taper)

    def to_dict(self, sigma: float | None = None) -> dict:
        out = {
            "d": self.d,
            "terms": [{"k": list(t.k), "m": t.m, "a": t.a, "phase": t.phase} for t in self.terms],
            "envelope": {"plateau": self.plateau, "taper": self.taper},
        }
        if sigma is not None:
            out["sigma"] = float(sigma)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HamiltonianSpec":
        env = data.get("envelope", {})
        terms = tuple(FourierTerm(tuple(t["k"]), int(t.get("m", 0)), float(t["a"]),
                                  float(t.get("phase", 0.0))) for t in data.get("terms", []))
        return cls(int(data["d"]), terms, float(env.get("plateau", 4.0)), float(env.get("taper", 1.0)))

    def to_json(self, sigma: float | None = None) -> str:
        return json.dumps(self.to_dict(sigma), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HamiltonianSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    # ---- envelope ------------------------------------------------------
    def _env_profile(self, r, order):
        x = (r - self.plateau) / self.taper
        if order == 0:
            return 1.0 - smooth_step(x)
        return -smooth_step(x, order) / self.taper**order

    def envelope(self, p):
        return _radial(np.asarray(p, dtype=np.float64), self._env_profile)

    # ---- F and derivatives ---------------------------------------------
    def fourier(self, t, q):
        """``sum a cos(theta)`` with its q-gradient and q-Hessian (no envelope)."""
        q = np.asarray(q, dtype=np.float64)
        shape = q.shape[:-1]
        d = self.d
        val = np.zeros(shape)
        grad = np.zeros(shape + (d,))
        hess = np.zeros(shape + (d, d))
        for term in self.terms:
            if term.a == 0.0:
                continue
            k = np.asarray(term.k, dtype=np.float64)
            theta = TWO_PI * (q @ k + term.m * np.asarray(t)) + term.phase
            c = np.cos(theta)
            s = np.sin(theta)
            val += term.a * c
            grad += (-term.a * TWO_PI * s)[..., None] * k
            hess += (-term.a * TWO_PI**2 * c)[..., None, None] * np.outer(k, k)
        return val, grad, hess

    def F(self, t, q, p):
        e, _, _ = self.envelope(p)
        f, _, _ = self.fourier(t, q)
        return e * f


def eval_H(spec: HamiltonianSpec, t, q, p):
    """``|p|^2/2 + F_t(q, p)`` for (batched) positions ``q`` and momenta ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return 0.5 * np.sum(p * p, axis=-1) + spec.F(t, q, p)


def grad_H(spec: HamiltonianSpec, t, q, p):
    """Return ``(dH/dq, dH/dp)``."""
    p = np.asarray(p, dtype=np.float64)
    e, de, _ = spec.envelope(p)
    f, df, _ = spec.fourier(t, q)
    return e[..., None] * df, p + f[..., None] * de


def energy_and_grad(spec: HamiltonianSpec, t, q, p):
    """``(H, dH/dq, dH/dp)`` in one pass, for rows ``(B, d)``; the flow's hot path.

    Skips Hessians, and skips the envelope entirely when every momentum sits on
    its plateau (envelope identically 1 there).
    """
    kin = 0.5 * np.sum(p * p, axis=-1)
    if spec.is_free:
        return kin, np.zeros_like(q), p
    f = np.zeros(q.shape[:-1])
    df = np.zeros_like(q)
    for term in spec.terms:
        if term.a == 0.0:
            continue
        theta = q @ (TWO_PI * np.asarray(term.k, dtype=np.float64)) + (TWO_PI * term.m * t + term.phase)
        f += term.a * np.cos(theta)
        df -= (term.a * TWO_PI * np.sin(theta))[..., None] * np.asarray(term.k, dtype=np.float64)
    r2max = float(np.max(np.sum(p * p, axis=-1))) if p.size else 0.0
    if r2max <= spec.plateau ** 2:
        return kin + f, df, p
    r = np.linalg.norm(p, axis=-1)
    x = (r - spec.plateau) / spec.taper
    e = 1.0 - smooth_step(x)
    e1 = -smooth_step(x, 1) / spec.taper
    u = p / np.where(r > 0, r, 1.0)[..., None]
    return kin + e * f, e[..., None] * df, p + (f * e1)[..., None] * u


def hess_H(spec: HamiltonianSpec, t, q, p):
    """Full ``2d x 2d`` Hessian ordered ``(q, p)``."""
    p = np.asarray(p, dtype=np.float64)
    e, de, d2e = spec.envelope(p)
    f, df, d2f = spec.fourier(t, q)
    d = spec.d
    H = np.zeros(p.shape[:-1] + (2 * d, 2 * d))
    H[..., :d, :d] = e[..., None, None] * d2f
    cross = df[..., :, None] * de[..., None, :]
    H[..., :d, d:] = cross
    H[..., d:, :d] = np.swapaxes(cross, -1, -2)
    H[..., d:, d:] = np.eye(d) + f[..., None, None] * d2e
    return H


def shift_position(qbar, w_t, sigma):
    """Physical position ``q = qbar - sigma W(t)`` (on the cover)."""
    return np.asarray(qbar, dtype=np.float64) - sigma * np.asarray(w_t, dtype=np.float64)


def eval_K_omega(spec: HamiltonianSpec, w, sigma: float, t: float, qbar, p):
    """Walk-shifted Hamiltonian for a :class:`WalkPath` ``w``."""
    from .sample_space import walk_eval

    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    q = np.mod(shift_position(qbar, walk_eval(w, t), sigma), 1.0)
    return eval_H(spec, t, q, p)


def grad_K_omega(spec, w, sigma, t, qbar, p):
    from .sample_space import walk_eval

    q = shift_position(qbar, walk_eval(w, t), sigma)
    return grad_H(spec, t, q, p)


@dataclass(frozen=True)
class CutoffSpec:
    R: float

    def chi(self, s, order: int = 0):
        x = np.asarray(s, dtype=np.float64) - self.R
        if order == 0:
            return 1.0 - smooth_step(x)
        return -smooth_step(x, order)

    def profile(self, r, order):
        return self.chi(r, order)

    # |chi'| <= STEP_SLOPE
    slope_bound: float = field(default=STEP_SLOPE, init=False)


def cutoff_gap_constant(c1: float) -> float:
    """Momentum margin ``C(c1)`` added to ``sigma * sup|W|``.

    Along an orbit ``|dp/dt| <= c1``, so ``sup|p| <= ||p||_L2 + c1``.  The action
    ``int |p|^2/2 + p.dG/dp - G`` is at least ``||p||^2/2 - c1 ||p|| - c1``; with the
    action bound ``A = (sigma W(1))^2/2 + 4 c1`` this gives
    ``||p|| <= c1 + sqrt(c1^2 + 2A + 2c1)`` and hence
    ``sup|p| <= 2 c1 + sqrt(c1^2 + (sigma W(1))^2 + 10 c1)``
    ``      <= sigma sup|W| + 2 c1 + sqrt(c1^2 + 10 c1)``.
    """
    return 2.0 * c1 + np.sqrt(c1 * c1 + 10.0 * c1)


def choose_R(w, sigma: float, spec: HamiltonianSpec, floor: float = 1.0) -> CutoffSpec:
    sup_w = float(np.max(np.linalg.norm(w.values, axis=-1)))
    return CutoffSpec(max(floor, abs(sigma) * sup_w + cutoff_gap_constant(spec.c1_bound)))


def choose_R_batch(walk_values, sigma, spec, floor: float = 1.0):
    sup_w = np.max(np.linalg.norm(walk_values, axis=-1), axis=-1)
    return np.maximum(floor, abs(sigma) * sup_w + cutoff_gap_constant(spec.c1_bound))


def cutoff_parts(spec: HamiltonianSpec, t, q, p, R):
    """Value, gradient and Hessian of ``G_bar = chi_R(|p|) F`` in ``(q, p)``.

    ``R`` may be a scalar or broadcast against the batch of ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    d = spec.d

    def prof(r, order):
        x = r - R
        if order == 0:
            return 1.0 - smooth_step(x)
        return -smooth_step(x, order)

    c, dc, d2c = _radial(p, prof)
    e, de, d2e = spec.envelope(p)
    f, df, d2f = spec.fourier(t, q)
    # G = c * e * f
    ce = c * e
    dce = dc * e[..., None] + c[..., None] * de
    d2ce = (d2c * e[..., None, None] + d2e * c[..., None, None]
            + dc[..., :, None] * de[..., None, :] + de[..., :, None] * dc[..., None, :])
    val = ce * f
    gq = ce[..., None] * df
    gp = f[..., None] * dce
    H = np.zeros(p.shape[:-1] + (2 * d, 2 * d))
    H[..., :d, :d] = ce[..., None, None] * d2f
    cross = df[..., :, None] * dce[..., None, :]
    H[..., :d, d:] = cross
    H[..., d:, :d] = np.swapaxes(cross, -1, -2)
    H[..., d:, d:] = f[..., None, None] * d2ce
    return val, gq, gp, H


def pendulum(eps: float = 0.1, plateau: float = 4.0, taper: float = 1.0) -> HamiltonianSpec:
    """``F = eps cos(2 pi q)`` times the envelope, time independent, d = 1."""
    return HamiltonianSpec(1, (FourierTerm((1,), 0, eps, 0.0),), plateau, taper)


def product_cosine(eps: float = 0.1, plateau: float = 4.0, taper: float = 1.0) -> HamiltonianSpec:
    """``F = eps cos(2 pi q1) cos(2 pi q2)`` written as two Fourier terms, d = 2."""
    half = 0.5 * eps
    return HamiltonianSpec(2, (FourierTerm((1, 1), 0, half, 0.0),
                               FourierTerm((1, -1), 0, half, 0.0)), plateau, taper)

"""Coin-flip sample space and rescaled random walks.

A sample is a block of ``n*d`` fair signs.  The walk ``W_n`` is the piecewise
linear interpolation of the rescaled partial sums on the grid ``k/n``.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "CoinSequence",
    "WalkPath",
    "sample_coins",
    "sample_coin_block",
    "make_walk",
    "walk_eval",
    "walk_grid",
    "walk_at",
    "holder_seminorm",
    "holder_seminorm_batch",
    "clt_distance",
    "exact_ks_distance",
    "enumerate_endpoints",
    "extend_walk",
    "write_path_csv",
    "ensemble_summary",
]


@dataclass(frozen=True)
class CoinSequence:
    n: int
    d: int
    signs: np.ndarray  # (n, d) int8, entries in {-1, +1}; step i is row i
    seed: int
    index: int = 0

    def __post_init__(self):
        s = np.asarray(self.signs)
        if s.shape != (self.n, self.d):
            raise ValueError(f"signs must have shape ({self.n}, {self.d}), got {s.shape}")
        if not np.all(np.abs(s) == 1):
            raise ValueError("every coin must be -1 or +1")

    @property
    def flat(self) -> np.ndarray:
        return self.signs.reshape(-1)


@dataclass(frozen=True)
class WalkPath:
    coins: CoinSequence
    values: np.ndarray  # (n+1, d), W_n at t = k/n

    @property
    def n(self) -> int:
        return self.coins.n

    @property
    def d(self) -> int:
        return self.coins.d

    @property
    def end(self) -> np.ndarray:
        return self.values[-1]


def _check_sizes(n, d):
    if int(n) < 1 or int(d) < 1:
        raise ValueError(f"n and d must be positive, got n={n}, d={d}")


def _bits_to_signs(raw: np.ndarray, count: int) -> np.ndarray:
    bits = np.unpackbits(raw.view(np.uint8), bitorder="little")[:count]
    return (2 * bits.astype(np.int8) - 1).astype(np.int8)


def _philox(seed: int, index: int) -> np.random.Philox:
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index) & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Philox(key=key)


def sample_coin_block(n: int, d: int, seed: int, indices) -> np.ndarray:
    """Signs for several samples at once, shape ``(len(indices), n, d)``.

    Sample ``i`` uses a Philox stream keyed by ``(seed, i)``; coin ``j`` is bit
    ``j`` of that stream, so the result does not depend on which other samples
    are drawn alongside it.
    """
    _check_sizes(n, d)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    count = n * d
    words = (count + 63) // 64
    out = np.empty((len(indices), n, d), dtype=np.int8)
    for row, idx in enumerate(indices):
        raw = _philox(seed, int(idx)).random_raw(words)
        out[row] = _bits_to_signs(np.asarray(raw, dtype=np.uint64), count).reshape(n, d)
    return out


def sample_coins(n: int, d: int, seed: int, index: int = 0) -> CoinSequence:
    _check_sizes(n, d)
    signs = sample_coin_block(n, d, seed, [index])[0]
    return CoinSequence(int(n), int(d), signs, int(seed), int(index))


def walk_grid(signs: np.ndarray) -> np.ndarray:
    """Grid values ``W_n(k/n)`` for signs of shape ``(..., n, d)``."""
    signs = np.asarray(signs, dtype=np.float64)
    n = signs.shape[-2]
    zero = np.zeros(signs.shape[:-2] + (1, signs.shape[-1]))
    return np.concatenate([zero, np.cumsum(signs, axis=-2)], axis=-2) / np.sqrt(n)


def make_walk(coins: CoinSequence) -> WalkPath:
    return WalkPath(coins, walk_grid(coins.signs))


def walk_at(grid: np.ndarray, signs: np.ndarray, t) -> np.ndarray:
    """Vectorised evaluation of the interpolated walk.

    ``grid`` is ``(B, n+1, d)``, ``signs`` is ``(B, n, d)`` and ``t`` a scalar;
    returns ``(B, d)``.
    """
    n = signs.shape[-2]
    x = float(t) * n
    k = min(int(np.floor(x)), n - 1)
    frac = x - k
    return grid[..., k, :] + frac * signs[..., k, :] / np.sqrt(n)


def walk_eval(w: WalkPath, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return walk_at(w.values, w.coins.signs, t)


def extend_walk(w: WalkPath, t: float) -> np.ndarray:
    """Walk on the whole line with fresh coins for each unit interval.

    Block ``j`` (covering ``[j, j+1]``) uses stream index ``index + j * 2**32``;
    the pieces are glued so the path is continuous and ``W(0) = 0``.
    """
    if 0.0 <= t <= 1.0:
        return walk_eval(w, t)
    block = int(np.floor(t))

    def piece(j):
        if j == 0:
            return w
        return make_walk(sample_coins(w.n, w.d, w.coins.seed, w.coins.index + j * (1 << 32)))

    if block > 0:
        base = sum((piece(j).end for j in range(block)), np.zeros(w.d))
    else:
        base = -sum((piece(j).end for j in range(block, 0)), np.zeros(w.d))
    return base + walk_eval(piece(block), t - block)


def holder_seminorm_batch(values: np.ndarray, times: np.ndarray, alpha: float) -> np.ndarray:
    """Exact max over grid pairs of ``|f(t2)-f(t1)| / |t2-t1|**alpha``.

    ``values`` has shape ``(B, N, d)``; the sup norm is taken over coordinates.
    For piecewise linear paths the supremum over all pairs is attained on the grid.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    values = np.asarray(values, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if values.shape[1] < 2:
        raise ValueError("need at least two grid points")
    best = np.zeros(values.shape[0])
    N = values.shape[1]
    for lag in range(1, N):
        dt = times[lag:] - times[:-lag]
        diff = np.abs(values[:, lag:, :] - values[:, :-lag, :]).max(axis=2)
        q = (diff / dt**alpha).max(axis=1)
        np.maximum(best, q, out=best)
    return best


def holder_seminorm(w: WalkPath, alpha: float) -> float:
    times = np.arange(w.n + 1) / w.n
    return float(holder_seminorm_batch(w.values[None], times, alpha)[0])


def _endpoint_samples(n: int, t: float, samples: int, seed: int) -> np.ndarray:
    k = min(int(np.floor(t * n)), n - 1)
    frac = t * n - k
    out = np.empty(samples)
    chunk = 4096
    for start in range(0, samples, chunk):
        idx = np.arange(start, min(start + chunk, samples))
        signs = sample_coin_block(n, 1, seed, idx)[:, :, 0].astype(np.int64)
        partial = signs[:, :k].sum(axis=1) + frac * signs[:, k]
        out[idx] = partial / np.sqrt(n)
    return out


def clt_distance(n: int, t: float, samples: int, seed: int) -> float:
    """KS distance between the sampled law of ``W_n(., t)`` and ``N(0, t)``."""
    if n < 1:
        raise ValueError("n must be positive")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    if samples < 100:
        raise ValueError("need at least 100 samples")
    x = _endpoint_samples(n, t, samples, seed)
    return float(stats.kstest(x, stats.norm(scale=np.sqrt(t)).cdf).statistic)


def exact_ks_distance(n: int) -> float:
    """KS distance of the exact law of ``W_n(., 1)`` to ``N(0, 1)`` (binomial atoms)."""
    k = np.arange(n + 1)
    atoms = (2 * k - n) / np.sqrt(n)
    mass = stats.binom.pmf(k, n, 0.5)
    cdf_after = np.cumsum(mass)
    cdf_before = cdf_after - mass
    phi = stats.norm.cdf(atoms)
    return float(max(np.abs(cdf_after - phi).max(), np.abs(cdf_before - phi).max()))


def enumerate_endpoints(n: int, t1: float = 0.0, t2: float = 1.0):
    """All ``2**n`` values of ``sqrt(n) * (W_n(t2) - W_n(t1))``.

    Integer-valued when both times lie on the grid, so moments can be computed
    exactly.
    """
    if n > 20:
        raise ValueError("full enumeration limited to n <= 20")
    signs = np.array(list(itertools.product((-1, 1), repeat=n)), dtype=np.int64)
    k1, k2 = t1 * n, t2 * n
    if float(k1).is_integer() and float(k2).is_integer():
        return signs[:, int(k1):int(k2)].sum(axis=1)
    grid = walk_grid(signs[:, :, None])
    inc = walk_at(grid, signs[:, :, None], t2) - walk_at(grid, signs[:, :, None], t1)
    return inc[:, 0] * np.sqrt(n)


def write_path_csv(w: WalkPath, path) -> None:
    times = np.arange(w.n + 1) / w.n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"W_{i + 1}" for i in range(w.d)])
        for t, row in zip(times, w.values):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def ensemble_summary(n: int, d: int, seed: int, alpha: float, samples: int,
                     quantiles=(0.5, 0.9, 0.95, 0.99)) -> dict:
    """Hölder seminorm quantiles of ``samples`` walks as a JSON-ready record."""
    signs = sample_coin_block(n, d, seed, np.arange(samples))
    grid = walk_grid(signs)
    times = np.arange(n + 1) / n
    norms = holder_seminorm_batch(grid, times, alpha)
    qs = np.quantile(norms, quantiles)
    return {
        "n": n, "d": d, "seed": seed, "alpha": alpha, "samples": samples,
        "quantiles": {str(q): float(v) for q, v in zip(quantiles, qs)},
    }


def dumps_summary(record: dict) -> str:
    return json.dumps(record, sort_keys=True)

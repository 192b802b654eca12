"""Dependence coefficients delta_{p,inf}(k) by common-randomness coupling.

Two copies of the projective chain are started at x and y and driven by the
same eps_1, ..., eps_k.  The k-th increments differ only through the
direction, so the unknown Lyapunov exponent cancels and

    delta_p(k)^p ~ max over pairs of mean_r |sigma(eps_k, W^x_{k-1}) - sigma(eps_k, W^y_{k-1})|^p.

The max over a finite pool of pairs is a lower bound for the sup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .ensemble import EnsembleSpec, SingularEnsemble, draw
from .projective import StationarySampler
from .rng import RngStream, child_keys
from .walk import check_budget

PAIR_KINDS = ("nu", "antipodal", "both", "pinned")


class InsufficientGrid(ValueError):
    pass


@dataclass(frozen=True)
class PairStrategy:
    """Which start pairs enter the max: nu-hat pairs, near-orthogonal pairs, or both."""

    kind: str = "both"
    count: int = 32
    pinned: tuple = ()

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair strategy {self.kind!r}")
        if self.kind == "pinned" and not self.pinned:
            raise ValueError("pinned strategy needs explicit pairs")
        if self.kind != "pinned" and self.count < 1:
            raise ValueError("count must be >= 1")


def _orthogonal_to(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit vectors orthogonal to the rows of x, built from the rows of v."""
    if x.shape[1] == 2:
        return np.stack([-x[:, 1], x[:, 0]], axis=1)
    w = v - np.sum(v * x, axis=1, keepdims=True) * x
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def build_pairs(spec: EnsembleSpec, strategy: PairStrategy, sampler: StationarySampler,
                rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Start pairs as two (pairs, d) arrays of unit vectors."""
    if strategy.kind == "pinned":
        xs = np.array([np.asarray(a, float) for a, _ in strategy.pinned])
        ys = np.array([np.asarray(b, float) for _, b in strategy.pinned])
        if xs.shape[1] != spec.d or ys.shape[1] != spec.d:
            raise ValueError("pinned pair dimension mismatch")
        return (xs / np.linalg.norm(xs, axis=1, keepdims=True),
                ys / np.linalg.norm(ys, axis=1, keepdims=True))
    R = strategy.count
    pool = sampler.pool(rng.child("pairs").key, 3 * R)
    xs, ys = [], []
    if strategy.kind in ("nu", "both"):
        xs.append(pool[:R])
        ys.append(pool[R:2 * R])
    if strategy.kind in ("antipodal", "both"):
        xs.append(pool[2 * R:])
        ys.append(_orthogonal_to(pool[2 * R:], pool[:R]))
    return np.concatenate(xs), np.concatenate(ys)


@nb.njit(cache=True, nogil=True)
def _coupled_kernel(code, d, fp, atoms, alog, ailog, keys, xs, ys, ks, p, out):
    """out[pair, rep, i] = |sigma(eps_k, W^x) - sigma(eps_k, W^y)|^p at k = ks[i]."""
    P = xs.shape[0]
    R = keys.shape[0]
    K = ks.shape[0]
    kmax = ks[K - 1]
    E = np.empty((d, d))
    work = np.empty((d, d))
    x = np.empty((P, d))
    y = np.empty((P, d))
    tmp = np.empty(d)
    for r in range(R):
        for a in range(P):
            for i in range(d):
                x[a, i] = xs[a, i]
                y[a, i] = ys[a, i]
        ci = 0
        for k in range(1, kmax + 1):
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, keys[r], k - 1, E, work)
            if not ok:
                return False
            rec = ks[ci] == k
            for a in range(P):
                # sigma difference; the log-norm of eps_k cancels
                sx = 0.0
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += E[i, j] * x[a, j]
                    tmp[i] = acc
                    sx += acc * acc
                nx = np.sqrt(sx)
                for i in range(d):
                    x[a, i] = tmp[i] / nx
                sy = 0.0
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += E[i, j] * y[a, j]
                    tmp[i] = acc
                    sy += acc * acc
                ny = np.sqrt(sy)
                for i in range(d):
                    y[a, i] = tmp[i] / ny
                if rec:
                    out[a, r, ci] = np.abs(np.log(nx) - np.log(ny)) ** p
            if rec:
                ci += 1
    return True


@dataclass
class DepCoefCurve:
    p: float
    k_grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    pair_count: int
    replicates: int
    pair_strategy: str = "both"
    argmax_pair: np.ndarray | None = field(default=None, repr=False)
    # mean |diff|^p per (pair, k), kept for pair-level diagnostics
    pair_means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.k_grid = np.asarray(self.k_grid, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        if np.any(self.values < 0):
            raise ValueError("dependence coefficients are non-negative")

    def rows(self) -> list[tuple]:
        return [(self.p, int(k), float(v), float(s), self.pair_strategy, self.pair_count, self.replicates)
                for k, v, s in zip(self.k_grid, self.values, self.se)]


def coupled_differences(spec: EnsembleSpec, xs, ys, k_grid, replicates: int, rng: RngStream,
                        p: float = 1.0) -> np.ndarray:
    """Raw |increment difference|^p, shape (pairs, replicates, len(k_grid))."""
    ks = np.asarray(k_grid, dtype=np.int64)
    if ks.ndim != 1 or len(ks) == 0 or ks[0] < 1 or np.any(np.diff(ks) <= 0):
        raise ValueError("k_grid must be strictly increasing positive integers")
    xs = np.ascontiguousarray(xs, dtype=float)
    ys = np.ascontiguousarray(ys, dtype=float)
    keys = child_keys(np.uint64(rng.child("coupling").key), np.uint64(0), replicates)
    out = np.empty((xs.shape[0], replicates, len(ks)))
    if not _coupled_kernel(*spec.packed, keys, xs, ys, ks, float(p), out):
        raise SingularEnsemble("singular draw during coupling")
    return out


def estimate_delta(spec: EnsembleSpec, p: float, k_grid, pair_strategy: PairStrategy | None = None,
                   replicates: int = 10_000, rng: RngStream | None = None,
                   sampler: StationarySampler | None = None, budget: int | None = None) -> DepCoefCurve:
    if p < 1:
        raise ValueError("p must be >= 1")
    if replicates < 100:
        raise ValueError("replicates must be >= 100")
    strategy = pair_strategy or PairStrategy()
    rng = rng or RngStream.from_seed(0, "depcoef")
    sampler = sampler or StationarySampler(spec)
    xs, ys = build_pairs(spec, strategy, sampler, rng)
    ks = np.asarray(k_grid, dtype=np.int64)
    check_budget(2 * len(xs) * replicates * int(ks[-1]), budget)
    diffs = coupled_differences(spec, xs, ys, ks, replicates, rng, p)
    means = diffs.mean(axis=1)                       # (pairs, K)
    sds = diffs.std(axis=1, ddof=1)
    best = np.argmax(means, axis=0)                  # first max on ties, fixed order
    cols = np.arange(len(ks))
    m = means[best, cols]
    sm = sds[best, cols] / np.sqrt(replicates)
    vals = m ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        # delta method for the p-th root
        se = np.where(m > 0, sm * m ** (1.0 / p - 1.0) / p, 0.0)
    return DepCoefCurve(p, ks, vals, se, len(xs), replicates, strategy.kind, best, means)


@dataclass
class DecayReport:
    slope: float
    slope_se: float
    scaled: np.ndarray           # k^{q/p-1} * delta over the upper half of the grid
    ratio: float                 # max / min of ``scaled``
    flagged: bool
    nonincreasing: bool          # within 3 SE between consecutive grid points
    worst_increase_z: float


def decay_check(curve: DepCoefCurve, q: float, factor: float = 4.0, boot: int = 400,
                seed: int = 0) -> DecayReport:
    ks = curve.k_grid
    if len(ks) < 4 or ks[-1] < 8 * ks[0]:
        raise InsufficientGrid("need >= 4 grid points spanning a factor >= 8 in k")
    v = curve.values
    se = curve.se
    pos = v > 0
    if pos.sum() >= 2:
        lk = np.log(ks[pos])
        slope = float(np.polyfit(lk, np.log(v[pos]), 1)[0])
        # parametric bootstrap in log scale, relative error se / delta
        rng = np.random.default_rng(seed)
        draws = np.log(v[pos]) + (se[pos] / v[pos]) * rng.standard_normal((boot, pos.sum()))
        bs = np.polyfit(lk, draws.T, 1)[0]
        slope_se = float(np.std(bs, ddof=1))
    else:
        slope, slope_se = float("nan"), float("nan")
    half = ks >= np.median(ks)
    scaled = ks[half].astype(float) ** (q / curve.p - 1.0) * v[half]
    if np.all(scaled > 0):
        ratio = float(scaled.max() / scaled.min())
    else:
        ratio = float("inf") if np.any(scaled > 0) else 1.0
    increasing = bool(np.all(np.diff(scaled) > 0))
    flagged = increasing and ratio > factor
    comb = np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(comb > 0, (v[1:] - v[:-1]) / comb, np.where(v[1:] > v[:-1], np.inf, 0.0))
    worst = float(z.max()) if len(z) else 0.0
    return DecayReport(slope, slope_se, scaled, ratio, flagged, worst <= 3.0, worst)

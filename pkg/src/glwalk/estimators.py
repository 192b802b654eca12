"""Headline statistics: Lyapunov exponent, asymptotic variance, Kolmogorov
distances to the Gaussian limit, rate fits and the Bougerol gap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.special import ndtr

from .ensemble import EnsembleSpec, SingularEnsemble, draw, op_norm
from .projective import ProjectivePoint, StationarySampler, spread_directions
from .rng import child_keys, derive_key, path_keys
from .walk import (SampleMatrix, _matmul_into, _run_chunks, _walk_kernel, check_budget,
                   run_fixed_start_batch, run_stationary_batch)

KS_OBSERVABLES = ("vec_norm", "mat_norm", "spec_radius", "vec_norm_worst_start")
RATE_MODELS = ("power_law", "paper_q_rate", "paper_sqrt_rate", "paper_q34_rate")
BATCH_GRID = tuple(2 ** j for j in range(8, 14))
MAX_LAG = 200
CHUNK = 512


class DegenerateVariance(ValueError):
    pass


class NoiseDominated(ValueError):
    def __init__(self, offending):
        self.offending = [int(n) for n in offending]
        super().__init__(f"D_n below 3 x mc_floor at n = {self.offending}")


def _chunked(fn, paths: int, workers: int):
    """Apply fn(a, b) over fixed CHUNK-sized path ranges; results in path order.

    Chunk boundaries do not depend on ``workers``, so every per-path value is
    computed identically for any worker count.
    """
    edges = list(range(0, paths, CHUNK)) + [paths]
    ranges = list(zip(edges[:-1], edges[1:]))
    groups = _run_chunks(lambda a, b: [fn(*r) for r in ranges[a:b]], len(ranges), workers)
    return [r for g in groups for r in g]


# ----------------------------------------------------------------------
# long stationary runs: Lyapunov exponent and batch means


@dataclass(frozen=True)
class LyapunovEstimate:
    value: float
    se: float
    n: int
    paths: int
    burn_discarded: float
    burn_discarded_se: float
    burn: int

    @property
    def residual_bias_note(self) -> float:
        """Difference between the full-path and burn-discarded estimates."""
        return self.value - self.burn_discarded


@dataclass(frozen=True)
class VarianceEstimate:
    method: str
    value: float
    se: float
    truncation_lag: int = 0
    degenerate: bool = False
    by_size: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("variance estimate must be >= 0")


def _variance_estimate(method, value, se, lag=0, by_size=None) -> VarianceEstimate:
    value = max(float(value), 0.0)
    return VarianceEstimate(method, value, float(se), lag, value <= 3.0 * se, by_size or {})


def _long_paths(spec: EnsembleSpec, n: int, paths: int, sampler: StationarySampler, seed: int,
                step: int, workers: int, stage: str = "long"):
    """vec log-norms at every multiple of ``step`` up to n, shape (paths, n // step)."""
    if n % step:
        raise ValueError("n must be a multiple of the checkpoint step")
    cps = np.arange(step, n + 1, step, dtype=np.int64)
    packed = spec.packed

    def work(a, b):
        starts = sampler.draw_keys(path_keys(seed, stage + ":nu", b - a, a))
        out = np.empty((b - a, len(cps), 3))
        if not _walk_kernel(*packed, path_keys(seed, stage, b - a, a), 0, starts, cps, 0, out,
                            np.empty((b - a, 0))):
            raise SingularEnsemble("singular draw during walk")
        return out[:, :, 0].copy()

    return np.concatenate(_chunked(work, paths, workers))


def _lyapunov_from(v: np.ndarray, step: int, burn: int) -> tuple[float, float, float, float]:
    n = v.shape[1] * step
    full = v[:, -1] / n
    j = max(burn // step, 1) - 1
    tail = (v[:, -1] - v[:, j]) / (n - (j + 1) * step)
    P = len(full)
    se = lambda x: float(x.std(ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    return float(full.mean()), se(full), float(tail.mean()), se(tail)


def _batch_means_from(v: np.ndarray, step: int, sizes) -> VarianceEstimate:
    """Var(S_b)/b from non-overlapping blocks of each size b, pooled over paths.

    Blocks are centered by the grand mean block sum; the standard error comes
    from the spread of per-path values, which absorbs within-path correlation.
    """
    P, K = v.shape
    cum = np.concatenate([np.zeros((P, 1)), v], axis=1)
    by_size = {}
    for b in sizes:
        r = b // step
        nb_ = K // r
        if nb_ < 1 or b % step:
            continue
        blocks = np.diff(cum[:, : nb_ * r + 1 : r], axis=1)
        mu = blocks.mean()
        per_path = ((blocks - mu) ** 2).mean(axis=1) / b
        val = float(per_path.mean())
        se = float(per_path.std(ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
        by_size[int(b)] = (val, se)
    if len(by_size) < 2:
        raise ValueError("batch means needs at least two block sizes")
    top = sorted(by_size)[-2:]
    value = 0.5 * (by_size[top[0]][0] + by_size[top[1]][0])
    # the two top estimates share paths; treat them as fully correlated
    se = 0.5 * (by_size[top[0]][1] + by_size[top[1]][1])
    return _variance_estimate("batch_means", value, se, 0, by_size)


def lyapunov(spec: EnsembleSpec, n: int, paths: int, sampler: StationarySampler | None = None,
             seed: int = 0, burn: int | None = None, workers: int = 1,
             budget: int | None = None) -> LyapunovEstimate:
    """Mean of log||A_n x|| / n over paths with x ~ nu-hat.

    The burn-discarded variant averages increments after the first ``burn``
    steps (default n / 10).
    """
    if n < 1 or paths < 1:
        raise ValueError("n and paths must be >= 1")
    if n < 1000:
        import warnings
        warnings.warn("n < 1000: finite-n bias of the Lyapunov estimate may dominate", stacklevel=2)
    sampler = sampler or StationarySampler(spec)
    burn = n // 10 if burn is None else burn
    step = _gcd_step(n, burn)
    check_budget(paths * n, budget)
    v = _long_paths(spec, n, paths, sampler, seed, step, workers)
    val, se, tail, tse = _lyapunov_from(v, step, burn)
    return LyapunovEstimate(val, se, n, paths, tail, tse, (max(burn // step, 1)) * step)


def _gcd_step(n: int, burn: int) -> int:
    step = int(np.gcd(n, burn)) if burn > 0 else n
    # keep the checkpoint count modest
    while n // step > 4096:
        step *= 2
    return step if n % step == 0 else n


def long_run(spec: EnsembleSpec, n: int, paths: int, sampler: StationarySampler | None = None,
             seed: int = 0, sizes=BATCH_GRID, workers: int = 1,
             budget: int | None = None) -> tuple[LyapunovEstimate, VarianceEstimate]:
    """One pass giving both the Lyapunov exponent and the batch-means variance."""
    sampler = sampler or StationarySampler(spec)
    step = int(min(sizes))
    if n % max(sizes):
        raise ValueError("n must be a multiple of the largest batch size")
    check_budget(paths * n, budget)
    v = _long_paths(spec, n, paths, sampler, seed, step, workers)
    burn = n // 10
    val, se, tail, tse = _lyapunov_from(v, step, burn)
    lam = LyapunovEstimate(val, se, n, paths, tail, tse, max(burn // step, 1) * step)
    return lam, _batch_means_from(v, step, sizes)


def _series_from(inc_chunks, lam: float, max_lag: int) -> VarianceEstimate:
    """Covariance series with adaptive truncation from per-path autocovariances."""
    covs = []
    for x in inc_chunks:
        xc = x - lam
        n = xc.shape[1]
        c = np.empty((x.shape[0], max_lag + 1))
        for lag in range(max_lag + 1):
            c[:, lag] = np.einsum("ij,ij->i", xc[:, : n - lag], xc[:, lag:]) / (n - lag)
        covs.append(c)
    c = np.concatenate(covs)
    P = c.shape[0]
    mean = c.mean(axis=0)
    se = c.std(axis=0, ddof=1) / np.sqrt(P)
    small = np.nonzero(np.abs(mean[1:]) < 2.0 * se[1:])[0]
    L = int(small[0]) + 1 if len(small) else max_lag
    per_path = c[:, 0] + 2.0 * c[:, 1:L].sum(axis=1)
    return _variance_estimate("covariance_series", per_path.mean(),
                              per_path.std(ddof=1) / np.sqrt(P), L)


def variance(spec: EnsembleSpec, method: str = "batch_means", params: dict | None = None,
             sampler: StationarySampler | None = None, seed: int = 0, workers: int = 1,
             budget: int | None = None) -> VarianceEstimate:
    """Asymptotic variance s^2.

    batch_means params: paths, blocks (per path, of the largest size), sizes.
    covariance_series params: paths, n (path length), max_lag, lambda_hat
    (if absent the grand mean increment is used).
    """
    params = dict(params or {})
    sampler = sampler or StationarySampler(spec)
    paths = int(params.get("paths", 512))
    if paths < 2:
        raise ValueError("variance needs paths >= 2")
    if method == "batch_means":
        sizes = tuple(int(s) for s in params.get("sizes", BATCH_GRID))
        n = int(params.get("blocks", 8)) * max(sizes)
        check_budget(paths * n, budget)
        v = _long_paths(spec, n, paths, sampler, seed, min(sizes), workers, stage="bm")
        return _batch_means_from(v, min(sizes), sizes)
    if method == "covariance_series":
        n = int(params.get("n", 8192))
        max_lag = int(params.get("max_lag", MAX_LAG))
        if n <= 2 * max_lag:
            raise ValueError("path length must exceed twice the maximal lag")
        check_budget(paths * n, budget)
        packed = spec.packed
        cps = np.array([n], dtype=np.int64)

        def work(a, b):
            starts = sampler.draw_keys(path_keys(seed, "series:nu", b - a, a))
            inc = np.empty((b - a, n))
            if not _walk_kernel(*packed, path_keys(seed, "series", b - a, a), 0, starts, cps, 0,
                                np.empty((b - a, 1, 3)), inc):
                raise SingularEnsemble("singular draw during walk")
            return inc

        chunks = _chunked(work, paths, workers)
        lam = params.get("lambda_hat")
        if lam is None:
            lam = float(sum(c.sum() for c in chunks) / (paths * n))
        return _series_from(chunks, float(lam), max_lag)
    raise ValueError(f"unknown variance method {method!r}")


# ----------------------------------------------------------------------
# Kolmogorov distances


@dataclass
class KolmogorovReport:
    observable: str
    n_grid: np.ndarray
    D: np.ndarray
    paths: int
    lambda_hat: float
    s_hat: float
    seed: int = 0
    mc_floor: float = field(init=False)

    def __post_init__(self):
        self.n_grid = np.asarray(self.n_grid, dtype=np.int64)
        self.D = np.asarray(self.D, dtype=float)
        self.mc_floor = 1.36 / np.sqrt(self.paths)
        if np.any((self.D < 0) | (self.D > 1)):
            raise ValueError("Kolmogorov distances lie in [0, 1]")

    def rows(self) -> list[tuple]:
        return [(self.observable, int(n), float(d), float(self.mc_floor), self.paths, self.lambda_hat,
                 self.s_hat, self.seed) for n, d in zip(self.n_grid, self.D)]


def kolmogorov_distance(z: np.ndarray, s: float) -> float:
    """sup_y |F_hat(y) - Phi(y / s)|, evaluated exactly at the ECDF jumps."""
    z = np.sort(np.asarray(z, dtype=float))
    P = len(z)
    F = ndtr(z / s)
    i = np.arange(1, P + 1)
    return float(max(np.max(i / P - F), np.max(F - (i - 1) / P)))


def ks_distance(samples: SampleMatrix, observable: str, lambda_hat: float, s_hat: float,
                seed: int = 0) -> KolmogorovReport:
    if not np.isfinite(s_hat) or s_hat <= 0:
        raise DegenerateVariance("s_hat must be positive")
    vals = samples.observable(observable)
    D = []
    for i, n in enumerate(samples.n_grid):
        n = int(n)
        if n == 0:
            raise ValueError("n = 0 has no centered distribution")
        D.append(kolmogorov_distance((vals[:, i] - n * lambda_hat) / np.sqrt(n), s_hat))
    return KolmogorovReport(observable, samples.n_grid, D, samples.paths, float(lambda_hat),
                            float(s_hat), seed)


def worst_start_set(spec: EnsembleSpec, sampler: StationarySampler, seed: int,
                    n_nu: int = 8, n_spread: int = 8) -> np.ndarray:
    nu = sampler.draw_keys(path_keys(seed, "worst:nu", n_nu))
    return np.concatenate([nu, spread_directions(spec.d, n_spread)])


def worst_start_ks(spec: EnsembleSpec, n_grid, paths: int, sampler: StationarySampler, seed: int,
                   lambda_hat: float, s_hat: float, workers: int = 1, budget: int | None = None,
                   starts: np.ndarray | None = None) -> tuple[KolmogorovReport, np.ndarray]:
    """Max over a start set of the fixed-start D_n; also returns the per-start table."""
    starts = worst_start_set(spec, sampler, seed) if starts is None else np.asarray(starts, float)
    check_budget(len(starts) * paths * int(np.max(n_grid)), budget)
    table = []
    for j, x in enumerate(starts):
        sm = run_fixed_start_batch(spec, n_grid, paths, ProjectivePoint(x), seed, stage=f"start{j}",
                                   workers=workers)
        table.append(ks_distance(sm, "vec_norm", lambda_hat, s_hat, seed).D)
    table = np.array(table)
    rep = KolmogorovReport("vec_norm_worst_start", np.asarray(n_grid), table.max(axis=0), paths,
                           float(lambda_hat), float(s_hat), seed)
    return rep, table


# ----------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    model: str
    slope: float
    intercept: float
    r2: float
    ci: tuple[float, float]
    slope_se: float
    free_slope: float
    free_ci: tuple[float, float]
    free_slope_se: float

    def row(self) -> tuple:
        return (self.model, self.slope, self.ci[0], self.ci[1], self.r2)


def rate_regressor(n, model: str, q: float | None = None) -> np.ndarray:
    """log v_n for the chosen model."""
    n = np.asarray(n, dtype=float)
    if model == "power_law":
        return np.log(n)
    if model == "paper_sqrt_rate":
        return -0.5 * np.log(n)
    if q is None:
        raise ValueError(f"model {model} needs q")
    if model == "paper_q_rate":
        return (q / 2.0 - 1.0) * (np.log(np.log(n)) - np.log(n))
    if model == "paper_q34_rate":
        return (4.0 - q) / 2.0 * np.log(np.log(n)) - 0.5 * np.log(n)
    raise ValueError(f"unknown rate model {model!r}")


def _ols(x, y):
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return coef, resid, float(r2)


def _residual_bootstrap(x, y, boot: int, rng) -> np.ndarray:
    coef, resid, _ = _ols(x, y)
    fitted = y - resid
    idx = rng.integers(0, len(y), size=(boot, len(y)))
    ys = fitted[None, :] + resid[idx]
    X = np.column_stack([x, np.ones_like(x)])
    return np.linalg.lstsq(X, ys.T, rcond=None)[0][0]


def rate_fit(report: KolmogorovReport, model: str = "power_law", q: float | None = None,
             boot: int = 400, seed: int = 0, check_noise: bool = True) -> RateFit:
    """OLS of log D_n on log v_n plus a free power-law slope, with residual-bootstrap CIs."""
    if model not in RATE_MODELS:
        raise ValueError(f"unknown rate model {model!r}")
    if len(report.n_grid) < 4:
        raise ValueError("rate fits need >= 4 grid points")
    if boot < 200:
        raise ValueError("need >= 200 bootstrap resamples")
    if check_noise:
        low = report.n_grid[report.D < 3.0 * report.mc_floor]
        if len(low):
            raise NoiseDominated(low)
    y = np.log(report.D)
    rng = np.random.default_rng(seed)
    x = rate_regressor(report.n_grid, model, q)
    coef, _, r2 = _ols(x, y)
    bs = _residual_bootstrap(x, y, boot, rng)
    xf = np.log(report.n_grid.astype(float))
    fcoef, _, _ = _ols(xf, y)
    fbs = _residual_bootstrap(xf, y, boot, rng)
    ci = tuple(float(c) for c in np.percentile(bs, [2.5, 97.5]))
    fci = tuple(float(c) for c in np.percentile(fbs, [2.5, 97.5]))
    return RateFit(model, float(coef[0]), float(coef[1]), r2, ci, float(np.std(bs, ddof=1)),
                   float(fcoef[0]), fci, float(np.std(fbs, ddof=1)))


def rate_ratio(report: KolmogorovReport, q: float) -> float:
    """max / min over the grid of D_n / v_n with v_n = ((log n) / n)^{q/2 - 1}."""
    r = report.D / np.exp(rate_regressor(report.n_grid, "paper_q_rate", q))
    return float(r.max() / r.min())


# ----------------------------------------------------------------------
# Bougerol gap


@nb.njit(cache=True, nogil=True)
def _gap_kernel(code, d, fp, atoms, alog, ailog, keys, dirs, checkpoints, out):
    """out[p, i] = log||M|| - mean_j log||M u_j|| at checkpoints[i]; the scale of M cancels."""
    P = keys.shape[0]
    K = checkpoints.shape[0]
    J = dirs.shape[1]
    n = checkpoints[K - 1]
    E = np.empty((d, d))
    work = np.empty((d, d))
    M = np.empty((d, d))
    T = np.empty((d, d))
    for p in range(P):
        for i in range(d):
            for j in range(d):
                M[i, j] = 1.0 if i == j else 0.0
        ci = 0
        for k in range(1, n + 1):
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, keys[p], k - 1, E, work)
            if not ok:
                return False
            _matmul_into(E, M, T, d)
            nrm = op_norm(T, d)
            for i in range(d):
                for j in range(d):
                    M[i, j] = T[i, j] / nrm
            while ci < K and checkpoints[ci] == k:
                base = np.log(op_norm(M, d))
                acc = 0.0
                for jj in range(J):
                    s = 0.0
                    for i in range(d):
                        v = 0.0
                        for j in range(d):
                            v += M[i, j] * dirs[p, jj, j]
                        s += v * v
                    acc += 0.5 * np.log(s)
                out[p, ci] = base - acc / J
                ci += 1
    return True


@dataclass
class GapReport:
    n_grid: np.ndarray
    per_n_max: np.ndarray
    min_gap: float
    trend_ratio: float
    paths: int
    J_nu: int
    gaps: np.ndarray = field(repr=False)

    @property
    def nonnegative(self) -> bool:
        return self.min_gap >= -1e-10

    def rows(self) -> list[tuple]:
        return [(int(n), float(m), float(self.gaps[:, i].mean()), self.paths, self.J_nu)
                for i, (n, m) in enumerate(zip(self.n_grid, self.per_n_max))]


def bougerol_gap(spec: EnsembleSpec, n_grid, paths: int, sampler: StationarySampler | None = None,
                 J_nu: int = 16, seed: int = 0, workers: int = 1,
                 budget: int | None = None) -> GapReport:
    if J_nu < 16:
        raise ValueError("J_nu must be >= 16")
    grid = np.asarray(n_grid, dtype=np.int64)
    if len(grid) < 10 or grid[0] < 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("n_grid must be >= 10 increasing positive integers")
    sampler = sampler or StationarySampler(spec)
    check_budget(paths * int(grid[-1]), budget)
    packed = spec.packed
    d = spec.d

    def work(a, b):
        dirs = np.empty((b - a, J_nu, d))
        for i, key in enumerate(path_keys(seed, "gap:nu", b - a, a)):
            dirs[i] = sampler.draw_keys(child_keys(np.uint64(key), np.uint64(0), J_nu))
        out = np.empty((b - a, len(grid)))
        if not _gap_kernel(*packed, path_keys(seed, "gap", b - a, a), dirs, grid, out):
            raise SingularEnsemble("singular draw during walk")
        return out

    gaps = np.concatenate(_chunked(work, paths, workers))
    per_n = gaps.max(axis=0)
    dec = max(len(grid) // 10, 1)
    first = per_n[:dec].mean()
    last = per_n[-dec:].mean()
    ratio = float(last / first) if first > 0 else (1.0 if last <= 0 else float("inf"))
    return GapReport(grid, per_n, float(gaps.min()), ratio, paths, J_nu, gaps)

"""Block decomposition of S_n by nested Monte Carlo.

Notation (n = 2 N m, indices k = 1..n):

* X_{k,m}: the increment at k averaged over the start direction, with only
  the last m driving matrices kept random,
  X_{k,m} = int sigma(eps_k, A_{k-1}^{k-m+1} x) dnu(x) - lambda.
* F_m: generated by the even blocks; k is a member iff ceil(k / m) is even.
* U_j (odd block 2j-1) and R_j (even block 2j) sum X_{k,m} - E(X_{k,m} | F_m);
  U_1 is the raw sum X_1 + ... + X_m.
* S1 = sum_j (U_j + R_j), S2 = sum_{k>m} E(X_{k,m} | F_m), S_{n,m} = S1 + S2.

Conditional expectations given F_m freeze the member matrices and redraw the
others from fresh streams.  The nu-integral is a fixed pool of J_nu draws per
path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .ensemble import EnsembleSpec, SingularEnsemble, draw
from .projective import StationarySampler
from .rng import RngStream, child_key, child_keys, path_keys
from .walk import _run_chunks, check_budget, run_stationary_batch

DEFAULT_J = 64
CHUNK = 64


def in_Fm(k, m: int):
    """Membership of index k (1-based) in the even blocks."""
    k = np.asarray(k)
    return ((k + m - 1) // m) % 2 == 0


@dataclass(frozen=True)
class BlockLayout:
    n: int
    m: int
    N: int
    kappa: float | None = None

    def __post_init__(self):
        if self.m < 2 or self.N < 2:
            raise ValueError("need m >= 2 and N >= 2")
        if self.n != 2 * self.N * self.m:
            raise ValueError("only n = 2 N m is supported (no remainder block)")

    @classmethod
    def from_m(cls, n: int, m: int) -> "BlockLayout":
        """Round n down to a multiple of 2m."""
        N = n // (2 * m)
        return cls(2 * N * m, m, N)

    @classmethod
    def from_kappa(cls, n: int, kappa: float = 4.0) -> "BlockLayout":
        N = max(2, int(round(kappa * np.log(n))))
        m = n // (2 * N)
        return cls(2 * N * m, m, N, kappa)

    def member_mask(self) -> np.ndarray:
        """Boolean array over 0..n; entry 0 is unused and False."""
        mask = np.zeros(self.n + 1, dtype=np.bool_)
        mask[1:] = in_Fm(np.arange(1, self.n + 1), self.m)
        return mask

    def u_range(self, j: int) -> range:
        return range((2 * j - 2) * self.m + 1, (2 * j - 1) * self.m + 1)

    def r_range(self, j: int) -> range:
        return range((2 * j - 1) * self.m + 1, 2 * j * self.m + 1)


# ----------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True)
def _fill_eps(code, d, fp, atoms, alog, ailog, key, lo, hi, mask, units, lgs):
    """Draw eps_k (stream counter k-1) for k in [lo, hi] with mask[k] set."""
    E = np.empty((d, d))
    work = np.empty((d, d))
    for k in range(lo, hi + 1):
        if mask[k]:
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, key, k - 1, E, work)
            if not ok:
                return False
            for i in range(d):
                for j in range(d):
                    units[k, i, j] = E[i, j]
            lgs[k] = lg
    return True


@nb.njit(cache=True, inline="always")
def _mul_norm(A, B, out, d):
    """out <- A B / ||A B||_F."""
    s = 0.0
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc
            s += acc * acc
    s = np.sqrt(s)
    for i in range(d):
        for j in range(d):
            out[i, j] /= s


@nb.njit(cache=True, nogil=True)
def _xkm_range(units, lgs, pool, m, k_lo, k_hi, pre, suf, out):
    """out[k] = mean_j sigma(eps_k, A_{k-1}^{k-m+1} pool_j) for k in [k_lo, k_hi].

    The window product is assembled from prefix/suffix products over
    segments of length m - 1, so each k costs O(d^3 + J d^2).
    """
    d = units.shape[1]
    J = pool.shape[0]
    L = m - 1
    A = np.empty((d, d))
    y = np.empty(d)
    if L > 0:
        lo = k_lo - L
        hi = k_hi - 1
        for i in range(lo, hi + 1):
            if (i - 1) % L == 0 or i == lo:
                for a in range(d):
                    for b in range(d):
                        pre[i, a, b] = units[i, a, b]
            else:
                _mul_norm(units[i], pre[i - 1], pre[i], d)
        for i in range(hi, lo - 1, -1):
            if i % L == 0 or i == hi:
                for a in range(d):
                    for b in range(d):
                        suf[i, a, b] = units[i, a, b]
            else:
                _mul_norm(suf[i + 1], units[i], suf[i], d)
    for k in range(k_lo, k_hi + 1):
        if L == 0:
            for a in range(d):
                for b in range(d):
                    A[a, b] = 1.0 if a == b else 0.0
        else:
            w = k - L
            start = ((k - 2) // L) * L + 1
            if w == start:
                for a in range(d):
                    for b in range(d):
                        A[a, b] = pre[k - 1, a, b]
            else:
                _mul_norm(pre[k - 1], suf[w], A, d)
        acc = 0.0
        for j in range(J):
            s1 = 0.0
            for a in range(d):
                v = 0.0
                for b in range(d):
                    v += A[a, b] * pool[j, b]
                y[a] = v
                s1 += v * v
            s2 = 0.0
            for a in range(d):
                v = 0.0
                for b in range(d):
                    v += units[k, a, b] * y[b]
                s2 += v * v
            acc += 0.5 * np.log(s2 / s1)
        out[k] = lgs[k] + acc / J
    return True


@nb.njit(cache=True, nogil=True)
def _raw_increments(units, lgs, w0, lo, hi, out):
    """sigma(eps_k, W_{k-1}) along the chain started at w0, for k = lo..hi (lo = 1)."""
    d = units.shape[1]
    x = w0.copy()
    y = np.empty(d)
    for k in range(lo, hi + 1):
        s = 0.0
        for a in range(d):
            v = 0.0
            for b in range(d):
                v += units[k, a, b] * x[b]
            y[a] = v
            s += v * v
        s = np.sqrt(s)
        for a in range(d):
            x[a] = y[a] / s
        out[k] = lgs[k] + np.log(s)


class _PathWork:
    """Scratch arrays and kernels for one path of length n."""

    def __init__(self, spec: EnsembleSpec, n: int):
        self.packed = spec.packed
        self.d = spec.d
        self.n = n
        d = spec.d
        self.units = np.zeros((n + 1, d, d))
        self.lgs = np.zeros(n + 1)
        self.pre = np.zeros((n + 1, d, d))
        self.suf = np.zeros((n + 1, d, d))
        self.all = np.ones(n + 1, dtype=np.bool_)

    def fill(self, key, lo: int, hi: int, mask=None, units=None, lgs=None):
        units = self.units if units is None else units
        lgs = self.lgs if lgs is None else lgs
        if not _fill_eps(*self.packed, np.uint64(key), lo, hi, self.all if mask is None else mask, units, lgs):
            raise SingularEnsemble("singular draw in block sampler")

    def xkm(self, pool, m: int, k_lo: int, k_hi: int, out, units=None, lgs=None):
        _xkm_range(self.units if units is None else units, self.lgs if lgs is None else lgs,
                   pool, m, k_lo, k_hi, self.pre, self.suf, out)


# ----------------------------------------------------------------------
# single quantities


def xkm(spec: EnsembleSpec, eps_window, sampler: StationarySampler | None = None, J_nu: int = DEFAULT_J,
        lambda_hat: float = 0.0, rng: RngStream | None = None, pool: np.ndarray | None = None) -> float:
    """X_{k,m} from the window (eps_{k-m+1}, ..., eps_k) by iterated action on nu-hat draws."""
    W = np.asarray(eps_window, dtype=float)
    if W.ndim != 3 or W.shape[1:] != (spec.d, spec.d) or len(W) < 1:
        raise ValueError("eps_window must have shape (m, d, d)")
    if pool is None:
        if J_nu < 1:
            raise ValueError("J_nu must be >= 1")
        sampler = sampler or StationarySampler(spec)
        rng = rng or RngStream.from_seed(0, "xkm")
        pool = sampler.pool(rng.key, J_nu)
    total = 0.0
    for x in pool:
        y = np.asarray(x, dtype=float)
        for g in W[:-1]:
            y = g @ y
            y = y / np.linalg.norm(y)
        total += np.log(np.linalg.norm(W[-1] @ y))
    return total / len(pool) - lambda_hat


@dataclass
class BlockSample:
    layout: BlockLayout
    lambda_hat: float
    J_nu: int
    J_c: int
    w0: np.ndarray
    units: np.ndarray = field(repr=False)
    lgs: np.ndarray = field(repr=False)
    pool: np.ndarray = field(repr=False)
    raw: np.ndarray = field(repr=False)      # X_k, k = 1..n (index 0 unused), centered
    xkm: np.ndarray = field(repr=False)      # X_{k,m}, k = m+1..n, centered; nan elsewhere
    cond: np.ndarray = field(repr=False)     # E(X_{k,m} | F_m), k = m+1..n, centered
    U: np.ndarray = field(default=None)
    R: np.ndarray = field(default=None)
    key: int = 0

    def __post_init__(self):
        lay = self.layout
        m = lay.m
        diff = self.xkm - self.cond
        self.U = np.array([self.raw[1:m + 1].sum()] +
                          [diff[list(lay.u_range(j))].sum() for j in range(2, lay.N + 1)])
        self.R = np.array([diff[list(lay.r_range(j))].sum() for j in range(1, lay.N + 1)])

    @property
    def eps(self) -> np.ndarray:
        """The realized driving matrices eps_1..eps_n."""
        return self.units[1:] * np.exp(self.lgs[1:])[:, None, None]

    @property
    def Y(self) -> np.ndarray:
        return self.U + self.R

    @property
    def S1(self) -> float:
        return float(self.Y.sum())

    @property
    def S2(self) -> float:
        return float(self.cond[self.layout.m + 1:].sum())

    @property
    def S_nm(self) -> float:
        m = self.layout.m
        return float(self.raw[1:m + 1].sum() + self.xkm[m + 1:].sum())

    @property
    def S_n(self) -> float:
        return float(self.raw[1:].sum())

    @property
    def identity_residual(self) -> float:
        return abs(self.S1 + self.S2 - self.S_nm)


def _rep_keys(key: int, tag: int, count: int) -> np.ndarray:
    return child_keys(child_key(np.uint64(key), np.uint64(tag)), np.uint64(0), count)


_TAG_POOL, _TAG_COND, _TAG_W0, _TAG_INNER = 1, 2, 3, 4


def _conditional(pw: _PathWork, pool, m: int, k_lo: int, k_hi: int, redraw_mask, rep_keys,
                 base: np.ndarray) -> np.ndarray:
    """Average of X_{k,m} (uncentered) over replicates redrawing ``redraw_mask`` positions.

    Accumulated as base + mean of (replicate - base) so that windows with
    nothing to redraw return ``base`` exactly.
    """
    units = pw.units.copy()
    lgs = pw.lgs.copy()
    acc = np.zeros(pw.n + 1)
    out = np.zeros(pw.n + 1)
    lo = max(k_lo - m + 1, 1)
    for key in rep_keys:
        pw.fill(key, lo, k_hi, redraw_mask, units, lgs)
        pw.xkm(pool, m, k_lo, k_hi, out, units, lgs)
        acc[k_lo:k_hi + 1] += out[k_lo:k_hi + 1] - base[k_lo:k_hi + 1]
    res = base.copy()
    res[k_lo:k_hi + 1] += acc[k_lo:k_hi + 1] / len(rep_keys)
    return res


def _decompose_key(spec, layout, sampler, J_nu, J_c, lambda_hat, key) -> BlockSample:
    n, m = layout.n, layout.m
    pw = _PathWork(spec, n)
    pw.fill(key, 1, n)
    pool = sampler.draw_keys(_rep_keys(key, _TAG_POOL, J_nu))
    w0 = sampler.draw_keys(_rep_keys(key, _TAG_W0, 1))[0]
    raw = np.zeros(n + 1)
    _raw_increments(pw.units, pw.lgs, w0, 1, n, raw)
    x = np.zeros(n + 1)
    pw.xkm(pool, m, m + 1, n, x)
    nonmember = ~layout.member_mask()
    nonmember[0] = False
    cond = _conditional(pw, pool, m, m + 1, n, nonmember, _rep_keys(key, _TAG_COND, J_c), x)
    xc = np.full(n + 1, np.nan)
    cc = np.full(n + 1, np.nan)
    xc[m + 1:] = x[m + 1:] - lambda_hat
    cc[m + 1:] = cond[m + 1:] - lambda_hat
    rc = raw - lambda_hat
    rc[0] = 0.0
    return BlockSample(layout, float(lambda_hat), J_nu, J_c, w0, pw.units, pw.lgs, pool, rc, xc, cc,
                       key=int(key))


def decompose(spec: EnsembleSpec, layout: BlockLayout, sampler: StationarySampler | None = None,
              J_nu: int = DEFAULT_J, J_c: int = DEFAULT_J, lambda_hat: float = 0.0, seed: int = 0,
              path: int = 0, budget: int | None = None) -> BlockSample:
    """One path of the block decomposition; path i uses stream child(seed, 'blocks', i)."""
    if J_c < 16 or J_nu < 1:
        raise ValueError("need J_c >= 16 and J_nu >= 1")
    check_budget(J_c * J_nu * layout.n, budget)
    sampler = sampler or StationarySampler(spec)
    key = int(path_keys(seed, "blocks", 1, path)[0])
    return _decompose_key(spec, layout, sampler, J_nu, J_c, lambda_hat, key)


def conditional_expectation_Fm(spec: EnsembleSpec, sample: BlockSample, k: int, J_c: int = DEFAULT_J,
                               rng: RngStream | None = None) -> float:
    """E(X_{k,m} | F_m) for one k, from fresh replicates of the non-member matrices."""
    m, n = sample.layout.m, sample.layout.n
    if not m < k <= n:
        raise ValueError("need m < k <= n")
    if J_c < 16:
        raise ValueError("J_c must be >= 16")
    rng = rng or RngStream.from_seed(0, "cond")
    pw = _PathWork(spec, n)
    pw.units[:] = sample.units
    pw.lgs[:] = sample.lgs
    base = np.zeros(n + 1)
    pw.xkm(sample.pool, m, k, k, base)
    nonmember = ~sample.layout.member_mask()
    nonmember[0] = False
    keys = child_keys(np.uint64(rng.key), np.uint64(rng.counter), J_c)
    rng.counter += J_c
    res = _conditional(pw, sample.pool, m, k, k, nonmember, keys, base)
    return float(res[k] - sample.lambda_hat)


@dataclass
class BlockBatch:
    layout: BlockLayout
    U: np.ndarray
    R: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    S_nm: np.ndarray
    S_n: np.ndarray
    xkm_mean: np.ndarray     # per-path mean of X_{k,m} over k > m
    residual: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.U + self.R


def _chunked(fn, paths: int, workers: int, chunk: int = CHUNK):
    edges = list(range(0, paths, chunk)) + [paths]
    ranges = list(zip(edges[:-1], edges[1:]))
    groups = _run_chunks(lambda a, b: [fn(*r) for r in ranges[a:b]], len(ranges), workers)
    return [r for g in groups for r in g]


def decompose_many(spec: EnsembleSpec, layout: BlockLayout, paths: int, sampler: StationarySampler | None = None,
                   J_nu: int = DEFAULT_J, J_c: int = DEFAULT_J, lambda_hat: float = 0.0, seed: int = 0,
                   workers: int = 1, budget: int | None = None) -> BlockBatch:
    check_budget(paths * J_c * J_nu * layout.n, budget)
    sampler = sampler or StationarySampler(spec)
    keys = path_keys(seed, "blocks", paths)

    def work(a, b):
        rows = []
        for key in keys[a:b]:
            s = _decompose_key(spec, layout, sampler, J_nu, J_c, lambda_hat, int(key))
            rows.append((s.U, s.R, s.S1, s.S2, s.S_nm, s.S_n, np.mean(s.xkm[layout.m + 1:]),
                         s.identity_residual))
        return rows

    rows = [r for part in _chunked(work, paths, workers) for r in part]
    col = lambda i: np.array([r[i] for r in rows])
    return BlockBatch(layout, col(0), col(1), col(2), col(3), col(4), col(5), col(6), col(7))


# ----------------------------------------------------------------------
# scaling checks


@dataclass
class ScalingReport:
    kind: str
    m_grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    slope: float
    slope_se: float
    ceiling: float
    degenerate: bool = False
    noise_floor: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (not self.degenerate) and self.slope <= self.ceiling

    def rows(self) -> list[tuple]:
        nf = self.noise_floor if self.noise_floor is not None else np.full(len(self.m_grid), np.nan)
        return [(self.kind, int(m), float(v), float(s), float(f), self.slope, self.ceiling)
                for m, v, s, f in zip(self.m_grid, self.values, self.se, nf)]


def _check_grid(m_grid) -> np.ndarray:
    g = np.asarray(m_grid, dtype=np.int64)
    if len(g) < 2 or np.any(np.diff(g) <= 0) or g[0] < 2 or g[-1] < 8 * g[0]:
        raise ValueError("m_grid must be increasing, m >= 2, spanning a factor >= 8")
    return g


def _slope_with_bootstrap(m_grid, per_path: list[np.ndarray], boot: int, seed: int, stat=np.mean):
    """Log-log slope of stat(per_path[i]) on m, SE by resampling paths independently per m."""
    vals = np.array([stat(x) for x in per_path])
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        return vals, float("nan"), float("nan")
    lm = np.log(m_grid)
    slope = float(np.polyfit(lm, np.log(vals), 1)[0])
    rng = np.random.default_rng(seed)
    bs = np.empty(boot)
    for b in range(boot):
        v = np.array([stat(x[rng.integers(0, len(x), len(x))]) for x in per_path])
        bs[b] = np.polyfit(lm, np.log(np.maximum(v, 1e-300)), 1)[0]
    return vals, slope, float(np.std(bs, ddof=1))


def _r1_values(spec, m, keys, sampler, J_nu, J_c):
    """R_1 per path: block 1 (indices 1..m) is redrawn, block 2 is held fixed."""
    n = 2 * m
    pw = _PathWork(spec, n)
    redraw = np.zeros(n + 1, dtype=np.bool_)
    redraw[1:m + 1] = True
    out = np.empty(len(keys))
    x = np.zeros(n + 1)
    for i, key in enumerate(keys):
        key = int(key)
        pw.fill(key, 1, n)
        pool = sampler.draw_keys(_rep_keys(key, _TAG_POOL, J_nu))
        pw.xkm(pool, m, m + 1, n, x)
        cond = _conditional(pw, pool, m, m + 1, n, redraw, _rep_keys(key, _TAG_COND, J_c), x)
        out[i] = np.sum(x[m + 1:] - cond[m + 1:])
    return out


def r1_moment_scaling(spec: EnsembleSpec, p: float, m_grid, paths: int, J_nu: int = DEFAULT_J,
                      J_c: int = DEFAULT_J, seed: int = 0, q: float | None = None,
                      sampler: StationarySampler | None = None, workers: int = 1, boot: int = 200,
                      budget: int | None = None) -> ScalingReport:
    """E|R_1|^p against m; the ceiling is p + 1 - q + 0.3."""
    if p not in (2, 3):
        raise ValueError("p must be 2 or 3")
    g = _check_grid(m_grid)
    q = spec.declared_q if q is None else q
    if q is None:
        raise ValueError("q is required (no declared moment order on the spec)")
    check_budget(int(paths * J_c * J_nu * 2 * g.sum()), budget)
    sampler = sampler or StationarySampler(spec)
    per_m = []
    for m in g:
        keys = path_keys(seed, f"r1:{int(m)}", paths)
        parts = _chunked(lambda a, b: _r1_values(spec, int(m), keys[a:b], sampler, J_nu, J_c), paths, workers)
        per_m.append(np.abs(np.concatenate(parts)) ** p)
    se = np.array([x.std(ddof=1) / np.sqrt(len(x)) for x in per_m])
    vals = np.array([x.mean() for x in per_m])
    degenerate = bool(np.all(vals <= 1e-20))
    if degenerate:
        slope, sse = float("nan"), float("nan")
    else:
        vals, slope, sse = _slope_with_bootstrap(g, per_m, boot, seed)
    return ScalingReport("r1_moment", g, vals, se, slope, sse, p + 1.0 - q + 0.3, degenerate,
                         params=dict(p=p, q=q, paths=paths, J_nu=J_nu, J_c=J_c))


def block_moment_growth(spec: EnsembleSpec, q: float, m_grid, paths: int, *, lambda_hat: float,
                        seed: int = 0, sampler: StationarySampler | None = None, workers: int = 1,
                        boot: int = 200, budget: int | None = None) -> ScalingReport:
    """E|X_{m+1} + ... + X_{2m}|^q against m from stationary paths; ceiling q/2 + 0.3."""
    g = _check_grid(m_grid)
    sampler = sampler or StationarySampler(spec)
    grid = np.unique(np.concatenate([g, 2 * g]))
    sm = run_stationary_batch(spec, grid, paths, sampler, seed, workers=workers, budget=budget)
    v = sm.log_vec_norm
    idx = {int(n): i for i, n in enumerate(grid)}
    per_m = [np.abs(v[:, idx[2 * int(m)]] - v[:, idx[int(m)]] - m * lambda_hat) ** q for m in g]
    vals = np.array([x.mean() for x in per_m])
    se = np.array([x.std(ddof=1) / np.sqrt(len(x)) for x in per_m])
    degenerate = bool(np.all(vals <= 1e-20))
    if degenerate:
        slope, sse = float("nan"), float("nan")
    else:
        vals, slope, sse = _slope_with_bootstrap(g, per_m, boot, seed)
    return ScalingReport("block_moment", g, vals, se, slope, sse, q / 2.0 + 0.3, degenerate,
                         params=dict(q=q, paths=paths, lambda_hat=lambda_hat))


def _cond_second_moments(spec, m, outer_keys, inner_keys, sampler, J_nu, pool_key):
    """T^2_{o,i} with T = sum_{k=m+1}^{2m} (X_{k,m} - E_m X_{k,m}); inner draws shared across o."""
    n = 2 * m
    pw = _PathWork(spec, n)
    pool = sampler.draw_keys(_rep_keys(pool_key, _TAG_POOL, J_nu))
    inner_mask = np.zeros(n + 1, dtype=np.bool_)
    inner_mask[m + 1:] = True
    # inner matrices depend only on the inner key
    inner_units = np.zeros((len(inner_keys), n + 1, spec.d, spec.d))
    inner_lgs = np.zeros((len(inner_keys), n + 1))
    for i, key in enumerate(inner_keys):
        pw.fill(int(key), m + 1, n, inner_mask, inner_units[i], inner_lgs[i])
    T2 = np.empty((len(outer_keys), len(inner_keys)))
    X = np.empty((len(inner_keys), m))
    out = np.zeros(n + 1)
    for o, okey in enumerate(outer_keys):
        pw.fill(int(okey), 1, m)
        for i in range(len(inner_keys)):
            pw.units[m + 1:] = inner_units[i, m + 1:]
            pw.lgs[m + 1:] = inner_lgs[i, m + 1:]
            pw.xkm(pool, m, m + 1, n, out)
            X[i] = out[m + 1:]
        T = (X - X.mean(axis=0)).sum(axis=1)
        T2[o] = T * T
    return T2


def conditional_variance_concentration(spec: EnsembleSpec, m_grid, outer: int = 128, inner: int = 64,
                                       J_nu: int = DEFAULT_J, seed: int = 0,
                                       sampler: StationarySampler | None = None, scale_inner: bool = True,
                                       workers: int = 1, ceiling: float = 0.5, boot: int = 200,
                                       budget: int | None = None) -> ScalingReport:
    """L1 deviation of E_m(T^2) from E(T^2), T the centered block sum over m+1..2m.

    Outer draws fix eps_1..eps_m; inner draws of eps_{m+1}..eps_{2m} are
    common to all outer draws, so only the effect of the conditioning is
    left in V_o - mean(V).  With ``scale_inner`` the inner count grows like
    m / min(m_grid), which keeps the Monte Carlo part of the deviation from
    growing with m.  The reported noise floor is the mean squared Monte
    Carlo error of V_o - mean(V); it scales like 1 / inner.
    """
    g = _check_grid(m_grid)
    if outer < 64 or inner < 64:
        raise ValueError("need outer >= 64 and inner >= 64")
    sampler = sampler or StationarySampler(spec)
    inners = [inner * (int(m) // int(g[0]) if scale_inner else 1) for m in g]
    check_budget(int(sum(outer * I * J_nu * 2 * m for I, m in zip(inners, g))), budget)
    per_m, floors = [], []
    for m, I in zip(g, inners):
        m = int(m)
        okeys = path_keys(seed, f"cv:outer:{m}", outer)
        ikeys = path_keys(seed, f"cv:inner:{m}", I)
        pool_key = int(path_keys(seed, f"cv:pool:{m}", 1)[0])
        parts = _chunked(lambda a, b: _cond_second_moments(spec, m, okeys[a:b], ikeys, sampler, J_nu, pool_key),
                         outer, workers, chunk=16)
        T2 = np.concatenate(parts) * I / (I - 1.0)
        D = T2 - T2.mean(axis=0, keepdims=True)
        dev = D.mean(axis=1)                        # V_o - mean(V)
        per_m.append(np.abs(dev))
        floors.append(float(np.mean(D.var(axis=1, ddof=1) / I)))
    vals = np.array([x.mean() for x in per_m])
    se = np.array([x.std(ddof=1) / np.sqrt(len(x)) for x in per_m])
    degenerate = bool(np.all(vals <= 1e-20))
    if degenerate:
        slope, sse = float("nan"), float("nan")
    else:
        vals, slope, sse = _slope_with_bootstrap(g, per_m, boot, seed)
    return ScalingReport("conditional_variance", g, vals, se, slope, sse, ceiling, degenerate,
                         np.array(floors), params=dict(outer=outer, inner=inners, J_nu=J_nu))


def conditional_mean_sup(spec: EnsembleSpec, m: int, lag: int, outer: int = 1000, inner: int = 256,
                         J_nu: int = 16, seed: int = 0,
                         sampler: StationarySampler | None = None) -> tuple[float, np.ndarray]:
    """max over conditioning draws of |E(X_{m+lag,m} | eps_1..eps_m)|.

    Inner draws are common to all conditioning draws and the unconditional
    mean (zero) is estimated by the across-draw average, which removes the
    shared inner noise.  Returns the max and the per-draw values.
    """
    if not 1 <= lag <= m:
        raise ValueError("need 1 <= lag <= m")
    sampler = sampler or StationarySampler(spec)
    k = m + lag
    pw = _PathWork(spec, k)
    pool = sampler.draw_keys(_rep_keys(int(path_keys(seed, "cm:pool", 1)[0]), _TAG_POOL, J_nu))
    ikeys = path_keys(seed, "cm:inner", inner)
    mask = np.zeros(k + 1, dtype=np.bool_)
    mask[m + 1:] = True
    units = np.zeros((inner, k + 1, spec.d, spec.d))
    lgs = np.zeros((inner, k + 1))
    for i, key in enumerate(ikeys):
        pw.fill(int(key), m + 1, k, mask, units[i], lgs[i])
    X = np.empty((outer, inner))
    out = np.zeros(k + 1)
    for o, okey in enumerate(path_keys(seed, "cm:outer", outer)):
        pw.fill(int(okey), 1, m)
        for i in range(inner):
            pw.units[m + 1:] = units[i, m + 1:]
            pw.lgs[m + 1:] = lgs[i, m + 1:]
            pw.xkm(pool, m, k, k, out)
            X[o, i] = out[k]
    vals = (X - X.mean(axis=0, keepdims=True)).mean(axis=1)
    return float(np.abs(vals).max()), vals


# ----------------------------------------------------------------------
# structural checks


@dataclass
class StructureReport:
    corr_Y: np.ndarray          # (a) correlations of Y_j across conditional replicates
    z_max_a: float
    passed_a: bool
    corr_Z: np.ndarray          # (b) correlations of Z_j across F_m draws
    z_max_b: float
    passed_b: bool
    phi_abs_max: float          # (c)
    phi_at_zero: float
    passed_c: bool
    replicates: int
    outer: int
    inner: int

    @property
    def passed(self) -> bool:
        return self.passed_a and self.passed_b and self.passed_c


def _block_sums(layout: BlockLayout, raw, x):
    """Per-block sums of Y_j before subtracting the F_m-measurable part."""
    m, N = layout.m, layout.N
    Y = np.empty(N)
    Y[0] = raw[1:m + 1].sum() + x[m + 1:2 * m + 1].sum()
    for j in range(2, N + 1):
        Y[j - 1] = x[(2 * j - 2) * m + 1:2 * j * m + 1].sum()
    return Y


def _conditional_Y(spec, layout, sampler, pool, pw: _PathWork, rep_keys, w0_keys, lambda_hat=0.0):
    """Y_j (up to F_m-measurable shifts) for each replicate of the non-member matrices and W_0."""
    n, m = layout.n, layout.m
    nonmember = ~layout.member_mask()
    nonmember[0] = False
    units = pw.units.copy()
    lgs = pw.lgs.copy()
    w0s = sampler.draw_keys(w0_keys)
    raw = np.zeros(n + 1)
    x = np.zeros(n + 1)
    Ys = np.empty((len(rep_keys), layout.N))
    Xs = np.empty((len(rep_keys), n + 1))
    for r, key in enumerate(rep_keys):
        pw.fill(int(key), 1, n, nonmember, units, lgs)
        _raw_increments(units, lgs, w0s[r], 1, m, raw)
        raw[1:m + 1] -= lambda_hat
        pw.xkm(pool, m, m + 1, n, x, units, lgs)
        Ys[r] = _block_sums(layout, raw, x)
        Xs[r] = x
    return Ys, Xs


def _offdiag_z(C: np.ndarray, count: int, min_sep: int) -> tuple[float, np.ndarray]:
    N = C.shape[0]
    z = [abs(C[i, j]) * np.sqrt(count) for i in range(N) for j in range(i + min_sep, N)]
    return (float(max(z)) if z else 0.0), np.array(z)


def structural_checks(spec: EnsembleSpec, layout: BlockLayout, replicates: int = 1000, outer: int = 1000,
                      inner: int = 64, J_nu: int = 16, t: float = 1.0, t_grid=(0.0, 0.5, 1.0, 2.0, 4.0),
                      seed: int = 0, sampler: StationarySampler | None = None, workers: int = 1,
                      lambda_hat: float = 0.0, budget: int | None = None) -> StructureReport:
    """(a) corr(Y_j, Y_j') = 0 under a fixed F_m; (b) Z_j = E(cos(t Y_j / sqrt(2m)) | F_m)
    uncorrelated at distance >= 2; (c) |phi_j(t)| <= 1 and phi_j(0) = 1."""
    n, m, N = layout.n, layout.m, layout.N
    check_budget(int((replicates + outer * inner) * J_nu * n), budget)
    sampler = sampler or StationarySampler(spec)
    pool = sampler.draw_keys(_rep_keys(int(path_keys(seed, "struct:pool", 1)[0]), _TAG_POOL, J_nu))

    # (a) one frozen F_m realization
    base_key = int(path_keys(seed, "struct:a", 1)[0])
    pw = _PathWork(spec, n)
    pw.fill(base_key, 1, n)
    Ys, _ = _conditional_Y(spec, layout, sampler, pool, pw, _rep_keys(base_key, _TAG_COND, replicates),
                           _rep_keys(base_key, _TAG_W0, replicates))
    Ca = np.corrcoef(Ys, rowvar=False)
    za, _ = _offdiag_z(Ca, replicates, 1)

    # (b), (c) across F_m realizations
    okeys = path_keys(seed, "struct:b", outer)
    ts = np.asarray(t_grid, dtype=float)
    scale = 1.0 / np.sqrt(2.0 * m)

    def work(a, b):
        pwb = _PathWork(spec, n)
        Z = np.empty((b - a, N))
        phi = np.empty((b - a, len(ts), N), dtype=complex)
        for o, key in enumerate(okeys[a:b]):
            key = int(key)
            pwb.fill(key, 1, n)
            Yr, Xr = _conditional_Y(spec, layout, sampler, pool, pwb, _rep_keys(key, _TAG_COND, inner),
                                    _rep_keys(key, _TAG_W0, inner), lambda_hat)
            # subtract the F_m-measurable part sum E(X_{k,m} | F_m), estimated from the same replicates
            shift = _block_sums(layout, np.zeros(n + 1), np.concatenate([[0.0], Xr[:, 1:].mean(axis=0)]))
            Y = (Yr - shift) * scale
            Z[o] = np.cos(t * Y).mean(axis=0)
            phi[o] = np.exp(1j * ts[:, None, None] * Y[None, :, :]).mean(axis=1)
        return Z, phi

    parts = _chunked(work, outer, workers, chunk=32)
    Z = np.concatenate([p[0] for p in parts])
    phi = np.concatenate([p[1] for p in parts])
    Cb = np.corrcoef(Z, rowvar=False)
    zb, _ = _offdiag_z(Cb, outer, 2)
    phi_abs = float(np.abs(phi).max())
    zero = np.nonzero(ts == 0.0)[0]
    phi0 = float(np.abs(phi[:, zero[0]] - 1.0).max()) if len(zero) else 0.0
    return StructureReport(Ca, za, za <= 3.0, Cb, zb, zb <= 3.0, phi_abs, 1.0 - phi0,
                           phi_abs <= 1.0 + 1e-12 and phi0 == 0.0, replicates, outer, inner)

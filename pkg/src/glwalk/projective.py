"""Projective space: the action g.x, the cocycle sigma and the stationary law."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .ensemble import EnsembleSpec, GroupElement, SingularEnsemble, draw
from .rng import RngStream, child_keys

CANON_EPS = 1e-14


@nb.njit(cache=True, inline="always")
def canonicalize(v, d):
    """Flip the sign so the first coordinate above CANON_EPS is positive."""
    for i in range(d):
        if abs(v[i]) > CANON_EPS:
            if v[i] < 0.0:
                for j in range(d):
                    v[j] = -v[j]
            return


@nb.njit(cache=True, inline="always")
def apply_unit(U, x, out, d):
    """out <- U x / ||U x|| (canonical); returns log ||U x||."""
    s = 0.0
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += U[i, j] * x[j]
        out[i] = acc
        s += acc * acc
    nrm = np.sqrt(s)
    for i in range(d):
        out[i] /= nrm
    canonicalize(out, d)
    return np.log(nrm)


@nb.njit(cache=True, inline="always")
def log_unit_norm(U, x, d):
    s = 0.0
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += U[i, j] * x[j]
        s += acc * acc
    return 0.5 * np.log(s)


@dataclass(frozen=True, eq=False)
class ProjectivePoint:
    direction: np.ndarray

    def __post_init__(self):
        v = np.array(self.direction, dtype=float).ravel()
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError("direction must be a nonzero finite vector")
        v = v / n
        canonicalize(v, v.shape[0])
        v.setflags(write=False)
        object.__setattr__(self, "direction", v)

    @property
    def d(self) -> int:
        return self.direction.shape[0]

    def isclose(self, other: "ProjectivePoint", tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.direction - other.direction)) <= tol)

    @classmethod
    def basis(cls, d: int, i: int = 0) -> "ProjectivePoint":
        return cls(np.eye(d)[i])


def act(g: GroupElement, x: ProjectivePoint) -> ProjectivePoint:
    """g . x, the canonical representative of g x / ||g x||."""
    return ProjectivePoint(g.unit @ x.direction)


def cocycle(g: GroupElement, x: ProjectivePoint) -> float:
    """sigma(g, x) = log(||g x|| / ||x||)."""
    return g.log_norm + float(np.log(np.linalg.norm(g.unit @ x.direction) / np.linalg.norm(x.direction)))


def alignment(u: ProjectivePoint, v: ProjectivePoint) -> float:
    """|<u, v>| / (||u|| ||v||), in [0, 1]."""
    return float(min(1.0, abs(np.dot(u.direction, v.direction))))


# ----------------------------------------------------------------------
# stationary law by forward burn-in


@nb.njit(cache=True, nogil=True)
def _burn_in(code, d, fp, atoms, alog, ailog, keys, c0, x0, B, out):
    E = np.empty((d, d))
    work = np.empty((d, d))
    x = np.empty(d)
    y = np.empty(d)
    for p in range(keys.shape[0]):
        for i in range(d):
            x[i] = x0[i]
        for k in range(B):
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, keys[p], c0 + k, E, work)
            if not ok:
                return False
            apply_unit(E, x, y, d)
            for i in range(d):
                x[i] = y[i]
        for i in range(d):
            out[p, i] = x[i]
    return True


@dataclass
class StationarySampler:
    """Approximate draws from nu: W_B = eps_B ... eps_1 x0 after B burn-in steps."""

    spec: EnsembleSpec
    burn_in: int = 200
    start: ProjectivePoint | None = None
    cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.burn_in < 1:
            raise ValueError("burn_in must be >= 1")
        if self.start is None:
            # a fixed generic direction, away from coordinate axes
            v = np.arange(1, self.spec.d + 1, dtype=float) ** 0.5
            self.start = ProjectivePoint(v)

    def draw_keys(self, keys: np.ndarray, counter: int = 0) -> np.ndarray:
        """One approximate nu draw per stream key, shape (len(keys), d)."""
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        out = np.empty((keys.shape[0], self.spec.d))
        if not _burn_in(*self.spec.packed, keys, counter, self.start.direction.copy(), self.burn_in, out):
            raise SingularEnsemble("singular draw during burn-in")
        return out

    def pool(self, key: int, size: int) -> np.ndarray:
        """``size`` iid draws from distinct child streams of ``key``."""
        return self.draw_keys(child_keys(np.uint64(key), np.uint64(0), size))

    def fill_cache(self, key: int, size: int) -> np.ndarray:
        if self.cache is None:
            self.cache = self.pool(key, size)
            self.cache.setflags(write=False)
        return self.cache


def stationary_draw(s: StationarySampler, stream: RngStream) -> ProjectivePoint:
    """W_B from the sampler's fixed start, consuming ``stream``."""
    x = s.draw_keys(np.array([stream.key], dtype=np.uint64), stream.counter)[0]
    stream.counter += s.burn_in
    return ProjectivePoint(x)


def spread_directions(d: int, count: int) -> np.ndarray:
    """Fixed directions with large pairwise projective spread.

    For d = 2 these are equally spaced angles in [0, pi); otherwise a
    deterministic greedy max-min selection from a quasi-random candidate set.
    """
    if d == 2:
        th = np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    rng = np.random.default_rng(12345 + d)
    cand = rng.standard_normal((4096, d))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    chosen = [np.eye(d)[0]]
    best = np.abs(cand @ chosen[0])
    while len(chosen) < count:
        i = int(np.argmin(best))
        chosen.append(cand[i])
        best = np.maximum(best, np.abs(cand @ cand[i]))
    out = np.array(chosen)
    for v in out:
        canonicalize(v, d)
    return out


@dataclass(frozen=True)
class InvarianceResult:
    statistic: float
    pvalue: float
    level: float
    reference: np.ndarray

    @property
    def passed(self) -> bool:
        return self.pvalue > self.level


def invariance_test(s: StationarySampler, draws: int = 10_000, seed: int = 0,
                    level: float = 0.05) -> InvarianceResult:
    """Two-sample KS on alignment with a fixed random reference: {W} against {eps W}.

    The two samples come from disjoint streams so they are independent.
    """
    from scipy.stats import ks_2samp

    from .rng import path_keys

    d = s.spec.d
    ref = np.random.default_rng(seed).standard_normal(d)
    ref /= np.linalg.norm(ref)
    w = s.draw_keys(path_keys(seed, "inv:a", draws))
    # eps . W: one extra step on the same stream continues the burn-in by one draw
    v = s.draw_keys(path_keys(seed, "inv:b", draws))
    code, _, fp, atoms, alog, ailog = s.spec.packed
    E = np.empty((d, d))
    work = np.empty((d, d))
    keys = path_keys(seed, "inv:step", draws)
    for i in range(draws):
        _, _, ok = draw(code, d, fp, atoms, alog, ailog, keys[i], 0, E, work)
        if not ok:
            raise SingularEnsemble("singular draw in invariance test")
        y = E @ v[i]
        v[i] = y / np.linalg.norm(y)
    a = np.minimum(np.abs(w @ ref), 1.0)
    b = np.minimum(np.abs(v @ ref), 1.0)
    res = ks_2samp(a, b)
    return InvarianceResult(float(res.statistic), float(res.pvalue), level, ref)

"""Path engine for the left random walk A_n = eps_n ... eps_1.

The matrix product is carried as A_k = exp(c_k) M_k with ||M_k|| kept in
[1/2, 2]; the vector is carried as a unit direction plus the accumulated
log-norm, which is exactly the running sum of cocycle increments.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .ensemble import ORTH, EnsembleSpec, SingularEnsemble, draw, op_norm, spectral_radius
from .projective import ProjectivePoint, StationarySampler, apply_unit
from .rng import RngStream, path_keys

OBSERVABLES = ("log_vec_norm", "log_mat_norm", "log_spec_radius")
DEFAULT_BUDGET = 10**10


class BudgetExceeded(RuntimeError):
    """The requested work exceeds the configured matrix-multiply budget."""


def default_budget() -> int:
    env = os.environ.get("GLWALK_BUDGET")
    return int(float(env)) if env else DEFAULT_BUDGET


def check_budget(steps: int, budget: int | None) -> None:
    budget = default_budget() if budget is None else budget
    if steps > budget:
        raise BudgetExceeded(f"{steps} matrix multiplies requested, budget is {budget}")


@nb.njit(cache=True, inline="always")
def _matmul_into(A, B, out, d):
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc


@nb.njit(cache=True, inline="always")
def _frob2(M, d):
    s = 0.0
    for i in range(d):
        for j in range(d):
            s += M[i, j] * M[i, j]
    return s


@nb.njit(cache=True, nogil=True)
def _walk_kernel(code, d, fp, atoms, alog, ailog, keys, c0, starts, checkpoints, cadence, out, inc):
    """Run one path per key; out[p, i, :] = observables at checkpoints[i].

    inc has shape (P, n) to record raw sigma increments, or (P, 0).
    Returns False if a draw stayed singular.
    """
    P = keys.shape[0]
    K = checkpoints.shape[0]
    n = checkpoints[K - 1] if K > 0 else 0
    record = inc.shape[1] > 0
    E = np.empty((d, d))
    work = np.empty((d, d))
    M = np.empty((d, d))
    T = np.empty((d, d))
    x = np.empty(d)
    y = np.empty(d)
    for p in range(P):
        for i in range(d):
            x[i] = starts[p, i]
            for j in range(d):
                M[i, j] = 1.0 if i == j else 0.0
        vec_log = 0.0
        mat_log = 0.0
        ci = 0
        while ci < K and checkpoints[ci] == 0:
            out[p, ci, 0] = 0.0
            out[p, ci, 1] = 0.0
            out[p, ci, 2] = 0.0
            ci += 1
        for k in range(1, n + 1):
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, keys[p], c0 + k - 1, E, work)
            if not ok:
                return False
            s = lg + apply_unit(E, x, y, d)
            if code == ORTH:
                # isometries have sigma = 0; drop the rounding in ||U x||
                s = 0.0
            for i in range(d):
                x[i] = y[i]
            vec_log += s
            if record:
                inc[p, k - 1] = s
            _matmul_into(E, M, T, d)
            mat_log += lg
            if cadence > 0:
                if k % cadence == 0:
                    nrm = op_norm(T, d)
                    mat_log += np.log(nrm)
                    for i in range(d):
                        for j in range(d):
                            T[i, j] /= nrm
            else:
                f2 = _frob2(T, d)
                if f2 < 0.25 or f2 > 4.0:
                    nrm = op_norm(T, d)
                    mat_log += np.log(nrm)
                    for i in range(d):
                        for j in range(d):
                            T[i, j] /= nrm
            for i in range(d):
                for j in range(d):
                    M[i, j] = T[i, j]
            while ci < K and checkpoints[ci] == k:
                out[p, ci, 0] = vec_log
                out[p, ci, 1] = mat_log + np.log(op_norm(M, d))
                out[p, ci, 2] = mat_log + np.log(spectral_radius(M, d))
                ci += 1
    return True


@dataclass
class PathResult:
    n: int
    log_vec_norm: float
    log_mat_norm: float
    log_spec_radius: float
    increments: np.ndarray | None = None


def run_path(spec: EnsembleSpec, n: int, start: ProjectivePoint, stream: RngStream,
             record_increments: bool = False, cadence: int = 0) -> PathResult:
    """Walk ``n`` steps from ``start``; the stream supplies draws counter, counter+1, ..."""
    if n < 0:
        raise ValueError("n must be >= 0")
    d = spec.d
    out = np.empty((1, 1, 3))
    inc = np.empty((1, n if record_increments else 0))
    ok = _walk_kernel(*spec.packed, np.array([stream.key], dtype=np.uint64), stream.counter,
                      start.direction.reshape(1, d).copy(), np.array([n], dtype=np.int64), cadence, out, inc)
    if not ok:
        raise SingularEnsemble("singular draw during walk")
    stream.counter += n
    return PathResult(n, float(out[0, 0, 0]), float(out[0, 0, 1]), float(out[0, 0, 2]),
                      inc[0].copy() if record_increments else None)


# ----------------------------------------------------------------------
# batches


@dataclass
class Moments:
    """Count/mean/M2 with an associative, commutative merge."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(int(x.size), mu, float(((x - mu) ** 2).sum()))

    def merge(self, other: "Moments") -> "Moments":
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return Moments(n, mean, m2)

    @property
    def var(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")


@dataclass
class SampleMatrix:
    """Observables per (path, n): arrays of shape (paths, len(n_grid))."""

    n_grid: np.ndarray
    path_ids: np.ndarray
    log_vec_norm: np.ndarray
    log_mat_norm: np.ndarray
    log_spec_radius: np.ndarray
    summary: dict = field(default_factory=dict, repr=False)

    def observable(self, name: str) -> np.ndarray:
        aliases = {"vec_norm": "log_vec_norm", "mat_norm": "log_mat_norm", "spec_radius": "log_spec_radius"}
        return getattr(self, aliases.get(name, name))

    def column(self, name: str, n: int) -> np.ndarray:
        i = int(np.searchsorted(self.n_grid, n))
        if i >= len(self.n_grid) or self.n_grid[i] != n:
            raise KeyError(f"n = {n} not in grid")
        return self.observable(name)[:, i]

    @property
    def paths(self) -> int:
        return len(self.path_ids)


def _chunks(total: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, total))
    edges = np.linspace(0, total, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunks(fn, total: int, workers: int):
    chunks = _chunks(total, workers)
    if len(chunks) == 1:
        return [fn(*chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))


def _batch(spec: EnsembleSpec, n_grid, paths: int, start_fn, seed: int, stage: str, workers: int,
           budget: int | None) -> SampleMatrix:
    grid = np.asarray(n_grid, dtype=np.int64)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("n_grid must be strictly increasing and non-negative")
    if paths < 1:
        raise ValueError("paths must be >= 1")
    check_budget(int(paths) * int(grid[-1]), budget)
    packed = spec.packed

    def work(a: int, b: int):
        starts = start_fn(a, b)
        keys = path_keys(seed, stage, b - a, a)
        out = np.empty((b - a, len(grid), 3))
        if not _walk_kernel(*packed, keys, 0, starts, grid, 0, out, np.empty((b - a, 0))):
            raise SingularEnsemble("singular draw during walk")
        summ = {(name, int(n)): Moments.of(out[:, i, j])
                for j, name in enumerate(OBSERVABLES) for i, n in enumerate(grid)}
        return out, summ

    parts = _run_chunks(work, paths, workers)
    out = np.concatenate([p[0] for p in parts])
    summary: dict = {}
    for _, summ in parts:
        for k, v in summ.items():
            summary[k] = summary.get(k, Moments()).merge(v)
    return SampleMatrix(grid, np.arange(paths), out[:, :, 0].copy(), out[:, :, 1].copy(),
                        out[:, :, 2].copy(), summary)


def run_stationary_batch(spec: EnsembleSpec, n_grid, paths: int, sampler: StationarySampler, seed: int,
                         workers: int = 1, budget: int | None = None) -> SampleMatrix:
    """Paths started at independent nu-hat draws; path i uses streams child(seed, 'nu'|'walk', i)."""

    def starts(a, b):
        return sampler.draw_keys(path_keys(seed, "nu", b - a, a))

    return _batch(spec, n_grid, paths, starts, seed, "walk", workers, budget)


def run_fixed_start_batch(spec: EnsembleSpec, n_grid, paths: int, start: ProjectivePoint, seed: int,
                          stage: str = "walk", workers: int = 1, budget: int | None = None) -> SampleMatrix:
    def starts(a, b):
        return np.repeat(start.direction.reshape(1, -1), b - a, axis=0)

    return _batch(spec, n_grid, paths, starts, seed, stage, workers, budget)


def path_stream(seed: int, path: int, stage: str = "walk") -> RngStream:
    """The stream run_stationary_batch uses for ``path``."""
    return RngStream(int(path_keys(seed, stage, 1, path)[0]))

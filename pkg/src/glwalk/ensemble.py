"""Sampleable measures on GL_d(R).

Four families are provided:

``two_atom``
    mu = sum_i w_i delta_{g_i} for user atoms (two by default); finite support
    makes exact enumeration possible.
``scalar_gauge``
    g = exp(Z) Id.  Not irreducible: every walk observable is an iid sum of Z.
``rot_diag_rot``
    g = R1 diag(exp(L e_1), ..., exp(L e_d)) R2 with e spread linearly from +1 to
    -1, independent Givens-composed rotations R1, R2 and
    L = shift + scale * T, P(T > t) = (1 + t)^(-a).  log N(g) = L, so moments of
    order p exist iff p < a.  Strongly irreducible (rotations) and proximal
    (gapped diagonal).
``orthogonal_only``
    Random rotations; N(g) = 1.  Degenerate control.

A sampled element is stored as ``exp(log_norm) * unit`` with ``||unit|| = 1``, so
heavy tails never overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numba as nb
import numpy as np

from .rng import RngStream, uniform

FAMILIES = ("two_atom", "scalar_gauge", "rot_diag_rot", "orthogonal_only")
TWO_ATOM, SCALAR, ROT, ORTH = range(4)
SCALAR_LAWS = ("discrete", "exponential", "uniform")

# A draw whose condition number exceeds exp(MAX_LOG_COND) is treated as singular.
MAX_LOG_COND = 700.0
MAX_RETRIES = 16
RETRY_STRIDE = 4096


class SingularEnsemble(RuntimeError):
    """Raised when a draw stays numerically singular after bounded retries."""


@dataclass(frozen=True)
class EnsembleSpec:
    d: int
    family: str
    tail_index: float | None = None
    params: Mapping[str, Any] = field(default_factory=dict)
    declared_q: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if int(self.d) != self.d or self.d < 2:
            raise ValueError("d must be an integer >= 2")
        if self.family == "rot_diag_rot":
            if self.tail_index is None or self.tail_index <= 0:
                raise ValueError("rot_diag_rot needs a positive tail_index")
            if self.declared_q is not None and self.declared_q >= self.tail_index:
                raise ValueError("declared_q must be below tail_index")
            if self.params.get("scale", 1.0) <= 0 or self.params.get("shift", 0.0) < 0:
                raise ValueError("rot_diag_rot needs scale > 0 and shift >= 0")
        if self.family == "two_atom":
            atoms = np.asarray(self.params.get("atoms"), dtype=float)
            if atoms.ndim != 3 or atoms.shape[1:] != (self.d, self.d) or len(atoms) < 1:
                raise ValueError("two_atom needs params['atoms'] of shape (k, d, d)")
            for a in atoms:
                if not np.all(np.isfinite(a)):
                    raise ValueError("atoms must be finite")
                sv = np.linalg.svd(a, compute_uv=False)
                if sv[-1] <= 0 or np.log(sv[0] / sv[-1]) > MAX_LOG_COND:
                    raise SingularEnsemble("two_atom atom is numerically singular")
            w = np.asarray(self.params.get("weights", np.full(len(atoms), 1.0 / len(atoms))))
            if w.shape != (len(atoms),) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise ValueError("weights must be a probability vector")
        if self.family == "scalar_gauge":
            law = self.params.get("law", "discrete")
            if law not in SCALAR_LAWS:
                raise ValueError(f"unknown scalar law {law!r}")
            if law == "discrete":
                v = np.asarray(self.params.get("values", ()), dtype=float)
                pr = np.asarray(self.params.get("probs", ()), dtype=float)
                if v.ndim != 1 or v.shape != pr.shape or len(v) == 0:
                    raise ValueError("discrete law needs matching values/probs")
                if np.any(pr < 0) or abs(pr.sum() - 1) > 1e-12:
                    raise ValueError("probs must be a probability vector")

    # constructors -------------------------------------------------------
    @classmethod
    def two_atom(cls, atoms: Sequence, weights: Sequence[float] | None = None) -> "EnsembleSpec":
        atoms = np.asarray(atoms, dtype=float)
        params: dict[str, Any] = {"atoms": atoms.tolist()}
        if weights is not None:
            params["weights"] = list(map(float, weights))
        return cls(d=atoms.shape[1], family="two_atom", params=params)

    @classmethod
    def contracting_pair(cls, stretch: float = 2.0, angle: float = 1.0) -> "EnsembleSpec":
        """diag(c, 1/c) and its conjugate by a rotation; strongly irreducible and proximal."""
        g1 = np.diag([stretch, 1.0 / stretch])
        c, s = np.cos(angle), np.sin(angle)
        r = np.array([[c, -s], [s, c]])
        return cls.two_atom([g1, r @ g1 @ r.T])

    @classmethod
    def scalar_gauge(cls, d: int = 2, **law: Any) -> "EnsembleSpec":
        return cls(d=d, family="scalar_gauge", params=law)

    @classmethod
    def rot_diag_rot(cls, d: int, tail_index: float, scale: float = 1.0, shift: float = 0.0,
                     declared_q: float | None = None) -> "EnsembleSpec":
        return cls(d=d, family="rot_diag_rot", tail_index=float(tail_index),
                   params={"scale": float(scale), "shift": float(shift)}, declared_q=declared_q)

    @classmethod
    def orthogonal_only(cls, d: int = 2) -> "EnsembleSpec":
        return cls(d=d, family="orthogonal_only")

    @classmethod
    def from_dict(cls, block: Mapping[str, Any]) -> "EnsembleSpec":
        block = dict(block)
        family = block.pop("family")
        d = int(block.pop("d", 2))
        tail = block.pop("tail_index", None)
        q = block.pop("declared_q", None)
        params = block.pop("params", {})
        params = {**params, **block}
        if family == "two_atom" and "atoms" not in params:
            return cls.contracting_pair(**params)
        return cls(d=d, family=family, tail_index=tail, params=params, declared_q=q)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family, "d": self.d, "params": dict(self.params)}
        if self.tail_index is not None:
            out["tail_index"] = self.tail_index
        if self.declared_q is not None:
            out["declared_q"] = self.declared_q
        return out

    # packed form for the jitted kernels --------------------------------
    @cached_property
    def packed(self) -> tuple:
        d = self.d
        atoms = np.zeros((1, d, d))
        alog = np.zeros(1)
        ailog = np.zeros(1)
        if self.family == "two_atom":
            raw = np.asarray(self.params["atoms"], dtype=float)
            k = len(raw)
            w = np.asarray(self.params.get("weights", np.full(k, 1.0 / k)), dtype=float)
            atoms = np.empty((k, d, d))
            alog = np.empty(k)
            ailog = np.empty(k)
            for i, a in enumerate(raw):
                sv = np.linalg.svd(a, compute_uv=False)
                atoms[i] = a / sv[0]
                alog[i] = np.log(sv[0])
                ailog[i] = -np.log(sv[-1])
            cum = np.cumsum(w)
            cum[-1] = 1.0
            fp = cum
            code = TWO_ATOM
        elif self.family == "scalar_gauge":
            law = self.params.get("law", "discrete")
            code = SCALAR
            if law == "discrete":
                v = np.asarray(self.params["values"], dtype=float)
                cum = np.cumsum(np.asarray(self.params["probs"], dtype=float))
                cum[-1] = 1.0
                fp = np.concatenate([[0.0, float(self.params.get("jitter", 0.0)), len(v)], v, cum])
            elif law == "exponential":
                fp = np.array([1.0, float(self.params.get("rate", 1.0)), float(self.params.get("shift", 0.0))])
            else:
                fp = np.array([2.0, float(self.params.get("low", 0.0)), float(self.params.get("high", 1.0))])
        elif self.family == "rot_diag_rot":
            code = ROT
            fp = np.array([self.tail_index, self.params.get("scale", 1.0), self.params.get("shift", 0.0)],
                          dtype=float)
        else:
            code = ORTH
            fp = np.zeros(1)
        return code, d, np.ascontiguousarray(fp, dtype=float), atoms, alog, ailog

    @property
    def is_heavy_tailed(self) -> bool:
        return self.family == "rot_diag_rot"


# ----------------------------------------------------------------------
# jitted draw


@nb.njit(cache=True)
def _givens_into(R, d, key, counter, slot0):
    for i in range(d):
        for j in range(d):
            R[i, j] = 1.0 if i == j else 0.0
    s = slot0
    for i in range(d - 1):
        for j in range(i + 1, d):
            th = 2.0 * np.pi * uniform(key, counter, s)
            s += 1
            c = np.cos(th)
            sn = np.sin(th)
            for col in range(d):
                ri = R[i, col]
                rj = R[j, col]
                R[i, col] = c * ri - sn * rj
                R[j, col] = sn * ri + c * rj
    return s


@nb.njit(cache=True, inline="always")
def _draw_once(code, d, fp, atoms, alog, ailog, key, counter, slot0, out, work):
    """One attempt.  Returns (log_norm, log_inv_norm)."""
    if code == 0:
        u = uniform(key, counter, slot0)
        k = 0
        while k < fp.shape[0] - 1 and u > fp[k]:
            k += 1
        for i in range(d):
            for j in range(d):
                out[i, j] = atoms[k, i, j]
        return alog[k], ailog[k]
    if code == 1:
        law = int(fp[0])
        u = uniform(key, counter, slot0)
        if law == 0:
            K = int(fp[2])
            k = 0
            while k < K - 1 and u > fp[3 + K + k]:
                k += 1
            z = fp[3 + k]
            if fp[1] != 0.0:
                z += fp[1] * (uniform(key, counter, slot0 + 1) - 0.5)
        elif law == 1:
            z = fp[2] - np.log(u) / fp[1]
        else:
            z = fp[1] + (fp[2] - fp[1]) * u
        for i in range(d):
            for j in range(d):
                out[i, j] = 1.0 if i == j else 0.0
        return z, -z
    if code == 2:
        a = fp[0]
        L = fp[2] + fp[1] * (uniform(key, counter, slot0) ** (-1.0 / a) - 1.0)
        r = 1
        # only the radial part can be singular; redraw it on fresh slots
        while 2.0 * L > MAX_LOG_COND and r < MAX_RETRIES:
            L = fp[2] + fp[1] * (uniform(key, counter, slot0 + r * RETRY_STRIDE) ** (-1.0 / a) - 1.0)
            r += 1
        if d == 2:
            t1 = 2.0 * np.pi * uniform(key, counter, slot0 + 1)
            t2 = 2.0 * np.pi * uniform(key, counter, slot0 + 2)
            c1 = np.cos(t1)
            s1 = np.sin(t1)
            c2 = np.cos(t2)
            s2 = np.sin(t2)
            t = np.exp(-2.0 * L)
            # R(t1) diag(1, t) R(t2)
            out[0, 0] = c1 * c2 - s1 * t * s2
            out[0, 1] = -c1 * s2 - s1 * t * c2
            out[1, 0] = s1 * c2 + c1 * t * s2
            out[1, 1] = -s1 * s2 + c1 * t * c2
            return L, L
        s = _givens_into(out, d, key, counter, slot0 + 1)
        _givens_into(work, d, key, counter, s)
        # out <- R1 @ diag(exp(e_i - L)) @ R2, e_i = L (1 - 2 i / (d - 1))
        for i in range(d):
            di = np.exp(-2.0 * L * i / (d - 1))
            for j in range(d):
                work[i, j] *= di
        for i in range(d):
            row = out[i].copy()
            for j in range(d):
                acc = 0.0
                for k in range(d):
                    acc += row[k] * work[k, j]
                out[i, j] = acc
        return L, L
    _givens_into(out, d, key, counter, slot0)
    return 0.0, 0.0


@nb.njit(cache=True, inline="always")
def draw(code, d, fp, atoms, alog, ailog, key, counter, out, work):
    """Fill ``out`` with the unit factor of draw ``counter`` of stream ``key``.

    Returns (log_norm, log_inv_norm, ok); ok is False when the draw is
    still numerically singular after MAX_RETRIES attempts.
    """
    lg, lgi = _draw_once(code, d, fp, atoms, alog, ailog, key, counter, 0, out, work)
    return lg, lgi, lg + lgi <= MAX_LOG_COND


@nb.njit(cache=True)
def op_norm(M, d):
    """Operator 2-norm."""
    if d == 2:
        f = M[0, 0] ** 2 + M[0, 1] ** 2 + M[1, 0] ** 2 + M[1, 1] ** 2
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        disc = f * f - 4.0 * det * det
        if disc < 0.0:
            disc = 0.0
        return np.sqrt(0.5 * (f + np.sqrt(disc)))
    return np.linalg.svd(M)[1][0]


@nb.njit(cache=True)
def spectral_radius(M, d):
    if d == 2:
        tr = M[0, 0] + M[1, 1]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        disc = 0.25 * tr * tr - det
        if disc >= 0.0:
            return 0.5 * abs(tr) + np.sqrt(disc)
        return np.sqrt(det)
    ev = np.linalg.eigvals(M.astype(np.complex128))
    return np.max(np.abs(ev))


# ----------------------------------------------------------------------
# Python-level objects


@dataclass(frozen=True)
class GroupElement:
    """g = exp(log_norm) * unit with ||unit|| = 1."""

    unit: np.ndarray
    log_norm: float
    log_inv_norm: float

    @property
    def matrix(self) -> np.ndarray:
        return np.exp(self.log_norm) * self.unit

    @property
    def log_N(self) -> float:
        return max(self.log_norm, self.log_inv_norm)

    @classmethod
    def from_matrix(cls, g) -> "GroupElement":
        g = np.asarray(g, dtype=float)
        sv = np.linalg.svd(g, compute_uv=False)
        if sv[-1] <= 0:
            raise SingularEnsemble("matrix is singular")
        return cls(g / sv[0], float(np.log(sv[0])), float(-np.log(sv[-1])))

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        prod = self.unit @ other.unit
        sv = np.linalg.svd(prod, compute_uv=False)
        base = self.log_norm + other.log_norm
        return GroupElement(prod / sv[0], base + float(np.log(sv[0])), -base - float(np.log(sv[-1])))


def sample(spec: EnsembleSpec, stream: RngStream) -> GroupElement:
    """Draw one element of mu from the next position of ``stream``."""
    code, d, fp, atoms, alog, ailog = spec.packed
    out = np.empty((d, d))
    work = np.empty((d, d))
    lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, np.uint64(stream.key), stream.counter, out, work)
    stream.counter += 1
    if not ok:
        raise SingularEnsemble(f"draw {stream.counter - 1} singular after {MAX_RETRIES} retries")
    return GroupElement(out, float(lg), float(lgi))


@nb.njit(cache=True)
def _log_n_draws(code, d, fp, atoms, alog, ailog, keys, count):
    out = np.empty((d, d))
    work = np.empty((d, d))
    res = np.empty(keys.shape[0] * count)
    i = 0
    for key in keys:
        for c in range(count):
            lg, lgi, ok = draw(code, d, fp, atoms, alog, ailog, key, c, out, work)
            res[i] = max(lg, lgi) if ok else np.nan
            i += 1
    return res


def log_N_samples(spec: EnsembleSpec, n_samples: int, stream: RngStream) -> np.ndarray:
    """log N(g) for ``n_samples`` independent draws (one child stream per 4096 draws)."""
    from .rng import child_keys

    per = 4096
    nkeys = -(-n_samples // per)
    keys = child_keys(np.uint64(stream.key), np.uint64(0), nkeys)
    vals = _log_n_draws(*spec.packed, keys, per)[:n_samples]
    if np.isnan(vals).any():
        raise SingularEnsemble("singular draw after bounded retries")
    return vals


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    se: float
    n: int
    stable: bool = True
    growth_slope: float = 0.0


def moment_diagnostic(spec: EnsembleSpec, p: float, n_samples: int,
                      stream: RngStream | None = None, max_growth: float = 0.25) -> MomentEstimate:
    """Monte Carlo estimate of E (log N(g))^p with a divergence flag.

    Stability is judged on the doubling ladder: the median of disjoint
    group means of size s grows like s^(p/a - 1) when the p-th moment is
    infinite and levels off otherwise.  A fitted log-log growth slope above
    ``max_growth`` flags the estimate as unstable.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    stream = stream or RngStream.from_seed(0, "moment")
    x = log_N_samples(spec, n_samples, stream) ** p
    value = float(x.mean())
    se = float(x.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan")
    sizes = [n_samples // (64 * 2 ** j) for j in range(6)]
    sizes = [s for s in sizes if s >= 2]
    slope = 0.0
    if len(sizes) >= 3 and value > 0:
        meds = [np.median(x[: (n_samples // s) * s].reshape(-1, s).mean(axis=1)) for s in sizes]
        meds = np.asarray(meds)
        if np.all(meds > 0):
            slope = float(np.polyfit(np.log(sizes), np.log(meds), 1)[0])
    return MomentEstimate(value, se, n_samples, stable=slope <= max_growth, growth_slope=slope)

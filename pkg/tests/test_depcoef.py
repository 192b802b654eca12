import numpy as np
import pytest

from glwalk.depcoef import (DepCoefCurve, InsufficientGrid, PairStrategy, build_pairs, coupled_differences,
                            decay_check, estimate_delta)
from glwalk.ensemble import EnsembleSpec
from glwalk.projective import StationarySampler
from glwalk.rng import RngStream

K_GRID = [1, 2, 4, 8, 16, 32, 64]


def test_identical_starts_contribute_nothing(contracting):
    x = StationarySampler(contracting).pool(5, 8)
    diffs = coupled_differences(contracting, x, x, K_GRID, 200, RngStream.from_seed(1))
    assert np.all(diffs == 0.0)


def test_scalar_family_has_no_dependence(skewed_scalar):
    for p in (1.0, 2.0):
        c = estimate_delta(skewed_scalar, p, K_GRID, PairStrategy("both", 8), replicates=200)
        assert np.all(c.values == 0.0)


def test_contracting_pair_decays():
    c = estimate_delta(EnsembleSpec.contracting_pair(), 1.0, K_GRID, PairStrategy("both", 16), 10_000,
                       RngStream.from_seed(3))
    assert c.values[4] < 0.1 * c.values[0]
    rep = decay_check(c, q=3.0)
    assert rep.nonincreasing and not rep.flagged


def test_coupled_difference_matches_direct_computation(contracting):
    # the k-th sigma difference recomputed with explicit matrices
    from glwalk.ensemble import sample
    from glwalk.rng import child_keys

    rng = RngStream.from_seed(2)
    xs = np.array([[1.0, 0.0]])
    ys = np.array([[0.6, 0.8]])
    diffs = coupled_differences(contracting, xs, ys, [1, 3], 4, rng, p=1.0)
    keys = child_keys(np.uint64(rng.child("coupling").key), np.uint64(0), 4)
    for r in range(4):
        st = RngStream(int(keys[r]))
        x, y = xs[0], ys[0]
        got = []
        for k in range(1, 4):
            g = sample(contracting, st).matrix
            gx, gy = g @ x, g @ y
            got.append(abs(np.log(np.linalg.norm(gx)) - np.log(np.linalg.norm(gy))))
            x, y = gx / np.linalg.norm(gx), gy / np.linalg.norm(gy)
        assert np.allclose(diffs[0, r], [got[0], got[2]], atol=1e-12)


def test_pair_strategies(contracting):
    s = StationarySampler(contracting)
    rng = RngStream.from_seed(0)
    xs, ys = build_pairs(contracting, PairStrategy("both", 10), s, rng)
    assert xs.shape == ys.shape == (20, 2)
    # antipodal half is orthogonal
    assert np.allclose(np.sum(xs[10:] * ys[10:], axis=1), 0, atol=1e-12)
    xs, ys = build_pairs(contracting, PairStrategy("pinned", pinned=(((1, 0), (0, 1)),)), s, rng)
    assert np.allclose(xs, [[1, 0]]) and np.allclose(ys, [[0, 1]])
    with pytest.raises(ValueError):
        PairStrategy("pinned")
    with pytest.raises(ValueError):
        PairStrategy("nearest")


def test_max_over_pairs_dominates_each_pair(contracting):
    c = estimate_delta(contracting, 2.0, [1, 2, 4], PairStrategy("both", 8), 500)
    assert np.all(c.values ** 2 >= c.pair_means.max(axis=0) - 1e-15)
    assert np.all(c.values ** 2 >= c.pair_means.min(axis=0))


def synthetic(values, se=None):
    k = np.array(K_GRID)
    v = np.asarray(values, float)
    return DepCoefCurve(1.0, k, v, np.full(len(k), 1e-6) * v if se is None else se, 1, 1000)


def test_decay_check_on_inverse_square():
    k = np.array(K_GRID, float)
    rep = decay_check(synthetic(0.5 / k ** 2), q=3.0)
    assert abs(rep.slope + 2.0) < 1e-9
    assert not rep.flagged


def test_decay_check_flags_constant_curve():
    rep = decay_check(synthetic(np.full(7, 0.3)), q=3.0)
    assert rep.flagged and abs(rep.slope) < 1e-12


def test_decay_check_grid_requirements():
    c = DepCoefCurve(1.0, [1, 2, 4], [1.0, 0.5, 0.2], [0.01] * 3, 1, 1000)
    with pytest.raises(InsufficientGrid):
        decay_check(c, 3.0)


def test_heavy_tail_family_slope():
    spec = EnsembleSpec.rot_diag_rot(2, 3.5)
    c = estimate_delta(spec, 1.0, K_GRID, PairStrategy("both", 16), 4000, RngStream.from_seed(5))
    rep = decay_check(c, q=3.0)
    assert rep.slope <= -1.0 + 2 * rep.slope_se


def test_rejects_bad_arguments(contracting):
    with pytest.raises(ValueError):
        estimate_delta(contracting, 0.5, K_GRID)
    with pytest.raises(ValueError):
        estimate_delta(contracting, 1.0, K_GRID, replicates=10)
    with pytest.raises(ValueError):
        estimate_delta(contracting, 1.0, [4, 2], replicates=100)

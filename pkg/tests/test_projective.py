import numpy as np
import pytest

from glwalk.ensemble import EnsembleSpec, GroupElement, sample
from glwalk.projective import (ProjectivePoint, StationarySampler, act, alignment, cocycle, invariance_test,
                               spread_directions, stationary_draw)
from glwalk.rng import RngStream

from conftest import all_families


def G(m):
    return GroupElement.from_matrix(np.asarray(m, float))


def test_canonical_sign_and_unit_norm():
    x = ProjectivePoint([-3.0, 4.0])
    assert np.allclose(x.direction, [0.6, -0.8])
    y = ProjectivePoint([0.0, -2.0, 1.0])
    assert y.direction[1] > 0 and np.isclose(np.linalg.norm(y.direction), 1, atol=1e-12)


def test_identity_action():
    x = ProjectivePoint([0.3, -0.7, 0.2])
    assert act(G(np.eye(3)), x).isclose(x)
    assert cocycle(G(np.eye(3)), x) == 0.0


def test_action_is_projective():
    g = np.array([[1.0, 2.0], [-0.5, 3.0]])
    x = ProjectivePoint([0.2, 1.0])
    for c in (-3.0, 0.01, 7.0):
        assert act(G(c * g), x).isclose(act(G(g), x))


def test_diagonal_action_by_hand():
    x = ProjectivePoint(np.array([1.0, 1.0]) / np.sqrt(2))
    assert np.allclose(act(G(np.diag([2.0, 1.0])), x).direction, np.array([2.0, 1.0]) / np.sqrt(5), atol=1e-15)
    assert np.isclose(cocycle(G(np.diag([2.0, 1.0])), ProjectivePoint.basis(2, 0)), np.log(2.0))


def test_orthogonal_cocycle_vanishes():
    s = RngStream.from_seed(3)
    spec = EnsembleSpec.orthogonal_only(3)
    for _ in range(20):
        g = sample(spec, s)
        x = ProjectivePoint(s.numpy().standard_normal(3))
        assert abs(cocycle(g, x)) < 1e-14


def test_alignment_values():
    x = ProjectivePoint([1.0, 0.0])
    assert alignment(x, x) == 1.0
    assert alignment(x, ProjectivePoint([0.0, 1.0])) == 0.0
    assert np.isclose(alignment(x, ProjectivePoint([1.0, 1.0])), 1 / np.sqrt(2), atol=1e-15)


@pytest.mark.parametrize("spec", all_families(), ids=lambda s: f"{s.family}-{s.d}")
def test_cocycle_identity_and_norm_bounds(spec):
    s = RngStream.from_seed(17)
    rng = np.random.default_rng(0)
    for _ in range(200):
        g1, g2 = sample(spec, s), sample(spec, s)
        x = ProjectivePoint(rng.standard_normal(spec.d))
        lhs = cocycle(g1 @ g2, x)
        rhs = cocycle(g1, act(g2, x)) + cocycle(g2, x)
        assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs))
        assert -g1.log_N - 1e-12 <= cocycle(g1, x) <= g1.log_N + 1e-12


def test_scalar_family_keeps_the_start():
    spec = EnsembleSpec.scalar_gauge(3, law="exponential")
    sm = StationarySampler(spec, burn_in=50)
    for i in range(5):
        assert stationary_draw(sm, RngStream.from_seed(i)).isclose(sm.start)


def test_stationary_draw_consumes_burn_in():
    sm = StationarySampler(EnsembleSpec.contracting_pair(), burn_in=30)
    st = RngStream.from_seed(2)
    stationary_draw(sm, st)
    assert st.counter == 30


def test_one_step_invariance_contracting_pair():
    res = invariance_test(StationarySampler(EnsembleSpec.contracting_pair(), burn_in=200), 10_000, seed=1)
    assert res.passed


def test_invariance_test_detects_missing_burn_in():
    res = invariance_test(StationarySampler(EnsembleSpec.contracting_pair(), burn_in=1), 10_000, seed=1)
    assert not res.passed


def test_orthogonal_family_chain_invariance():
    # each seed is a 5% level test; a uniform-on-the-sphere chain fails about 1 in 20
    sm = StationarySampler(EnsembleSpec.orthogonal_only(3))
    passes = [invariance_test(sm, 10_000, seed=s).passed for s in range(4)]
    assert sum(passes) >= 3


def test_pool_rows_are_unit_and_distinct():
    pool = StationarySampler(EnsembleSpec.rot_diag_rot(3, 4.5)).pool(99, 64)
    assert np.allclose(np.linalg.norm(pool, axis=1), 1)
    assert len(np.unique(pool.round(12), axis=0)) == 64


def test_spread_directions_are_well_separated():
    for d in (2, 3):
        v = spread_directions(d, 8)
        a = np.abs(v @ v.T) - np.eye(8)
        assert a.max() < 0.95

import itertools

import numpy as np
import pytest
from scipy import stats

from glwalk.ensemble import EnsembleSpec, sample
from glwalk.projective import ProjectivePoint, StationarySampler
from glwalk.rng import RngStream, _uniform_py, path_keys
from glwalk.walk import (BudgetExceeded, Moments, path_stream, run_fixed_start_batch, run_path,
                         run_stationary_batch)


def test_zero_steps():
    r = run_path(EnsembleSpec.contracting_pair(), 0, ProjectivePoint.basis(2), RngStream.from_seed(0))
    assert (r.log_vec_norm, r.log_mat_norm, r.log_spec_radius) == (0.0, 0.0, 0.0)


def test_scalar_products_equal_sum_of_log_scales():
    values, probs = [-0.5, 0.25, 2.0], [0.3, 0.5, 0.2]
    spec = EnsembleSpec.scalar_gauge(3, law="discrete", values=values, probs=probs)
    st = RngStream.from_seed(8)
    r = run_path(spec, 200, ProjectivePoint([1.0, 2.0, 3.0]), RngStream(st.key), record_increments=True)
    # independent draw of Z_j from the pure-Python generator and the inverse CDF
    cum = np.cumsum(probs)
    z = [values[min(int(np.searchsorted(cum, _uniform_py(st.key, c, 0))), 2)] for c in range(200)]
    assert np.allclose(r.increments, z, atol=0)
    assert np.isclose(r.log_vec_norm, sum(z), atol=1e-12)
    assert np.isclose(r.log_mat_norm, sum(z), atol=1e-12)
    assert np.isclose(r.log_spec_radius, sum(z), atol=1e-12)


def test_two_atom_mean_matches_enumeration():
    spec = EnsembleSpec.contracting_pair()
    atoms = np.asarray(spec.params["atoms"])
    x = np.array([1.0, 0.0])
    n = 10
    exact = np.mean([np.log(np.linalg.norm(np.linalg.multi_dot([atoms[i] for i in w[::-1]] + [x])))
                     for w in itertools.product(range(2), repeat=n)])
    sm = run_fixed_start_batch(spec, [n], 100_000, ProjectivePoint(x), seed=5)
    v = sm.log_vec_norm[:, 0]
    assert abs(v.mean() - exact) < 4 * v.std(ddof=1) / np.sqrt(len(v))


def test_single_path_batch_equals_run_path():
    spec = EnsembleSpec.rot_diag_rot(2, 4.5)
    sampler = StationarySampler(spec)
    sm = run_stationary_batch(spec, [300], 1, sampler, seed=4)
    start = ProjectivePoint(sampler.draw_keys(path_keys(4, "nu", 1))[0])
    r = run_path(spec, 300, start, path_stream(4, 0))
    assert sm.log_vec_norm[0, 0] == r.log_vec_norm
    assert sm.log_mat_norm[0, 0] == r.log_mat_norm
    assert sm.log_spec_radius[0, 0] == r.log_spec_radius


def test_checkpoint_prefix_property():
    spec = EnsembleSpec.rot_diag_rot(3, 2.7)
    sampler = StationarySampler(spec)
    long = run_stationary_batch(spec, [256, 1024], 50, sampler, seed=2)
    short = run_stationary_batch(spec, [256], 50, sampler, seed=2)
    for name in ("log_vec_norm", "log_mat_norm", "log_spec_radius"):
        assert np.array_equal(getattr(long, name)[:, 0], getattr(short, name)[:, 0])


def test_scalar_walk_matches_iid_sum_simulation():
    spec = EnsembleSpec.scalar_gauge(2, law="discrete", values=[-1.0, 1.0], probs=[0.5, 0.5])
    n, P = 1024, 20_000
    sm = run_stationary_batch(spec, [n], P, StationarySampler(spec), seed=3)
    iid = 2.0 * np.random.default_rng(0).binomial(n, 0.5, P) - n
    D = stats.ks_2samp(sm.log_vec_norm[:, 0] / np.sqrt(n), iid / np.sqrt(n)).statistic
    assert D < 2 * 1.36 * np.sqrt(2.0 / P)


@pytest.mark.parametrize("spec", [EnsembleSpec.contracting_pair(), EnsembleSpec.rot_diag_rot(2, 4.5),
                                  EnsembleSpec.rot_diag_rot(3, 3.0)], ids=["pair", "rot2", "rot3"])
def test_renormalisation_cadence_invariance(spec):
    x = ProjectivePoint([0.3, 1.0, 0.5][: spec.d])
    rs = [run_path(spec, 400, x, RngStream.from_seed(1), cadence=c) for c in (1, 16, 0)]
    for r in rs[1:]:
        for name in ("log_vec_norm", "log_mat_norm", "log_spec_radius"):
            a, b = getattr(rs[0], name), getattr(r, name)
            assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_matrix_scale_matches_explicit_product():
    spec = EnsembleSpec.contracting_pair()
    st = RngStream.from_seed(6)
    A = np.eye(2)
    for _ in range(40):
        A = sample(spec, st).matrix @ A
    r = run_path(spec, 40, ProjectivePoint.basis(2), RngStream.from_seed(6))
    assert abs(r.log_mat_norm - np.log(np.linalg.norm(A, 2))) <= 1e-9 * abs(r.log_mat_norm)
    assert abs(r.log_spec_radius - np.log(np.max(np.abs(np.linalg.eigvals(A))))) < 1e-9 * abs(r.log_mat_norm)


def test_domination_chain():
    spec = EnsembleSpec.rot_diag_rot(2, 2.7)
    sm = run_stationary_batch(spec, [1, 10, 100, 1000], 500, StationarySampler(spec), seed=9)
    assert np.all(sm.log_spec_radius <= sm.log_mat_norm + 1e-10)
    assert np.all(sm.log_vec_norm <= sm.log_mat_norm + 1e-10)


def test_subadditivity_of_matrix_norm():
    spec = EnsembleSpec.rot_diag_rot(2, 3.5)
    x = ProjectivePoint.basis(2)
    for seed in range(20):
        key = RngStream.from_seed(seed).key
        whole = run_path(spec, 150, x, RngStream(key, 0))
        prefix = run_path(spec, 100, x, RngStream(key, 0))
        suffix = run_path(spec, 50, x, RngStream(key, 100))
        assert whole.log_mat_norm <= prefix.log_mat_norm + suffix.log_mat_norm + 1e-10


def test_worker_count_does_not_change_samples():
    spec = EnsembleSpec.rot_diag_rot(2, 4.5)
    sampler = StationarySampler(spec)
    a = run_stationary_batch(spec, [10, 100], 301, sampler, seed=1, workers=1)
    b = run_stationary_batch(spec, [10, 100], 301, sampler, seed=1, workers=4)
    assert np.array_equal(a.log_vec_norm, b.log_vec_norm)
    assert np.array_equal(a.log_mat_norm, b.log_mat_norm)
    ma, mb = a.summary[("log_vec_norm", 100)], b.summary[("log_vec_norm", 100)]
    assert ma.count == mb.count and np.isclose(ma.mean, mb.mean, rtol=1e-12)


def test_moments_merge_matches_numpy():
    x = np.random.default_rng(0).standard_normal(1000)
    m = Moments.of(x[:300]).merge(Moments.of(x[300:]))
    assert np.isclose(m.mean, x.mean()) and np.isclose(m.var, x.var(ddof=1))


def test_budget_guard(monkeypatch):
    spec = EnsembleSpec.contracting_pair()
    with pytest.raises(BudgetExceeded):
        run_stationary_batch(spec, [1000], 1000, StationarySampler(spec), seed=0, budget=10_000)
    monkeypatch.setenv("GLWALK_BUDGET", "100")
    with pytest.raises(BudgetExceeded):
        run_stationary_batch(spec, [1000], 1, StationarySampler(spec), seed=0)


def test_invalid_grids():
    spec = EnsembleSpec.contracting_pair()
    with pytest.raises(ValueError):
        run_stationary_batch(spec, [10, 5], 10, StationarySampler(spec), seed=0)
    with pytest.raises(ValueError):
        run_stationary_batch(spec, [10], 0, StationarySampler(spec), seed=0)

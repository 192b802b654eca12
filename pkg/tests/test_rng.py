import numpy as np
from scipy import stats

from glwalk.rng import (RngStream, _fmix64_py, _uniform_py, child_keys, derive_key, fmix64, path_keys,
                        uniform)


def test_jitted_mixer_matches_pure_python():
    for z in [0, 1, 2 ** 63, 2 ** 64 - 1, 0x9E3779B97F4A7C15]:
        assert int(fmix64(np.uint64(z))) == _fmix64_py(z)


def test_jitted_uniform_matches_pure_python():
    key = derive_key(42, "walk")
    for c in range(5):
        for s in range(3):
            assert uniform(np.uint64(key), c, s) == _uniform_py(key, c, s)


def test_uniforms_in_open_unit_interval_and_uniform():
    s = RngStream.from_seed(1, "u")
    u = np.concatenate([s.uniforms(100) for _ in range(200)])
    assert np.all((u > 0) & (u < 1))
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_path_keys_are_slices_of_one_sequence():
    full = path_keys(7, "walk", 100)
    assert np.array_equal(full[30:70], path_keys(7, "walk", 40, start=30))
    assert len(np.unique(full)) == 100


def test_stages_and_seeds_separate_streams():
    a = path_keys(7, "walk", 10)
    b = path_keys(7, "nu", 10)
    c = path_keys(8, "walk", 10)
    assert not set(a) & set(b)
    assert not set(a) & set(c)


def test_child_keys_accept_python_ints_above_int64():
    key = 2 ** 64 - 5
    k = child_keys(key, 0, 3)
    assert k.dtype == np.uint64 and len(np.unique(k)) == 3


def test_stream_counter_advances_per_draw():
    s = RngStream.from_seed(3)
    u0 = s.uniforms(2)
    u1 = s.uniforms(2)
    assert s.counter == 2
    t = RngStream(s.key, 1)
    assert np.array_equal(t.uniforms(2), u1)
    assert not np.array_equal(u0, u1)

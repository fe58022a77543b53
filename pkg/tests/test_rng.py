import numpy as np

from csdetect.rng import CounterRng, splitmix64


def test_stream_is_deterministic():
    a = CounterRng(42).normal((1000,))
    b = CounterRng(42).normal((1000,))
    assert np.array_equal(a, b)


def test_stream_position_slices_one_sequence():
    r = CounterRng(7)
    first = r.uniform((10,))
    second = r.uniform((10,))
    whole = CounterRng(7).uniform((20,))
    assert np.array_equal(np.concatenate([first, second]), whole)


def test_splitmix_words_depend_only_on_index():
    w = splitmix64(3, 5, 4)
    assert np.array_equal(w, splitmix64(3, 0, 9)[5:])


def test_normal_moments():
    g = CounterRng(1).normal((200000,))
    assert abs(g.mean()) < 0.01
    assert abs(g.var() - 1.0) < 0.02


def test_uniform_range_and_mean():
    u = CounterRng(2).uniform((100000,))
    assert u.min() > 0.0 and u.max() <= 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_integers_bounds():
    v = CounterRng(3).integers(2, 9, (5000,))
    assert v.min() >= 2 and v.max() <= 8
    assert set(np.unique(v)) == set(range(2, 9))


def test_derive_gives_independent_streams():
    r = CounterRng(11)
    a = r.derive(1).normal((1000,))
    b = r.derive(2).normal((1000,))
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05
    # deriving does not advance the parent
    assert r.position == 0


def test_shuffled_is_permutation():
    p = CounterRng(5).shuffled(100)
    assert sorted(p.tolist()) == list(range(100))

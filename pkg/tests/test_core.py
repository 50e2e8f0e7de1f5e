import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfinder.core import (
    EnvironmentMap,
    PathLossMap,
    TransmitterSpec,
    building_mask,
    make_sample,
    rasterize_transmitters,
    receiver_mask,
    validate_sample,
)


def test_rasterize_single_impulse():
    tm = rasterize_transmitters([TransmitterSpec(2, 3, 0.8)], 4, 4, [1.0])
    expected = np.zeros((4, 4))
    expected[2, 3] = 0.8
    np.testing.assert_array_equal(tm.values, expected)


def test_rasterize_weighted_pair():
    tm = rasterize_transmitters([TransmitterSpec(0, 0, 1.0), TransmitterSpec(3, 3, 1.0)], 4, 4, [0.5, 0.5])
    assert tm.values[0, 0] == 0.5 and tm.values[3, 3] == 0.5
    assert np.count_nonzero(tm.values) == 2


def test_rasterize_empty():
    tm = rasterize_transmitters([], 4, 4, [])
    assert not tm.values.any()


def test_rasterize_rejects_out_of_bounds_and_duplicates():
    with pytest.raises(IndexError, match="4, 0"):
        rasterize_transmitters([TransmitterSpec(4, 0)], 4, 4, [1.0])
    with pytest.raises(ValueError, match="duplicates"):
        rasterize_transmitters([TransmitterSpec(1, 1), TransmitterSpec(1, 1)], 4, 4, [0.5, 0.5])
    with pytest.raises(ValueError, match="sum to 1"):
        rasterize_transmitters([TransmitterSpec(1, 1)], 4, 4, [0.7])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_rasterize_permutation_invariant(data):
    n = data.draw(st.integers(1, 6))
    cells = data.draw(st.lists(st.integers(0, 63), min_size=n, max_size=n, unique=True))
    raw = data.draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n))
    weights = [w / sum(raw) for w in raw]
    specs = [TransmitterSpec(c // 8, c % 8, 0.5) for c in cells]
    perm = data.draw(st.permutations(range(n)))
    a = rasterize_transmitters(specs, 8, 8, weights)
    b = rasterize_transmitters([specs[k] for k in perm], 8, 8, [weights[k] for k in perm])
    np.testing.assert_array_equal(a.values, b.values)


def test_building_mask_threshold():
    h = np.zeros((8, 8))
    h[0, 0] = 0.5
    m = building_mask(EnvironmentMap(h))
    assert m.role == "building"
    assert m.values.sum() == 1 and m.values[0, 0] == 1


def test_degenerate_masks():
    empty = EnvironmentMap(np.zeros((8, 8)))
    assert not building_mask(empty).values.any()
    assert receiver_mask(empty).values.all()
    full = EnvironmentMap(np.full((8, 8), 0.3))
    assert building_mask(full).values.all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masks_are_complementary(seed):
    rng = np.random.default_rng(seed)
    h = np.where(rng.random((8, 12)) < 0.4, rng.random((8, 12)), 0.0)
    env = EnvironmentMap(h)
    total = building_mask(env).values + receiver_mask(env).values
    np.testing.assert_array_equal(total, np.ones((8, 12), dtype=np.uint8))


def test_types_are_immutable():
    env = EnvironmentMap(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        env.heights[0, 0] = 1.0


def _consistent(H=64):
    rng = np.random.default_rng(0)
    h = np.zeros((H, H))
    h[10:20, 10:20] = 0.7
    return make_sample(h, [TransmitterSpec(H - 2, 5, 0.9)], rng.random((H, H)), [1.0])


def test_validate_consistent_sample():
    assert validate_sample(_consistent()) == []


def test_validate_target_range():
    s = _consistent()
    bad = np.array(s.target.values)
    bad[3, 3] = 1.5
    s2 = make_sample(s.env, s.transmitters, PathLossMap(bad), [1.0])
    violations = validate_sample(s2)
    assert len(violations) == 1 and "PathLossMap" in violations[0]


def test_validate_bounds():
    s = _consistent()
    s2 = type(s)(s.env, (TransmitterSpec(70, 3, 0.9),), s.tx_map, s.target, (1.0,))
    violations = [v for v in validate_sample(s2) if "bounds" in v]
    assert len(violations) == 1 and "TransmitterSpec" in violations[0]


def test_validate_depth_divisibility():
    s = _consistent(H=24)
    assert validate_sample(s, depth=3) == []
    assert any("divisible" in v for v in validate_sample(s, depth=4))


def test_rooftop_transmitter_only_warns():
    h = np.zeros((8, 8))
    h[2, 2] = 0.5
    s = make_sample(h, [TransmitterSpec(2, 2, 1.0)], np.full((8, 8), 0.5), [1.0])
    with pytest.warns(UserWarning, match="building cells"):
        assert validate_sample(s) == []

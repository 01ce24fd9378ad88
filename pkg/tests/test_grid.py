import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layermix.grid import (Axis, ShapeError, check_confidence, check_labels, check_probs,
                           check_supervision, check_volume, concat_along, linear_index,
                           partition, slice_along)


def test_axis_parse():
    assert Axis.parse("h") is Axis.H
    assert Axis.parse(2) is Axis.W
    assert Axis.D.in_plane() == (Axis.H, Axis.W)
    assert Axis.H.in_plane() == (Axis.D, Axis.W)
    with pytest.raises(ValueError):
        Axis.parse("x")


def test_linear_index_is_row_major():
    g = np.arange(24).reshape(2, 3, 4)
    for z, y, x in np.ndindex(g.shape):
        assert g[z, y, x] == linear_index(g.shape, z, y, x)


def test_slice_along_hand_example():
    g = np.arange(16).reshape(4, 2, 2)
    block = slice_along(g, Axis.D, 2, 2)
    assert block.shape == (2, 2, 2)
    np.testing.assert_array_equal(block.ravel(), np.arange(8, 16))


def test_slice_identity_and_degenerate():
    g = np.random.default_rng(0).random((3, 2, 5))
    np.testing.assert_array_equal(slice_along(g, "D", 0, 3), g)
    one = np.array([[[7.0]]])
    np.testing.assert_array_equal(slice_along(one, Axis.W, 0, 1), one)


def test_slice_out_of_range_names_axis():
    with pytest.raises(IndexError, match="axis H"):
        slice_along(np.zeros((2, 3, 4)), Axis.H, 2, 2)


def test_slice_does_not_touch_surroundings():
    g = np.full((6, 3, 3), -1.0)
    g[2:4] = np.arange(18).reshape(2, 3, 3)
    block = slice_along(g, Axis.D, 2, 2)
    assert (block >= 0).all()
    block[:] = 99
    # slicing returns a copy; the source keeps its sentinels
    assert (g[:2] == -1).all() and (g[4:] == -1).all() and g[2:4].max() == 17


def test_concat_examples():
    g = np.arange(16).reshape(4, 2, 2)
    np.testing.assert_array_equal(concat_along([g[:2], g[2:]], Axis.D), g)
    np.testing.assert_array_equal(concat_along([g], Axis.W), g)
    h = np.arange(4).reshape(1, 4, 1)
    np.testing.assert_array_equal(concat_along([h[:, :1], h[:, 1:]], Axis.H), h)


def test_concat_rejects_mismatch():
    with pytest.raises(ShapeError):
        concat_along([np.zeros((1, 2, 2)), np.zeros((1, 3, 2))], Axis.D)
    with pytest.raises(ShapeError):
        concat_along([], Axis.D)


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 8)] * 3), st.sampled_from(list(Axis)), st.data())
def test_partition_concat_roundtrip(dims, axis, data):
    extent = dims[axis]
    p = data.draw(st.sampled_from([q for q in range(1, extent + 1) if extent % q == 0]))
    g = np.random.default_rng(sum(dims)).standard_normal(dims)
    blocks = partition(g, axis, p)
    assert len(blocks) == extent // p
    np.testing.assert_array_equal(concat_along(blocks, axis), g)


def test_partition_rejects_non_divisor():
    with pytest.raises(ShapeError, match="p=3"):
        partition(np.zeros((4, 2, 2)), Axis.D, 3)


def test_validators():
    check_volume(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        check_volume(np.array([[[np.nan]]]))
    check_labels(np.array([[[0, 2]]]), 3)
    with pytest.raises(ValueError):
        check_labels(np.array([[[3]]]), 3)
    with pytest.raises(ValueError):
        check_confidence(np.array([1.5]))
    with pytest.raises(ValueError):
        check_supervision(np.array([2]))
    check_probs(np.full((2, 2, 2, 4), 0.25))
    with pytest.raises(ValueError):
        check_probs(np.full((2, 2, 2, 4), 0.3))

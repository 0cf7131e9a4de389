import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from swinchex.checks import sw_msa_error
from swinchex.tensor import ShapeError, Tensor, softmax
from swinchex.windowing import (
    MASK_VALUE, WindowGrid, build_shift_mask, cyclic_shift, region_ids, window_partition,
    window_reverse,
)


@st.composite
def window_shapes(draw):
    m = draw(st.integers(1, 4))
    h, w = m * draw(st.integers(1, 4)), m * draw(st.integers(1, 4))
    lead = tuple(draw(st.lists(st.integers(1, 3), max_size=2)))
    c = draw(st.integers(1, 3))
    return (*lead, h, w, c), m


@given(window_shapes(), st.integers(0, 2**32 - 1))
def test_partition_reverse_roundtrip(shape_m, seed):
    shape, m = shape_m
    x = np.random.default_rng(seed).standard_normal(shape)
    wins = window_partition(Tensor(x), m)
    assert wins.shape == (*shape[:-3], (shape[-3] // m) * (shape[-2] // m), m * m, shape[-1])
    assert np.array_equal(window_reverse(wins, m, shape[-3], shape[-2]).data, x)


def test_single_window_is_row_major():
    x = np.arange(9.0).reshape(3, 3, 1)
    wins = window_partition(Tensor(x), 3)
    assert wins.data[0, :, 0].tolist() == list(range(9))


def test_window_zero_holds_top_left_block():
    idx = np.arange(16.0).reshape(4, 4, 1)  # value = 4*row + col
    wins = window_partition(Tensor(idx), 2).data[..., 0]
    assert wins.shape == (4, 4)
    assert wins[0].tolist() == [0, 1, 4, 5]
    assert wins[1].tolist() == [2, 3, 6, 7]  # row-major over the window grid


def test_partition_divisibility_error():
    with pytest.raises(ShapeError):
        window_partition(Tensor(np.zeros((5, 4, 1))), 2)


def test_reverse_wrong_dims():
    wins = window_partition(Tensor(np.zeros((4, 4, 1))), 2)
    with pytest.raises(ShapeError):
        window_reverse(wins, 2, 8, 4)


def test_cyclic_shift_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]  # a b / c d
    out = cyclic_shift(Tensor(x), 1, 1).data[:, :, 0]
    assert out.tolist() == [[4.0, 3.0], [2.0, 1.0]]


@given(st.integers(1, 6), st.integers(1, 6), st.integers(-7, 7), st.integers(-7, 7))
def test_cyclic_shift_index_rule_and_inverse(h, w, dy, dx):
    x = np.random.default_rng(h * 31 + w).standard_normal((h, w, 2))
    out = cyclic_shift(Tensor(x), dy, dx).data
    for i, j in itertools.product(range(h), range(w)):
        assert np.array_equal(out[i, j], x[(i + dy) % h, (j + dx) % w])
    assert np.array_equal(cyclic_shift(Tensor(out), -dy, -dx).data, x)
    assert sorted(out.ravel()) == sorted(x.ravel())


def test_roundtrip_through_shift():
    x = np.random.default_rng(0).standard_normal((8, 8, 3))
    t = cyclic_shift(Tensor(x), 2, 2)
    back = cyclic_shift(window_reverse(window_partition(t, 4), 4, 8, 8), -2, -2)
    assert np.array_equal(back.data, x)


def test_grid_invariants():
    with pytest.raises(ValueError):
        WindowGrid(6, 4, 4)
    with pytest.raises(ValueError):
        WindowGrid(4, 4, 2, shift=2)
    assert WindowGrid(8, 4, 2, 1).num_windows == 8


def test_unshifted_mask_is_zero():
    assert not build_shift_mask(WindowGrid(8, 8, 4, 0)).any()


def brute_region(h, w, m, s):
    """Region id of every token after the (-s, -s) roll, by explicit enumeration."""
    def band(p, n):
        if p < n - m:
            return 0
        return 1 if p < n - s else 2
    return np.array([[band(i, h) * 3 + band(j, w) for j in range(w)] for i in range(h)])


def test_bottom_right_window_has_twelve_blocked_pairs():
    grid = WindowGrid(4, 4, 2, 1)
    mask = build_shift_mask(grid)
    ids = region_ids(grid)
    assert len(set(ids[2:, 2:].ravel())) == 4
    assert int((mask[3] != 0).sum()) == 12


@pytest.mark.parametrize("h,w,m,s", [(4, 4, 2, 1), (8, 8, 4, 2), (6, 6, 3, 1), (8, 4, 4, 2), (3, 3, 3, 1)])
def test_mask_matches_region_enumeration(h, w, m, s):
    grid = WindowGrid(h, w, m, s)
    ids = brute_region(h, w, m, s)
    assert np.array_equal(region_ids(grid), ids)
    wins = window_partition(Tensor(ids[:, :, None].astype(float)), m).data[..., 0]
    expect = np.where(wins[:, :, None] == wins[:, None, :], 0.0, MASK_VALUE)
    mask = build_shift_mask(grid)
    assert np.array_equal(mask, expect)
    assert set(np.unique(mask)) <= {0.0, MASK_VALUE}
    assert np.array_equal(mask, mask.transpose(0, 2, 1))
    assert not np.diagonal(mask, axis1=1, axis2=2).any()


def test_single_window_mask_is_region_inequality_table():
    grid = WindowGrid(4, 4, 4, 2)
    ids = region_ids(grid).ravel()
    table = np.where(ids[:, None] != ids[None, :], MASK_VALUE, 0.0)
    assert np.array_equal(build_shift_mask(grid)[0], table)


def test_mask_value_kills_softmax_weight():
    w = softmax(Tensor([0.0, 0.0, MASK_VALUE])).data
    assert w[2] < 1e-12


@pytest.mark.parametrize("h,m,s", [(4, 2, 1), (6, 3, 1), (8, 4, 2), (8, 8, 4), (4, 4, 2)])
def test_masked_sw_msa_matches_same_region_oracle(h, m, s):
    assert sw_msa_error(h, h, 4, 2, m, s, seed=h + m) <= 1e-10

import numpy as np
import pytest
from hilbertcurve.hilbertcurve import HilbertCurve
from hypothesis import given
from hypothesis import strategies as st

from capsfold.errors import IndexOutOfRange
from capsfold.hilbert import HilbertIndex, curve, d2xyz_array, hilbert_d2xyz, hilbert_xyz2d, xyz2d_array

from oracles import hilbert2d_d2xy


def test_order1_2d_golden():
    assert [hilbert_d2xyz(1, 2, i) for i in range(4)] == [(0, 0), (0, 1), (1, 1), (1, 0)]


def test_order1_3d_golden():
    # frozen orientation of the 3D base case
    assert [hilbert_d2xyz(1, 3, i) for i in range(8)] == [
        (0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1), (1, 0, 0),
    ]


@pytest.mark.parametrize("order,dim", [(o, 2) for o in range(1, 10)] + [(o, 3) for o in range(1, 7)])
def test_bijective_and_unit_steps(order, dim):
    cells = curve(order, dim)
    n = 1 << (order * dim)
    assert cells.shape == (n, dim)
    assert cells.min() == 0 and cells.max() == (1 << order) - 1
    flat = np.ravel_multi_index(cells.T, (1 << order,) * dim)
    assert np.unique(flat).size == n
    steps = np.abs(np.diff(cells, axis=0))
    assert np.all(steps.sum(axis=1) == 1)
    assert np.array_equal(xyz2d_array(order, dim, cells), np.arange(n))


@pytest.mark.parametrize("order", range(1, 8))
def test_2d_matches_rotation_construction(order):
    n = 1 << (2 * order)
    ref = np.array([hilbert2d_d2xy(order, d) for d in range(n)])
    assert np.array_equal(curve(order, 2), ref)


@pytest.mark.parametrize("order", [1, 2, 4, 6])
def test_3d_matches_reference_package(order):
    hc = HilbertCurve(order, 3)
    n = 1 << (3 * order)
    ref = np.array(hc.points_from_distances(list(range(n))))
    assert np.array_equal(curve(order, 3), ref)


@given(st.integers(1, 6), st.data())
def test_round_trip_scalar(order, data):
    dim = data.draw(st.sampled_from([2, 3]))
    i = data.draw(st.integers(0, (1 << (order * dim)) - 1))
    assert hilbert_xyz2d(order, dim, hilbert_d2xyz(order, dim, i)) == i


def test_out_of_range():
    with pytest.raises(IndexOutOfRange):
        hilbert_d2xyz(2, 2, 16)
    with pytest.raises(IndexOutOfRange):
        d2xyz_array(2, 3, [-1])
    with pytest.raises(IndexOutOfRange):
        hilbert_xyz2d(2, 2, (4, 0))


def test_hilbert_index_object():
    h = HilbertIndex(6, 3)
    assert len(h) == 64**3 and h.side == 64
    assert h.xyz2d(h.d2xyz(1234)) == 1234
    assert h.cells() is curve(6, 3)

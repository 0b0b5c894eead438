import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidar_pms.errors import DimensionError
from lidar_pms.maps import DisparityMap, SparseDisparityMap
from lidar_pms.upsample import (
    OutlierParams,
    UpsampleParams,
    complete_scan_lines,
    remove_overlap_outliers,
    upsample_bilateral,
    upsample_linear,
)


def _sparse(h, w, cells):
    """cells: iterable of (y, x, d, ring)."""
    m = SparseDisparityMap.empty(h, w)
    for y, x, d, r in cells:
        m.values[y, x] = d
        m.ring[y, x] = r
    return m


def _flat_image(h, w, value=100):
    return np.full((h, w, 3), value, dtype=np.uint8)


# -- scan-line completion -----------------------------------------------------


def test_completion_fills_linear_midpoint():
    out = complete_scan_lines(_sparse(10, 20, [(5, 10, 20.0, 0), (5, 14, 24.0, 0)]))
    np.testing.assert_allclose(out.values[5, 10:15], [20, 21, 22, 23, 24])
    assert np.all(out.ring[5, 10:15] == 0)


def test_completion_respects_gap_cap():
    out = complete_scan_lines(_sparse(3, 50, [(1, 2, 20.0, 0), (1, 33, 20.0, 0)]), UpsampleParams(max_horizontal_gap=30))
    assert out.valid_count() == 2
    out = complete_scan_lines(_sparse(3, 50, [(1, 2, 20.0, 0), (1, 32, 20.0, 0)]), UpsampleParams(max_horizontal_gap=30))
    assert out.valid_count() == 31


def test_completion_leaves_isolated_point_and_other_rings_alone():
    m = _sparse(6, 20, [(2, 5, 9.0, 0), (2, 9, 30.0, 1)])
    out = complete_scan_lines(m)
    np.testing.assert_array_equal(np.isfinite(out.values), np.isfinite(m.values))


def test_completion_follows_a_sloped_scan_line():
    out = complete_scan_lines(_sparse(10, 20, [(5, 10, 20.0, 3), (7, 14, 24.0, 3)]))
    assert out.values[6, 12] == pytest.approx(22.0)
    assert out.ring[6, 12] == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 39), st.floats(1, 100), st.integers(0, 3)),
                max_size=40))
def test_completion_never_changes_measured_cells(cells):
    m = _sparse(12, 40, cells)
    out = complete_scan_lines(m)
    v = m.valid
    np.testing.assert_array_equal(out.values[v], m.values[v])
    assert np.all(out.valid[v])


# -- overlap outliers -----------------------------------------------------------


def _column(ds, image=None):
    h = len(ds)
    m = _sparse(h, 1, [(y, 0, d, y) for y, d in enumerate(ds) if d is not None])
    return m, _flat_image(h, 1) if image is None else image


def test_far_cell_bracketed_by_near_similar_cells_is_cleared():
    m, img = _column([25.0, 10.0, 25.0])
    out = remove_overlap_outliers(m, img)
    assert np.isnan(out.values[1, 0])
    assert out.values[0, 0] == 25 and out.values[2, 0] == 25
    assert out.stats["outliers_removed"] == 1


def test_nearer_cell_on_one_side_only_keeps_the_cell():
    m, img = _column([25.0, 10.0, None])
    assert remove_overlap_outliers(m, img).valid_count() == 2
    m, img = _column([25.0, 10.0, 10.0])
    assert remove_overlap_outliers(m, img).valid_count() == 3


def test_colour_difference_keeps_the_cell():
    img = _flat_image(3, 1)
    img[1, 0] = [110, 100, 100]  # L1 distance exactly 10 to both neighbours
    m, _ = _column([25.0, 10.0, 25.0])
    assert remove_overlap_outliers(m, img).valid_count() == 3
    img[1, 0] = [104, 100, 105]  # distance 9
    assert remove_overlap_outliers(m, img).valid_count() == 2


def test_small_disparity_step_is_not_an_outlier():
    m, img = _column([13.0, 10.0, 13.0])
    assert remove_overlap_outliers(m, img).valid_count() == 3
    m, img = _column([13.01, 10.0, 13.01])
    assert remove_overlap_outliers(m, img).valid_count() == 2


def test_decisions_read_the_input_map():
    # removing row 1 would expose row 2 to the near cell at row 0; no cascade
    m, img = _column([25.0, 5.0, 10.0, 25.0])
    out = remove_overlap_outliers(m, img)
    assert np.isnan(out.values[1, 0])
    assert out.values[2, 0] == 10.0


def test_search_extent_and_nearest_rule():
    ds = [25.0] + [None] * 5 + [10.0, None, 25.0]
    m, img = _column(ds)
    assert remove_overlap_outliers(m, img, OutlierParams(search_up=6)).valid_count() == 2
    assert remove_overlap_outliers(m, img, OutlierParams(search_up=5)).valid_count() == 3
    # a farther cell in between hides the near one unless the search continues past it
    m, img = _column([25.0, 10.0, 10.0, 25.0])
    assert remove_overlap_outliers(m, img).valid_count() == 4
    assert remove_overlap_outliers(m, img, OutlierParams(stop_at_nearest=False)).valid_count() == 2


def test_outlier_size_mismatch():
    m, _ = _column([1.0, 2.0])
    with pytest.raises(DimensionError):
        remove_overlap_outliers(m, _flat_image(3, 1))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (15, 8), elements=st.one_of(st.just(np.nan), st.floats(1, 60))),
       arrays(np.uint8, (15, 8, 3), elements=st.integers(95, 105)))
def test_outlier_removal_only_removes(values, image):
    m = SparseDisparityMap(values)
    out = remove_overlap_outliers(m, image)
    kept = out.valid
    assert np.all(m.valid[kept])
    np.testing.assert_array_equal(out.values[kept], m.values[kept])


# -- vertical linear interpolation ---------------------------------------------


def test_midpoint_and_knots():
    m = DisparityMap(np.full((5, 1), np.nan))
    m.values[0, 0], m.values[4, 0] = 10.0, 20.0
    out = upsample_linear(m)
    np.testing.assert_allclose(out.values[:, 0], [10, 12.5, 15, 17.5, 20])


def test_single_cell_column_stays_single():
    m = DisparityMap(np.full((6, 2), np.nan))
    m.values[3, 1] = 7.0
    out = upsample_linear(m)
    assert out.valid_count() == 1 and out.values[3, 1] == 7.0


def test_vertical_gap_cap():
    m = DisparityMap(np.full((40, 1), np.nan))
    m.values[0, 0], m.values[35, 0] = 10.0, 20.0
    out = upsample_linear(m, UpsampleParams(max_vertical_gap=30))
    # only rows within 30 of both bracketing cells are filled
    assert np.isnan(out.values[1:5, 0]).all()
    assert np.isfinite(out.values[5:31, 0]).all()
    assert np.isnan(out.values[31:35, 0]).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (30, 6), elements=st.one_of(st.just(np.nan), st.just(np.nan), st.floats(0.5, 120))))
def test_linear_interpolation_properties(values):
    m = DisparityMap(values)
    out = upsample_linear(m)
    v = m.valid
    np.testing.assert_array_equal(out.values[v], values[v])
    for x in range(values.shape[1]):
        rows = np.nonzero(v[:, x])[0]
        for y0, y1 in zip(rows[:-1], rows[1:]):
            seg = out.values[y0 + 1:y1, x]
            lo, hi = sorted((values[y0, x], values[y1, x]))
            assert np.all(seg >= lo - 1e-12) and np.all(seg <= hi + 1e-12)
    filled = DisparityMap(np.where(np.isnan(values), 3.0, values))
    np.testing.assert_array_equal(upsample_linear(filled).values, filled.values)


# -- bilateral baseline ----------------------------------------------------------


def test_single_neighbour_is_copied():
    m = DisparityMap(np.full((9, 9), np.nan))
    m.values[2, 3] = 17.0
    out = upsample_bilateral(m, _flat_image(9, 9))
    assert out.values[6, 6] == pytest.approx(17.0)


def test_symmetric_neighbours_average():
    m = DisparityMap(np.full((1, 9), np.nan))
    m.values[0, 2], m.values[0, 6] = 10.0, 20.0
    out = upsample_bilateral(m, _flat_image(1, 9))
    assert out.values[0, 4] == pytest.approx(15.0)


def test_empty_kernel_stays_invalid():
    m = DisparityMap(np.full((1, 40), np.nan))
    m.values[0, 0] = 10.0
    out = upsample_bilateral(m, _flat_image(1, 40), UpsampleParams(radius=12))
    assert np.isfinite(out.values[0, 12]) and np.isnan(out.values[0, 13])


def test_colour_edge_blocks_averaging():
    img = _flat_image(1, 9)
    img[0, 5:] = 200
    m = DisparityMap(np.full((1, 9), np.nan))
    m.values[0, 2], m.values[0, 6] = 10.0, 20.0
    out = upsample_bilateral(m, img)
    assert out.values[0, 4] == pytest.approx(10.0, abs=1e-6)
    assert out.values[0, 5] == pytest.approx(20.0, abs=1e-6)


def test_measured_cells_pass_through_unless_smoothing():
    m = DisparityMap(np.full((1, 5), np.nan))
    m.values[0, 1], m.values[0, 3] = 10.0, 20.0
    img = _flat_image(1, 5)
    kept = upsample_bilateral(m, img)
    assert kept.values[0, 1] == 10.0 and kept.values[0, 3] == 20.0
    smoothed = upsample_bilateral(m, img, smooth_sources=True)
    assert 10.0 < smoothed.values[0, 1] < 15.0


def test_bilateral_size_mismatch():
    with pytest.raises(DimensionError):
        upsample_bilateral(DisparityMap(np.ones((2, 2))), _flat_image(3, 2))


def test_parameter_validation():
    with pytest.raises(ValueError):
        OutlierParams(max_disp=0)
    with pytest.raises(ValueError):
        UpsampleParams(max_vertical_gap=-1)

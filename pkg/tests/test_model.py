"""Core type and geometry tests.

The point-in-polygon oracle here is a winding-number implementation kept
deliberately independent of the even-odd production code.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compartmenter.model import (
    ArgumentError,
    Contour,
    DirectionField,
    ElectrodeGrid,
    InvalidContourError,
    LabelVolume,
    Matching,
    SampledSet,
    ScalarVolume,
    Streamline,
    contour_area,
    label_is_26_connected,
    point_in_contour,
    points_in_contour,
    resample_volume,
)


# ---------------------------------------------------------------------------
# oracles

def winding_number_inside(p, poly):
    """Nonzero-winding test, the independent cross-check for point_in_contour."""
    wn = 0
    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        if a[1] <= p[1]:
            if b[1] > p[1] and _is_left(a, b, p) > 0:
                wn += 1
        else:
            if b[1] <= p[1] and _is_left(a, b, p) < 0:
                wn -= 1
    return wn != 0


def _is_left(a, b, p):
    return (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])


def regular_polygon(n, radius, center=(0.0, 0.0), phase=0.0):
    th = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(th),
                            center[1] + radius * np.sin(th)])


UNIT_SQUARE = Contour(points=np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]]))


# ---------------------------------------------------------------------------
# contour construction

class TestContour:
    def test_orientation_normalised_ccw(self):
        cw = Contour(points=np.array([[0.0, 0], [0, 1], [1, 1], [1, 0]]))
        assert contour_area(cw) > 0

    def test_closing_point_dropped(self):
        c = Contour(points=np.array([[0.0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]))
        assert len(c) == 4

    def test_too_few_points_rejected(self):
        with pytest.raises(InvalidContourError):
            Contour(points=np.array([[0.0, 0], [1, 0]]))

    def test_zero_area_rejected(self):
        with pytest.raises(InvalidContourError):
            Contour(points=np.array([[0.0, 0], [1, 1], [2, 2]]))

    def test_is_simple_detects_self_intersection(self):
        # edge (4,3)-(2,-1) crosses edge (0,0)-(4,0); area is nonzero
        crossing = Contour(points=np.array([[0.0, 0], [4, 0], [4, 3], [2, -1], [0, 3]]))
        assert not crossing.is_simple()
        assert UNIT_SQUARE.is_simple()

    def test_centroid_of_square(self):
        np.testing.assert_allclose(UNIT_SQUARE.centroid(), [0.5, 0.5], atol=1e-12)


# ---------------------------------------------------------------------------
# contour_area

class TestContourArea:
    def test_unit_square(self):
        assert contour_area(UNIT_SQUARE) == pytest.approx(1.0)

    def test_scaled_square(self):
        c = Contour(points=UNIT_SQUARE.points * 3.0)
        assert contour_area(c) == pytest.approx(9.0)

    def test_circle_approximation(self):
        # 64-gon vs analytic pi r^2, radius 10
        c = Contour(points=regular_polygon(64, 10.0))
        analytic = np.pi * 100.0
        assert contour_area(c) == pytest.approx(analytic, rel=0.005)

    @settings(max_examples=50, deadline=None)
    @given(angle=st.floats(0, 2 * np.pi), tx=st.floats(-50, 50), ty=st.floats(-50, 50))
    def test_rigid_invariance(self, angle, tx, ty):
        base = regular_polygon(12, 7.0, phase=0.3)
        R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        moved = base @ R.T + [tx, ty]
        a0 = contour_area(Contour(points=base))
        a1 = contour_area(Contour(points=moved))
        assert a1 == pytest.approx(a0, rel=1e-9)


# ---------------------------------------------------------------------------
# point_in_contour

class TestPointInContour:
    def test_center_of_square(self):
        assert point_in_contour((0.5, 0.5), UNIT_SQUARE)

    def test_far_point(self):
        assert not point_in_contour((2.0, 2.0), UNIT_SQUARE)

    def test_edge_point_counts_inside(self):
        assert point_in_contour((0.5, 0.0), UNIT_SQUARE)
        assert point_in_contour((0.0, 0.0), UNIT_SQUARE)

    def test_matches_winding_oracle_on_random_polygon(self):
        rng = np.random.default_rng(42)
        poly = regular_polygon(12, 10.0) + rng.normal(0, 1.0, (12, 2))
        c = Contour(points=poly)
        assert c.is_simple()
        pts = rng.uniform(-14, 14, size=(1000, 2))
        got = points_in_contour(pts, c)
        want = np.array([winding_number_inside(p, c.points) for p in pts])
        assert np.array_equal(got, want)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_matches_winding_oracle_property(self, seed):
        rng = np.random.default_rng(seed)
        poly = regular_polygon(9, 5.0, phase=rng.uniform(0, 1)) + rng.normal(0, 0.4, (9, 2))
        try:
            c = Contour(points=poly)
        except InvalidContourError:
            return
        if not c.is_simple():
            return
        pts = rng.uniform(-7, 7, size=(100, 2))
        got = points_in_contour(pts, c)
        want = np.array([winding_number_inside(p, c.points) for p in pts])
        assert np.array_equal(got, want)


# ---------------------------------------------------------------------------
# volumes and coordinates

class TestVolumes:
    def test_round_trip_coordinates(self):
        v = ScalarVolume(data=np.zeros((4, 5, 6)), spacing=(0.5, 1.0, 2.0), origin=(1, 2, 3))
        ijk = np.array([[0, 0, 0], [3, 4, 5], [1, 2, 3]], dtype=float)
        back = v.physical_to_voxel(v.voxel_to_physical(ijk))
        np.testing.assert_allclose(back, ijk, atol=1e-9)

    def test_voxel_zero_at_origin(self):
        v = ScalarVolume(data=np.zeros((2, 2, 2)), spacing=(1, 1, 1), origin=(5, 6, 7))
        np.testing.assert_allclose(v.voxel_to_physical([0, 0, 0]), [5, 6, 7])

    def test_nonfinite_rejected(self):
        bad = np.zeros((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ArgumentError):
            ScalarVolume(data=bad, spacing=(1, 1, 1))

    def test_negative_labels_rejected(self):
        with pytest.raises(ArgumentError):
            LabelVolume(data=np.full((2, 2, 2), -1), spacing=(1, 1, 1))

    def test_label_connectivity_helper(self):
        data = np.zeros((5, 5, 5), dtype=np.uint16)
        data[0, 0, 0] = 1
        data[1, 1, 1] = 1          # corner touch, 26-connected
        data[4, 4, 4] = 2
        data[0, 0, 4] = 2          # far apart, disconnected
        vol = LabelVolume(data=data, spacing=(1, 1, 1))
        assert label_is_26_connected(vol, 1)
        assert not label_is_26_connected(vol, 2)

    def test_data_is_readonly(self):
        v = ScalarVolume(data=np.zeros((2, 2, 2)), spacing=(1, 1, 1))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0


# ---------------------------------------------------------------------------
# resample_volume

class TestResample:
    def test_constant_preserved(self):
        v = ScalarVolume(data=np.full((6, 6, 6), 2.5), spacing=(2, 2, 2))
        r = resample_volume(v, 1.0)
        assert r.dims == (12, 12, 12)
        np.testing.assert_allclose(r.data, 2.5)

    def test_identity_bit_identical(self):
        rng = np.random.default_rng(0)
        v = ScalarVolume(data=rng.random((5, 6, 7)), spacing=(1, 1, 1))
        r = resample_volume(v, 1.0)
        assert np.array_equal(r.data, v.data)

    def test_box_mask_volume_within_2pct(self):
        # 2 mm -> 1 mm on a solid box; compare against analytic box volume
        data = np.zeros((20, 20, 20), dtype=np.uint16)
        data[4:14, 4:14, 4:14] = 1          # 10 voxels at 2 mm: 20 mm edge, 8000 mm^3
        v = LabelVolume(data=data, spacing=(2, 2, 2))
        r = resample_volume(v, 1.0)
        analytic = 8000.0
        measured = float((r.data == 1).sum()) * r.voxel_volume()
        assert abs(measured - analytic) / analytic < 0.02

    def test_labels_never_blend(self):
        data = np.zeros((8, 8, 8), dtype=np.uint16)
        data[:4] = 3
        data[4:] = 7
        v = LabelVolume(data=data, spacing=(1, 1, 1))
        r = resample_volume(v, 0.6)
        assert set(np.unique(r.data)) <= {3, 7}

    def test_bad_spacing_rejected(self):
        v = ScalarVolume(data=np.zeros((2, 2, 2)), spacing=(1, 1, 1))
        with pytest.raises(ArgumentError):
            resample_volume(v, -1.0)


# ---------------------------------------------------------------------------
# remaining types

class TestOtherTypes:
    def test_direction_field_norms_enforced(self):
        unit = np.zeros((3, 3, 2))
        mag = np.zeros((3, 3))
        unit[1, 1] = [0.5, 0.5]     # norm != 1
        mag[1, 1] = 2.0
        with pytest.raises(ArgumentError):
            DirectionField(unit=unit, magnitude=mag, spacing=(1, 1))

    def test_direction_field_from_displacement(self):
        disp = np.zeros((2, 2, 2))
        disp[0, 0] = [3.0, 4.0]
        f = DirectionField.from_displacement(disp, spacing=(1, 1))
        assert f.magnitude[0, 0] == pytest.approx(5.0)
        np.testing.assert_allclose(f.unit[0, 0], [0.6, 0.8])
        np.testing.assert_allclose(f.unit[1, 1], [0.0, 0.0])

    def test_streamline_length(self):
        s = Streamline(points=np.array([[0.0, 0, 0], [0, 0, 5]]))
        assert s.length() == pytest.approx(5.0)

    def test_streamline_needs_two_points(self):
        with pytest.raises(ArgumentError):
            Streamline(points=np.array([[0.0, 0, 0]]))

    def test_matching_bijection_enforced(self):
        with pytest.raises(ArgumentError):
            Matching(pairs=np.array([[0, 0], [1, 0]]), total_cost=0.0)
        m = Matching(pairs=np.array([[0, 1], [1, 0]]), total_cost=2.0)
        np.testing.assert_array_equal(m.v_of_u(), [1, 0])

    def test_sampled_set_distinct_points(self):
        with pytest.raises(ArgumentError):
            SampledSet(points=np.array([[0.0, 0], [0, 0]]))

    def test_grid_frame_orthonormality(self):
        with pytest.raises(ArgumentError):
            ElectrodeGrid(ex=(1, 0, 0), ey=(1, 0, 0))

    def test_grid_positions_with_gap(self):
        g = ElectrodeGrid(rows=10, cols=13, pitch_mm=8.0, gap_after_row=4, gap_mm=12.0)
        assert g.n_electrodes == 130
        uv = g.electrode_uv()
        # channel order is row-major: channel r*13+c
        np.testing.assert_allclose(uv[0], [0, 0])
        np.testing.assert_allclose(uv[12], [96, 0])
        np.testing.assert_allclose(uv[4 * 13], [0, 32])
        np.testing.assert_allclose(uv[5 * 13], [0, 40 + 12])     # gap inserted

    def test_grid_projection_round_trip(self):
        g = ElectrodeGrid(origin=(1, 2, 3),
                          ex=(0, 1, 0), ey=(0, 0, 1))
        pos = g.electrode_positions()
        uv = g.world_to_uv(pos)
        np.testing.assert_allclose(uv, g.electrode_uv(), atol=1e-9)

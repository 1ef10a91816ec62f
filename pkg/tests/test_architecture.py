"""Architecture metric tests.

Oracles: closed-form geometry (volumes, arc lengths, projections) and the
algebraic PCSA identity; Bland-Altman against constructed linear relations.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compartmenter.architecture import (
    ArchitectureReport,
    bland_altman,
    fiber_length,
    line_of_action,
    measure,
    muscle_volume,
    pcsa,
    pennation_angle,
    range_check,
)
from compartmenter.model import ArgumentError, DegenerateDataError, LabelVolume, Streamline


def straight_track(start, direction, length, step=1.0, seed_id=-1):
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    n = int(round(length / step)) + 1
    pts = np.asarray(start)[None, :] + d[None, :] * (step * np.arange(n))[:, None]
    return Streamline(points=pts, seed_id=seed_id)


def box_volume(dims, label=1, spacing=(1, 1, 1)):
    return LabelVolume(data=np.full(dims, label, dtype=np.int32), spacing=spacing)


class TestMuscleVolume:
    def test_cube(self):
        assert muscle_volume(box_volume((10, 10, 10)), 1) == pytest.approx(1000.0)

    def test_voxel_size_scales(self):
        v = box_volume((10, 10, 10), spacing=(2, 1, 1))
        assert muscle_volume(v, 1) == pytest.approx(2000.0)

    def test_absent_label(self):
        with pytest.raises(ArgumentError):
            muscle_volume(box_volume((5, 5, 5)), 3)


class TestFiberLength:
    def test_two_points(self):
        s = Streamline(points=np.array([[0.0, 0, 0], [3, 4, 0]]))
        assert fiber_length(s) == pytest.approx(5.0)

    def test_sixty_point_line(self):
        s = straight_track([0, 0, 0], [0, 0, 1], 59.0)
        assert fiber_length(s) == pytest.approx(59.0)

    def test_quarter_circle(self):
        th = np.radians(np.arange(91.0))
        pts = np.column_stack([10 * np.cos(th), 10 * np.sin(th), np.zeros(91)])
        s = Streamline(points=pts)
        assert fiber_length(s) == pytest.approx(np.pi * 10 / 2, abs=0.01)


class TestLineOfAction:
    def test_all_along_z(self):
        tracks = [straight_track([x, 0, 0], [0, 0, 1], 100.0) for x in range(5)]
        loa, ml = line_of_action(tracks)
        np.testing.assert_allclose(loa, [0, 0, 1], atol=1e-12)
        assert ml == pytest.approx(100.0)

    def test_symmetric_tilt_cancels(self):
        a = straight_track([0, 0, 0], [np.sin(np.radians(10)), 0, np.cos(np.radians(10))], 50)
        b = straight_track([5, 0, 0], [-np.sin(np.radians(10)), 0, np.cos(np.radians(10))], 50)
        loa, _ = line_of_action([a, b])
        np.testing.assert_allclose(loa, [0, 0, 1], atol=1e-9)

    def test_sign_aligned_to_positive_z(self):
        # tracks stored tip-to-root still give a +z line of action
        t = straight_track([0, 0, 100], [0, 0, -1], 80.0)
        loa, ml = line_of_action([t])
        np.testing.assert_allclose(loa, [0, 0, 1], atol=1e-12)
        assert ml == pytest.approx(80.0)

    def test_uniform_tilt_ml_projection(self):
        # all tracks tilted 5 deg from z: ML is the z-extent times cos(5 deg)
        ang = np.radians(5.0)
        d = [np.sin(ang), 0, np.cos(ang)]
        tracks = [straight_track([x, 0, 0], d, 60.0) for x in np.linspace(0, 3, 7)]
        loa, ml = line_of_action(tracks)
        np.testing.assert_allclose(loa, d, atol=1e-12)
        # extent along loa: track span 60 plus the seed-offset spread projected
        spread = 3.0 * np.sin(ang)
        assert ml == pytest.approx(60.0 + spread, rel=0.01)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            line_of_action([])


class TestPennationAngle:
    def test_parallel(self):
        s = straight_track([0, 0, 0], [0, 0, 1], 30)
        assert pennation_angle(s, np.array([0, 0, 1.0])) == pytest.approx(0.0)

    def test_perpendicular(self):
        s = straight_track([0, 0, 0], [1, 0, 0], 30)
        assert pennation_angle(s, np.array([0, 0, 1.0])) == pytest.approx(90.0)

    def test_analytic_five_degrees(self):
        ang = np.radians(5.0)
        s = straight_track([0, 0, 0], [np.sin(ang), 0, np.cos(ang)], 40)
        assert pennation_angle(s, np.array([0, 0, 1.0])) == pytest.approx(5.0, abs=1e-6)

    def test_folded_to_acute(self):
        ang = np.radians(170.0)
        s = straight_track([0, 0, 0], [np.sin(ang), 0, np.cos(ang)], 40)
        assert pennation_angle(s, np.array([0, 0, 1.0])) == pytest.approx(10.0, abs=1e-6)

    def test_non_unit_loa_rejected(self):
        s = straight_track([0, 0, 0], [0, 0, 1], 30)
        with pytest.raises(ArgumentError):
            pennation_angle(s, np.array([0, 0, 2.0]))


class TestPcsa:
    def test_zero_angle(self):
        assert pcsa(1000.0, 0.0, 50.0) == pytest.approx(20.0)

    def test_sixty_degrees(self):
        assert pcsa(1000.0, 60.0, 50.0) == pytest.approx(10.0)

    def test_straight_box(self):
        assert pcsa(12000.0, 0.0, 60.0) == pytest.approx(200.0)

    def test_nonpositive_fl(self):
        with pytest.raises(ArgumentError):
            pcsa(1000.0, 0.0, 0.0)


def whole_muscle_setup(n_tracks=24, tilt_deg=0.0, length=60.0):
    mask = LabelVolume(data=np.ones((20, 10, 61), dtype=np.int32), spacing=(1, 1, 1))
    ang = np.radians(tilt_deg)
    d = [np.sin(ang), 0, np.cos(ang)]
    xs = np.linspace(2, 17, n_tracks)
    tracks = [straight_track([x, 5, 0], d, length, seed_id=i)
              for i, x in enumerate(xs)]
    return mask, tracks


class TestMeasure:
    def test_straight_box_report(self):
        mask, tracks = whole_muscle_setup()
        with pytest.warns(UserWarning):
            r = measure(mask, 1, tracks)
        assert r.mv_mm3 == pytest.approx(20 * 10 * 61)
        assert r.fl_mm == pytest.approx(60.0, abs=1.0)
        assert r.pa_deg == pytest.approx(0.0, abs=0.5)
        assert r.fl_ml == pytest.approx(1.0, abs=0.02)
        assert r.ml_mm is not None and r.volume_fraction is None

    def test_compartment_fractions_exact(self):
        data = np.zeros((10, 10, 10), dtype=np.int32)
        data[:6, :, :] = 1                  # 600 voxels
        data[6:, :, :] = 2                  # 400 voxels
        mask = LabelVolume(data=data, spacing=(1, 1, 1))
        t1 = [straight_track([2, 5, 0], [0, 0, 1], 9.0, seed_id=i) for i in range(4)]
        t2 = [straight_track([8, 5, 0], [0, 0, 1], 9.0, seed_id=i) for i in range(4)]
        with pytest.warns(UserWarning):
            r1 = measure(mask, 1, t1)
        with pytest.warns(UserWarning):
            r2 = measure(mask, 2, t2)
        assert r1.volume_fraction == 0.6
        assert r2.volume_fraction == 0.4
        assert r1.ml_mm is None and r1.fl_ml is None

    def test_pcsa_identity(self):
        mask, tracks = whole_muscle_setup(tilt_deg=4.0)
        with pytest.warns(UserWarning):
            r = measure(mask, 1, tracks)
        lhs = r.pcsa_mm2 * r.fl_mm
        rhs = r.mv_mm3 * np.cos(np.radians(r.pa_deg))
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_rigid_invariance(self):
        mask, tracks = whole_muscle_setup(tilt_deg=5.0)
        with pytest.warns(UserWarning):
            r0 = measure(mask, 1, tracks)
        # rotate tracks about z (mask voxel grid unchanged: MV is count-based,
        # FL/PA are geometric; a z-rotation keeps +z alignment valid)
        ang = 0.6
        R = np.array([[np.cos(ang), -np.sin(ang), 0],
                      [np.sin(ang), np.cos(ang), 0], [0, 0, 1.0]])
        moved = [Streamline(points=t.points @ R.T + [4, -7, 2], seed_id=t.seed_id)
                 for t in tracks]
        with pytest.warns(UserWarning):
            r1 = measure(mask, 1, moved)
        assert r1.fl_mm == pytest.approx(r0.fl_mm, rel=1e-6)
        assert r1.pa_deg == pytest.approx(r0.pa_deg, rel=1e-6, abs=1e-9)
        assert r1.pcsa_mm2 == pytest.approx(r0.pcsa_mm2, rel=1e-6)

    def test_duplicating_tracks_keeps_medians(self):
        mask, tracks = whole_muscle_setup(n_tracks=9, tilt_deg=3.0)
        with pytest.warns(UserWarning):
            r0 = measure(mask, 1, tracks)
        with pytest.warns(UserWarning):
            r1 = measure(mask, 1, tracks + tracks)
        assert r1.fl_mm == pytest.approx(r0.fl_mm, abs=1e-12)
        assert r1.pa_deg == pytest.approx(r0.pa_deg, abs=1e-12)

    def test_no_tracks_rejected(self):
        mask, _ = whole_muscle_setup()
        with pytest.raises(ArgumentError):
            measure(mask, 1, [])

    def test_report_round_trip(self):
        mask, tracks = whole_muscle_setup(tilt_deg=2.0)
        with pytest.warns(UserWarning):
            r = measure(mask, 1, tracks)
        r2 = ArchitectureReport.from_dict(r.to_dict())
        assert r2.fl_mm == r.fl_mm and r2.pcsa_mm2 == r.pcsa_mm2
        np.testing.assert_array_equal(r2.line_of_action, r.line_of_action)


class TestBlandAltman:
    def test_identical_pairs(self):
        pairs = [(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)]
        s = bland_altman(pairs)
        assert s.mean_diff == 0.0
        assert s.loa_low == 0.0 and s.loa_high == 0.0
        assert not s.proportional_bias

    def test_constant_offset(self):
        pairs = [(12.0, 10.0), (22.0, 20.0), (32.0, 30.0), (17.0, 15.0)]
        s = bland_altman(pairs)
        assert s.mean_diff == pytest.approx(2.0)
        assert s.slope == pytest.approx(0.0, abs=1e-12)
        assert s.loa_low == pytest.approx(2.0) and s.loa_high == pytest.approx(2.0)

    def test_proportional_bias_detected(self):
        rng = np.random.default_rng(7)
        means = np.linspace(10, 100, 20)
        # construct pairs whose diff is exactly 0.1x the pair mean
        pairs = [(m + 0.05 * m, m - 0.05 * m) for m in means]
        s = bland_altman(pairs)
        assert s.slope == pytest.approx(0.1, abs=1e-6)
        assert s.proportional_bias

    def test_limits_symmetric(self):
        rng = np.random.default_rng(8)
        pairs = rng.random((10, 2)) * 50
        s = bland_altman(pairs)
        assert (s.loa_high - s.mean_diff) == pytest.approx(s.mean_diff - s.loa_low)

    def test_too_few_pairs(self):
        with pytest.raises(ArgumentError):
            bland_altman([(1.0, 2.0), (2.0, 3.0)])


class TestRangeCheck:
    def make_report(self, pa, fl_ml=None):
        kwargs = {}
        if fl_ml is not None:
            kwargs = {"ml_mm": 100.0, "fl_ml": fl_ml}
        return ArchitectureReport(
            mv_mm3=1000.0, fl_mm=40.0, pa_deg=pa, pcsa_mm2=25.0,
            line_of_action=np.array([0, 0, 1.0]),
            fl_per_track=np.array([40.0]), pa_per_track=np.array([pa]),
            **kwargs)

    def test_pa_pass(self):
        assert range_check(self.make_report(5.0))["PA"] is True

    def test_pa_fail(self):
        assert range_check(self.make_report(12.0))["PA"] is False

    def test_straight_box_phantom_flags(self):
        mask, tracks = whole_muscle_setup()
        with pytest.warns(UserWarning):
            r = measure(mask, 1, tracks)
        flags = range_check(r)
        assert flags["PA"] is True
        assert flags["FL_ML"] is False      # ratio 1.0 by construction

    def test_absent_property_omitted(self):
        flags = range_check(self.make_report(5.0))
        assert "FL_ML" not in flags

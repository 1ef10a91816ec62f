"""Flow estimator tests against synthetic motion oracles.

Movies are built here by resampling a known texture under a known
displacement, so the expected field is available in closed form.
"""

import numpy as np
import pytest
from scipy import ndimage

from compartmenter.flow import FlowParams, aggregate_direction, estimate_flow
from compartmenter.model import ArgumentError, Image2D

SPACING = (0.3, 0.3)


def texture(shape, seed=0, sigma=2.0):
    """Band-limited noise with enough gradient structure for expansion."""
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.random(shape), sigma)
    t -= t.min()
    return t / t.max()


def shift_image(img, dx, dy):
    """Sample img at x - d: content moves by +d."""
    nx, ny = img.shape
    gi, gj = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    return ndimage.map_coordinates(img, [gi - dx, gj - dy], order=3, mode="nearest")


def interior(arr, margin):
    return arr[margin:-margin, margin:-margin]


class TestEstimateFlow:
    def test_identical_frames_zero(self):
        img = Image2D(data=texture((64, 64)), spacing=SPACING)
        f = estimate_flow(img, img)
        assert float(f.magnitude.max()) == 0.0

    def test_pure_translation_recovered(self):
        base = texture((96, 96), seed=1)
        f1 = Image2D(data=base, spacing=SPACING)
        f2 = Image2D(data=shift_image(base, 2.0, 0.0), spacing=SPACING)
        field = estimate_flow(f1, f2)
        disp = field.unit * field.magnitude[..., None]
        m = 20
        mean_d = interior(disp, m).reshape(-1, 2).mean(axis=0)
        assert abs(mean_d[0] - 2.0) < 0.3
        assert abs(mean_d[1] - 0.0) < 0.3

    def test_rotation_field_direction(self):
        base = texture((128, 128), seed=2)
        nx, ny = base.shape
        cx, cy = (nx - 1) / 2, (ny - 1) / 2
        angle = np.deg2rad(2.0)
        gi, gj = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
        # rotate content by +2 deg about the centre
        ri = cx + (gi - cx) * np.cos(angle) + (gj - cy) * np.sin(angle)
        rj = cy - (gi - cx) * np.sin(angle) + (gj - cy) * np.cos(angle)
        rotated = ndimage.map_coordinates(base, [ri, rj], order=3, mode="nearest")
        field = estimate_flow(Image2D(data=base, spacing=SPACING),
                              Image2D(data=rotated, spacing=SPACING))

        # analytic displacement of the rotation at each pixel
        ex = (gi - cx) * (np.cos(angle) - 1) - (gj - cy) * np.sin(angle)
        ey = (gi - cx) * np.sin(angle) + (gj - cy) * (np.cos(angle) - 1)
        exp_mag = np.hypot(ex, ey)
        m = 24
        sel = interior(exp_mag, m) > 0.5          # ignore the near-still centre
        got = interior(field.unit * field.magnitude[..., None], m)
        dot = (got[..., 0] * interior(ex, m) + got[..., 1] * interior(ey, m))
        cosang = dot[sel] / (np.linalg.norm(got, axis=-1)[sel] * interior(exp_mag, m)[sel] + 1e-12)
        ang_err = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
        assert ang_err.mean() < 10.0

    def test_swap_negates_direction(self):
        base = texture((96, 96), seed=3)
        moved = shift_image(base, 1.5, 1.0)
        f1 = Image2D(data=base, spacing=SPACING)
        f2 = Image2D(data=moved, spacing=SPACING)
        a = estimate_flow(f1, f2)
        b = estimate_flow(f2, f1)
        m = 20
        da = interior(a.unit * a.magnitude[..., None], m)
        db = interior(b.unit * b.magnitude[..., None], m)
        mag = interior(a.magnitude, m)
        sel = mag > 0.5 * mag.mean()
        cos = -(da[sel] * db[sel]).sum(-1) / (
            np.linalg.norm(da[sel], axis=-1) * np.linalg.norm(db[sel], axis=-1) + 1e-12)
        dev = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        assert dev.mean() < 5.0

    def test_unit_norms(self):
        base = texture((64, 64), seed=4)
        f = estimate_flow(Image2D(data=base, spacing=SPACING),
                          Image2D(data=shift_image(base, 1.0, 0.5), spacing=SPACING))
        live = f.magnitude > 0
        norms = np.linalg.norm(f.unit[live], axis=-1)
        assert np.abs(norms - 1).max() < 1e-6

    def test_dims_mismatch_rejected(self):
        a = Image2D(data=np.zeros((32, 32)), spacing=SPACING)
        b = Image2D(data=np.zeros((32, 33)), spacing=SPACING)
        with pytest.raises(ArgumentError):
            estimate_flow(a, b)

    def test_params_validated(self):
        with pytest.raises(ArgumentError):
            FlowParams(window_radius=1)
        with pytest.raises(ArgumentError):
            FlowParams(pyramid_levels=0)


class TestAggregateDirection:
    def test_two_frames_equals_single_pair(self):
        base = texture((80, 80), seed=5)
        frames = [Image2D(data=base, spacing=SPACING),
                  Image2D(data=shift_image(base, 1.2, 0.4), spacing=SPACING)]
        agg = aggregate_direction(frames, stride=10)
        single = estimate_flow(frames[0], frames[1])
        m = 20
        sel = interior(single.magnitude, m) > 0
        np.testing.assert_allclose(interior(agg.magnitude, m)[sel],
                                   interior(single.magnitude, m)[sel], rtol=1e-9)
        # aggregated unit is axial: compare up to sign
        ua = interior(agg.unit, m)[sel]
        us = interior(single.unit, m)[sel]
        dots = np.abs((ua * us).sum(-1))
        assert dots.min() > 1 - 1e-6

    def test_constant_translation_movie(self):
        base = texture((80, 80), seed=6)
        frames = [Image2D(data=shift_image(base, 0.8 * k, 0.0), spacing=SPACING)
                  for k in range(5)]
        agg = aggregate_direction(frames, stride=1)
        m = 20
        mag = interior(agg.magnitude, m)
        unit = interior(agg.unit, m)
        sel = mag > 0.3
        # motion axis is x: |ux| near 1
        assert np.abs(unit[sel][:, 0]).mean() > 0.97

    def test_reciprocating_motion_keeps_axis(self):
        # forward then backward translation: plain averaging would cancel
        base = texture((80, 80), seed=7)
        frames = [Image2D(data=shift_image(base, d, 0.0), spacing=SPACING)
                  for d in [0.0, 1.5, 0.0, 1.5, 0.0]]
        agg = aggregate_direction(frames, stride=1)
        m = 20
        mag = interior(agg.magnitude, m)
        unit = interior(agg.unit, m)
        sel = mag > 0.3
        assert sel.any()
        assert np.abs(unit[sel][:, 0]).mean() > 0.95

    def test_needs_two_frames(self):
        with pytest.raises(ArgumentError):
            aggregate_direction([Image2D(data=np.zeros((32, 32)), spacing=SPACING)])

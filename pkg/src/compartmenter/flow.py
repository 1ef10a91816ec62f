"""Dense two-frame motion estimation and sequence aggregation.

The estimator follows the polynomial-expansion family: every pixel
neighbourhood is approximated by a quadratic model fitted under a
Gaussian applicability window, and the displacement field is solved
iteratively from the expansion coefficients of both frames, coarse to
fine over an image pyramid.

Sign convention: the returned displacement d is the tissue motion from
frame 1 to frame 2, so ``f1(x) = f2(x + d)``.  A frame pair where the
content moves +2 px along x yields d = (+2, 0).

Displacements are expressed in pixels; downstream consumers use the
direction only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .model import ArgumentError, DirectionField, Image2D


@dataclass(frozen=True)
class FlowParams:
    """Estimator knobs; defaults sized for speckle-textured B-mode frames."""

    window_radius: int = 7        # polynomial-expansion neighbourhood radius, px
    pyramid_levels: int = 2
    iterations: int = 3           # displacement refinements per level
    gaussian_sigma: float = 9.0   # smoothing of the normal equations

    def __post_init__(self):
        if self.window_radius < 2:
            raise ArgumentError("window_radius must be >= 2")
        if self.pyramid_levels < 1:
            raise ArgumentError("pyramid_levels must be >= 1")
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        if self.gaussian_sigma <= 0:
            raise ArgumentError("gaussian_sigma must be positive")


# ---------------------------------------------------------------------------
# polynomial expansion

def _expansion_kernels(radius: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    sigma = max(radius / 2.0, 1.0)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return x, g, g / g.sum()


def _expansion_inverse(radius: int) -> np.ndarray:
    """Inverse normal matrix for basis (1, x, y, x^2, y^2, xy)."""
    x, g, _ = _expansion_kernels(radius)
    w = np.outer(g, g)                      # separable applicability
    X, Y = np.meshgrid(x, x, indexing="ij")
    basis = np.stack([np.ones_like(X), X, Y, X * X, Y * Y, X * Y])
    G = np.einsum("iab,jab,ab->ij", basis, basis, w)
    return np.linalg.inv(G)


def _poly_expand(img: np.ndarray, radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel quadratic model f ~ c + b.dx + dx.A.dx.

    Returns A with shape (nx, ny, 2, 2) and b with shape (nx, ny, 2).
    """
    x, g, _ = _expansion_kernels(radius)
    Ginv = _expansion_inverse(radius)

    def corr(k0, k1):
        # separable weighted moment: rows then columns
        t = ndimage.correlate1d(img, k0, axis=0, mode="nearest")
        return ndimage.correlate1d(t, k1, axis=1, mode="nearest")

    gx, gx2 = g * x, g * x * x
    m = np.stack([
        corr(g, g),        # 1
        corr(gx, g),       # x
        corr(g, gx),       # y
        corr(gx2, g),      # x^2
        corr(g, gx2),      # y^2
        corr(gx, gx),      # xy
    ], axis=-1)
    r = m @ Ginv.T                                     # coefficients per pixel
    b = r[..., 1:3]
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] / 2.0
    return A, b


# ---------------------------------------------------------------------------
# displacement solve

def _solve_level(f1: np.ndarray, f2: np.ndarray, d0: np.ndarray, p: FlowParams) -> np.ndarray:
    A1, b1 = _poly_expand(f1, p.window_radius)
    A2, b2 = _poly_expand(f2, p.window_radius)
    nx, ny = f1.shape
    gi, gj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    d = d0.copy()
    for _ in range(p.iterations):
        # read the second expansion at the displaced position x + d
        ci = np.clip(gi + d[..., 0], 0, nx - 1)
        cj = np.clip(gj + d[..., 1], 0, ny - 1)
        coords = [ci, cj]
        A2w = np.stack([ndimage.map_coordinates(A2[..., i, j], coords, order=1)
                        for i in range(2) for j in range(2)], axis=-1).reshape(nx, ny, 2, 2)
        b2w = np.stack([ndimage.map_coordinates(b2[..., i], coords, order=1)
                        for i in range(2)], axis=-1)
        A = 0.5 * (A1 + A2w)
        db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, d)
        # normal equations, smoothed over the neighbourhood
        G = np.einsum("...ki,...kj->...ij", A, A)
        h = np.einsum("...ki,...k->...i", A, db)
        for i in range(2):
            h[..., i] = ndimage.gaussian_filter(h[..., i], p.gaussian_sigma, mode="nearest")
            for j in range(2):
                G[..., i, j] = ndimage.gaussian_filter(G[..., i, j], p.gaussian_sigma, mode="nearest")
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        reg = 1e-12 * (G[..., 0, 0] + G[..., 1, 1] + 1e-30)
        det = np.where(np.abs(det) > reg, det, np.where(det >= 0, reg, -reg))
        d = np.stack([
            (G[..., 1, 1] * h[..., 0] - G[..., 0, 1] * h[..., 1]) / det,
            (G[..., 0, 0] * h[..., 1] - G[..., 1, 0] * h[..., 0]) / det,
        ], axis=-1)
    return d


def _downsample(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _upsample_field(d: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    zoom = (shape[0] / d.shape[0], shape[1] / d.shape[1], 1.0)
    return ndimage.zoom(d, zoom, order=1, mode="nearest") * 2.0


def estimate_flow(f1: Image2D, f2: Image2D, p: FlowParams = FlowParams()) -> DirectionField:
    """Dense displacement field between two frames (pixels, f1 -> f2)."""
    if f1.dims != f2.dims or f1.spacing != f2.spacing:
        raise ArgumentError("frames must share dimensions and spacing")
    a1 = f1.data
    a2 = f2.data
    if np.array_equal(a1, a2):
        # identical frames are exactly zero by contract, skip the solve
        disp = np.zeros(a1.shape + (2,))
        return DirectionField.from_displacement(disp, f1.spacing)

    pyr1: List[np.ndarray] = [a1]
    pyr2: List[np.ndarray] = [a2]
    for _ in range(p.pyramid_levels - 1):
        if min(pyr1[-1].shape) // 2 < 4 * p.window_radius:
            break                      # level too small to support the window
        pyr1.append(_downsample(pyr1[-1]))
        pyr2.append(_downsample(pyr2[-1]))

    d = np.zeros(pyr1[-1].shape + (2,))
    for level in range(len(pyr1) - 1, -1, -1):
        if d.shape[:2] != pyr1[level].shape:
            d = _upsample_field(d, pyr1[level].shape)
        d = _solve_level(pyr1[level], pyr2[level], d, p)

    # border expansions are unreliable; blank the band so growing skips it
    r = p.window_radius
    disp = d.copy()
    disp[:r, :] = 0.0
    disp[-r:, :] = 0.0
    disp[:, :r] = 0.0
    disp[:, -r:] = 0.0
    return DirectionField.from_displacement(disp, f1.spacing)


# ---------------------------------------------------------------------------
# sequence aggregation

def aggregate_direction(frames: Sequence[Image2D], p: FlowParams = FlowParams(),
                        stride: int = 10) -> DirectionField:
    """Collapse a movement sequence into one per-pixel motion axis.

    Frame pairs are taken ``stride`` frames apart (clamped for short
    sequences).  Directions combine by magnitude-weighted circular mean
    with axial doubling, so reciprocating flexion and extension phases
    reinforce one axis instead of cancelling; magnitudes average
    arithmetically.
    """
    if len(frames) < 2:
        raise ArgumentError("aggregation needs at least 2 frames")
    dims = frames[0].dims
    spacing = frames[0].spacing
    for f in frames[1:]:
        if f.dims != dims or f.spacing != spacing:
            raise ArgumentError("all frames must share geometry")
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    eff = min(stride, len(frames) - 1)

    C = np.zeros(dims)
    S = np.zeros(dims)
    M = np.zeros(dims)
    n_pairs = 0
    for i in range(0, len(frames) - eff, eff):
        field = estimate_flow(frames[i], frames[i + eff], p)
        w = field.magnitude
        ux = field.unit[..., 0]
        uy = field.unit[..., 1]
        # axial doubling: axis theta contributes (cos 2t, sin 2t)
        C += w * (ux * ux - uy * uy)
        S += w * (2.0 * ux * uy)
        M += w
        n_pairs += 1

    mean_mag = M / n_pairs
    weight = np.hypot(C, S)
    theta = 0.5 * np.arctan2(S, C)
    unit = np.zeros(dims + (2,))
    live = (weight > 0) & (mean_mag > 0)
    unit[live, 0] = np.cos(theta[live])
    unit[live, 1] = np.sin(theta[live])
    mean_mag[~live] = 0.0
    return DirectionField(unit=unit, magnitude=mean_mag, spacing=spacing)

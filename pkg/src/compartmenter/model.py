"""Core geometric types and conventions shared by every pipeline stage.

Conventions fixed here and relied on everywhere else:

* All physical coordinates are millimetres.
* Volumes are indexed (i, j, k) along (x, y, z); voxel (0, 0, 0) is centred
  at ``origin`` and voxel (i, j, k) at ``origin + (i*sx, j*sy, k*sz)``.
* The z axis runs distal to proximal along the forearm.
* 2D slice frames put the centre of pixel (0, 0) at (0, 0) mm; pixel
  (i, j) sits at (i*sx, j*sy).
* Contours are stored counter-clockwise; orientation is normalised at
  construction time.

All types are immutable after construction (arrays are flagged
read-only), so instances can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage


# ---------------------------------------------------------------------------
# errors

class CompartmenterError(Exception):
    """Base class for all pipeline errors."""


class ArgumentError(CompartmenterError):
    """Precondition violated by a caller-supplied argument."""


class InvalidContourError(ArgumentError):
    """Contour is degenerate (too few points or zero area)."""


class TopologyError(CompartmenterError):
    """Region or mask has the wrong topology (empty, multi-component)."""


class DegenerateSeedError(ArgumentError):
    """Seed pixel has no usable direction."""


class DegenerateDataError(CompartmenterError):
    """Data reduced to nothing (for example every channel excluded)."""


class EmptyRegionError(CompartmenterError):
    """An operation found no elements above its threshold."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# volumes

@dataclass(frozen=True)
class ScalarVolume:
    """3D scalar grid with physical spacing, mm everywhere."""

    data: np.ndarray                  # shape (nx, ny, nz)
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ArgumentError(f"volume data must be 3D non-empty, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ArgumentError("volume data contains non-finite values")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ArgumentError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "data", _readonly(d))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape

    def voxel_to_physical(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def physical_to_voxel(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """3D integer label grid; 0 is background, 1..K are compartments."""

    data: np.ndarray                  # shape (nx, ny, nz), non-negative ints
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ArgumentError(f"label data must be 3D non-empty, got shape {d.shape}")
        if not np.issubdtype(d.dtype, np.integer):
            if not np.all(d == np.rint(d)):
                raise ArgumentError("label data must be integer valued")
            d = np.rint(d)
        if d.size and d.min() < 0:
            raise ArgumentError("labels must be non-negative")
        if d.size and d.max() > np.iinfo(np.uint16).max:
            raise ArgumentError("label ids exceed uint16 range")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ArgumentError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "data", _readonly(d.astype(np.uint16)))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape

    def labels(self) -> np.ndarray:
        """Sorted non-zero labels present in the volume."""
        u = np.unique(self.data)
        return u[u > 0]

    def voxel_to_physical(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def physical_to_voxel(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def label_is_26_connected(vol: LabelVolume, label: int) -> bool:
    """True when the label's voxels form one 26-connected component."""
    mask = vol.data == label
    if not mask.any():
        return False
    _, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    return n == 1


# ---------------------------------------------------------------------------
# 2D images and direction fields

@dataclass(frozen=True)
class Image2D:
    """Single 2D scalar image, typically one B-mode ultrasound frame."""

    data: np.ndarray                  # shape (nx, ny)
    spacing: Tuple[float, float]      # mm per pixel

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or min(d.shape) < 1:
            raise ArgumentError(f"image data must be 2D non-empty, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ArgumentError("image data contains non-finite values")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 2 or min(sp) <= 0:
            raise ArgumentError(f"spacing must be 2 positive values, got {self.spacing}")
        object.__setattr__(self, "data", _readonly(d))
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DirectionField:
    """Per-pixel motion axis (unit vector) and displacement magnitude.

    ``unit`` holds a unit direction wherever ``magnitude > 0`` and zeros
    elsewhere.  Directions are axial downstream: theta and theta+180deg
    describe the same tissue motion axis.
    """

    unit: np.ndarray                  # shape (nx, ny, 2)
    magnitude: np.ndarray             # shape (nx, ny), pixels of displacement
    spacing: Tuple[float, float]

    def __post_init__(self):
        u = np.asarray(self.unit, dtype=np.float64)
        m = np.asarray(self.magnitude, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ArgumentError(f"unit array must be (nx, ny, 2), got {u.shape}")
        if m.shape != u.shape[:2]:
            raise ArgumentError("magnitude shape does not match unit shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(m))):
            raise ArgumentError("direction field contains non-finite values")
        if m.size and m.min() < 0:
            raise ArgumentError("magnitudes must be non-negative")
        live = m > 0
        if live.any():
            norms = np.linalg.norm(u[live], axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ArgumentError("unit vectors must have norm 1 +- 1e-6 where magnitude > 0")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 2 or min(sp) <= 0:
            raise ArgumentError(f"spacing must be 2 positive values, got {self.spacing}")
        object.__setattr__(self, "unit", _readonly(u))
        object.__setattr__(self, "magnitude", _readonly(m))
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.magnitude.shape

    @classmethod
    def from_displacement(cls, disp: np.ndarray, spacing: Tuple[float, float]) -> "DirectionField":
        """Build from raw per-pixel (dx, dy) displacements in pixels."""
        disp = np.asarray(disp, dtype=np.float64)
        mag = np.linalg.norm(disp, axis=2)
        unit = np.zeros_like(disp)
        live = mag > 0
        unit[live] = disp[live] / mag[live, None]
        return cls(unit=unit, magnitude=mag, spacing=spacing)


# ---------------------------------------------------------------------------
# contours

@dataclass(frozen=True)
class Contour:
    """Closed planar polygon in slice physical coordinates (mm).

    Orientation is normalised to counter-clockwise at construction.  The
    O(n^2) self-intersection check is deliberately not run here (contours
    reach thousands of vertices); callers that need the guarantee use
    :meth:`is_simple`.
    """

    points: np.ndarray                # shape (n, 2), open ring (no repeated end)
    slice_z: float = 0.0
    label: int = 1
    closed: bool = True

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise InvalidContourError(f"points must be (n, 2), got shape {p.shape}")
        if len(p) > 1 and np.array_equal(p[0], p[-1]):
            p = p[:-1]                                    # drop explicit closure
        if len(p) < 3:
            raise InvalidContourError(f"contour needs >= 3 distinct points, got {len(p)}")
        if not np.all(np.isfinite(p)):
            raise InvalidContourError("contour contains non-finite coordinates")
        area = _signed_area(p)
        scale = float(np.abs(p).max()) + 1.0
        if abs(area) <= 1e-12 * scale * scale:
            raise InvalidContourError("contour has zero signed area")
        if area < 0:
            p = p[::-1].copy()                            # normalise to CCW
        object.__setattr__(self, "points", _readonly(p))
        object.__setattr__(self, "slice_z", float(self.slice_z))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "closed", bool(self.closed))

    def __len__(self) -> int:
        return len(self.points)

    def centroid(self) -> np.ndarray:
        """Area centroid of the polygon interior."""
        p = self.points
        q = np.roll(p, -1, axis=0)
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        a = cross.sum() / 2.0
        cx = ((p[:, 0] + q[:, 0]) * cross).sum() / (6.0 * a)
        cy = ((p[:, 1] + q[:, 1]) * cross).sum() / (6.0 * a)
        return np.array([cx, cy])

    def is_simple(self) -> bool:
        """Exact non-self-intersection check, quadratic in vertex count."""
        p = self.points
        n = len(p)
        a, b = p, np.roll(p, -1, axis=0)
        for i in range(n):
            # skip the edge itself and the two adjacent edges
            js = [j for j in range(i + 2, n) if not (i == 0 and j == n - 1)]
            if not js:
                continue
            j = np.array(js)
            if _segments_intersect(a[i], b[i], a[j], b[j]).any():
                return False
        return True


def _signed_area(p: np.ndarray) -> float:
    q = np.roll(p, -1, axis=0)
    return float((p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]).sum() / 2.0)


def _segments_intersect(a0, a1, b0: np.ndarray, b1: np.ndarray) -> np.ndarray:
    """Proper or touching intersection of segment a0-a1 with each b0[i]-b1[i]."""
    d1 = _cross2(b1 - b0, a0 - b0)
    d2 = _cross2(b1 - b0, a1 - b0)
    d3 = _cross2(a1 - a0, b0 - a0)
    d4 = _cross2(a1 - a0, b1 - a0)
    crossing = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
    touch = ((d1 == 0) & _on_segment(b0, b1, a0)) | ((d2 == 0) & _on_segment(b0, b1, a1)) \
        | ((d3 == 0) & _on_segment(a0, a1, b0)) | ((d4 == 0) & _on_segment(a0, a1, b1))
    return crossing | touch


def _cross2(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


def _on_segment(s0, s1, p) -> np.ndarray:
    s0, s1, p = np.atleast_2d(s0), np.atleast_2d(s1), np.atleast_2d(p)
    lo = np.minimum(s0, s1)
    hi = np.maximum(s0, s1)
    return np.all((p >= lo) & (p <= hi), axis=1)


def contour_area(c: Contour) -> float:
    """Shoelace area in mm^2, positive because contours are CCW."""
    return _signed_area(c.points)


def points_in_contour(points: np.ndarray, c: Contour, edge_tol: float = 1e-9) -> np.ndarray:
    """Vectorised even-odd test; points on an edge count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v0 = c.points
    v1 = np.roll(v0, -1, axis=0)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    x0, y0 = v0[:, 0][None, :], v0[:, 1][None, :]
    x1, y1 = v1[:, 0][None, :], v1[:, 1][None, :]

    # half-open rule avoids double counting at shared vertices
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    crossings = (straddle & (px < x_at)).sum(axis=1)
    inside = (crossings % 2) == 1

    # boundary override: distance to any edge within tolerance counts inside
    ex, ey = x1 - x0, y1 - y0
    L2 = ex * ex + ey * ey
    t = np.clip(((px - x0) * ex + (py - y0) * ey) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    dx = px - (x0 + t * ex)
    dy = py - (y0 + t * ey)
    on_edge = ((dx * dx + dy * dy) <= edge_tol * edge_tol).any(axis=1)
    return inside | on_edge


def point_in_contour(p, c: Contour) -> bool:
    """Even-odd test for a single point; edge points count as inside."""
    return bool(points_in_contour(np.asarray(p, dtype=np.float64)[None, :], c)[0])


# ---------------------------------------------------------------------------
# streamlines

@dataclass(frozen=True)
class Streamline:
    """Ordered 3D polyline in mm, one reconstructed fiber tract."""

    points: np.ndarray                # shape (n, 3)
    seed_id: int = -1

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
            raise ArgumentError(f"streamline needs >= 2 3D points, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ArgumentError("streamline contains non-finite coordinates")
        object.__setattr__(self, "points", _readonly(p))
        object.__setattr__(self, "seed_id", int(self.seed_id))

    def __len__(self) -> int:
        return len(self.points)

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def chord(self) -> np.ndarray:
        """End-to-end vector, the stable per-tract direction."""
        return self.points[-1] - self.points[0]


# ---------------------------------------------------------------------------
# electrode grid

@dataclass(frozen=True)
class ElectrodeGrid:
    """Planar electrode array posed in 3D.

    Electrodes are indexed row-major (channel = row * cols + col).  The
    local u axis follows ``ex`` (columns, along the forearm), v follows
    ``ey`` (rows, across it).  Two stacked physical grids are modelled as
    one logical grid with an extra ``gap_mm`` inserted after row
    ``gap_after_row``.
    """

    rows: int = 5
    cols: int = 13
    pitch_mm: float = 8.0
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ex: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    ey: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    gap_after_row: int = -1           # -1 disables the inter-grid gap
    gap_mm: float = 0.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ArgumentError("grid needs at least one row and one column")
        if self.pitch_mm <= 0:
            raise ArgumentError("pitch must be positive")
        ex = np.asarray(self.ex, dtype=np.float64)
        ey = np.asarray(self.ey, dtype=np.float64)
        if abs(np.linalg.norm(ex) - 1) > 1e-9 or abs(np.linalg.norm(ey) - 1) > 1e-9 \
                or abs(float(ex @ ey)) > 1e-9:
            raise ArgumentError("grid frame must be orthonormal to 1e-9")
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        object.__setattr__(self, "pitch_mm", float(self.pitch_mm))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "ex", tuple(float(v) for v in ex))
        object.__setattr__(self, "ey", tuple(float(v) for v in ey))
        object.__setattr__(self, "gap_after_row", int(self.gap_after_row))
        object.__setattr__(self, "gap_mm", float(self.gap_mm))

    @property
    def n_electrodes(self) -> int:
        return self.rows * self.cols

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.ex, self.ey)
        return n / np.linalg.norm(n)

    def electrode_uv(self) -> np.ndarray:
        """Local planar (u, v) mm coordinates per electrode, row-major."""
        r = np.arange(self.rows)
        v = r * self.pitch_mm
        if self.gap_after_row >= 0:
            v = v + np.where(r > self.gap_after_row, self.gap_mm, 0.0)
        u = np.arange(self.cols) * self.pitch_mm
        uu, vv = np.meshgrid(u, v)              # (rows, cols)
        return np.column_stack([uu.ravel(), vv.ravel()])

    def electrode_positions(self) -> np.ndarray:
        """World-frame 3D electrode centres, row-major."""
        uv = self.electrode_uv()
        o = np.asarray(self.origin)
        return o + uv[:, :1] * np.asarray(self.ex) + uv[:, 1:2] * np.asarray(self.ey)

    def world_to_uv(self, points: np.ndarray) -> np.ndarray:
        """Orthographic projection of world points into the grid plane."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - np.asarray(self.origin)
        return np.column_stack([p @ np.asarray(self.ex), p @ np.asarray(self.ey)])


# ---------------------------------------------------------------------------
# sampled point sets and matchings

@dataclass(frozen=True)
class SampledSet:
    """Spatially uniform point sample of one muscle cross-section."""

    points: np.ndarray                # shape (n, 2) mm
    source: str = "ultrasound"        # "ultrasound" | "mri"
    slice_z: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 1:
            raise ArgumentError(f"sample points must be (n, 2) non-empty, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ArgumentError("sample points contain non-finite coordinates")
        if len(np.unique(p, axis=0)) != len(p):
            raise ArgumentError("sample points must be pairwise distinct")
        if self.source not in ("ultrasound", "mri"):
            raise ArgumentError(f"source must be 'ultrasound' or 'mri', got {self.source!r}")
        object.__setattr__(self, "points", _readonly(p))
        object.__setattr__(self, "slice_z", float(self.slice_z))

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Matching:
    """Bijection between two equal-size sampled sets with its total cost.

    ``pairs[i] = (u_index, v_index)``; ``total_cost`` is the sum of squared
    pair distances measured in the pre-aligned frame the matching was
    solved in.  The matched sets themselves ride along when known so a
    matching file is self-contained.
    """

    pairs: np.ndarray                 # shape (n, 2) int
    total_cost: float
    u_set: "SampledSet | None" = None
    v_set: "SampledSet | None" = None

    def __post_init__(self):
        p = np.asarray(self.pairs)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 1:
            raise ArgumentError(f"pairs must be (n, 2), got {p.shape}")
        if not np.issubdtype(p.dtype, np.integer):
            raise ArgumentError("pair indices must be integers")
        n = len(p)
        for side in (0, 1):
            col = np.sort(p[:, side])
            if not np.array_equal(col, np.arange(n)):
                raise ArgumentError("pairs must form a bijection over 0..n-1 on both sides")
        if self.total_cost < 0:
            raise ArgumentError("total_cost must be non-negative")
        for s in (self.u_set, self.v_set):
            if s is not None and s.count != n:
                raise ArgumentError("attached sets must match the pair count")
        object.__setattr__(self, "pairs", _readonly(p.astype(np.int64)))
        object.__setattr__(self, "total_cost", float(self.total_cost))

    def v_of_u(self) -> np.ndarray:
        """Array m with m[u_index] = v_index."""
        m = np.empty(len(self.pairs), dtype=np.int64)
        m[self.pairs[:, 0]] = self.pairs[:, 1]
        return m


# ---------------------------------------------------------------------------
# resampling

def resample_volume(vol, target_spacing):
    """Resample to a new isotropic or per-axis spacing.

    Scalars interpolate trilinearly, labels take the nearest source voxel
    so no label blending can occur.  Physical extent is preserved to
    within one voxel; an identity resample returns bit-identical data.
    """
    if np.isscalar(target_spacing):
        target = (float(target_spacing),) * 3
    else:
        target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ArgumentError(f"target spacing must be positive, got {target_spacing}")

    if isinstance(vol, ScalarVolume):
        is_label = False
    elif isinstance(vol, LabelVolume):
        is_label = True
    else:
        raise ArgumentError(f"cannot resample {type(vol).__name__}")

    if target == vol.spacing:
        return type(vol)(data=vol.data.copy(), spacing=vol.spacing, origin=vol.origin)

    dims = vol.dims
    new_dims = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(dims, vol.spacing, target))
    # new voxel centres expressed in source voxel units
    axes = [np.arange(m) * t / s for m, t, s in zip(new_dims, target, vol.spacing)]
    gi, gj, gk = np.meshgrid(*axes, indexing="ij")

    if is_label:
        idx = [np.clip(np.rint(g).astype(np.int64), 0, n - 1) for g, n in zip((gi, gj, gk), dims)]
        data = vol.data[idx[0], idx[1], idx[2]]
        return LabelVolume(data=data, spacing=target, origin=vol.origin)

    data = ndimage.map_coordinates(vol.data, [gi, gj, gk], order=1, mode="nearest")
    return ScalarVolume(data=data, spacing=target, origin=vol.origin)

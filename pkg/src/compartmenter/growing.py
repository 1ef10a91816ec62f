"""Region growing over a direction field with a distance-adaptive
angular threshold, plus boundary extraction of the grown region.

The similarity threshold relaxes near the seeds and tightens with
distance: t = a_max*(1-r) + a_min*r where r is the distance to the
nearest seed over the radius of the circle whose area equals the muscle
cross-section, clamped to [0, 1].

Angle comparisons are axial by default (theta and theta+180 deg are the
same tissue motion axis); a directed mode is available for comparison.
The frontier is a FIFO queue and neighbours are enumerated row-major, so
growth is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numba import njit
from scipy import ndimage

from .model import (
    ArgumentError,
    Contour,
    DegenerateSeedError,
    DirectionField,
    TopologyError,
)

MIN_REGION_PIXELS = 10


@dataclass(frozen=True)
class GrowParams:
    """Angular bounds and the muscle cross-section area driving Eq. 4."""

    muscle_area_mm2: float
    a_max_deg: float = 30.0
    a_min_deg: float = 5.0
    directed: bool = False        # plain angles instead of axial ones

    def __post_init__(self):
        if not (self.a_max_deg > self.a_min_deg > 0):
            raise ArgumentError("need a_max > a_min > 0")
        if self.muscle_area_mm2 <= 0:
            raise ArgumentError("muscle_area_mm2 must be positive")


def dynamic_threshold(q, y, p: GrowParams, spacing: Tuple[float, float] = (1.0, 1.0)) -> float:
    """Angular threshold in degrees for candidate pixel y against seed q.

    q and y are pixel indices; spacing converts the distance to mm so it
    is commensurate with the equivalent-circle radius sqrt(A/pi).
    """
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = float(np.hypot((y[0] - q[0]) * spacing[0], (y[1] - q[1]) * spacing[1]))
    r_eq = float(np.sqrt(p.muscle_area_mm2 / np.pi))
    r = min(max(d / r_eq, 0.0), 1.0)
    return p.a_max_deg * (1.0 - r) + p.a_min_deg * r


def threshold_map(field_dims, seeds, p: GrowParams, spacing) -> np.ndarray:
    """Per-pixel threshold in degrees using the nearest seed distance."""
    nx, ny = field_dims
    gi, gj = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    d = np.full((nx, ny), np.inf)
    for (si, sj) in seeds:
        d = np.minimum(d, np.hypot((gi - si) * spacing[0], (gj - sj) * spacing[1]))
    r_eq = float(np.sqrt(p.muscle_area_mm2 / np.pi))
    r = np.clip(d / r_eq, 0.0, 1.0)
    return p.a_max_deg * (1.0 - r) + p.a_min_deg * r


@njit(cache=True)
def _grow_kernel(admissible, cs, sn, cos_thresh, seed_i, seed_j):
    """FIFO region growth with an incrementally updated mean direction.

    cs/sn hold the per-pixel direction encoding (doubled-angle components
    for axial mode, plain components for directed mode); the acceptance
    test is dot(mean_hat, candidate) > cos_thresh at the candidate.
    """
    nx, ny = admissible.shape
    region = np.zeros((nx, ny), dtype=np.uint8)
    qi = np.empty(nx * ny, dtype=np.int64)
    qj = np.empty(nx * ny, dtype=np.int64)
    head = 0
    tail = 0
    mc = 0.0
    ms = 0.0
    for s in range(len(seed_i)):
        i, j = seed_i[s], seed_j[s]
        if region[i, j] == 0:
            region[i, j] = 1
            qi[tail] = i
            qj[tail] = j
            tail += 1
            mc += cs[i, j]
            ms += sn[i, j]
    while head < tail:
        i, j = qi[head], qj[head]
        head += 1
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ni = i + di
                nj = j + dj
                if ni < 0 or ni >= nx or nj < 0 or nj >= ny:
                    continue
                if region[ni, nj] == 1 or admissible[ni, nj] == 0:
                    continue
                norm = np.sqrt(mc * mc + ms * ms)
                if norm < 1e-15:
                    dot = 1.0            # no dominant axis yet, admit
                else:
                    dot = (mc * cs[ni, nj] + ms * sn[ni, nj]) / norm
                if dot > cos_thresh[ni, nj]:
                    region[ni, nj] = 1
                    qi[tail] = ni
                    qj[tail] = nj
                    tail += 1
                    mc += cs[ni, nj]
                    ms += sn[ni, nj]
    return region


def grow_region(field: DirectionField, fds_mask: np.ndarray,
                seeds: Sequence[Tuple[int, int]], p: GrowParams) -> np.ndarray:
    """Grow one compartment region from its seeds; returns a bool mask."""
    mask = np.asarray(fds_mask, dtype=bool)
    if mask.shape != field.dims:
        raise ArgumentError("fds_mask geometry does not match the field")
    seeds = [(int(i), int(j)) for i, j in seeds]
    if not seeds:
        raise ArgumentError("at least one seed required")
    if len(seeds) > 2:
        raise ArgumentError("at most two seeds per compartment")
    for (i, j) in seeds:
        if not (0 <= i < mask.shape[0] and 0 <= j < mask.shape[1]) or not mask[i, j]:
            raise ArgumentError(f"seed {(i, j)} lies outside the FDS mask")
        if field.magnitude[i, j] <= 0:
            raise DegenerateSeedError(f"seed {(i, j)} has zero flow magnitude")

    ux = field.unit[..., 0]
    uy = field.unit[..., 1]
    if p.directed:
        cs, sn = ux.copy(), uy.copy()
        t_deg = threshold_map(field.dims, seeds, p, field.spacing)
        cos_thresh = np.cos(np.radians(t_deg))
    else:
        # doubled-angle encoding makes the axial comparison a plain dot product
        cs = ux * ux - uy * uy
        sn = 2.0 * ux * uy
        t_deg = threshold_map(field.dims, seeds, p, field.spacing)
        cos_thresh = np.cos(2.0 * np.radians(t_deg))

    admissible = (mask & (field.magnitude > 0)).astype(np.uint8)
    seed_i = np.array([s[0] for s in seeds], dtype=np.int64)
    seed_j = np.array([s[1] for s in seeds], dtype=np.int64)
    region = _grow_kernel(admissible, np.ascontiguousarray(cs), np.ascontiguousarray(sn),
                          np.ascontiguousarray(cos_thresh), seed_i, seed_j)
    return region.astype(bool)


# ---------------------------------------------------------------------------
# boundary extraction

def region_to_contour(region: np.ndarray, slice_z: float,
                      spacing: Tuple[float, float] = (1.0, 1.0),
                      label: int = 1) -> Contour:
    """Trace the region's outer boundary along pixel edges as a contour.

    The trace runs at pixel-edge resolution (area before simplification
    equals pixel count times pixel area) and is then simplified with a
    tolerance of half a pixel.  Interior holes are ignored: only the
    largest boundary loop is returned.
    """
    mask = np.asarray(region, dtype=bool)
    if not mask.any():
        raise TopologyError("empty region")
    n_px = int(mask.sum())
    if n_px < MIN_REGION_PIXELS:
        raise TopologyError(f"region has {n_px} pixels, below the minimum {MIN_REGION_PIXELS}")
    _, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n_comp != 1:
        raise TopologyError(f"region has {n_comp} connected components, expected 1")

    loops = _trace_boundary_loops(mask)
    areas = [abs(_loop_area(lp)) for lp in loops]
    outer = loops[int(np.argmax(areas))]
    pts = np.asarray(outer, dtype=np.float64)
    tol_px = 0.5
    pts = _simplify_closed(pts, tol_px)
    pts = pts * np.asarray(spacing)[None, :]
    return Contour(points=pts, slice_z=slice_z, label=label)


def _trace_boundary_loops(mask: np.ndarray) -> List[List[Tuple[float, float]]]:
    """Directed pixel-edge loops with interior on the left (CCW outer)."""
    nx, ny = mask.shape
    # outgoing edges keyed by start corner; corners use half-integer coords x2
    edges = {}

    def add(a, b):
        edges.setdefault(a, []).append(b)

    idx = np.argwhere(mask)
    for i, j in idx:
        i, j = int(i), int(j)
        if i + 1 >= nx or not mask[i + 1, j]:
            add((2 * i + 1, 2 * j - 1), (2 * i + 1, 2 * j + 1))      # right side, +y
        if i - 1 < 0 or not mask[i - 1, j]:
            add((2 * i - 1, 2 * j + 1), (2 * i - 1, 2 * j - 1))      # left side, -y
        if j + 1 >= ny or not mask[i, j + 1]:
            add((2 * i + 1, 2 * j + 1), (2 * i - 1, 2 * j + 1))      # top side, -x
        if j - 1 < 0 or not mask[i, j - 1]:
            add((2 * i - 1, 2 * j - 1), (2 * i + 1, 2 * j - 1))      # bottom side, +x

    loops = []
    while edges:
        start = min(edges)                           # deterministic loop order
        loop = [start]
        cur = start
        prev_dir = None
        while True:
            outs = edges[cur]
            if len(outs) == 1 or prev_dir is None:
                nxt = outs[0]
            else:
                # diagonal pinch: keep to the rightmost turn so the outer
                # boundary stays one loop
                nxt = _rightmost_turn(cur, outs, prev_dir)
            outs.remove(nxt)
            if not outs:
                del edges[cur]
            prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
            if cur == start:
                break
            loop.append(cur)
        loops.append([(c[0] / 2.0, c[1] / 2.0) for c in loop])
    return loops


def _rightmost_turn(cur, outs, prev_dir):
    best = None
    best_key = None
    for o in outs:
        d = (o[0] - cur[0], o[1] - cur[1])
        cross = prev_dir[0] * d[1] - prev_dir[1] * d[0]
        dot = prev_dir[0] * d[0] + prev_dir[1] * d[1]
        key = np.arctan2(cross, dot)                 # rightmost = most negative
        if best_key is None or key < best_key:
            best_key = key
            best = o
    return best


def _loop_area(loop) -> float:
    p = np.asarray(loop, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    return float((p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]).sum() / 2.0)


def _simplify_closed(pts: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring, split at the two extreme points."""
    n = len(pts)
    if n <= 4:
        return pts
    a = 0
    b = int(np.argmax(np.linalg.norm(pts - pts[0], axis=1)))
    if b == 0:
        return pts
    first = _dp_open(pts[a:b + 1], tol)
    second = _dp_open(np.vstack([pts[b:], pts[:1]]), tol)
    out = np.vstack([first[:-1], second[:-1]])
    return out if len(out) >= 3 else pts


def _dp_open(pts: np.ndarray, tol: float) -> np.ndarray:
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        seg = pts[j] - pts[i]
        L = np.linalg.norm(seg)
        if L == 0:
            d = np.linalg.norm(pts[i + 1:j] - pts[i], axis=1)
        else:
            u = seg / L
            rel = pts[i + 1:j] - pts[i]
            d = np.abs(u[0] * rel[:, 1] - u[1] * rel[:, 0])
        k = int(np.argmax(d))
        if d[k] > tol:
            keep[i + 1 + k] = True
            stack.append((i, i + 1 + k))
            stack.append((i + 1 + k, j))
    return pts[keep]

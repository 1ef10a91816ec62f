"""Slice registration: farthest point sampling, minimum-weight matching,
contour mapping, and lofting mapped contours into a label volume.

Matching runs on pre-aligned point sets (common centroid, principal axes
rotated onto x with a deterministic sign) so the squared-distance
objective is invariant to the acquisition frames.  The dense mode is a
Jonker-Volgenant-class exact solve; the sparse mode restricts candidate
edges to the union of k-nearest-neighbour lists taken in both directions
and solves that graph exactly with an epsilon-scaling auction on
integer-quantised costs (the final epsilon = 1 phase makes the quantised
optimum exact; quantisation error is ~2^-26 relative).
"""

from __future__ import annotations

import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy import interpolate
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .model import (
    ArgumentError,
    Contour,
    LabelVolume,
    Matching,
    SampledSet,
    contour_area,
    points_in_contour,
)

LOFT_POINTS = 128


# ---------------------------------------------------------------------------
# farthest point sampling

def farthest_point_sample(candidates: np.ndarray, n: int,
                          source: str = "ultrasound", slice_z: float = 0.0) -> SampledSet:
    """Greedy max-min subset of the candidate points.

    The first pick is the candidate nearest the candidate centroid; every
    later pick maximises the distance to the already-selected set.  Ties
    resolve to the lowest candidate index.
    """
    pts = np.asarray(candidates, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ArgumentError(f"candidates must be (m, 2) non-empty, got {pts.shape}")
    m = len(pts)
    if not (1 <= n <= m):
        raise ArgumentError(f"n must be in [1, {m}], got {n}")

    centroid = pts.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(pts - centroid, axis=1)))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    dmin = np.linalg.norm(pts - pts[first], axis=1)
    for t in range(1, n):
        nxt = int(np.argmax(dmin))            # argmax takes the first max: lowest index
        chosen[t] = nxt
        np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1), out=dmin)
    return SampledSet(points=pts[chosen], source=source, slice_z=slice_z)


def contour_interior_points(contour: Contour, spacing: Tuple[float, float]) -> np.ndarray:
    """Pixel centres covered by the contour at the given resolution."""
    lo = contour.points.min(axis=0)
    hi = contour.points.max(axis=0)
    xs = np.arange(np.floor(lo[0] / spacing[0]), np.ceil(hi[0] / spacing[0]) + 1) * spacing[0]
    ys = np.arange(np.floor(lo[1] / spacing[1]), np.ceil(hi[1] / spacing[1]) + 1) * spacing[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    return grid[points_in_contour(grid, contour)]


# ---------------------------------------------------------------------------
# pre-alignment

def principal_frame(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Centroid and det(+1) rotation taking the principal axis to +x.

    The axis sign is fixed by the most distant point from the centroid
    (its projection on the axis is made non-negative), which keeps the
    frame deterministic under point reordering and common rigid moves.
    """
    pts = np.asarray(points, dtype=np.float64)
    c = pts.mean(axis=0)
    q = pts - c
    cov = q.T @ q / max(len(q), 1)
    _, vecs = np.linalg.eigh(cov)
    e1 = vecs[:, 1]                               # largest eigenvalue
    scale = float(np.abs(q).max()) + 1e-30
    order = np.argsort(-(q * q).sum(axis=1), kind="stable")
    for idx in order:
        proj = float(q[idx] @ e1)
        if abs(proj) > 1e-12 * scale:
            if proj < 0:
                e1 = -e1
            break
    R = np.array([[e1[0], e1[1]], [-e1[1], e1[0]]])
    return c, R


def _prealigned(u_set: SampledSet, v_set: SampledSet) -> Tuple[np.ndarray, np.ndarray]:
    cu, Ru = principal_frame(u_set.points)
    cv, Rv = principal_frame(v_set.points)
    return (u_set.points - cu) @ Ru.T, (v_set.points - cv) @ Rv.T


# ---------------------------------------------------------------------------
# sparse assignment: epsilon-scaling auction on a padded edge list

_QUANT_BITS = 26


def _pad_graph(n: int, rows: np.ndarray, cols: np.ndarray, costs: np.ndarray):
    order = np.lexsort((cols, rows))
    rows, cols, costs = rows[order], cols[order], costs[order]
    deg = np.bincount(rows, minlength=n)
    if deg.min() == 0:
        return None                               # some person has no edge
    dmax = int(deg.max())
    starts = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=starts[1:])
    pos = np.arange(len(rows)) - starts[rows]
    cols_p = np.zeros((n, dmax), dtype=np.int64)
    cost_p = np.zeros((n, dmax), dtype=np.float64)
    pad = np.ones((n, dmax), dtype=bool)
    cols_p[rows, pos] = cols
    cost_p[rows, pos] = costs
    pad[rows, pos] = False
    return cols_p, cost_p, pad


@njit(cache=True)
def _auction_kernel(ben, cols_p, eps0, theta, price_bound, max_bids):
    """Sequential epsilon-scaling auction over the padded edge list.

    Status 0 = assigned, 1 = price blow-up (infeasible graph), 2 = bid
    budget exhausted.  Prices persist across phases; each phase restarts
    the assignment and runs until no person is free, following
    displacement chains depth-first.
    """
    n, dmax = ben.shape
    bound4 = 4 * price_bound
    price = np.zeros(n, dtype=np.int64)
    owner = np.full(n, -1, dtype=np.int64)
    assigned = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    eps = eps0
    bids = np.int64(0)
    while True:
        for i in range(n):
            owner[i] = -1
            assigned[i] = -1
            stack[i] = i
        top = n
        while top > 0:
            top -= 1
            p = stack[top]
            best_v = np.int64(-(2 ** 62))
            second = np.int64(-(2 ** 62))
            best_t = 0
            for t in range(dmax):
                v = ben[p, t] - price[cols_p[p, t]]
                if v > best_v:
                    second = best_v
                    best_v = v
                    best_t = t
                elif v > second:
                    second = v
            bids += 1
            if bids > max_bids:
                return 2, assigned
            j = cols_p[p, best_t]
            bid = price[j] + (best_v - second) + eps
            if bid > bound4:
                return 1, assigned            # price blow-up: infeasible
            prev = owner[j]
            if prev >= 0:
                assigned[prev] = -1
                stack[top] = prev
                top += 1
            owner[j] = p
            assigned[p] = j
            price[j] = bid
        if eps <= 1:
            return 0, assigned
        eps = eps // theta
        if eps < 1:
            eps = np.int64(1)


def _auction_assign(n: int, rows: np.ndarray, cols: np.ndarray, costs: np.ndarray,
                    theta: int = 8, max_rounds: Optional[int] = None) -> Optional[np.ndarray]:
    """Exact assignment on the sparse graph, or None when infeasible.

    Costs are quantised to 26-bit integers scaled by (n+1); running the
    final phase at epsilon = 1 then guarantees optimality for the
    quantised problem.  Price explosions past the feasibility bound are
    the infeasibility signal; ``max_rounds`` caps the total bid count
    before giving up and letting the caller fall back (the default scales
    with n and sits far above healthy convergence bid counts).
    """
    if max_rounds is None:
        max_rounds = 4_000_000 + 800 * n
    padded = _pad_graph(n, rows, cols, costs)
    if padded is None:
        return None
    cols_p, cost_p, pad = padded
    cmax = float(costs.max()) if len(costs) else 0.0
    scale = 1.0 if cmax <= 0 else (2.0 ** _QUANT_BITS) / cmax
    ben = (-np.rint(cost_p * scale)).astype(np.int64) * (n + 1)
    price_bound = (np.int64(2) * n + 2) * (np.int64(2) ** _QUANT_BITS) * (n + 1) + 1
    ben[pad] = -4 * price_bound                   # sentinel, never competitive
    eps0 = (np.int64(2) ** _QUANT_BITS) * (n + 1) // 2 + 1
    status, assigned = _auction_kernel(ben, cols_p, np.int64(eps0), np.int64(theta),
                                       np.int64(price_bound), np.int64(max_rounds))
    if status != 0:
        return None
    return assigned


def _knn_union_edges(U: np.ndarray, V: np.ndarray, k: int):
    """Union of U->V and V->U k-nearest edges, deduplicated."""
    n = len(U)
    k = min(k, n)
    _, iuv = cKDTree(V).query(U, k=k)
    _, ivu = cKDTree(U).query(V, k=k)
    iuv = np.asarray(iuv).reshape(n, k)
    ivu = np.asarray(ivu).reshape(n, k)
    rows = np.concatenate([np.repeat(np.arange(n), k), ivu.ravel()])
    cols = np.concatenate([iuv.ravel(), np.repeat(np.arange(n), k)])
    key = rows * n + cols
    uniq = np.unique(key)
    return uniq // n, uniq % n


def min_weight_match(u_set: SampledSet, v_set: SampledSet,
                     mode: str = "sparse-knn", k: int = 32) -> Matching:
    """Minimum total squared distance bijection between the two sets."""
    if u_set.count != v_set.count:
        raise ArgumentError(f"set sizes differ: {u_set.count} vs {v_set.count}")
    if mode not in ("exact-dense", "sparse-knn"):
        raise ArgumentError(f"mode must be 'exact-dense' or 'sparse-knn', got {mode!r}")
    U, V = _prealigned(u_set, v_set)
    n = len(U)

    if mode == "exact-dense":
        D = ((U[:, None, :] - V[None, :, :]) ** 2).sum(-1)
        rows, cols = linear_sum_assignment(D)
        assigned = np.empty(n, dtype=np.int64)
        assigned[rows] = cols
    else:
        # auction on the knn graph; widen k while it reports the graph
        # infeasible (or stalls), with a dense exact solve as the final net
        kk = min(max(k, 1), n)
        while True:
            rows, cols = _knn_union_edges(U, V, kk)
            costs = ((U[rows] - V[cols]) ** 2).sum(axis=1)
            assigned = _auction_assign(n, rows, cols, costs)
            if assigned is not None:
                break
            if kk >= n:
                D = ((U[:, None, :] - V[None, :, :]) ** 2).sum(-1)
                r, c = linear_sum_assignment(D)
                assigned = np.empty(n, dtype=np.int64)
                assigned[r] = c
                break
            kk = min(2 * kk, n)

    total = float(((U - V[assigned]) ** 2).sum())
    pairs = np.column_stack([np.arange(n), assigned])
    return Matching(pairs=pairs, total_cost=total, u_set=u_set, v_set=v_set)


# ---------------------------------------------------------------------------
# contour mapping

def map_contour(matching: Matching, u_sampled: Optional[SampledSet],
                contour: Contour) -> Contour:
    """Replace each contour point with the partner of its nearest sample.

    The ultrasound-side samples come from ``u_sampled`` (or the set
    attached to the matching); partners are looked up on the MRI side.
    Output points are deduplicated and re-closed, the label is kept and
    the slice position becomes the MRI slice's.
    """
    u_set = u_sampled if u_sampled is not None else matching.u_set
    v_set = matching.v_set
    if u_set is None or v_set is None:
        raise ArgumentError("matching must carry or be given both sampled sets")
    if len(matching.pairs) != u_set.count:
        raise ArgumentError("matching does not cover the sampled set")
    v_of_u = matching.v_of_u()
    _, nearest = cKDTree(u_set.points).query(contour.points)
    mapped = v_set.points[v_of_u[nearest]]

    keep = np.ones(len(mapped), dtype=bool)
    keep[1:] = np.any(mapped[1:] != mapped[:-1], axis=1)
    if np.array_equal(mapped[0], mapped[-1]) and keep[-1]:
        keep[-1] = False
    mapped = mapped[keep]
    if len(mapped) < 3:
        raise ArgumentError("mapped contour collapsed below 3 distinct points")
    return Contour(points=mapped, slice_z=v_set.slice_z, label=contour.label)


# ---------------------------------------------------------------------------
# lofting

def _equal_arc_resample(contour: Contour, m: int) -> np.ndarray:
    p = contour.points
    ring = np.vstack([p, p[:1]])
    seg = np.linalg.norm(np.diff(ring, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    targets = np.arange(m) * total / m
    x = np.interp(targets, s, ring[:, 0])
    y = np.interp(targets, s, ring[:, 1])
    return np.column_stack([x, y])


def _best_shift(prev: np.ndarray, cur: np.ndarray) -> int:
    """Cyclic shift of cur minimising total squared distance to prev."""
    m = len(prev)
    best, best_cost = 0, np.inf
    for s in range(m):
        cost = float(((prev - np.roll(cur, -s, axis=0)) ** 2).sum())
        if cost < best_cost:
            best_cost = cost
            best = s
    return best


def loft_masks(contours: Sequence[Contour], dims: Tuple[int, int, int],
               spacing: Tuple[float, float, float],
               origin: Tuple[float, float, float] = (0.0, 0.0, 0.0),
               n_points: int = LOFT_POINTS) -> LabelVolume:
    """Interpolate per-label contour stacks into a voxel label volume.

    Contours are resampled to ``n_points`` equal-arc points, aligned
    slice to slice by the minimal-rotation cyclic shift, interpolated
    with natural cubic splines along z, and rasterised at every target
    slice whose centre lies within the label's z range (inclusive).
    Voxels claimed by several labels go to the one whose nearest input
    slice is closest; remaining ties to the lower label.
    """
    by_label: Dict[int, List[Contour]] = {}
    for c in contours:
        by_label.setdefault(c.label, []).append(c)
    if not by_label:
        raise ArgumentError("no contours supplied")

    nx, ny, nz = dims
    sx, sy, sz = spacing
    zs = origin[2] + np.arange(nz) * sz
    out = np.zeros(dims, dtype=np.uint16)
    best_priority = np.full(dims, np.inf)
    overlap_voxels = 0

    for label in sorted(by_label):
        stack = sorted(by_label[label], key=lambda c: c.slice_z)
        if len(stack) < 2:
            raise ArgumentError(f"label {label} has {len(stack)} slice(s), lofting needs >= 2")
        z_in = np.array([c.slice_z for c in stack])
        if len(np.unique(z_in)) != len(z_in):
            raise ArgumentError(f"label {label} has duplicate slice positions")

        rings = [_equal_arc_resample(stack[0], n_points)]
        for c in stack[1:]:
            ring = _equal_arc_resample(c, n_points)
            rings.append(np.roll(ring, -_best_shift(rings[-1], ring), axis=0))
        rings_arr = np.stack(rings)                     # (n_slices, m, 2)
        spline = interpolate.CubicSpline(z_in, rings_arr, axis=0, bc_type="natural")

        for kz in range(nz):
            z = zs[kz]
            if z < z_in[0] or z > z_in[-1]:
                continue
            ring = spline(z)
            poly = Contour(points=ring, slice_z=z, label=label)
            lo = ring.min(axis=0)
            hi = ring.max(axis=0)
            i0 = max(0, int(np.floor((lo[0] - origin[0]) / sx)))
            i1 = min(nx - 1, int(np.ceil((hi[0] - origin[0]) / sx)))
            j0 = max(0, int(np.floor((lo[1] - origin[1]) / sy)))
            j1 = min(ny - 1, int(np.ceil((hi[1] - origin[1]) / sy)))
            if i1 < i0 or j1 < j0:
                continue
            gi, gj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
            px = origin[0] + gi.ravel() * sx
            py = origin[1] + gj.ravel() * sy
            inside = points_in_contour(np.column_stack([px, py]), poly)
            if not inside.any():
                continue
            ii = gi.ravel()[inside]
            jj = gj.ravel()[inside]
            priority = float(np.abs(z_in - z).min())
            cur_best = best_priority[ii, jj, kz]
            cur_label = out[ii, jj, kz]
            overlap_voxels += int((cur_label > 0).sum())
            take = (priority < cur_best) | ((priority == cur_best) & (cur_label == 0))
            out[ii[take], jj[take], kz] = label
            best_priority[ii[take], jj[take], kz] = priority

    if overlap_voxels:
        warnings.warn(f"loft: {overlap_voxels} voxel claims overlapped; "
                      "resolved by nearest-slice priority", stacklevel=2)
    return LabelVolume(data=out, spacing=spacing, origin=origin)


def loft_volume_of(label_vol: LabelVolume, label: int) -> float:
    """Convenience: labelled voxel count times voxel volume, mm^3."""
    return float((label_vol.data == label).sum()) * label_vol.voxel_volume()

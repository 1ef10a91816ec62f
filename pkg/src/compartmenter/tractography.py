"""Diffusion tensor fitting and deterministic streamline tractography.

Tensors are fit per voxel by log-linear least squares on
``S = S0 * exp(-b * g^T D g)``.  Streamlines are integrated bidirectionally
from a deterministic seed grid with fixed-step Euler along the principal
eigenvector, stopping on low anisotropy, sharp turns, or mask exit.  A
uniform subset is then chosen by greedy farthest-first selection under a
symmetric mean closest-point distance between tracts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy import ndimage

from .model import (
    ArgumentError,
    DegenerateDataError,
    LabelVolume,
    ScalarVolume,
    Streamline,
    _readonly,
)

SIGNAL_EPS = 1e-12
SEED_SHUFFLE_SEED = 0
MAX_STEPS = 4096
SAMPLE_REP_POINTS = 15

# component order of the 6-vector tensor representation
TENSOR_COMPONENTS = ("xx", "yy", "zz", "xy", "xz", "yz")


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class DwiStack:
    """One diffusion-weighted acquisition: a volume per gradient."""

    volumes: Tuple[ScalarVolume, ...]
    bvals: np.ndarray                 # s/mm^2, shape (n,)
    bvecs: np.ndarray                 # unit vectors, shape (n, 3); zero rows for b=0

    def __post_init__(self):
        vols = tuple(self.volumes)
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if len(vols) == 0:
            raise ArgumentError("DwiStack needs at least one volume")
        if bvals.ndim != 1 or bvecs.ndim != 2 or bvecs.shape[1] != 3:
            raise ArgumentError("bvals must be (n,), bvecs must be (n, 3)")
        if not (len(vols) == len(bvals) == len(bvecs)):
            raise ArgumentError(
                f"got {len(vols)} volumes, {len(bvals)} bvals, {len(bvecs)} bvecs")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise ArgumentError("bvals must be finite and >= 0")
        ref = vols[0]
        for v in vols[1:]:
            if (v.dims != ref.dims or not np.allclose(v.spacing, ref.spacing)
                    or not np.allclose(v.origin, ref.origin)):
                raise ArgumentError("all DWI volumes must share one geometry")
        nz = bvals > 0
        if np.count_nonzero(~nz) < 1:
            raise ArgumentError("at least one b=0 reference volume is required")
        if np.count_nonzero(nz) < 6:
            raise ArgumentError("at least 6 diffusion-weighted directions are required")
        norms = np.linalg.norm(bvecs[nz], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ArgumentError("b>0 gradient vectors must be unit norm (+-1e-6)")
        object.__setattr__(self, "volumes", vols)
        object.__setattr__(self, "bvals", _readonly(bvals))
        object.__setattr__(self, "bvecs", _readonly(bvecs))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.volumes[0].dims

    def signals(self) -> np.ndarray:
        """Stacked signal array, shape (nx, ny, nz, n_gradients)."""
        return np.stack([v.data for v in self.volumes], axis=-1)


def default_gradient_scheme(b: float = 400.0) -> Tuple[np.ndarray, np.ndarray]:
    """12 well-spread hemisphere directions at one shell plus 4 interspersed
    b=0 references (Fibonacci spiral; all axes distinct)."""
    i = np.arange(12)
    z = (i + 0.5) / 12.0
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    raw = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    bvals = []
    bvecs = []
    for i in range(12):
        if i % 3 == 0:
            bvals.append(0.0)
            bvecs.append(np.zeros(3))
        bvals.append(b)
        bvecs.append(raw[i])
    return np.asarray(bvals), np.asarray(bvecs)


@dataclass(frozen=True)
class TensorField:
    """Per-voxel symmetric diffusion tensor as 6 components (mm^2/s).

    Component order along the last axis is (xx, yy, zz, xy, xz, yz).
    """

    data: np.ndarray                  # shape (nx, ny, nz, 6)
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 4 or d.shape[3] != 6:
            raise ArgumentError(f"tensor field must be (nx, ny, nz, 6), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ArgumentError("tensor field contains non-finite values")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ArgumentError(f"spacing must be 3 positive floats, got {self.spacing}")
        object.__setattr__(self, "data", _readonly(d))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape[:3]

    def matrices(self) -> np.ndarray:
        """Full symmetric 3x3 tensors, shape (nx, ny, nz, 3, 3)."""
        return six_to_matrix(self.data)

    def fa(self) -> ScalarVolume:
        """Per-voxel fractional anisotropy."""
        w = np.linalg.eigvalsh(self.matrices())
        return ScalarVolume(data=fa_from_eigenvalues(w), spacing=self.spacing,
                            origin=self.origin)

    def principal_directions(self) -> np.ndarray:
        """Per-voxel unit principal eigenvector, shape (nx, ny, nz, 3)."""
        _, v = np.linalg.eigh(self.matrices())
        return v[..., :, 2]


def six_to_matrix(six: np.ndarray) -> np.ndarray:
    """(..., 6) component vectors -> (..., 3, 3) symmetric matrices."""
    six = np.asarray(six, dtype=np.float64)
    m = np.empty(six.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = six[..., 0]
    m[..., 1, 1] = six[..., 1]
    m[..., 2, 2] = six[..., 2]
    m[..., 0, 1] = m[..., 1, 0] = six[..., 3]
    m[..., 0, 2] = m[..., 2, 0] = six[..., 4]
    m[..., 1, 2] = m[..., 2, 1] = six[..., 5]
    return m


def matrix_to_six(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
                     m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], axis=-1)


def fa_from_eigenvalues(w: np.ndarray) -> np.ndarray:
    """Fractional anisotropy from (..., 3) eigenvalue arrays, clipped to [0, 1]."""
    w = np.asarray(w, dtype=np.float64)
    mean = w.mean(axis=-1, keepdims=True)
    num = ((w - mean) ** 2).sum(axis=-1)
    den = (w ** 2).sum(axis=-1)
    out = np.zeros(w.shape[:-1], dtype=np.float64)
    ok = den > 0
    out[ok] = np.sqrt(1.5 * num[ok] / den[ok])
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class TrackParams:
    """Tractography controls."""

    step_mm: float = 1.0
    fa_min: float = 0.1
    max_turn_deg: float = 20.0
    min_length_mm: float = 10.0
    target_count: int = 3000
    candidate_count: int = 10000
    smooth_order: int = 3

    def __post_init__(self):
        if not self.step_mm > 0:
            raise ArgumentError(f"step_mm must be > 0, got {self.step_mm}")
        if not 0.0 <= self.fa_min <= 1.0:
            raise ArgumentError(f"fa_min must be in [0, 1], got {self.fa_min}")
        if not 0.0 < self.max_turn_deg < 90.0:
            raise ArgumentError(f"max_turn_deg must be in (0, 90), got {self.max_turn_deg}")
        if self.min_length_mm < 0:
            raise ArgumentError(f"min_length_mm must be >= 0, got {self.min_length_mm}")
        if self.target_count < 1 or self.candidate_count < self.target_count:
            raise ArgumentError("need candidate_count >= target_count >= 1")
        if self.smooth_order < 1:
            raise ArgumentError(f"smooth_order must be >= 1, got {self.smooth_order}")


# ---------------------------------------------------------------------------
# tensor fitting

def design_matrix(bvals: np.ndarray, bvecs: np.ndarray) -> np.ndarray:
    """Log-linear design: columns for ln(S0) and the 6 tensor components."""
    b = np.asarray(bvals, dtype=np.float64)
    g = np.asarray(bvecs, dtype=np.float64)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.column_stack([
        np.ones_like(b),
        -b * gx * gx, -b * gy * gy, -b * gz * gz,
        -2.0 * b * gx * gy, -2.0 * b * gx * gz, -2.0 * b * gy * gz,
    ])


def fit_tensor(dwi: DwiStack) -> TensorField:
    """Per-voxel log-linear least-squares tensor fit."""
    X = design_matrix(dwi.bvals, dwi.bvecs)
    if np.linalg.matrix_rank(X) < 7:
        raise ArgumentError("gradient scheme is rank deficient; need 6 independent "
                            "directions plus a b=0 reference")
    pinv = np.linalg.pinv(X)                      # (7, n)
    logs = np.log(np.maximum(dwi.signals(), SIGNAL_EPS))
    beta = logs @ pinv.T                          # (nx, ny, nz, 7)
    ref = dwi.volumes[0]
    return TensorField(data=beta[..., 1:7], spacing=ref.spacing, origin=ref.origin)


def predict_signals(tensors: TensorField, s0: np.ndarray,
                    bvals: np.ndarray, bvecs: np.ndarray) -> np.ndarray:
    """Forward model S = S0 exp(-b g^T D g); shape (nx, ny, nz, n)."""
    X = design_matrix(bvals, bvecs)[:, 1:]        # (n, 6) tensor part
    expo = np.tensordot(tensors.data, X, axes=([3], [1]))
    return np.asarray(s0)[..., None] * np.exp(expo)


# ---------------------------------------------------------------------------
# tracking

def _interp_tensors(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the 6 components at fractional voxel coords.

    coords: (m, 3) in voxel units; returns (m, 3, 3) symmetric matrices.
    """
    six = np.empty((len(coords), 6), dtype=np.float64)
    c = coords.T
    for k in range(6):
        six[:, k] = ndimage.map_coordinates(data[..., k], c, order=1, mode="nearest")
    return six_to_matrix(six)


def make_seed_grid(mask: LabelVolume, label: int, count: int,
                   shuffle_seed: int = SEED_SHUFFLE_SEED) -> np.ndarray:
    """Deterministic seed points (mm): voxel centers of the label, shuffled
    by a fixed-seed PRNG and truncated to ``count``."""
    idx = np.argwhere(mask.data == label)
    if len(idx) == 0:
        raise ArgumentError(f"mask has no voxels with label {label}")
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(len(idx))
    idx = idx[order[:count]]
    return idx * np.asarray(mask.spacing) + np.asarray(mask.origin)


def track(tensors: TensorField, mask: LabelVolume, label: int, params: TrackParams,
          seeds: Optional[np.ndarray] = None) -> List[Streamline]:
    """Bidirectional deterministic streamlines from a seed grid.

    Per step at the current point: evaluate the interpolated tensor; stop if
    FA < fa_min; stop if the principal direction (sign-aligned to the incoming
    direction) turns by more than max_turn; otherwise propose the next point
    one step along it and stop if that point leaves the labelled mask.
    """
    if tensors.dims != mask.dims or not np.allclose(tensors.spacing, mask.spacing) \
            or not np.allclose(tensors.origin, mask.origin):
        raise ArgumentError("tensor field and mask must share one geometry")
    if seeds is None:
        seeds = make_seed_grid(mask, label, params.candidate_count)
    else:
        seeds = np.asarray(seeds, dtype=np.float64)
        if seeds.ndim != 2 or seeds.shape[1] != 3:
            raise ArgumentError(f"seeds must be (m, 3) mm points, got {seeds.shape}")
        if len(seeds) == 0:
            raise ArgumentError("no seed points")

    spacing = np.asarray(tensors.spacing)
    origin = np.asarray(tensors.origin)
    dims = np.asarray(tensors.dims)
    cos_thresh = np.cos(np.radians(params.max_turn_deg)) - 1e-12

    def inside(points: np.ndarray) -> np.ndarray:
        ijk = np.rint((points - origin) / spacing).astype(np.int64)
        ok = np.all((ijk >= 0) & (ijk < dims), axis=1)
        out = np.zeros(len(points), dtype=bool)
        if np.any(ok):
            v = ijk[ok]
            out[ok] = mask.data[v[:, 0], v[:, 1], v[:, 2]] == label
        return out

    n = len(seeds)
    # evaluate the tensor once at every seed
    T0 = _interp_tensors(tensors.data, (seeds - origin) / spacing)
    w0, v0 = np.linalg.eigh(T0)
    fa0 = fa_from_eigenvalues(w0)
    e0 = v0[:, :, 2]
    live_seed = (fa0 >= params.fa_min) & inside(seeds)

    # two half-tracks per seed, integrated in lockstep
    pos = np.concatenate([seeds, seeds], axis=0)
    dirs = np.concatenate([e0, -e0], axis=0)
    active = np.concatenate([live_seed, live_seed]).copy()
    halves: List[List[np.ndarray]] = [[pos[i].copy()] for i in range(2 * n)]

    for _ in range(MAX_STEPS):
        ids = np.flatnonzero(active)
        if len(ids) == 0:
            break
        p = pos[ids]
        d = dirs[ids]
        T = _interp_tensors(tensors.data, (p - origin) / spacing)
        w, v = np.linalg.eigh(T)
        fa = fa_from_eigenvalues(w)
        e = v[:, :, 2]
        dot = np.einsum("ij,ij->i", e, d)
        e = np.where(dot[:, None] < 0, -e, e)
        dot = np.abs(dot)
        ok = (fa >= params.fa_min) & (dot >= cos_thresh)
        q = p + params.step_mm * e
        ok &= inside(q)
        for j, i in enumerate(ids):
            if ok[j]:
                halves[i].append(q[j])
            else:
                active[i] = False
        pos[ids[ok]] = q[ok]
        dirs[ids[ok]] = e[ok]

    out: List[Streamline] = []
    for s in range(n):
        fwd = halves[s]
        back = halves[n + s]
        pts = back[::-1] + fwd[1:]
        if len(pts) >= 2:
            out.append(Streamline(points=np.asarray(pts), seed_id=s))
    return out


# ---------------------------------------------------------------------------
# filtering, smoothing, sampling

def _arc_length_param(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _resample_polyline(points: np.ndarray, n_out: int) -> np.ndarray:
    """Equal-arc-length resampling of a 3D polyline to n_out points."""
    s = _arc_length_param(points)
    if s[-1] <= 0:
        return np.repeat(points[:1], n_out, axis=0)
    t = np.linspace(0.0, s[-1], n_out)
    return np.column_stack([np.interp(t, s, points[:, k]) for k in range(3)])


def filter_smooth(tracks: Sequence[Streamline], params: TrackParams) -> List[Streamline]:
    """Drop short tracks, then refit each as per-coordinate polynomials of
    arc length and resample at the step spacing."""
    out: List[Streamline] = []
    for t in tracks:
        length = t.length()
        if length < params.min_length_mm:
            continue
        s = _arc_length_param(t.points)
        order = min(params.smooth_order, len(t.points) - 1)
        coeffs = [np.polynomial.polynomial.polyfit(s, t.points[:, k], order)
                  for k in range(3)]
        n_out = max(2, int(round(length / params.step_mm)) + 1)
        si = np.linspace(0.0, length, n_out)
        pts = np.column_stack([np.polynomial.polynomial.polyval(si, c) for c in coeffs])
        out.append(Streamline(points=pts, seed_id=t.seed_id))
    return out


@njit(cache=True)
def _pair_distance(a, b):  # pragma: no cover - numba
    """Symmetric mean closest-point distance between two (k, 3) rep arrays."""
    ka = a.shape[0]
    kb = b.shape[0]
    acc_ab = 0.0
    for i in range(ka):
        best = 1e300
        for j in range(kb):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best:
                best = d
        acc_ab += best
    acc_ba = 0.0
    for j in range(kb):
        best = 1e300
        for i in range(ka):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best:
                best = d
        acc_ba += best
    return 0.5 * (acc_ab / ka + acc_ba / kb)


@njit(cache=True)
def _greedy_select(reps, first, n_select):  # pragma: no cover - numba
    n = reps.shape[0]
    chosen = np.empty(n_select, dtype=np.int64)
    chosen[0] = first
    dmin = np.empty(n, dtype=np.float64)
    for i in range(n):
        dmin[i] = _pair_distance(reps[i], reps[first])
    for m in range(1, n_select):
        best = -1.0
        pick = 0
        for i in range(n):
            if dmin[i] > best:
                best = dmin[i]
                pick = i
        chosen[m] = pick
        for i in range(n):
            d = _pair_distance(reps[i], reps[pick])
            if d < dmin[i]:
                dmin[i] = d
    return chosen


def streamline_distance(a: Streamline, b: Streamline,
                        n_rep: int = SAMPLE_REP_POINTS) -> float:
    """Symmetric mean closest-point distance on equal-arc representatives."""
    ra = _resample_polyline(a.points, n_rep)
    rb = _resample_polyline(b.points, n_rep)
    return float(_pair_distance(ra, rb))


def farthest_streamline_sample(tracks: Sequence[Streamline],
                               target: int) -> List[Streamline]:
    """Greedy max-min subset of ``target`` tracks under the streamline
    distance; the first pick is the track nearest the candidate centroid."""
    tracks = list(tracks)
    if target < 1:
        raise ArgumentError(f"target must be >= 1, got {target}")
    if len(tracks) < target:
        raise ArgumentError(f"need at least {target} candidate tracks, "
                            f"got {len(tracks)}")
    if len(tracks) == target:
        return tracks
    reps = np.stack([_resample_polyline(t.points, SAMPLE_REP_POINTS)
                     for t in tracks])
    centroid = reps.reshape(-1, 3).mean(axis=0)
    to_centroid = np.linalg.norm(reps - centroid, axis=2).mean(axis=1)
    first = int(np.argmin(to_centroid))
    chosen = _greedy_select(reps, first, target)
    return [tracks[i] for i in chosen]

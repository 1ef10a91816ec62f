"""Synthetic ground-truth phantoms.

Every generator emits its ground truth alongside the data, computed in
closed form from the construction — tests never re-derive truth through
the code under test.  All randomness comes from numpy's default PCG64
generator with caller-fixed seeds, so outputs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from .model import (
    ArgumentError,
    Contour,
    DirectionField,
    ElectrodeGrid,
    Image2D,
    LabelVolume,
    ScalarVolume,
)
from .tractography import (
    DwiStack,
    TensorField,
    default_gradient_scheme,
    matrix_to_six,
    predict_signals,
)

GEOMETRIES = ("box", "cylinder", "frustum", "two-region", "muscle-like-oblique")
FIBER_MODELS = ("axial", "oblique", "helical")

LAMBDA_PARALLEL = 2.0e-3            # mm^2/s
LAMBDA_PERP = 4.0e-4
DWI_S0 = 1000.0


@dataclass(frozen=True)
class PhantomSpec:
    """Declarative description of one synthetic dataset."""

    geometry: str = "box"
    size_mm: Tuple[float, float, float] = (20.0, 10.0, 60.0)
    spacing_mm: float = 1.0
    fiber: str = "axial"
    fiber_angle_deg: float = 0.0
    split_axis: str = "x"
    fractions: Tuple[float, ...] = (1.0,)
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ArgumentError(f"unknown geometry {self.geometry!r}")
        if self.fiber not in FIBER_MODELS:
            raise ArgumentError(f"unknown fiber model {self.fiber!r}")
        size = tuple(float(s) for s in self.size_mm)
        if len(size) != 3 or any(s <= 0 for s in size):
            raise ArgumentError(f"size_mm must be 3 positive floats, got {self.size_mm}")
        if not self.spacing_mm > 0:
            raise ArgumentError(f"spacing_mm must be > 0, got {self.spacing_mm}")
        if not 0.0 <= self.fiber_angle_deg <= 45.0:
            raise ArgumentError(
                f"fiber_angle_deg must be in [0, 45], got {self.fiber_angle_deg}")
        if self.split_axis not in ("x", "y", "z"):
            raise ArgumentError(f"split_axis must be x, y or z, got {self.split_axis}")
        fr = tuple(float(f) for f in self.fractions)
        if not fr or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ArgumentError("fractions must be positive and sum to 1")
        if self.noise < 0:
            raise ArgumentError(f"noise must be >= 0, got {self.noise}")
        object.__setattr__(self, "size_mm", size)
        object.__setattr__(self, "fractions", fr)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(round(s / self.spacing_mm)) for s in self.size_mm)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry, "size_mm": list(self.size_mm),
            "spacing_mm": self.spacing_mm, "fiber": self.fiber,
            "fiber_angle_deg": self.fiber_angle_deg, "split_axis": self.split_axis,
            "fractions": list(self.fractions), "noise": self.noise, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(geometry=d.get("geometry", "box"),
                   size_mm=tuple(d.get("size_mm", (20.0, 10.0, 60.0))),
                   spacing_mm=d.get("spacing_mm", 1.0),
                   fiber=d.get("fiber", "axial"),
                   fiber_angle_deg=d.get("fiber_angle_deg", 0.0),
                   split_axis=d.get("split_axis", "x"),
                   fractions=tuple(d.get("fractions", (1.0,))),
                   noise=d.get("noise", 0.0), seed=d.get("seed", 0))


# ---------------------------------------------------------------------------
# flow movies

@dataclass(frozen=True)
class FlowPhantom:
    frames: Tuple[Image2D, ...]
    truth: DirectionField
    region_labels: np.ndarray         # (nx, ny) int, region id per pixel


def _texture(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0)
    t -= t.min()
    peak = t.max()
    return t / peak if peak > 0 else t


def _shift_image(img: np.ndarray, d: np.ndarray) -> np.ndarray:
    gi, gj = np.meshgrid(np.arange(img.shape[0], dtype=np.float64),
                         np.arange(img.shape[1], dtype=np.float64), indexing="ij")
    return ndimage.map_coordinates(img, [gi - d[0], gj - d[1]],
                                   order=1, mode="reflect")


def make_flow_movie(spec: PhantomSpec, n_frames: int = 8,
                    amplitude_px: float = 1.5,
                    motion: str = "reciprocate",
                    directions_deg: Optional[Sequence[float]] = None,
                    region_labels: Optional[np.ndarray] = None,
                    amplitudes_px: Optional[Sequence[float]] = None) -> FlowPhantom:
    """Textured frame sequence with prescribed per-region motion.

    ``reciprocate`` alternates each region's offset between 0 and its
    amplitude; ``translate`` advances it every frame.  Ground truth is the
    per-frame displacement: unit direction (axis convention) per pixel and
    magnitude in pixels, matching the flow module's field convention; zero
    amplitude gives identical frames and a dead field.  ``region_labels``
    overrides the geometry-derived motion regions with an explicit
    (nx, ny) map of ids 0..R-1.  ``amplitudes_px`` gives each region its
    own amplitude (default ``amplitude_px`` everywhere); a zero-amplitude
    region stays static and its truth field is dead.
    """
    if n_frames < 2:
        raise ArgumentError(f"need >= 2 frames, got {n_frames}")
    if motion not in ("reciprocate", "translate"):
        raise ArgumentError(f"unknown motion {motion!r}")
    if amplitude_px < 0:
        raise ArgumentError(f"amplitude_px must be >= 0, got {amplitude_px}")
    nx, ny, _ = spec.dims
    sp = (spec.spacing_mm, spec.spacing_mm)
    if region_labels is not None:
        region = np.asarray(region_labels, dtype=np.int32)
        if region.shape != (nx, ny) or region.min() < 0:
            raise ArgumentError(f"region_labels must be (nx={nx}, ny={ny}) with "
                                "non-negative ids")
        n_regions = int(region.max()) + 1
    else:
        n_regions = 2 if spec.geometry == "two-region" else 1
        region = np.zeros((nx, ny), dtype=np.int32)
        if n_regions == 2:
            region[nx // 2:, :] = 1
    if directions_deg is None:
        directions_deg = [0.0, 90.0][:n_regions] if n_regions <= 2 else \
            list(np.linspace(0.0, 90.0, n_regions))
    if len(directions_deg) != n_regions:
        raise ArgumentError(f"need {n_regions} region directions")
    if amplitudes_px is None:
        amplitudes = [float(amplitude_px)] * n_regions
    else:
        amplitudes = [float(a) for a in amplitudes_px]
        if len(amplitudes) != n_regions:
            raise ArgumentError(f"need {n_regions} region amplitudes")
        if any(a < 0 for a in amplitudes):
            raise ArgumentError("region amplitudes must be >= 0")
    rng = np.random.default_rng(spec.seed)
    textures = [_texture((nx, ny), rng) for _ in range(n_regions)]
    dirs = [np.array([np.cos(np.radians(a)), np.sin(np.radians(a))])
            for a in directions_deg]

    frames: List[Image2D] = []
    for t in range(n_frames):
        s = (t % 2) if motion == "reciprocate" else t
        canvas = np.zeros((nx, ny))
        for r in range(n_regions):
            shifted = _shift_image(textures[r], s * amplitudes[r] * dirs[r])
            canvas = np.where(region == r, shifted, canvas)
        frames.append(Image2D(data=canvas, spacing=sp))

    unit = np.zeros((nx, ny, 2))
    mag = np.zeros((nx, ny))
    for r in range(n_regions):
        if amplitudes[r] > 0:
            m = region == r
            unit[m] = dirs[r]
            mag[m] = amplitudes[r]
    truth = DirectionField(unit=unit, magnitude=mag, spacing=sp)
    return FlowPhantom(frames=tuple(frames), truth=truth, region_labels=region)


# ---------------------------------------------------------------------------
# registration pairs

@dataclass(frozen=True)
class RegistrationPair:
    us_contour: Contour
    us_points: np.ndarray             # (m, 2) interior grid points
    mri_points: np.ndarray            # (m, 2) = warp(us_points)
    truth_contour: Contour            # warp applied to the contour


def identity_warp() -> Callable[[np.ndarray], np.ndarray]:
    return lambda p: np.asarray(p, dtype=np.float64).copy()


def affine_warp(A: np.ndarray, t: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return lambda p: np.asarray(p, dtype=np.float64) @ A.T + t


def bump_warp(amplitude_mm: float, wavelength_mm: float
              ) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth sinusoidal displacement; diffeomorphic while
    2*pi*amplitude/wavelength < 1."""
    k = 2.0 * np.pi / wavelength_mm

    def w(p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = p.copy()
        out[..., 0] += amplitude_mm * np.sin(k * p[..., 1])
        out[..., 1] += amplitude_mm * np.sin(k * p[..., 0])
        return out

    return w


def _check_diffeomorphic(warp, points: np.ndarray, h: float = 0.25) -> None:
    """Numerical Jacobian determinant > 0 at every sample point."""
    p = np.asarray(points, dtype=np.float64)
    dx = (warp(p + [h, 0]) - warp(p - [h, 0])) / (2 * h)
    dy = (warp(p + [0, h]) - warp(p - [0, h])) / (2 * h)
    det = dx[:, 0] * dy[:, 1] - dx[:, 1] * dy[:, 0]
    if det.min() <= 0:
        raise ArgumentError(
            f"warp is not diffeomorphic on the domain: min Jacobian det "
            f"{det.min():.4g} at point {p[int(np.argmin(det))]}")


def make_registration_pair(spec: PhantomSpec, warp: Callable[[np.ndarray], np.ndarray],
                           n_vertices: int = 64, slice_z: float = 0.0
                           ) -> RegistrationPair:
    """Circular slice region and its warped counterpart, with the exact
    warped contour as ground truth."""
    from .registration import contour_interior_points
    nx, ny, _ = spec.size_mm
    radius = 0.4 * min(nx, ny)
    center = np.array([nx / 2.0, ny / 2.0])
    th = 2 * np.pi * np.arange(n_vertices) / n_vertices
    ring = center + radius * np.column_stack([np.cos(th), np.sin(th)])
    contour = Contour(points=ring, slice_z=slice_z)
    us_points = contour_interior_points(contour, (spec.spacing_mm, spec.spacing_mm))
    _check_diffeomorphic(warp, us_points)
    mri_points = warp(us_points)
    truth = Contour(points=warp(contour.points), slice_z=slice_z)
    return RegistrationPair(us_contour=contour, us_points=us_points,
                            mri_points=mri_points, truth_contour=truth)


# ---------------------------------------------------------------------------
# tensor phantoms

@dataclass(frozen=True)
class TensorPhantom:
    dwi: DwiStack
    tensors: TensorField              # noiseless analytic field
    mask: LabelVolume
    truth: Dict[str, object]


def _split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    counts = [int(round(f * n)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    if any(c <= 0 for c in counts):
        raise ArgumentError(f"cannot split {n} planes into fractions {fractions}")
    return counts


def _fiber_direction_grid(spec: PhantomSpec, dims: Tuple[int, int, int]) -> np.ndarray:
    theta = np.radians(spec.fiber_angle_deg)
    if spec.fiber == "axial":
        e = np.zeros(dims + (3,))
        e[..., 2] = 1.0
        return e
    if spec.fiber == "oblique":
        e = np.zeros(dims + (3,))
        e[..., 0] = np.sin(theta)
        e[..., 2] = np.cos(theta)
        return e
    # helical: tangent circulation about the volume's z axis with a climb
    # angle of fiber_angle_deg from the xy-plane... measured from z
    sp = spec.spacing_mm
    cx = (dims[0] - 1) / 2.0
    cy = (dims[1] - 1) / 2.0
    gi, gj = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), indexing="ij")
    tx = -(gj - cy) * sp
    ty = (gi - cx) * sp
    norm = np.hypot(tx, ty)
    norm[norm == 0] = 1.0
    e = np.zeros(dims + (3,))
    e[..., 0] = (tx / norm)[:, :, None] * np.sin(theta)
    e[..., 1] = (ty / norm)[:, :, None] * np.sin(theta)
    e[..., 2] = np.cos(theta)
    return e


def make_tensor_phantom(spec: PhantomSpec) -> TensorPhantom:
    """Analytic tensor field + mask + closed-form architecture truth."""
    dims = spec.dims
    sp = spec.spacing_mm
    if spec.geometry == "frustum":
        # size is (bottom diameter, top diameter, height); the in-plane grid
        # must hold the larger disk in both axes
        m = max(dims[0], dims[1])
        dims = (m, m, dims[2])
    nx, ny, nz = dims
    Lx, Ly, Lz = (d * sp for d in spec.dims)

    # mask geometry
    data = np.zeros(dims, dtype=np.int32)
    if spec.geometry in ("box", "two-region", "muscle-like-oblique"):
        data[:] = 1
    elif spec.geometry == "cylinder":
        r = min(Lx, Ly) / 2.0
        gi, gj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
        disk = ((gi - cx) * sp) ** 2 + ((gj - cy) * sp) ** 2 <= r * r
        data[disk] = 1
    elif spec.geometry == "frustum":
        r0, r1 = Lx / 2.0, Ly / 2.0      # bottom and top radii
        gi, gj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
        rho2 = ((gi - cx) * sp) ** 2 + ((gj - cy) * sp) ** 2
        for k in range(nz):
            rz = r0 + (r1 - r0) * (k / max(nz - 1, 1))
            data[:, :, k][rho2 <= rz * rz] = 1
    if spec.geometry == "two-region":
        axis = "xyz".index(spec.split_axis)
        counts = _split_counts(dims[axis], spec.fractions)
        edges = np.cumsum([0] + counts)
        sl = [slice(None)] * 3
        for lab in range(len(counts)):
            sl[axis] = slice(edges[lab], edges[lab + 1])
            region = data[tuple(sl)]
            region[region > 0] = lab + 1
    mask = LabelVolume(data=data, spacing=(sp, sp, sp))

    # analytic tensor field
    e = _fiber_direction_grid(spec, dims)
    D = LAMBDA_PERP * np.broadcast_to(np.eye(3), dims + (3, 3)) \
        + (LAMBDA_PARALLEL - LAMBDA_PERP) * e[..., :, None] * e[..., None, :]
    tensors = TensorField(data=matrix_to_six(D), spacing=(sp, sp, sp))

    # forward-simulated DWI
    bvals, bvecs = default_gradient_scheme()
    s0 = np.full(dims, DWI_S0)
    signals = predict_signals(tensors, s0, bvals, bvecs)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        signals = signals + spec.noise * DWI_S0 * rng.standard_normal(signals.shape)
        signals = np.maximum(signals, 1e-6)
    vols = tuple(ScalarVolume(data=signals[..., i], spacing=(sp, sp, sp))
                 for i in range(signals.shape[-1]))
    dwi = DwiStack(volumes=vols, bvals=bvals, bvecs=bvecs)

    # closed-form truth
    theta = np.radians(spec.fiber_angle_deg)
    total_vox = int(np.count_nonzero(data))
    mv = total_vox * sp ** 3
    truth: Dict[str, object] = {"mv_mm3": mv}
    if spec.fiber == "axial":
        fl, pa = Lz, 0.0
        ml = Lz
    elif spec.fiber == "oblique":
        # fibers exit whichever face they reach first
        fl = min(Lx / np.sin(theta) if theta > 0 else np.inf, Lz / np.cos(theta))
        pa = spec.fiber_angle_deg
        ml = Lz * np.cos(theta) + Lx * np.sin(theta)
    else:
        fl, pa, ml = np.nan, np.nan, np.nan
    if np.isfinite(fl):
        truth.update({
            "fl_mm": float(fl), "pa_deg": float(pa), "ml_mm": float(ml),
            "fl_ml": float(fl / ml),
            "pcsa_mm2": float(mv * np.cos(np.radians(pa)) / fl),
        })
    labels = [int(v) for v in np.unique(data) if v != 0]
    mv_by_label = {lab: float(np.count_nonzero(data == lab) * sp ** 3)
                   for lab in labels}
    truth["mv_by_label"] = mv_by_label
    if len(labels) > 1:
        truth["fractions"] = {lab: mv_by_label[lab] / mv for lab in labels}
    return TensorPhantom(dwi=dwi, tensors=tensors, mask=mask, truth=truth)


def slice_contours(spec: PhantomSpec, n_slices: int = 7,
                   n_vertices: int = 96) -> Tuple[List[Contour], float]:
    """Cross-section contours of a cylinder or frustum at evenly spaced
    z positions, plus the analytic solid volume."""
    if spec.geometry not in ("cylinder", "frustum"):
        raise ArgumentError("slice_contours needs a cylinder or frustum geometry")
    if n_slices < 2:
        raise ArgumentError(f"need >= 2 slices, got {n_slices}")
    Lx, Ly, Lz = spec.size_mm
    r0 = Lx / 2.0
    r1 = (Lx / 2.0) if spec.geometry == "cylinder" else Ly / 2.0
    center = (max(r0, r1) + 2.0, max(r0, r1) + 2.0)
    th = 2 * np.pi * np.arange(n_vertices) / n_vertices
    ring = np.column_stack([np.cos(th), np.sin(th)])
    zs = np.linspace(0.0, Lz, n_slices)
    contours = [Contour(points=center + (r0 + (r1 - r0) * z / Lz) * ring, slice_z=z)
                for z in zs]
    volume = np.pi * Lz / 3.0 * (r0 * r0 + r0 * r1 + r1 * r1)
    return contours, float(volume)


# ---------------------------------------------------------------------------
# EMG phantoms

@dataclass(frozen=True)
class EmgPhantom:
    trials: Tuple[object, ...]        # EmgRecording per trial
    truth_center_uv: np.ndarray       # (2,) blob centre in grid frame


def make_emg_phantom(masks: LabelVolume, grid: ElectrodeGrid, label: int,
                     seed: int = 0, n_trials: int = 3, duration_s: float = 5.0,
                     sample_rate: float = 2048.0, sigma_mm: float = 15.0,
                     center_uv: Optional[Sequence[float]] = None) -> EmgPhantom:
    """Synthetic trials whose activation blob sits on the compartment's
    projected centroid (or an explicit override for negative controls)."""
    from .emg import EmgRecording
    if center_uv is None:
        idx = np.argwhere(masks.data == label)
        if len(idx) == 0:
            raise ArgumentError(f"label {label} not present in mask")
        uv = grid.world_to_uv(idx * np.asarray(masks.spacing) + np.asarray(masks.origin))
        center = uv.mean(axis=0)
    else:
        center = np.asarray(center_uv, dtype=np.float64)
    euv = grid.electrode_uv()
    d2 = ((euv - center) ** 2).sum(axis=1)
    amp = 0.05 + np.exp(-d2 / (2.0 * sigma_mm ** 2))

    n = int(round(duration_s * sample_rate))
    sos = signal.butter(2, (30.0, 400.0), btype="bandpass", fs=sample_rate,
                        output="sos")
    trials = []
    for t in range(n_trials):
        rng = np.random.default_rng([seed, t])
        raw = rng.standard_normal((grid.n_electrodes, n))
        shaped = signal.sosfilt(sos, raw, axis=1) * amp[:, None]
        trials.append(EmgRecording(data=shaped, sample_rate=sample_rate,
                                   grid=grid, trial_id=f"trial{t}",
                                   finger=str(label)))
    return EmgPhantom(trials=tuple(trials), truth_center_uv=center)

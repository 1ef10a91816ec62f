"""Surface EMG processing: activation maps, activation centers, compartment
boundary projection onto the electrode plane, and containment scoring.

Per trial the signal is band-pass filtered (20-500 Hz, 4th-order
Butterworth, zero phase), power-line comb filtered (notches at 50 Hz and
all harmonics below Nyquist), trimmed by one second at each end, and
reduced to per-channel RMS.  Channels whose RMS lies beyond mean +- 3 sigma
of all channels in any trial are excluded; remaining channels are averaged
across trials and normalised to a peak of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from .growing import region_to_contour
from .model import (
    ArgumentError,
    Contour,
    DegenerateDataError,
    ElectrodeGrid,
    EmptyRegionError,
    LabelVolume,
    point_in_contour,
    _readonly,
)

BAND_HZ = (20.0, 500.0)
BAND_ORDER = 4
MAINS_HZ = 50.0
NOTCH_Q = 35.0
TRIM_SECONDS = 1.0
OUTLIER_SIGMA = 3.0
DEFAULT_TRIALS = 3
CENTER_THRESHOLD = 0.8
PROJECTION_CELL_MM = 1.0


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class EmgRecording:
    """One multichannel trial: channels x samples, in mV."""

    data: np.ndarray                  # (n_channels, n_samples)
    sample_rate: float
    grid: ElectrodeGrid
    trial_id: str = ""
    finger: str = ""

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ArgumentError(f"EMG data must be (channels, samples), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ArgumentError("EMG data contains non-finite samples")
        if d.shape[0] != self.grid.n_electrodes:
            raise ArgumentError(
                f"{d.shape[0]} channels but grid has {self.grid.n_electrodes} electrodes")
        if not self.sample_rate > 0:
            raise ArgumentError(f"sample_rate must be > 0, got {self.sample_rate}")
        object.__setattr__(self, "data", _readonly(d))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate


@dataclass(frozen=True)
class ActivationMap:
    """Normalised per-electrode RMS on a grid; excluded channels flagged."""

    values: np.ndarray                # (n,) in [0, 1]; 0 where excluded
    excluded: np.ndarray              # (n,) bool
    grid: ElectrodeGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        e = np.asarray(self.excluded, dtype=bool)
        n = self.grid.n_electrodes
        if v.shape != (n,) or e.shape != (n,):
            raise ArgumentError(
                f"values/excluded must be ({n},) to match the grid")
        live = v[~e]
        if len(live) == 0:
            raise DegenerateDataError("all channels excluded")
        if np.any(live < 0) or np.any(live > 1):
            raise ArgumentError("non-excluded values must lie in [0, 1]")
        if abs(live.max() - 1.0) > 1e-12:
            raise ArgumentError("non-excluded values must be normalised to peak 1")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "excluded", _readonly(e))

    def to_dict(self) -> dict:
        from .io import grid_to_dict
        return {
            "values": [None if x else float(val)
                       for x, val in zip(self.excluded, self.values)],
            "grid": grid_to_dict(self.grid),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationMap":
        from .io import grid_from_dict
        raw = d["values"]
        excluded = np.array([x is None for x in raw], dtype=bool)
        values = np.array([0.0 if x is None else float(x) for x in raw])
        return cls(values=values, excluded=excluded, grid=grid_from_dict(d["grid"]))


# ---------------------------------------------------------------------------
# filtering

def _filter_sections(fs: float) -> np.ndarray:
    """Second-order sections for the band-pass plus mains comb cascade."""
    nyq = fs / 2.0
    if BAND_HZ[1] >= nyq:
        raise ArgumentError(
            f"sample rate {fs} Hz too low for the {BAND_HZ[1]} Hz band edge")
    sos = [signal.butter(BAND_ORDER, BAND_HZ, btype="bandpass", fs=fs, output="sos")]
    k = 1
    while MAINS_HZ * k < nyq:
        b, a = signal.iirnotch(MAINS_HZ * k, NOTCH_Q, fs=fs)
        sos.append(signal.tf2sos(b, a))
        k += 1
    return np.vstack(sos)


def filter_chain(data: np.ndarray, fs: float) -> np.ndarray:
    """Zero-phase band-pass + comb filtering along the last axis."""
    return signal.sosfiltfilt(_filter_sections(fs), np.asarray(data, dtype=np.float64),
                              axis=-1)


def _trial_rms(rec: EmgRecording) -> np.ndarray:
    filtered = filter_chain(rec.data, rec.sample_rate)
    trim = int(round(TRIM_SECONDS * rec.sample_rate))
    if filtered.shape[1] <= 2 * trim:
        raise ArgumentError(
            f"trial {rec.trial_id!r} too short: {rec.duration_s:.2f} s leaves "
            f"nothing after trimming {TRIM_SECONDS} s from each end")
    core = filtered[:, trim:filtered.shape[1] - trim]
    return np.sqrt(np.mean(core ** 2, axis=1))


def _same_grid(a: ElectrodeGrid, b: ElectrodeGrid) -> bool:
    return (a.rows, a.cols, a.pitch_mm, a.origin, a.ex, a.ey,
            a.gap_after_row, a.gap_mm) == \
           (b.rows, b.cols, b.pitch_mm, b.origin, b.ex, b.ey,
            b.gap_after_row, b.gap_mm)


def preprocess(recs: Sequence[EmgRecording],
               expected_trials: int = DEFAULT_TRIALS) -> ActivationMap:
    """Trials to one normalised activation map (see module docstring)."""
    recs = list(recs)
    if len(recs) != expected_trials:
        raise ArgumentError(f"expected {expected_trials} trials, got {len(recs)}")
    ref = recs[0]
    for r in recs[1:]:
        if not _same_grid(r.grid, ref.grid):
            raise ArgumentError("trials recorded on different grids")
        if r.sample_rate != ref.sample_rate:
            raise ArgumentError("trials recorded at different sample rates")

    rms = np.stack([_trial_rms(r) for r in recs])          # (trials, channels)
    excluded = np.zeros(ref.n_channels, dtype=bool)
    for t in range(len(recs)):
        mu = rms[t].mean()
        sd = rms[t].std()
        excluded |= np.abs(rms[t] - mu) > OUTLIER_SIGMA * sd
    if excluded.all():
        raise DegenerateDataError("all channels excluded as outliers")

    avg = rms.mean(axis=0)
    peak = avg[~excluded].max()
    if peak <= 0:
        raise DegenerateDataError("all surviving channels are silent")
    values = np.where(excluded, 0.0, avg / peak)
    # float division guard: force the peak channel to exactly 1
    values[~excluded] = np.clip(values[~excluded], 0.0, 1.0)
    return ActivationMap(values=values, excluded=excluded, grid=ref.grid)


# ---------------------------------------------------------------------------
# activation centers

def activation_center(amap: ActivationMap,
                      threshold: float = CENTER_THRESHOLD) -> np.ndarray:
    """RMS-weighted mean (u, v) position of electrodes above threshold."""
    if not threshold >= 0.0:
        raise ArgumentError(f"threshold must be >= 0, got {threshold}")
    use = (~amap.excluded) & (amap.values > threshold)
    if not use.any():
        raise EmptyRegionError(f"no electrode above RMS {threshold}")
    uv = amap.grid.electrode_uv()[use]
    w = amap.values[use]
    return (w[:, None] * uv).sum(axis=0) / w.sum()


# ---------------------------------------------------------------------------
# boundary projection

def project_boundaries(masks: LabelVolume, grid: ElectrodeGrid,
                       cell_mm: float = PROJECTION_CELL_MM) -> List[Contour]:
    """Orthographic projection of each labelled compartment onto the grid
    plane; one outline contour per label, in grid (u, v) mm coordinates."""
    if np.linalg.norm(grid.normal) < 1e-9:
        raise ArgumentError("electrode grid normal is degenerate")
    if not cell_mm > 0:
        raise ArgumentError(f"cell_mm must be > 0, got {cell_mm}")
    labels = masks.labels()
    if len(labels) == 0:
        raise ArgumentError("mask volume has no labelled voxels")
    spacing = np.asarray(masks.spacing)
    origin = np.asarray(masks.origin)
    out: List[Contour] = []
    # cells are marked from projected voxel centres; with the raster cell
    # matched to the mask spacing this is an unbiased centre-sampling of the
    # footprint (any-overlap marking would inflate it by ~half a cell per
    # boundary cell)
    for label in labels:
        idx = np.argwhere(masks.data == label)
        uv = grid.world_to_uv(idx * spacing + origin)
        u0 = np.floor(uv[:, 0].min() / cell_mm) - 1
        v0 = np.floor(uv[:, 1].min() / cell_mm) - 1
        iu = np.rint(uv[:, 0] / cell_mm - u0).astype(np.int64)
        iv = np.rint(uv[:, 1] / cell_mm - v0).astype(np.int64)
        raster = np.zeros((iu.max() + 2, iv.max() + 2), dtype=bool)
        raster[iu, iv] = True
        raster = ndimage.binary_closing(raster, structure=np.ones((3, 3)))
        raster = ndimage.binary_fill_holes(raster)
        comp, n = ndimage.label(raster)
        if n > 1:
            sizes = ndimage.sum_labels(np.ones_like(comp), comp, np.arange(1, n + 1))
            raster = comp == (1 + int(np.argmax(sizes)))
        c = region_to_contour(raster, slice_z=0.0, spacing=(cell_mm, cell_mm),
                              label=int(label))
        shifted = c.points + np.array([u0 * cell_mm, v0 * cell_mm])
        out.append(Contour(points=shifted, slice_z=0.0, label=int(label)))
    return out


# ---------------------------------------------------------------------------
# containment

def containment_accuracy(
        centers: Sequence[Tuple[Hashable, np.ndarray]],
        contours: Mapping[Hashable, Contour],
) -> Tuple[float, List[bool]]:
    """Fraction of activation centers falling inside their compartment's
    projected contour, plus the per-center flags in input order."""
    centers = list(centers)
    if not centers:
        raise ArgumentError("no centers to score")
    flags: List[bool] = []
    for key, pt in centers:
        if key not in contours:
            raise ArgumentError(f"no projected contour for label {key!r}")
        flags.append(point_in_contour(np.asarray(pt, dtype=np.float64),
                                      contours[key]))
    return sum(flags) / len(flags), flags

"""Architectural parameters from masks and streamlines.

Six parameters per region: muscle volume, fiber length, muscle length,
FL/ML ratio, pennation angle, and physiological cross-sectional area
``PCSA = MV * cos(PA) / FL``.  Aggregates use medians across streamlines.
Comparisons between measurement variants are summarised by Bland-Altman
statistics with a proportional-bias regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .model import (
    ArgumentError,
    DegenerateDataError,
    LabelVolume,
    Streamline,
    _readonly,
)

MIN_RECOMMENDED_TRACKS = 3000

DEFAULT_RANGES: Dict[str, Tuple[float, float]] = {
    "PA": (0.0, 10.0),
    "FL_ML": (0.2, 0.6),
}


# ---------------------------------------------------------------------------
# report types

@dataclass(frozen=True)
class ArchitectureReport:
    """Per-region architecture summary.

    ``ml_mm``/``fl_ml`` are present only for whole-muscle reports;
    ``volume_fraction`` only for compartment reports.
    """

    mv_mm3: float
    fl_mm: float                      # median fiber length
    pa_deg: float                     # median pennation angle
    pcsa_mm2: float
    line_of_action: np.ndarray        # unit 3-vector
    fl_per_track: np.ndarray
    pa_per_track: np.ndarray
    ml_mm: Optional[float] = None
    fl_ml: Optional[float] = None
    volume_fraction: Optional[float] = None
    n_tracks: int = 0
    label: int = 0

    def __post_init__(self):
        loa = np.asarray(self.line_of_action, dtype=np.float64)
        if loa.shape != (3,) or abs(np.linalg.norm(loa) - 1.0) > 1e-9:
            raise ArgumentError("line_of_action must be a unit 3-vector")
        if not self.mv_mm3 > 0:
            raise ArgumentError(f"MV must be > 0, got {self.mv_mm3}")
        if not self.fl_mm > 0:
            raise ArgumentError(f"FL must be > 0, got {self.fl_mm}")
        if not 0.0 <= self.pa_deg < 90.0:
            raise ArgumentError(f"PA must be in [0, 90), got {self.pa_deg}")
        if not self.pcsa_mm2 > 0:
            raise ArgumentError(f"PCSA must be > 0, got {self.pcsa_mm2}")
        if self.fl_ml is not None and not self.fl_ml > 0:
            raise ArgumentError(f"FL/ML must be > 0, got {self.fl_ml}")
        if self.volume_fraction is not None and not 0.0 < self.volume_fraction <= 1.0:
            raise ArgumentError(
                f"volume_fraction must be in (0, 1], got {self.volume_fraction}")
        object.__setattr__(self, "line_of_action", _readonly(loa))
        object.__setattr__(self, "fl_per_track",
                           _readonly(np.asarray(self.fl_per_track, dtype=np.float64)))
        object.__setattr__(self, "pa_per_track",
                           _readonly(np.asarray(self.pa_per_track, dtype=np.float64)))

    def to_dict(self) -> dict:
        d = {
            "label": int(self.label),
            "n_tracks": int(self.n_tracks),
            "mv_mm3": float(self.mv_mm3),
            "fl_mm": float(self.fl_mm),
            "pa_deg": float(self.pa_deg),
            "pcsa_mm2": float(self.pcsa_mm2),
            "line_of_action": [float(x) for x in self.line_of_action],
            "fl_per_track": [float(x) for x in self.fl_per_track],
            "pa_per_track": [float(x) for x in self.pa_per_track],
        }
        if self.ml_mm is not None:
            d["ml_mm"] = float(self.ml_mm)
        if self.fl_ml is not None:
            d["fl_ml"] = float(self.fl_ml)
        if self.volume_fraction is not None:
            d["volume_fraction"] = float(self.volume_fraction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureReport":
        return cls(
            mv_mm3=d["mv_mm3"], fl_mm=d["fl_mm"], pa_deg=d["pa_deg"],
            pcsa_mm2=d["pcsa_mm2"],
            line_of_action=np.asarray(d["line_of_action"]),
            fl_per_track=np.asarray(d["fl_per_track"]),
            pa_per_track=np.asarray(d["pa_per_track"]),
            ml_mm=d.get("ml_mm"), fl_ml=d.get("fl_ml"),
            volume_fraction=d.get("volume_fraction"),
            n_tracks=d.get("n_tracks", 0), label=d.get("label", 0),
        )


@dataclass(frozen=True)
class BlandAltmanSummary:
    """Agreement summary for paired measurements (a = segmented,
    b = non-segmented; diff = a - b)."""

    mean_diff: float
    loa_low: float                    # mean_diff - 1.96 sd
    loa_high: float                   # mean_diff + 1.96 sd
    points: np.ndarray                # (n, 2): (pair mean, pair diff)
    slope: float
    slope_p: float
    proportional_bias: bool

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ArgumentError("points must be (n, 2) (mean, diff) rows")
        lo, hi = self.loa_low, self.loa_high
        if abs((hi - self.mean_diff) - (self.mean_diff - lo)) > 1e-9 * max(1.0, abs(hi - lo)):
            raise ArgumentError("limits of agreement must be symmetric about mean_diff")
        object.__setattr__(self, "points", _readonly(pts))

    def to_dict(self) -> dict:
        return {
            "mean_diff": float(self.mean_diff),
            "loa_low": float(self.loa_low),
            "loa_high": float(self.loa_high),
            "points": [[float(a), float(b)] for a, b in self.points],
            "slope": float(self.slope),
            "slope_p": float(self.slope_p),
            "proportional_bias": bool(self.proportional_bias),
        }


# ---------------------------------------------------------------------------
# individual parameters

def muscle_volume(mask: LabelVolume, label: int) -> float:
    """Voxel count of the label times voxel volume, in mm^3."""
    count = int(np.count_nonzero(mask.data == label))
    if count == 0:
        raise ArgumentError(f"label {label} not present in mask")
    return count * mask.voxel_volume()


def fiber_length(s: Streamline) -> float:
    """Polyline arc length in mm."""
    return s.length()


def line_of_action(tracks: Sequence[Streamline]) -> Tuple[np.ndarray, float]:
    """Average streamline direction and muscle length along it.

    Direction is the normalised mean of per-track end-to-end unit vectors,
    each first sign-aligned to +z; ML is the extent of all track points
    projected onto the direction.
    """
    tracks = list(tracks)
    if not tracks:
        raise ArgumentError("line_of_action needs at least one track")
    units = []
    for t in tracks:
        c = t.chord()
        n = np.linalg.norm(c)
        if n == 0:
            raise DegenerateDataError("track with zero-length chord")
        u = c / n
        if u[2] < 0:
            u = -u
        units.append(u)
    mean = np.mean(units, axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateDataError("track directions cancel; no line of action")
    loa = mean / norm
    proj = np.concatenate([t.points @ loa for t in tracks])
    ml = float(proj.max() - proj.min())
    return loa, ml


def pennation_angle(s: Streamline, loa: np.ndarray) -> float:
    """Angle in degrees between the track's end-to-end chord and the line
    of action, folded to [0, 90]."""
    loa = np.asarray(loa, dtype=np.float64)
    if loa.shape != (3,) or abs(np.linalg.norm(loa) - 1.0) > 1e-6:
        raise ArgumentError("loa must be a unit 3-vector")
    c = s.chord()
    n = np.linalg.norm(c)
    if n == 0:
        raise DegenerateDataError("zero-length chord has no direction")
    cosang = abs(float(c @ loa)) / n
    return float(np.degrees(np.arccos(min(1.0, cosang))))


def pcsa(mv_mm3: float, pa_deg: float, fl_mm: float) -> float:
    """Physiological cross-sectional area: MV * cos(PA) / FL."""
    if not fl_mm > 0:
        raise ArgumentError(f"FL must be > 0, got {fl_mm}")
    return mv_mm3 * np.cos(np.radians(pa_deg)) / fl_mm


# ---------------------------------------------------------------------------
# aggregation

def measure(mask: LabelVolume, label: int, tracks: Sequence[Streamline],
            whole_muscle: Optional[bool] = None) -> ArchitectureReport:
    """Full architecture report for one labelled region.

    ``whole_muscle=None`` infers the kind from the mask: a single labelled
    region is a whole muscle (gets ML and FL/ML), several regions make this
    label a compartment (gets its volume fraction of all compartments).
    """
    tracks = list(tracks)
    if not tracks:
        raise ArgumentError("measure needs at least one track")
    if len(tracks) < MIN_RECOMMENDED_TRACKS:
        warnings.warn(
            f"only {len(tracks)} tracks for label {label}; "
            f"{MIN_RECOMMENDED_TRACKS} recommended per measurement",
            stacklevel=2)
    all_labels = [int(v) for v in mask.labels()]
    if label not in all_labels:
        raise ArgumentError(f"label {label} not present in mask")
    if whole_muscle is None:
        whole_muscle = len(all_labels) == 1

    mv = muscle_volume(mask, label)
    loa, ml = line_of_action(tracks)
    fl = np.array([fiber_length(t) for t in tracks])
    pa = np.array([pennation_angle(t, loa) for t in tracks])
    fl_med = float(np.median(fl))
    pa_med = float(np.median(pa))

    kwargs: dict = {}
    if whole_muscle:
        kwargs["ml_mm"] = ml
        kwargs["fl_ml"] = fl_med / ml
    else:
        total = sum(muscle_volume(mask, lb) for lb in all_labels)
        kwargs["volume_fraction"] = mv / total
    return ArchitectureReport(
        mv_mm3=mv, fl_mm=fl_med, pa_deg=pa_med,
        pcsa_mm2=pcsa(mv, pa_med, fl_med),
        line_of_action=loa, fl_per_track=fl, pa_per_track=pa,
        n_tracks=len(tracks), label=label, **kwargs)


def bland_altman(pairs: Sequence[Tuple[float, float]]) -> BlandAltmanSummary:
    """Bland-Altman agreement for (segmented, non-segmented) value pairs."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ArgumentError("bland_altman needs >= 3 (a, b) pairs")
    means = arr.mean(axis=1)
    diffs = arr[:, 0] - arr[:, 1]
    md = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if np.ptp(means) < 1e-300:
        slope, p = 0.0, 1.0
    else:
        res = stats.linregress(means, diffs)
        slope, p = float(res.slope), float(res.pvalue)
        if np.isnan(p):            # zero-variance residuals
            p = 1.0
    return BlandAltmanSummary(
        mean_diff=md, loa_low=md - 1.96 * sd, loa_high=md + 1.96 * sd,
        points=np.column_stack([means, diffs]),
        slope=slope, slope_p=p, proportional_bias=bool(p < 0.05))


def range_check(report: ArchitectureReport,
                ranges: Optional[Dict[str, Tuple[float, float]]] = None
                ) -> Dict[str, bool]:
    """Descriptive physiological-range flags for the report's properties.

    Only properties present in the report and named in ``ranges`` appear in
    the result.
    """
    if ranges is None:
        ranges = DEFAULT_RANGES
    values: Dict[str, Optional[float]] = {
        "PA": report.pa_deg,
        "FL_ML": report.fl_ml,
        "FL": report.fl_mm,
        "ML": report.ml_mm,
        "MV": report.mv_mm3,
        "PCSA": report.pcsa_mm2,
    }
    out: Dict[str, bool] = {}
    for name, (lo, hi) in ranges.items():
        v = values.get(name)
        if v is not None:
            out[name] = bool(lo <= v <= hi)
    return out

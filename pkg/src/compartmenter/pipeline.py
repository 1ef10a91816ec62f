"""Manifest-driven pipeline orchestration.

A run manifest names every input artifact, the slice pairing table, and
per-stage parameter blocks.  ``run_pipeline`` executes the stage graph

    flow -> grow -> sample/match/map -> loft -> resample -> (tensor-fit)
    -> track -> sample-streamlines -> measure -> emg-map/emg-center
    -> project -> validate

writing one artifact set and one JSON log (parameters, input/output
checksums, wall time) per stage.  A stage whose parameters, input
checksums, and outputs all match its previous log is skipped.  Artifact
content is a pure function of manifest + inputs: identical inputs give
byte-identical artifacts regardless of caching, run count, or worker
count (slice/compartment parallelism collects results in index order).
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import FORMAT_VERSION, __version__
from .architecture import measure
from .emg import EmgRecording, activation_center, preprocess, project_boundaries
from .flow import FlowParams, aggregate_direction
from .growing import GrowParams, grow_region, region_to_contour
from .model import (
    ArgumentError,
    CompartmenterError,
    Contour,
    LabelVolume,
    SampledSet,
    contour_area,
    points_in_contour,
    resample_volume,
)
from .registration import (
    contour_interior_points,
    farthest_point_sample,
    loft_masks,
    map_contour,
    min_weight_match,
)
from .tractography import (
    DwiStack,
    TensorField,
    TrackParams,
    farthest_streamline_sample,
    filter_smooth,
    fit_tensor,
    track,
)
from .model import Matching
from . import io

STAGE_ORDER = (
    "flow", "grow", "sample", "match", "map", "loft", "resample",
    "tensor-fit", "track", "sample-streamlines", "measure",
    "emg-map", "emg-center", "project", "validate",
)

# which stage consumes each manifest input, for error messages
_INPUT_STAGE = {
    "frames": "flow", "fds_contours": "grow", "seeds": "grow",
    "mri_contours": "sample", "geometry": "loft", "dwi": "tensor-fit",
    "tensors": "tensor-fit", "grid": "emg-map", "emg_trials": "emg-map",
}


class StageFailure(CompartmenterError):
    """A stage raised; carries the stage name for the report bundle."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


def _params(cls, block: dict, stage: str):
    try:
        return cls(**block)
    except TypeError as e:
        raise ArgumentError(f"bad {stage} parameters: {e}") from None


@dataclass
class RunManifest:
    """Validated description of one pipeline run."""

    subject: str
    out_dir: str
    slice_pairs: List[Tuple[float, float]]      # (us_z, mri_z), monotone
    inputs: Dict[str, object]
    params: Dict[str, dict] = dataclass_field(default_factory=dict)
    truth: Dict[str, object] = dataclass_field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str) -> "RunManifest":
        d = io.read_json(path)
        base = os.path.dirname(os.path.abspath(path))

        def absolutize(v):
            if isinstance(v, str):
                return v if os.path.isabs(v) else os.path.join(base, v)
            if isinstance(v, list):
                return [absolutize(x) for x in v]
            if isinstance(v, dict):
                return {k: absolutize(x) for k, x in v.items()}
            return v

        try:
            m = cls(
                subject=str(d["subject"]),
                out_dir=absolutize(d["out_dir"]),
                slice_pairs=[(float(a), float(b)) for a, b in d["slice_pairs"]],
                inputs=absolutize(d.get("inputs", {})),
                params=d.get("params", {}),
                truth=absolutize(d.get("truth", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArgumentError(f"malformed manifest {path}: {e}") from None
        m.validate()
        return m

    def validate(self) -> None:
        if not self.slice_pairs:
            raise ArgumentError("manifest needs at least one slice pair")
        us = [p[0] for p in self.slice_pairs]
        mri = [p[1] for p in self.slice_pairs]
        if any(b <= a for a, b in zip(us, us[1:])) or \
                any(b <= a for a, b in zip(mri, mri[1:])):
            raise ArgumentError("slice pairing table must be strictly "
                                "monotone in z on both sides")
        for key in ("frames", "fds_contours", "seeds", "mri_contours", "geometry"):
            if key not in self.inputs:
                raise ArgumentError(
                    f"{_INPUT_STAGE[key]} stage input missing from manifest: {key}")
        frames = self.inputs["frames"]
        if not isinstance(frames, list) or len(frames) != len(self.slice_pairs):
            raise ArgumentError("flow stage needs one frames directory per "
                                "slice pair")
        self._check_paths()

    def _check_paths(self) -> None:
        def check(stage: str, path):
            if not os.path.exists(path):
                raise ArgumentError(f"{stage} stage input missing: {path}")

        for p in self.inputs["frames"]:
            check("flow", p)
        for key in ("fds_contours", "seeds", "mri_contours", "geometry"):
            check(_INPUT_STAGE[key], self.inputs[key])
        for key in ("dwi", "tensors", "grid"):
            if key in self.inputs:
                check(_INPUT_STAGE[key], self.inputs[key])
        for paths in self.inputs.get("emg_trials", {}).values():
            for p in paths:
                check("emg-map", p)
        for p in self.truth.get("regions", []):
            check("validate", p)

    @property
    def has_tracking(self) -> bool:
        return "dwi" in self.inputs or "tensors" in self.inputs

    @property
    def has_emg(self) -> bool:
        return "grid" in self.inputs and bool(self.inputs.get("emg_trials"))

    def block(self, name: str) -> dict:
        return dict(self.params.get(name, {}))


# ---------------------------------------------------------------------------
# helpers

def _contour_mask(contour: Contour, dims: Tuple[int, int],
                  spacing: Tuple[float, float]) -> np.ndarray:
    """Rasterise a contour on the pixel-centre grid of a 2D field."""
    gi, gj = np.meshgrid(np.arange(dims[0]) * spacing[0],
                         np.arange(dims[1]) * spacing[1], indexing="ij")
    pts = np.column_stack([gi.ravel(), gj.ravel()])
    return points_in_contour(pts, contour).reshape(dims)


def _contour_at(contours: Sequence[Contour], z: float, what: str,
                stage: str) -> List[Contour]:
    hit = [c for c in contours if abs(c.slice_z - z) < 1e-6]
    if not hit:
        raise ArgumentError(f"{stage} stage: no {what} contour at z={z}")
    return hit


def _set_to_dict(s: SampledSet) -> dict:
    return {"source": s.source, "slice_z": s.slice_z,
            "points": s.points.tolist()}


def _set_from_dict(d: dict) -> SampledSet:
    return SampledSet(points=np.asarray(d["points"]), source=d["source"],
                      slice_z=float(d["slice_z"]))


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom


def _expand_vvol(paths: Sequence[str]) -> List[str]:
    """Expand VVOL base paths to header + payload so checksums cover both."""
    out: List[str] = []
    for p in paths:
        if p.endswith(".vvol") or p.endswith(".vvol.json") or \
                p.endswith(".vvol.bin"):
            out.extend(io._vvol_paths(p))
        else:
            out.append(p)
    return out


def read_dwi_manifest(path: str) -> DwiStack:
    d = io.read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    vols = tuple(io.read_scalar_volume(os.path.join(base, p))
                 for p in d["volumes"])
    return DwiStack(volumes=vols, bvals=np.asarray(d["bvals"], dtype=np.float64),
                    bvecs=np.asarray(d["bvecs"], dtype=np.float64))


def _read_geometry(path: str) -> Tuple[Tuple[int, ...], Tuple[float, ...],
                                       Tuple[float, ...]]:
    g = io.read_json(path)
    try:
        dims = tuple(int(v) for v in g["dims"])
        spacing = tuple(float(v) for v in g["spacing_mm"])
        origin = tuple(float(v) for v in g.get("origin_mm", (0.0, 0.0, 0.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise ArgumentError(f"malformed geometry file {path}: {e}") from None
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise ArgumentError(f"geometry file {path} must give 3D dims/spacing/origin")
    return dims, spacing, origin


def read_frames_dir(path: str):
    man = io.read_json(os.path.join(path, "manifest.json"))
    return [io.read_image2d(os.path.join(path, f)) for f in man["frames"]]


# ---------------------------------------------------------------------------
# the run itself

class PipelineRun:
    def __init__(self, manifest: RunManifest, workers: int = 1,
                 force_stages: Sequence[str] = ()):
        if workers < 1:
            raise ArgumentError(f"workers must be >= 1, got {workers}")
        for s in force_stages:
            if s not in STAGE_ORDER:
                raise ArgumentError(f"unknown stage {s!r}; stages are "
                                    f"{', '.join(STAGE_ORDER)}")
        self.m = manifest
        self.workers = int(workers)
        self.force = set(force_stages)
        self.out = manifest.out_dir
        self.stage_results: Dict[str, dict] = {}
        self.metrics: Dict[str, object] = {}

    # -- infrastructure ----------------------------------------------------

    def _path(self, rel: str) -> str:
        p = os.path.join(self.out, rel)
        io.ensure_dir(os.path.dirname(p))
        return p

    def _pmap(self, fn: Callable, items: Sequence) -> List:
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _stage(self, name: str, params: dict, input_paths: Sequence[str],
               output_rels: Sequence[str], fn: Callable[[], None]) -> None:
        in_sums = {os.path.relpath(p, self.out) if p.startswith(self.out) else p:
                   io.sha256_file(p)
                   for p in sorted(set(_expand_vvol(input_paths)))}
        log_path = self._path(os.path.join("logs", f"{name}.json"))
        outputs = [self._path(r) for r in output_rels]

        if name not in self.force and os.path.exists(log_path):
            prev = io.read_json(log_path)
            if prev.get("inputs") == in_sums and prev.get("params") == params \
                    and all(os.path.exists(p) for p in outputs):
                cur = {r: io.sha256_file(self._path(r)) for r in output_rels}
                if prev.get("outputs") == cur:
                    self.stage_results[name] = {"skipped": True, "outputs": cur}
                    return

        t0 = time.perf_counter()
        try:
            fn()
        except Exception as e:
            raise StageFailure(name, e) from e
        wall = time.perf_counter() - t0
        out_sums = {r: io.sha256_file(self._path(r)) for r in output_rels}
        io.write_json(log_path, {
            "stage": name, "params": params, "inputs": in_sums,
            "outputs": out_sums, "wall_time_s": wall, "skipped": False,
        })
        self.stage_results[name] = {"skipped": False, "outputs": out_sums}

    def _not_configured(self, name: str) -> None:
        self.stage_results[name] = {"skipped": True, "outputs": {},
                                    "configured": False}

    # -- stage bodies ------------------------------------------------------

    def run(self) -> dict:
        io.ensure_dir(self.out)
        m = self.m
        n_slices = len(m.slice_pairs)

        field_rels = [f"fields/slice_{i}.vvol" for i in range(n_slices)]
        us_contour_rels = [f"us_contours/slice_{i}.json" for i in range(n_slices)]
        sample_rels = [f"samples/us_{i}.json" for i in range(n_slices)] + \
                      [f"samples/mri_{i}.json" for i in range(n_slices)]
        match_rels = [f"matchings/slice_{i}.json" for i in range(n_slices)]
        mapped_rels = [f"mapped/slice_{i}.json" for i in range(n_slices)]

        # ---- flow
        flow_block = m.block("flow")
        stride = int(flow_block.pop("stride", 10))
        fp = _params(FlowParams, flow_block, "flow")

        def do_flow():
            def one(i):
                frames = read_frames_dir(m.inputs["frames"][i])
                return aggregate_direction(frames, fp, stride=stride)

            fields = self._pmap(one, range(n_slices))
            for rel, f in zip(field_rels, fields):
                io.write_direction_field(self._path(rel), f)

        frame_inputs = [os.path.join(d, "manifest.json")
                        for d in m.inputs["frames"]]
        for d in m.inputs["frames"]:
            man = io.read_json(os.path.join(d, "manifest.json"))
            frame_inputs += [os.path.join(d, f) for f in man["frames"]]
        self._stage("flow", {**m.block("flow")}, frame_inputs,
                    [r + ".json" for r in field_rels] +
                    [r + ".bin" for r in field_rels], do_flow)

        # ---- grow
        grow_block = m.block("grow")
        seeds_all = io.read_json(m.inputs["seeds"])
        fds_contours = io.read_contours(m.inputs["fds_contours"])

        def do_grow():
            def one(i):
                us_z = m.slice_pairs[i][0]
                field = io.read_direction_field(self._path(field_rels[i]))
                fds = _contour_at(fds_contours, us_z, "FDS", "grow")[0]
                mask = _contour_mask(fds, field.dims, field.spacing)
                gp = _params(GrowParams, {
                    "muscle_area_mm2": contour_area(fds), **grow_block}, "grow")
                slice_seeds = seeds_all.get(str(i))
                if not slice_seeds:
                    raise ArgumentError(f"grow stage: no seeds for slice {i}")
                contours = []
                for label in sorted(slice_seeds, key=int):
                    region = grow_region(field, mask, slice_seeds[label], gp)
                    contours.append(region_to_contour(
                        region, us_z, field.spacing, int(label)))
                return contours

            per_slice = self._pmap(one, range(n_slices))
            for rel, contours in zip(us_contour_rels, per_slice):
                io.write_contours(self._path(rel), contours)

        self._stage("grow", grow_block,
                    [m.inputs["seeds"], m.inputs["fds_contours"]] +
                    [self._path(r) for r in field_rels],
                    us_contour_rels, do_grow)

        # ---- sample
        match_block = m.block("match")
        n_samples = int(match_block.pop("n", 1000))
        grid_mm = float(match_block.pop("grid_mm", 1.0))
        mri_contours = io.read_contours(m.inputs["mri_contours"])

        def do_sample():
            def one(i):
                us_z, mri_z = m.slice_pairs[i]
                fds = _contour_at(fds_contours, us_z, "FDS", "sample")[0]
                mri = _contour_at(mri_contours, mri_z, "MRI", "sample")[0]
                uc = contour_interior_points(fds, (grid_mm, grid_mm))
                vc = contour_interior_points(mri, (grid_mm, grid_mm))
                n = min(n_samples, len(uc), len(vc))
                return (farthest_point_sample(uc, n, "ultrasound", us_z),
                        farthest_point_sample(vc, n, "mri", mri_z))

            pairs = self._pmap(one, range(n_slices))
            for i, (u, v) in enumerate(pairs):
                io.write_json(self._path(sample_rels[i]), _set_to_dict(u))
                io.write_json(self._path(sample_rels[n_slices + i]),
                              _set_to_dict(v))

        self._stage("sample", {"n": n_samples, "grid_mm": grid_mm},
                    [m.inputs["fds_contours"], m.inputs["mri_contours"]],
                    sample_rels, do_sample)

        # ---- match
        mode = str(match_block.pop("mode", "sparse-knn"))
        knn = int(match_block.pop("k", 32))

        def do_match():
            def one(i):
                u = _set_from_dict(io.read_json(self._path(sample_rels[i])))
                v = _set_from_dict(io.read_json(
                    self._path(sample_rels[n_slices + i])))
                return min_weight_match(u, v, mode=mode, k=knn)

            matchings = self._pmap(one, range(n_slices))
            for rel, mt in zip(match_rels, matchings):
                io.write_json(self._path(rel), {
                    "pairs": mt.pairs.tolist(), "total_cost": mt.total_cost,
                    "u_set": _set_to_dict(mt.u_set),
                    "v_set": _set_to_dict(mt.v_set),
                })

        self._stage("match", {"mode": mode, "k": knn},
                    [self._path(r) for r in sample_rels], match_rels, do_match)

        # ---- map
        def do_map():
            def one(i):
                d = io.read_json(self._path(match_rels[i]))
                mt = Matching(pairs=np.asarray(d["pairs"], dtype=np.int64),
                              total_cost=d["total_cost"],
                              u_set=_set_from_dict(d["u_set"]),
                              v_set=_set_from_dict(d["v_set"]))
                grown = io.read_contours(self._path(us_contour_rels[i]))
                return [map_contour(mt, None, c) for c in grown]

            per_slice = self._pmap(one, range(n_slices))
            for rel, contours in zip(mapped_rels, per_slice):
                io.write_contours(self._path(rel), contours)

        self._stage("map", {},
                    [self._path(r) for r in match_rels + us_contour_rels],
                    mapped_rels, do_map)

        # ---- loft
        dims, spacing, origin = _read_geometry(m.inputs["geometry"])

        def do_loft():
            contours = []
            for rel in mapped_rels:
                contours += io.read_contours(self._path(rel))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                vol = loft_masks(contours, dims, spacing, origin)
            io.write_label_volume(self._path("volumes/compartments.vvol"), vol)

        self._stage("loft", {"dims": list(dims), "spacing": list(spacing),
                             "origin": list(origin)},
                    [m.inputs["geometry"]] + [self._path(r) for r in mapped_rels],
                    ["volumes/compartments.vvol.json",
                     "volumes/compartments.vvol.bin"], do_loft)

        # ---- resample
        res_block = m.block("resample")
        target = res_block.get("spacing_mm", list(spacing))
        if np.isscalar(target):
            target = [float(target)] * 3

        def do_resample():
            vol = io.read_label_volume(self._path("volumes/compartments.vvol"))
            out = resample_volume(vol, tuple(target))
            io.write_label_volume(
                self._path("volumes/compartments_grid.vvol"), out)

        self._stage("resample", {"spacing_mm": [float(t) for t in target]},
                    [self._path("volumes/compartments.vvol")],
                    ["volumes/compartments_grid.vvol.json",
                     "volumes/compartments_grid.vvol.bin"], do_resample)

        # ---- tensor-fit and tracking chain
        if m.has_tracking:
            self._tracking_stages()
        else:
            for s in ("tensor-fit", "track", "sample-streamlines", "measure"):
                self._not_configured(s)

        # ---- EMG chain
        if m.has_emg:
            self._emg_stages()
        else:
            for s in ("emg-map", "emg-center", "project"):
                self._not_configured(s)

        # ---- validate
        self._validate_stage()
        return self._bundle()

    # -- tracking ----------------------------------------------------------

    def _tensors_path(self) -> str:
        if "tensors" in self.m.inputs:
            return self.m.inputs["tensors"]
        return self._path("tensors/tensors.vvol")

    def _tracking_stages(self) -> None:
        m = self.m
        if "tensors" in m.inputs:
            self.stage_results["tensor-fit"] = {
                "skipped": True, "outputs": {}, "external": True}
        else:
            def do_fit():
                dwi = read_dwi_manifest(m.inputs["dwi"])
                tensors = fit_tensor(dwi)
                io.write_tensor_field(self._path("tensors/tensors.vvol"),
                                      tensors.data, tensors.spacing,
                                      tensors.origin)

            self._stage("tensor-fit", {}, [m.inputs["dwi"]],
                        ["tensors/tensors.vvol.json",
                         "tensors/tensors.vvol.bin"], do_fit)

        tp = _params(TrackParams, m.block("track"), "track")
        comp_path = self._path("volumes/compartments_grid.vvol")
        comps = io.read_label_volume(comp_path)
        labels = sorted(int(v) for v in np.unique(comps.data) if v != 0)
        names = [str(lab) for lab in labels] + ["whole"]
        track_rels = [f"tracks/{n}.csv" for n in names]
        sampled_rels = [f"tracks_sampled/{n}.csv" for n in names]
        report_rels = [f"reports/{n}.json" for n in names]

        def mask_for(name: str) -> Tuple[LabelVolume, int]:
            if name == "whole":
                merged = (comps.data > 0).astype(np.int32)
                return LabelVolume(data=merged, spacing=comps.spacing,
                                   origin=comps.origin), 1
            return comps, int(name)

        def do_track():
            comps6, sp6, or6 = io.read_tensor_field(self._tensors_path())
            tensors = TensorField(data=comps6, spacing=sp6, origin=or6)

            def one(name):
                mask, label = mask_for(name)
                return filter_smooth(track(tensors, mask, label, tp), tp)

            results = self._pmap(one, names)
            for rel, tracks in zip(track_rels, results):
                io.write_streamlines(self._path(rel), tracks)

        self._stage("track", m.block("track"),
                    [self._tensors_path(), comp_path], track_rels, do_track)

        def do_sample_streamlines():
            def one(rel):
                tracks = io.read_streamlines(self._path(rel))
                if len(tracks) <= tp.target_count:
                    return tracks
                return farthest_streamline_sample(tracks, tp.target_count)

            results = self._pmap(one, track_rels)
            for rel, tracks in zip(sampled_rels, results):
                io.write_streamlines(self._path(rel), tracks)

        self._stage("sample-streamlines", {"target_count": tp.target_count},
                    [self._path(r) for r in track_rels], sampled_rels,
                    do_sample_streamlines)

        def do_measure():
            def one(name):
                mask, label = mask_for(name)
                tracks = io.read_streamlines(
                    self._path(f"tracks_sampled/{name}.csv"))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    return measure(mask, label, tracks,
                                   whole_muscle=(name == "whole"))

            reports = self._pmap(one, names)
            for rel, rep in zip(report_rels, reports):
                io.write_json(self._path(rel), rep.to_dict())

        self._stage("measure", {},
                    [self._path(r) for r in sampled_rels] + [comp_path],
                    report_rels, do_measure)

        reports = {n: io.read_json(self._path(f"reports/{n}.json"))
                   for n in names}
        self.metrics["reports"] = reports
        med = {n: float(np.median(r["fl_per_track"]))
               for n, r in reports.items() if r.get("fl_per_track")}
        if "whole" in med and len(med) > 1:
            comp_meds = [v for n, v in med.items() if n != "whole"]
            self.metrics["fl_median_mm"] = med
            self.metrics["fl_reduction_pct"] = float(
                100.0 * (med["whole"] - float(np.mean(comp_meds)))
                / med["whole"]) if med["whole"] > 0 else 0.0

    # -- EMG ---------------------------------------------------------------

    def _emg_stages(self) -> None:
        m = self.m
        emg_block = m.block("emg")
        fs = float(emg_block.get("sample_rate", 2048.0))
        threshold = float(emg_block.get("threshold", 0.8))
        expected = int(emg_block.get("expected_trials", 3))
        cell_mm = float(emg_block.get("cell_mm", 1.0))
        grid = io.read_grid(m.inputs["grid"])
        fingers = sorted(m.inputs["emg_trials"])
        trial_paths = [p for f in fingers for p in m.inputs["emg_trials"][f]]

        def do_maps():
            def one(finger):
                recs = []
                for p in m.inputs["emg_trials"][finger]:
                    data, _ids = io.read_emg_trial(p)
                    recs.append(EmgRecording(data=data.T, sample_rate=fs,
                                             grid=grid, trial_id=p,
                                             finger=finger))
                return preprocess(recs, expected_trials=expected)

            maps = self._pmap(one, fingers)
            for finger, amap in zip(fingers, maps):
                io.write_json(self._path(f"emg/map_{finger}.json"),
                              amap.to_dict())

        map_rels = [f"emg/map_{f}.json" for f in fingers]
        center_rels = [f"emg/center_{f}.json" for f in fingers]
        self._stage("emg-map", {"sample_rate": fs, "expected_trials": expected},
                    [m.inputs["grid"]] + trial_paths, map_rels, do_maps)

        def do_centers():
            from .emg import ActivationMap
            for finger, rel in zip(fingers, map_rels):
                amap = ActivationMap.from_dict(io.read_json(self._path(rel)))
                uv = activation_center(amap, threshold=threshold)
                io.write_json(self._path(f"emg/center_{finger}.json"),
                              {"finger": finger, "uv": uv.tolist()})

        self._stage("emg-center", {"threshold": threshold},
                    [self._path(r) for r in map_rels], center_rels, do_centers)

        comp_path = self._path("volumes/compartments_grid.vvol")

        def do_project():
            comps = io.read_label_volume(comp_path)
            contours = project_boundaries(comps, grid, cell_mm=cell_mm)
            io.write_contours(self._path("emg/boundaries.json"), contours)

        self._stage("project", {"cell_mm": cell_mm},
                    [m.inputs["grid"], comp_path],
                    ["emg/boundaries.json"], do_project)

    # -- validation and assembly ------------------------------------------

    def _validate_stage(self) -> None:
        m = self.m
        inputs: List[str] = []
        centers_exist = m.has_emg and \
            os.path.exists(self._path("emg/boundaries.json"))
        if centers_exist:
            inputs.append(self._path("emg/boundaries.json"))
            inputs += [self._path(f"emg/center_{f}.json")
                       for f in sorted(m.inputs["emg_trials"])]
        truth_regions = m.truth.get("regions", [])
        inputs += truth_regions
        inputs += [self._path(r) for r in
                   [f"us_contours/slice_{i}.json"
                    for i in range(len(m.slice_pairs))]]

        def do_validate():
            out: Dict[str, object] = {}
            if centers_exist:
                from .emg import containment_accuracy
                boundaries = {str(c.label): c for c in io.read_contours(
                    self._path("emg/boundaries.json"))}
                fingers = sorted(m.inputs["emg_trials"])
                centers = []
                for f in fingers:
                    d = io.read_json(self._path(f"emg/center_{f}.json"))
                    centers.append((f, np.asarray(d["uv"])))
                acc, flags = containment_accuracy(centers, boundaries)
                out["containment"] = {
                    "accuracy": acc,
                    "flags": {f: bool(x) for f, x in zip(fingers, flags)},
                }
            if truth_regions:
                dice: Dict[str, Dict[str, float]] = {}
                for i, path in enumerate(truth_regions):
                    truth_vol = io.read_label_volume(path)
                    truth2d = truth_vol.data[:, :, 0]
                    sp2 = truth_vol.spacing[:2]
                    grown = io.read_contours(
                        self._path(f"us_contours/slice_{i}.json"))
                    per = {}
                    for c in grown:
                        got = _contour_mask(c, truth2d.shape, sp2)
                        per[str(c.label)] = _dice(got, truth2d == c.label)
                    dice[str(i)] = per
                out["dice"] = dice
            io.write_json(self._path("validate/accuracy.json"), out)

        self._stage("validate", {}, inputs, ["validate/accuracy.json"],
                    do_validate)
        acc = io.read_json(self._path("validate/accuracy.json"))
        self.metrics.update(acc)

    def _bundle(self) -> dict:
        """Write bundle.json (run-history-free, so cached re-runs are
        byte-identical) and return it plus per-stage runtime states."""
        artifacts: Dict[str, str] = {}
        stages: Dict[str, dict] = {}
        states: Dict[str, dict] = {}
        for name in STAGE_ORDER:
            res = self.stage_results.get(name, {"skipped": True, "outputs": {}})
            entry: Dict[str, object] = {"outputs": res.get("outputs", {})}
            if res.get("configured") is False:
                entry["configured"] = False
            if res.get("external"):
                entry["external"] = True
            stages[name] = entry
            states[name] = {"skipped": bool(res.get("skipped")),
                            "configured": res.get("configured", True)}
            artifacts.update(res.get("outputs", {}))
        bundle = {
            "format_version": FORMAT_VERSION,
            "package_version": __version__,
            "subject": self.m.subject,
            "stages": stages,
            "artifacts": dict(sorted(artifacts.items())),
            "metrics": self.metrics,
        }
        io.write_json(self._path("bundle.json"), bundle)
        return {**bundle, "stage_states": states}


def run_pipeline(manifest: RunManifest, workers: int = 1,
                 force_stages: Sequence[str] = ()) -> dict:
    """Execute the full stage graph; returns the report bundle.

    Raises ``ArgumentError`` for manifest problems and ``StageFailure``
    (naming the stage) when a stage body fails; partial artifacts from
    completed stages stay on disk either way.
    """
    return PipelineRun(manifest, workers=workers,
                       force_stages=force_stages).run()

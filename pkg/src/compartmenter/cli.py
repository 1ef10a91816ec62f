"""Command-line interface.

One subcommand per pipeline stage plus ``run`` (manifest-driven, cached)
and ``phantom`` (synthetic input bundles).  Exit codes: 0 success,
2 validation error (bad arguments, malformed or missing inputs),
3 stage failure (a computation raised).
"""

from __future__ import annotations

import functools
import json
import os
import sys
import warnings
from typing import List, Optional

import click
import numpy as np

from . import FORMAT_VERSION, __version__, io
from .architecture import bland_altman, measure as measure_op
from .emg import (
    ActivationMap,
    EmgRecording,
    activation_center,
    containment_accuracy,
    preprocess,
    project_boundaries,
)
from .flow import FlowParams, aggregate_direction
from .growing import GrowParams, grow_region, region_to_contour
from .model import (
    ArgumentError,
    CompartmenterError,
    Matching,
    SampledSet,
    contour_area,
)
from .pipeline import (
    RunManifest,
    StageFailure,
    _contour_mask,
    _set_from_dict,
    _set_to_dict,
    _read_geometry,
    read_dwi_manifest,
    read_frames_dir,
    run_pipeline,
)
from .registration import (
    contour_interior_points,
    farthest_point_sample,
    loft_masks,
    map_contour,
    min_weight_match,
)
from .tractography import (
    TensorField,
    TrackParams,
    farthest_streamline_sample,
    filter_smooth,
    fit_tensor,
    track as track_op,
)

EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def stage_command(fn):
    """Map exceptions onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageFailure as e:
            _fail(EXIT_STAGE, str(e))
        except (CompartmenterError, FileNotFoundError, NotADirectoryError,
                json.JSONDecodeError, KeyError, ValueError) as e:
            _fail(EXIT_VALIDATION, str(e))
        except Exception as e:                     # computation failed
            _fail(EXIT_STAGE, f"{type(e).__name__}: {e}")

    return wrapper


@click.group()
@click.version_option(version=__version__, prog_name="compartmenter",
                      message=f"%(prog)s %(version)s (format {FORMAT_VERSION})")
def main() -> None:
    """Muscle-compartment segmentation, architecture, and EMG validation."""


# ---------------------------------------------------------------------------
# annotation

@main.command()
@click.option("--frames", required=True, type=click.Path(exists=True),
              help="Directory of VVOL frames with a manifest.json")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stride", default=10, show_default=True)
@click.option("--window-radius", default=FlowParams.window_radius, show_default=True)
@click.option("--gaussian-sigma", default=FlowParams.gaussian_sigma, show_default=True)
@stage_command
def flow(frames: str, out_path: str, stride: int, window_radius: int,
         gaussian_sigma: float) -> None:
    """Collapse a frame sequence into a per-pixel direction field."""
    seq = read_frames_dir(frames)
    p = FlowParams(window_radius=window_radius, gaussian_sigma=gaussian_sigma)
    field = aggregate_direction(seq, p, stride=stride)
    io.write_direction_field(out_path, field)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--field", "field_path", required=True, type=click.Path())
@click.option("--fds", "fds_path", required=True, type=click.Path(exists=True),
              help="Whole-muscle contour file (first contour is used)")
@click.option("--seeds", "seeds_path", required=True, type=click.Path(exists=True),
              help="JSON {label: [[px, py], ...]}")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--a-max", default=30.0, show_default=True)
@click.option("--a-min", default=5.0, show_default=True)
@stage_command
def grow(field_path: str, fds_path: str, seeds_path: str, out_path: str,
         a_max: float, a_min: float) -> None:
    """Grow compartment regions in a direction field."""
    field = io.read_direction_field(field_path)
    fds = io.read_contours(fds_path)[0]
    seeds = io.read_json(seeds_path)
    mask = _contour_mask(fds, field.dims, field.spacing)
    p = GrowParams(muscle_area_mm2=contour_area(fds), a_max_deg=a_max,
                   a_min_deg=a_min)
    contours = []
    for label in sorted(seeds, key=int):
        region = grow_region(field, mask, seeds[label], p)
        contours.append(region_to_contour(region, fds.slice_z, field.spacing,
                                          int(label)))
    io.write_contours(out_path, contours)
    click.echo(f"wrote {out_path} ({len(contours)} contours)")


# ---------------------------------------------------------------------------
# registration

@main.command()
@click.option("--contour", "contour_path", required=True,
              type=click.Path(exists=True))
@click.option("--n", "n_points", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--source", default="ultrasound", show_default=True,
              type=click.Choice(["ultrasound", "mri"]))
@click.option("--grid-mm", default=1.0, show_default=True)
@stage_command
def sample(contour_path: str, n_points: int, out_path: str, source: str,
           grid_mm: float) -> None:
    """Farthest-point sample a contour's interior.

    The candidate grid starts at --grid-mm and is halved until it holds at
    least --n interior points, so large n work on small contours.
    """
    contour = io.read_contours(contour_path)[0]
    g = grid_mm
    for _ in range(8):
        candidates = contour_interior_points(contour, (g, g))
        if len(candidates) >= n_points:
            break
        g /= 2.0
    sampled = farthest_point_sample(candidates, n_points, source,
                                    contour.slice_z)
    io.write_json(out_path, _set_to_dict(sampled))
    click.echo(f"wrote {out_path} ({sampled.count} points)")


@main.command()
@click.option("--u", "u_path", required=True, type=click.Path(exists=True))
@click.option("--v", "v_path", required=True, type=click.Path(exists=True))
@click.option("--mode", default="sparse", show_default=True,
              type=click.Choice(["sparse", "sparse-knn", "dense", "exact-dense"]))
@click.option("--k", "knn", default=32, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def match(u_path: str, v_path: str, mode: str, knn: int, out_path: str) -> None:
    """Minimum-deformation-energy bijection between two sampled sets."""
    u = _set_from_dict(io.read_json(u_path))
    v = _set_from_dict(io.read_json(v_path))
    full_mode = {"sparse": "sparse-knn", "dense": "exact-dense"}.get(mode, mode)
    mt = min_weight_match(u, v, mode=full_mode, k=knn)
    io.write_json(out_path, {
        "pairs": mt.pairs.tolist(), "total_cost": mt.total_cost,
        "u_set": _set_to_dict(mt.u_set), "v_set": _set_to_dict(mt.v_set),
    })
    click.echo(f"wrote {out_path} (cost {mt.total_cost:.6g})")


@main.command(name="map")
@click.option("--matching", "matching_path", required=True,
              type=click.Path(exists=True))
@click.option("--contour", "contour_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def map_cmd(matching_path: str, contour_path: str, out_path: str) -> None:
    """Carry compartment contours through a matching into the MRI frame."""
    d = io.read_json(matching_path)
    mt = Matching(pairs=np.asarray(d["pairs"], dtype=np.int64),
                  total_cost=d["total_cost"],
                  u_set=_set_from_dict(d["u_set"]),
                  v_set=_set_from_dict(d["v_set"]))
    contours = io.read_contours(contour_path)
    mapped = [map_contour(mt, None, c) for c in contours]
    io.write_contours(out_path, mapped)
    click.echo(f"wrote {out_path} ({len(mapped)} contours)")


@main.command()
@click.option("--contours", "contours_dir", required=True,
              type=click.Path(exists=True),
              help="Directory of contour files (or one file)")
@click.option("--geometry", "geometry_path", required=True,
              type=click.Path(exists=True),
              help="JSON {dims, spacing_mm, origin_mm}")
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def loft(contours_dir: str, geometry_path: str, out_path: str) -> None:
    """Interpolate contour stacks into a voxel label volume."""
    if os.path.isdir(contours_dir):
        files = sorted(f for f in os.listdir(contours_dir)
                       if f.endswith(".json"))
        contours = []
        for f in files:
            contours += io.read_contours(os.path.join(contours_dir, f))
    else:
        contours = io.read_contours(contours_dir)
    dims, spacing, origin = _read_geometry(geometry_path)
    vol = loft_masks(contours, dims, spacing, origin)
    io.write_label_volume(out_path, vol)
    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# tractography

@main.command(name="tensor-fit")
@click.option("--dwi", "dwi_path", required=True, type=click.Path(exists=True),
              help="DWI manifest JSON {volumes, bvals, bvecs}")
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def tensor_fit(dwi_path: str, out_path: str) -> None:
    """Log-linear least-squares tensor fit."""
    tensors = fit_tensor(read_dwi_manifest(dwi_path))
    io.write_tensor_field(out_path, tensors.data, tensors.spacing,
                          tensors.origin)
    click.echo(f"wrote {out_path}")


def _read_track_params(path: Optional[str]) -> TrackParams:
    if path is None:
        return TrackParams()
    d = io.read_json(path)
    try:
        return TrackParams(**d)
    except TypeError as e:
        raise ArgumentError(f"bad track params {path}: {e}") from None


@main.command(name="track")
@click.option("--tensors", "tensors_path", required=True,
              type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--label", required=True, type=int)
@click.option("--params", "params_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def track_cmd(tensors_path: str, mask_path: str, label: int,
              params_path: Optional[str], out_path: str) -> None:
    """Deterministic streamlines, filtered and smoothed."""
    comps, spacing, origin = io.read_tensor_field(tensors_path)
    tensors = TensorField(data=comps, spacing=spacing, origin=origin)
    mask = io.read_label_volume(mask_path)
    p = _read_track_params(params_path)
    tracks = filter_smooth(track_op(tensors, mask, label, p), p)
    io.write_streamlines(out_path, tracks)
    click.echo(f"wrote {out_path} ({len(tracks)} tracks)")


@main.command(name="sample-streamlines")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--n", "n_tracks", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def sample_streamlines(in_path: str, n_tracks: int, out_path: str) -> None:
    """Farthest-streamline subsample to a uniform representative set."""
    tracks = io.read_streamlines(in_path)
    sampled = farthest_streamline_sample(tracks, n_tracks)
    io.write_streamlines(out_path, sampled)
    click.echo(f"wrote {out_path} ({len(sampled)} tracks)")


# ---------------------------------------------------------------------------
# architecture

@main.command(name="measure")
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--label", required=True, type=int)
@click.option("--tracks", "tracks_path", required=True,
              type=click.Path(exists=True))
@click.option("--whole-muscle/--compartment", "whole", default=None,
              help="Override whole-muscle vs compartment inference")
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def measure_cmd(mask_path: str, label: int, tracks_path: str,
                whole: Optional[bool], out_path: str) -> None:
    """Architecture report: MV, FL, PA, PCSA and friends."""
    mask = io.read_label_volume(mask_path)
    tracks = io.read_streamlines(tracks_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = measure_op(mask, label, tracks, whole_muscle=whole)
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    io.write_json(out_path, report.to_dict())
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--segmented", "seg_dir", required=True,
              type=click.Path(exists=True))
@click.option("--nonsegmented", "non_dir", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def compare(seg_dir: str, non_dir: str, out_path: str) -> None:
    """Bland-Altman agreement between paired report directories."""
    names = sorted(set(os.listdir(seg_dir)) & set(os.listdir(non_dir)))
    names = [n for n in names if n.endswith(".json")]
    if len(names) < 3:
        raise ArgumentError("compare needs >= 3 paired report files")
    pairs = {m: [] for m in ("mv_mm3", "fl_mm", "pa_deg", "pcsa_mm2")}
    for n in names:
        a = io.read_json(os.path.join(seg_dir, n))
        b = io.read_json(os.path.join(non_dir, n))
        for m in pairs:
            pairs[m].append((a[m], b[m]))
    out = {}
    base, _ = os.path.splitext(out_path)
    for m, p in pairs.items():
        summary = bland_altman(p)
        out[m] = summary.to_dict()
        csv_path = f"{base}_{m}.csv"
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("segmented,nonsegmented,mean,difference\n")
            for (a, b) in p:
                f.write(f"{a!r},{b!r},{(a + b) / 2!r},{a - b!r}\n")
    io.write_json(out_path, out)
    click.echo(f"wrote {out_path} ({len(names)} pairs)")


# ---------------------------------------------------------------------------
# EMG

@main.command(name="emg-map")
@click.option("--trials", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--sample-rate", default=2048.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def emg_map(trials, grid_path: str, sample_rate: float, out_path: str) -> None:
    """Trials to one normalised activation map."""
    grid = io.read_grid(grid_path)
    recs = []
    for p in trials:
        data, _ids = io.read_emg_trial(p)
        recs.append(EmgRecording(data=data.T, sample_rate=sample_rate,
                                 grid=grid, trial_id=p))
    amap = preprocess(recs, expected_trials=len(recs))
    io.write_json(out_path, amap.to_dict())
    click.echo(f"wrote {out_path}")


@main.command(name="emg-center")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@click.option("--thresh", default=0.8, show_default=True)
@click.option("--finger", default="", help="Label recorded in the output")
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def emg_center(map_path: str, thresh: float, finger: str, out_path: str) -> None:
    """RMS-weighted activation centre of a map."""
    amap = ActivationMap.from_dict(io.read_json(map_path))
    uv = activation_center(amap, threshold=thresh)
    io.write_json(out_path, {"finger": finger, "uv": uv.tolist()})
    click.echo(f"wrote {out_path} (centre {uv[0]:.2f}, {uv[1]:.2f})")


@main.command()
@click.option("--masks", "masks_path", required=True, type=click.Path())
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--cell-mm", default=1.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def project(masks_path: str, grid_path: str, cell_mm: float,
            out_path: str) -> None:
    """Project compartment boundaries onto the electrode plane."""
    masks = io.read_label_volume(masks_path)
    grid = io.read_grid(grid_path)
    contours = project_boundaries(masks, grid, cell_mm=cell_mm)
    io.write_contours(out_path, contours)
    click.echo(f"wrote {out_path} ({len(contours)} boundaries)")


@main.command()
@click.option("--centers", "centers_dir", required=True,
              type=click.Path(exists=True))
@click.option("--boundaries", "boundaries_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_command
def validate(centers_dir: str, boundaries_path: str, out_path: str) -> None:
    """Containment accuracy of activation centres in projected boundaries."""
    boundaries = {str(c.label): c
                  for c in io.read_contours(boundaries_path)}
    centers = []
    for f in sorted(os.listdir(centers_dir)):
        if not f.endswith(".json"):
            continue
        d = io.read_json(os.path.join(centers_dir, f))
        centers.append((str(d["finger"]), np.asarray(d["uv"])))
    acc, flags = containment_accuracy(centers, boundaries)
    io.write_json(out_path, {
        "accuracy": acc,
        "flags": {k: bool(x) for (k, _), x in zip(centers, flags)},
    })
    click.echo(f"wrote {out_path} (accuracy {acc:.3f})")


# ---------------------------------------------------------------------------
# phantoms and full runs

@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@stage_command
def phantom(spec_path: str, out_dir: str) -> None:
    """Generate a synthetic input bundle (with truth and manifest)."""
    from .bundle import write_phantom_bundle
    from .phantom import PhantomSpec
    d = io.read_json(spec_path)
    spec = PhantomSpec.from_dict(d)
    manifest = write_phantom_bundle(spec, out_dir, options=d.get("bundle"))
    click.echo(f"wrote {manifest}")


@main.command(name="run")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--force-stage", "force_stages", multiple=True,
              help="Re-run this stage even if cached (repeatable)")
@stage_command
def run_cmd(manifest_path: str, workers: int, force_stages) -> None:
    """Execute the full pipeline from a run manifest."""
    manifest = RunManifest.from_file(manifest_path)
    bundle = run_pipeline(manifest, workers=workers,
                          force_stages=list(force_stages))
    for name, st in bundle["stage_states"].items():
        state = "skipped" if st["skipped"] else "done"
        if not st["configured"]:
            state = "not configured"
        click.echo(f"{name:20s} {state}")
    click.echo(f"bundle: {os.path.join(manifest.out_dir, 'bundle.json')}")


if __name__ == "__main__":
    main()

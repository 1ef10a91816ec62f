"""Phantom run bundles: a complete, self-consistent pipeline input tree.

``write_phantom_bundle`` turns a two-region phantom spec into every file a
pipeline run ingests — per-slice flow movies, FDS and MRI contours, seeds,
target geometry, a forward-simulated DWI stack, an electrode grid with
synthetic EMG trials — plus the matching ground truth and a ready-to-run
manifest.  All artifacts inherit the spec's seed, so a bundle is
bit-reproducible.
"""

from __future__ import annotations

import os
from typing import Dict, List, Optional

import numpy as np

from . import io
from .model import ArgumentError, Contour, ElectrodeGrid, LabelVolume
from .phantom import PhantomSpec, make_emg_phantom, make_flow_movie, make_tensor_phantom

MARGIN_PX = 20          # image border around the muscle cross-section
N_SLICES = 4
N_FRAMES = 6
AMPLITUDE_PX = 1.5
TRANSLATION_MM = (2.0, -3.0)    # US -> MRI rigid offset, integer so that
                                # half-integer voxel boundaries are preserved


def _rect(x0: float, x1: float, y0: float, y1: float, z: float,
          label: int = 1) -> Contour:
    return Contour(points=np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]),
                   slice_z=z, label=label)


def write_phantom_bundle(spec: PhantomSpec, out_dir: str,
                         options: Optional[dict] = None) -> str:
    """Emit the full input tree + truth + manifest; returns the manifest path."""
    if spec.geometry != "two-region" or spec.split_axis != "x" \
            or len(spec.fractions) != 2:
        raise ArgumentError("phantom bundles need a two-region spec split "
                            "along x with two fractions")
    if spec.fiber != "axial":
        raise ArgumentError("phantom bundles use axial fibers")
    opts = dict(options or {})
    n_slices = int(opts.get("slices", N_SLICES))
    n_frames = int(opts.get("frames", N_FRAMES))
    duration_s = float(opts.get("emg_duration_s", 3.0))
    if n_slices < 2:
        raise ArgumentError("bundles need at least 2 slices")

    sp = spec.spacing_mm
    nx, ny, nz = spec.dims
    Lz = nz * sp
    img_x, img_y = nx + 2 * MARGIN_PX, ny + 2 * MARGIN_PX
    x0, y0 = MARGIN_PX, MARGIN_PX                    # first muscle pixel
    n1 = int(round(spec.fractions[0] * nx))
    tx, ty = TRANSLATION_MM
    zs = np.linspace(0.1 * Lz, 0.9 * Lz, n_slices)
    zs = np.round(zs, 6)

    out = io.ensure_dir(out_dir)
    io.ensure_dir(os.path.join(out, "truth/regions"))

    # ---- per-slice flow movies + truth regions
    # static background (0) so neighbourhood mixing in the flow estimate
    # dilutes magnitude, not direction, at the muscle border
    region = np.zeros((img_x, img_y), dtype=np.int32)
    region[x0:x0 + n1, y0:y0 + ny] = 1               # compartment 1: 0 deg
    region[x0 + n1:x0 + nx, y0:y0 + ny] = 2          # compartment 2: 90 deg
    truth_labels = np.zeros((img_x, img_y), dtype=np.int32)
    truth_labels[x0:x0 + n1, y0:y0 + ny] = 1
    truth_labels[x0 + n1:x0 + nx, y0:y0 + ny] = 2

    frames_dirs = []
    region_paths = []
    for i in range(n_slices):
        movie_spec = PhantomSpec(geometry="two-region",
                                 size_mm=(img_x * sp, img_y * sp, 1.0),
                                 spacing_mm=sp, seed=spec.seed + 101 * i)
        ph = make_flow_movie(movie_spec, n_frames=n_frames,
                             amplitude_px=AMPLITUDE_PX, motion="translate",
                             directions_deg=[0.0, 0.0, 90.0],
                             amplitudes_px=[0.0, AMPLITUDE_PX, AMPLITUDE_PX],
                             region_labels=region)
        d = io.ensure_dir(os.path.join(out, f"frames/slice_{i}"))
        names = []
        for k, frame in enumerate(ph.frames):
            name = f"frame_{k:02d}.vvol"
            io.write_image2d(os.path.join(d, name), frame)
            names.append(name + ".json")
        io.write_json(os.path.join(d, "manifest.json"),
                      {"frames": names,
                       "timestamps": [k / 30.0 for k in range(n_frames)]})
        frames_dirs.append(f"frames/slice_{i}")

        rel = f"truth/regions/slice_{i}.vvol"
        io.write_label_volume(
            os.path.join(out, rel),
            LabelVolume(data=truth_labels[:, :, None], spacing=(sp, sp, 1.0)))
        region_paths.append(rel + ".json")

    # ---- contours and seeds
    fds = [_rect((x0 - 0.5) * sp, (x0 + nx - 0.5) * sp,
                 (y0 - 0.5) * sp, (y0 + ny - 0.5) * sp, z) for z in zs]
    io.write_contours(os.path.join(out, "fds_contours.json"), fds)
    mri = [_rect((x0 - 0.5) * sp + tx, (x0 + nx - 0.5) * sp + tx,
                 (y0 - 0.5) * sp + ty, (y0 + ny - 0.5) * sp + ty, z)
           for z in zs]
    io.write_contours(os.path.join(out, "mri_contours.json"), mri)

    seed_row = y0 + ny // 2
    seeds = {str(i): {"1": [[x0 + n1 // 2, seed_row]],
                      "2": [[x0 + n1 + (nx - n1) // 2, seed_row]]}
             for i in range(n_slices)}
    io.write_json(os.path.join(out, "seeds.json"), seeds)

    # ---- target geometry (shared by loft, DWI, and the EMG truth mask)
    geometry = {"dims": [img_x, img_y, nz],
                "spacing_mm": [sp, sp, sp],
                "origin_mm": [0.0, 0.0, 0.0]}
    io.write_json(os.path.join(out, "geometry.json"), geometry)

    # ---- DWI stack over the full target grid, axial fibers
    dwi_spec = PhantomSpec(geometry="box",
                           size_mm=(img_x * sp, img_y * sp, Lz),
                           spacing_mm=sp, noise=spec.noise, seed=spec.seed)
    tp = make_tensor_phantom(dwi_spec)
    dwi_dir = io.ensure_dir(os.path.join(out, "dwi"))
    vol_names = []
    for k, vol in enumerate(tp.dwi.volumes):
        name = f"vol_{k:02d}.vvol"
        io.write_scalar_volume(os.path.join(dwi_dir, name), vol)
        vol_names.append(name + ".json")
    io.write_json(os.path.join(dwi_dir, "manifest.json"), {
        "volumes": vol_names,
        "bvals": tp.dwi.bvals.tolist(),
        "bvecs": tp.dwi.bvecs.tolist(),
    })

    # ---- EMG: grid, true compartment mask in MRI frame, trials
    grid = ElectrodeGrid(rows=5, cols=8, pitch_mm=8.0,
                         origin=(12.0, 18.0, 0.0))
    io.write_grid(os.path.join(out, "grid.json"), grid)

    true_mask = np.zeros((img_x, img_y, nz), dtype=np.int32)
    gx = np.arange(img_x) * sp
    gy = np.arange(img_y) * sp
    in_x1 = (gx >= (x0 - 0.5) * sp + tx) & (gx <= (x0 + n1 - 0.5) * sp + tx)
    in_x2 = (gx >= (x0 + n1 - 0.5) * sp + tx) & (gx <= (x0 + nx - 0.5) * sp + tx)
    in_y = (gy >= (y0 - 0.5) * sp + ty) & (gy <= (y0 + ny - 0.5) * sp + ty)
    true_mask[np.ix_(in_x1, in_y)] = 1
    true_mask[np.ix_(in_x2, in_y)] = 2
    mask_vol = LabelVolume(data=true_mask, spacing=(sp, sp, sp))
    io.write_label_volume(os.path.join(out, "truth/compartments.vvol"), mask_vol)

    emg_dir = io.ensure_dir(os.path.join(out, "emg"))
    centers: Dict[str, List[float]] = {}
    emg_trials: Dict[str, List[str]] = {}
    for label in (1, 2):
        ph = make_emg_phantom(mask_vol, grid, label, seed=spec.seed + label,
                              duration_s=duration_s)
        centers[str(label)] = [float(v) for v in ph.truth_center_uv]
        paths = []
        for k, rec in enumerate(ph.trials):
            rel = f"emg/f{label}_t{k}.csv"
            io.write_emg_trial(os.path.join(out, rel), rec.data.T)
            paths.append(rel)
        emg_trials[str(label)] = paths

    # ---- ground truth summary
    n2 = nx - n1
    xs_area = ny * sp * sp
    io.write_json(os.path.join(out, "truth/truth.json"), {
        "fractions": {"1": n1 / nx, "2": n2 / nx},
        "mv_mm3": {"1": n1 * xs_area * Lz, "2": n2 * xs_area * Lz},
        "fiber_direction": [0.0, 0.0, 1.0],
        "pa_deg": 0.0,
        "lofted_z_range_mm": [float(zs[0]), float(zs[-1])],
        "translation_mm": list(TRANSLATION_MM),
        "emg_centers_uv": centers,
        "slice_z_mm": zs.tolist(),
    })

    # ---- the manifest
    manifest = {
        "subject": f"phantom-seed{spec.seed}",
        "out_dir": "out",
        "slice_pairs": [[float(z), float(z)] for z in zs],
        "inputs": {
            "frames": frames_dirs,
            "fds_contours": "fds_contours.json",
            "seeds": "seeds.json",
            "mri_contours": "mri_contours.json",
            "geometry": "geometry.json",
            "dwi": "dwi/manifest.json",
            "grid": "grid.json",
            "emg_trials": emg_trials,
        },
        "params": {
            "flow": {"stride": 1, "window_radius": 2, "gaussian_sigma": 1.5},
            "grow": {},
            "match": {"n": 600, "mode": "sparse-knn", "k": 24, "grid_mm": 1.0},
            "track": {"target_count": 800, "candidate_count": 2500},
            "emg": {"sample_rate": 2048.0, "threshold": 0.8,
                    "expected_trials": 3, "cell_mm": 1.0},
        },
        "truth": {"regions": region_paths},
    }
    path = os.path.join(out, "run.json")
    io.write_json(path, manifest)
    return path

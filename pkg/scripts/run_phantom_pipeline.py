#!/usr/bin/env python3
"""Generate a ground-truth phantom bundle, run the full batch pipeline on
it, and print the architecture reports it produces.

The bundle written to --out is the same layout the ``compartmenter`` CLI
consumes, so after this script finishes you can re-run or inspect stages
by hand, e.g.::

    python scripts/run_phantom_pipeline.py --out /tmp/demo --workers 4
    compartmenter run /tmp/demo/manifest.json          # all stages cached
    compartmenter run /tmp/demo/manifest.json --force-stage measure
"""

import argparse
import time

from compartmenter.bundle import write_phantom_bundle
from compartmenter.phantom import PhantomSpec
from compartmenter.pipeline import RunManifest, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True, help="bundle directory to create")
    ap.add_argument("--size", type=float, nargs=3, default=(20.0, 12.0, 40.0),
                    metavar=("LX", "LY", "LZ"), help="extent in mm")
    ap.add_argument("--spacing", type=float, default=1.0, help="voxel size, mm")
    ap.add_argument("--fractions", type=float, nargs=2, default=(0.6, 0.4),
                    metavar=("F1", "F2"), help="compartment volume fractions")
    ap.add_argument("--noise", type=float, default=0.0,
                    help="relative DWI noise level")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--slices", type=int, default=3,
                    help="ultrasound slice positions in the bundle")
    ap.add_argument("--frames", type=int, default=6,
                    help="frames per ultrasound movie")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--force-stage", action="append", default=[],
                    metavar="STAGE", help="re-run STAGE even if cached")
    args = ap.parse_args()

    spec = PhantomSpec(geometry="two-region", size_mm=tuple(args.size),
                       spacing_mm=args.spacing, fiber="axial", split_axis="x",
                       fractions=tuple(args.fractions), noise=args.noise,
                       seed=args.seed)
    manifest_path = write_phantom_bundle(
        spec, args.out, options={"slices": args.slices, "frames": args.frames})
    print(f"bundle written: {manifest_path}")

    manifest = RunManifest.from_file(manifest_path)
    t0 = time.perf_counter()
    bundle = run_pipeline(manifest, workers=args.workers,
                          force_stages=args.force_stage)
    elapsed = time.perf_counter() - t0

    ran = sum(1 for s in bundle["stage_states"].values() if not s["skipped"])
    print(f"pipeline: {ran} stages ran, {len(bundle['artifacts'])} artifacts, "
          f"{elapsed:.1f} s with {args.workers} worker(s)")

    reports = bundle["metrics"].get("reports", {})
    for name, r in reports.items():
        line = (f"  {name:>8}: MV {r['mv_mm3']:8.1f} mm^3"
                f"  FL {r['fl_mm']:6.1f} mm  PA {r['pa_deg']:5.2f} deg"
                f"  PCSA {r['pcsa_mm2']:7.1f} mm^2")
        if "volume_fraction" in r:
            line += f"  fraction {r['volume_fraction']:.3f}"
        if "fl_ml" in r:
            line += f"  FL/ML {r['fl_ml']:.3f}"
        print(line)
    if "fl_reduction_pct" in bundle["metrics"]:
        print(f"  compartment FL median is "
              f"{bundle['metrics']['fl_reduction_pct']:.1f}% below whole-muscle")


if __name__ == "__main__":
    main()

"""Shared fixtures: one phantom run bundle with a completed pipeline run.

Session-scoped because a full run costs seconds; tests that mutate inputs
or out-dir state build private bundles instead of touching these.
"""

import pytest

from compartmenter.bundle import write_phantom_bundle
from compartmenter.phantom import PhantomSpec
from compartmenter.pipeline import RunManifest, run_pipeline

BUNDLE_SPEC = PhantomSpec(geometry="two-region", size_mm=(20.0, 12.0, 40.0),
                          spacing_mm=1.0, fiber="axial", split_axis="x",
                          fractions=(0.6, 0.4), noise=0.0, seed=7)


@pytest.fixture(scope="session")
def bundle_manifest_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    return write_phantom_bundle(BUNDLE_SPEC, str(root / "phantom"))


@pytest.fixture(scope="session")
def completed_run(bundle_manifest_path):
    """(manifest, report bundle) after one single-worker run."""
    manifest = RunManifest.from_file(bundle_manifest_path)
    bundle = run_pipeline(manifest, workers=1)
    return manifest, bundle

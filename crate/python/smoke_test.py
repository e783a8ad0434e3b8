#!/usr/bin/env python3
"""Smoke test for the hcod Python extension.

Builds the extension module with cargo (unless HCOD_SKIP_BUILD is set),
copies it next to this script, and runs the main operations end to end.
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
BUILD_DIR = Path(__file__).resolve().parent / "_build"


def build_extension() -> None:
    if os.environ.get("HCOD_SKIP_BUILD") != "1":
        subprocess.run(
            [
                "cargo",
                "build",
                "-p",
                "hcod-py",
                "--release",
                "--features",
                "extension-module",
            ],
            cwd=REPO,
            check=True,
        )
    src = REPO / "target" / "release" / "libhcod.so"
    if not src.exists():  # macOS fallback
        src = REPO / "target" / "release" / "libhcod.dylib"
    BUILD_DIR.mkdir(exist_ok=True)
    shutil.copy(src, BUILD_DIR / "hcod.so")


def main() -> int:
    build_extension()
    sys.path.insert(0, str(BUILD_DIR))
    import numpy as np

    import hcod

    # scene synthesis is deterministic
    cube, wavelengths, mask = hcod.generate_scene(
        seed=7, height=64, width=64, bands=20, shape="ellipse", area_ratio=0.05
    )
    cube2, _, mask2 = hcod.generate_scene(
        seed=7, height=64, width=64, bands=20, shape="ellipse", area_ratio=0.05
    )
    assert cube.shape == (64, 64, 20) and cube.dtype == np.float32
    assert np.array_equal(cube, cube2) and np.array_equal(mask, mask2)
    ratio = mask.mean()
    assert 0.045 <= ratio <= 0.055, f"area ratio {ratio}"

    # cube file round-trip
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "scene.hsic")
        hcod.save_cube(path, cube, wavelengths)
        back, wl_back = hcod.load_cube(path)
        assert np.array_equal(cube, back)
        assert np.array_equal(wavelengths, wl_back)

    # spectral angle identities
    assert hcod.sad([1.0, 0.0], [0.0, 1.0]) == math.pi / 2
    assert hcod.sad([0.3, 0.7], [0.6, 1.4]) < 1e-9

    # decomposition shapes and ranges
    xyz, saliency = hcod.decompose(cube, wavelengths)
    assert xyz.shape == (64, 64, 3) and saliency.shape == (64, 64, 3)
    assert 0.0 <= saliency.min() and saliency.max() <= 1.0

    # segmentation
    out = hcod.segment(cube, wavelengths, tau=0.01, seed=0)
    pred = out["prediction"]
    assert pred.shape == (64, 64)
    assert 0.0 < pred.min() and pred.max() < 1.0
    assert 0.0 < out["kept_fraction"] <= 1.0

    # metrics: the mask against itself is perfect (the epsilon guards in
    # E/S keep perfect scores a hair under 1 on very sparse masks)
    scores = hcod.evaluate(mask.astype(np.float64), mask)
    assert scores["mae"] < 1e-9
    assert scores["adp_f"] > 1 - 1e-6
    assert scores["e"] > 1 - 1e-4
    assert scores["s"] > 1 - 1e-4

    # a short training run separates object from background
    trained, losses = hcod.train_head(cube, wavelengths, mask, steps=200, lr=0.1)
    inside = trained[mask == 1].mean()
    outside = trained[mask == 0].mean()
    assert inside > outside, f"inside {inside} <= outside {outside}"
    assert losses[-1] < losses[0]

    # mask statistics
    stats = hcod.scene_stats(mask)
    assert abs(stats["area_ratio"] - ratio) < 1e-12
    assert 0.0 <= stats["centroid"][0] <= 1.0

    print("smoke test OK")
    print(f"  area ratio          {ratio:.4f}")
    print(f"  kept token fraction {out['kept_fraction']:.3f}")
    print(f"  trained inside/outside means {inside:.3f} / {outside:.3f}")
    print(f"  perfect-pair metrics {scores}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

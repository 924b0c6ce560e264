#!/usr/bin/env python3
"""Smoke test for the dsvt_py extension module.

Build the extension first:

    cargo build -p dsvt-py --release

The script locates the built cdylib, stages it under an importable name, and
exercises the exposed surface end to end.
"""

import json
import shutil
import struct
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def find_extension() -> Path:
    for profile in ("release", "debug"):
        candidate = ROOT / "target" / profile / "libdsvt_py.so"
        if candidate.exists():
            return candidate
    sys.exit("extension not built; run: cargo build -p dsvt-py --release")


stage_dir = tempfile.mkdtemp(prefix="dsvt_py_")
shutil.copy(find_extension(), Path(stage_dir) / "dsvt_py.so")
sys.path.insert(0, stage_dir)

import dsvt_py  # noqa: E402


def check_set_partition():
    assert dsvt_py.count_sets(36, 36) == 1
    assert dsvt_py.count_sets(10, 4) == 3
    q, mask = dsvt_py.set_indices(10, 4)
    assert q == [[0, 0, 1, 2], [3, 4, 5, 5], [6, 7, 8, 9]], q
    assert mask[1] == [True, True, True, False], mask
    q5, _ = dsvt_py.set_indices(5, 4)
    assert q5 == [[0, 0, 1, 1], [2, 3, 3, 4]], q5
    try:
        dsvt_py.count_sets(0, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("count_sets(0, 4) should raise")


def check_scene_and_backbone():
    model = {
        "extent": [24.0, 24.0, 6.0],
        "clusters": 2,
        "points_per_cluster": 25,
        "cluster_std_xy": 1.0,
        "cluster_std_z": 0.2,
        "background_points": 30,
        "seed": 4,
    }
    points = dsvt_py.synth_scene(json.dumps(model))
    assert len(points) == 2 * 25 + 30

    config = {
        "grid": {
            "range_min": [0, 0, 0],
            "range_max": [24, 24, 6],
            "voxel_size": [0.32, 0.32, 6.0],
        },
        "variant": "P",
        "blocks_per_stage": [2],
        "window_a": [12, 12],
        "window_b": [24, 24],
        "tau": 8,
        "channels": 24,
        "heads": 4,
        "ffn": 48,
        "partition": "Rotate",
        "pool_variant": "AttnPool",
    }
    backbone = dsvt_py.Backbone(config_json=json.dumps(config), seed=7)
    assert json.loads(backbone.config_json())["tau"] == 8
    assert backbone.stage_z_extents() == [1]

    shape, data = backbone.forward(points)
    assert shape == (24, 75, 75), shape
    assert len(data) == 4 * 24 * 75 * 75
    values = struct.unpack(f"<{len(data) // 4}f", data)
    assert any(v != 0.0 for v in values)

    shape2, data2 = backbone.forward(points)
    assert shape2 == shape and data2 == data, "forward must be deterministic"

    dump = json.loads(backbone.partition_json(points))
    assert dump["tau"] == 8
    assert len(dump["blocks"]) == 2
    assert dump["voxels"] > 0
    first_window = dump["blocks"][0]["windows"][0]
    assert len(first_window["q"]) == first_window["s"]

    preset = dsvt_py.Backbone(preset="dsvt-v", seed=1)
    assert preset.stage_z_extents() == [32, 8, 2, 1]


def check_invariants():
    dsvt_py.run_check(iters=2000, trials=5)
    try:
        dsvt_py.run_check(iters=5000, trials=0, mutate="float-floor")
    except ValueError as err:
        assert "witness" in str(err), err
    else:
        raise AssertionError("mutated check should raise")


check_set_partition()
check_scene_and_backbone()
check_invariants()
print("dsvt_py smoke test passed")

# scripts/convert_h36m.py
"""
Convert preprocessed Human3.6M poses into a poselift dataset file.

Input is an .npz archive holding:
    poses_3d  N x 17 x 3, camera frame, mm, the common 17-joint H36M order
    poses_2d  N x 17 x 2 pixels (optional; projected from poses_3d if absent)
    ids       N strings (optional)

Usage:
    python scripts/convert_h36m.py INPUT.npz OUTPUT.jsonl [--name h36m-S1] [--width 1000] [--height 1002]

The output is labeled with attributes and can be fed to `stats` for the
per-joint STD cross-check (hip around 68.5 mm, wrist around 240 mm). This is a
documentation tool; nothing in the package depends on it.
"""
import argparse
import sys

import numpy as np

from poselift.core.config import DEFAULT_FOCAL_PX, DEFAULT_TAU_MM
from poselift.core.errors import PoseLiftError
from poselift.models.schemas import DatasetMeta, Domain
from poselift.services.dataset_store import save_dataset
from poselift.services.geometry import label_dataset
from poselift.services.skeleton import Dataset, Pose2D, Pose3D, SampleRecord
from poselift.services.synthetic import project

# H36M index for each JointId, in JointId order. H36M's spine joint (7) has no counterpart.
H36M_TO_POSELIFT = np.array([3, 2, 1, 4, 5, 6, 0, 8, 9, 10, 16, 15, 14, 11, 12, 13])


def convert(poses_3d, poses_2d, ids, name, width, height, focal_px):
    poses_3d = np.asarray(poses_3d, dtype=np.float64)[:, H36M_TO_POSELIFT]
    if poses_2d is None:
        poses_2d = np.stack([project(p, focal_px, width, height) for p in poses_3d])
    else:
        poses_2d = np.asarray(poses_2d, dtype=np.float64)[:, H36M_TO_POSELIFT]
    records = [
        SampleRecord(
            id=str(ids[i]) if ids is not None else f"{name}-{i:06d}",
            domain=Domain.LABELED_3D,
            pose2d=Pose2D(poses_2d[i], width, height),
            pose3d=Pose3D(poses_3d[i]),
        )
        for i in range(len(poses_3d))
    ]
    return Dataset(tuple(records), DatasetMeta(name=name, seed=0, tau_mm=DEFAULT_TAU_MM))


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Human3.6M .npz -> poselift dataset")
    parser.add_argument("input")
    parser.add_argument("output")
    parser.add_argument("--name", default="h36m")
    parser.add_argument("--width", type=int, default=1000)
    parser.add_argument("--height", type=int, default=1002)
    parser.add_argument("--focal-px", type=float, default=DEFAULT_FOCAL_PX)
    args = parser.parse_args()

    archive = np.load(args.input, allow_pickle=False)
    print(f"Converting {len(archive['poses_3d'])} poses from {args.input}...")
    try:
        ds = convert(
            archive["poses_3d"],
            archive["poses_2d"] if "poses_2d" in archive else None,
            archive["ids"] if "ids" in archive else None,
            args.name,
            args.width,
            args.height,
            args.focal_px,
        )
        labeled, skipped = label_dataset(ds, DEFAULT_TAU_MM)
    except PoseLiftError as e:
        print(f"{e.prefix}: {e}", file=sys.stderr)
        sys.exit(1)
    save_dataset(labeled, args.output)
    print(f"Wrote {len(labeled)} records to {args.output} ({len(skipped)} skipped)")

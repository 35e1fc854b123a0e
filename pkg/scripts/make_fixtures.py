#!/usr/bin/env python3
"""Regenerate the deterministic fixtures under tests/fixtures/.

The pipeline fixtures are wired so the depth2normal output (3 channels) can
feed the fuse command's normal input next to 3-channel rgb/event feature
maps; the event CSV spans three 50 ms windows on an 8x6 sensor.
"""

import json
from pathlib import Path

import numpy as np

from trifuse.container import save_tensor
from trifuse.geometry import DepthMap
from trifuse.tensor import Tensor

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

HEIGHT, WIDTH = 6, 8


def write_depth():
    v, u = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float32)
    depth = 2.0 + 0.25 * u + 0.125 * v
    # fully valid map: its normal output feeds the fuse command directly
    save_tensor(FIXTURES / "depth.ten", DepthMap.from_array(depth).to_tensor())
    holes = depth.copy()
    holes[2, 3] = np.nan
    holes[4, 1] = np.nan
    save_tensor(FIXTURES / "depth_holes.ten", DepthMap.from_array(holes).to_tensor())


def write_features():
    rng = np.random.default_rng(0)
    for name in ("rgb_features", "event_features"):
        arr = rng.standard_normal((3, HEIGHT, WIDTH)).astype(np.float32)
        save_tensor(FIXTURES / f"{name}.ten", Tensor(arr))


def write_events():
    rng = np.random.default_rng(1)
    n = 40
    t = np.sort(rng.integers(0, 150_000, size=n))
    rows = [
        f"{int(t[i])},{int(rng.integers(0, WIDTH))},{int(rng.integers(0, HEIGHT))},{int(rng.integers(0, 2))}"
        for i in range(n)
    ]
    (FIXTURES / "events.csv").write_text("t_us,x,y,polarity\n" + "\n".join(rows) + "\n")


def write_annotations():
    doc = {
        "images": [
            {
                "id": "frame0",
                "detections": [
                    {"bbox": [10.0, 10.0, 24.0, 24.0], "score": 0.92, "category": 1},
                    {"bbox": [60.0, 40.0, 110.0, 90.0], "score": 0.81, "category": 1},
                    {"bbox": [200.0, 5.0, 18.0, 14.0], "score": 0.40, "category": 2},
                ],
                "ground_truth": [
                    {"bbox": [12.0, 11.0, 24.0, 24.0], "category": 1},
                    {"bbox": [58.0, 42.0, 112.0, 88.0], "category": 1},
                    {"bbox": [150.0, 150.0, 30.0, 30.0], "category": 2},
                ],
            },
            {
                "id": "frame1",
                "detections": [
                    {"bbox": [5.0, 5.0, 40.0, 40.0], "score": 0.77, "category": 2},
                    {"bbox": [90.0, 90.0, 100.0, 100.0], "score": 0.65, "category": 1},
                ],
                "ground_truth": [
                    {"bbox": [6.0, 7.0, 40.0, 38.0], "category": 2},
                    {"bbox": [88.0, 95.0, 100.0, 100.0], "category": 1},
                ],
            },
        ]
    }
    (FIXTURES / "annotations.json").write_text(json.dumps(doc, indent=2) + "\n")

    perfect_gts = [
        ("frame0", 1, [0.0, 0.0, 10.0, 10.0]),
        ("frame0", 1, [100.0, 100.0, 50.0, 50.0]),
        ("frame0", 1, [300.0, 300.0, 120.0, 120.0]),
        ("frame1", 2, [0.0, 200.0, 20.0, 20.0]),
        ("frame1", 2, [100.0, 0.0, 40.0, 40.0]),
        ("frame1", 2, [300.0, 0.0, 100.0, 100.0]),
    ]
    images = {}
    for img, cat, bbox in perfect_gts:
        entry = images.setdefault(img, {"id": img, "detections": [], "ground_truth": []})
        entry["ground_truth"].append({"bbox": bbox, "category": cat})
        entry["detections"].append({"bbox": bbox, "score": 1.0, "category": cat})
    (FIXTURES / "annotations_perfect.json").write_text(
        json.dumps({"images": list(images.values())}, indent=2) + "\n"
    )

    iou06 = {
        "images": [
            {
                "id": "only",
                "detections": [{"bbox": [2.5, 0.0, 10.0, 10.0], "score": 0.9, "category": 0}],
                "ground_truth": [{"bbox": [0.0, 0.0, 10.0, 10.0], "category": 0}],
            }
        ]
    }
    (FIXTURES / "annotations_iou06.json").write_text(json.dumps(iou06, indent=2) + "\n")


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write_depth()
    write_features()
    write_events()
    write_annotations()
    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()

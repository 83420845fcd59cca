"""Regenerate the golden eval fixture (run from the repository root).

The dataset comes from ``ovtad synth``; detections are jittered copies of the
ground truth plus decoys, rounded to three decimals. The stored report must
only change when the evaluation protocol changes on purpose.
"""
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent / "golden"


def main():
    HERE.mkdir(exist_ok=True)
    subprocess.run([sys.executable, "-m", "ovtad", "synth", "--out", str(HERE / "data"),
                    "--seed", "11", "--set", "synthetic.n_videos=3"], check=True)
    ann = json.loads((HERE / "data" / "annotations.json").read_text())["database"]
    rng = np.random.default_rng(11)
    labels = sorted({a["label"] for v in ann.values() for a in v["annotations"]})
    dets = []
    for vid in sorted(ann):
        for a in ann[vid]["annotations"]:
            s, e = a["segment_frames"]
            for _ in range(2):
                js, je = rng.normal(0, 0.15 * (e - s), size=2)
                dets.append({"video_id": vid, "start_sec": round(max(0.0, s + js), 3),
                             "end_sec": round(e + je + 1.0, 3), "label": a["label"],
                             "score": round(float(rng.uniform(0.2, 0.95)), 3)})
        for _ in range(3):
            s = float(rng.uniform(0, 100))
            dets.append({"video_id": vid, "start_sec": round(s, 3),
                         "end_sec": round(s + float(rng.uniform(3, 25)), 3),
                         "label": str(rng.choice(labels)),
                         "score": round(float(rng.uniform(0.05, 0.9)), 3)})
    (HERE / "detections.json").write_text(json.dumps(dets, indent=2) + "\n")
    subprocess.run([sys.executable, "-m", "ovtad", "eval", "--data", str(HERE / "data"),
                    "--detections", str(HERE / "detections.json"),
                    "--out", str(HERE / "report.json")], check=True)
    subprocess.run([sys.executable, "-m", "ovtad", "split", "--data", str(HERE / "data"),
                    "--seed", "0", "--out", str(HERE / "split.json")], check=True)
    subprocess.run([sys.executable, "-m", "ovtad", "eval", "--data", str(HERE / "data"),
                    "--detections", str(HERE / "detections.json"),
                    "--split", str(HERE / "split.json"), "--subset", "test",
                    "--out", str(HERE / "report_test.json")], check=True)


if __name__ == "__main__":
    main()

"""Argument and report helpers shared by the experiment scripts."""
import argparse
import csv
from pathlib import Path

import numpy as np


def parser(description, count=50):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--count", type=int, default=count, help="number of synthetic frames")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", type=Path, help="optional CSV with one row per trial")
    return p


def summarize(label, results, ok):
    e2 = np.array([r.e2d for r in results])
    e3 = np.array([r.e3d for r in results])
    rate = np.mean([ok(r) for r in results])
    print(f"{label:24s} n={len(results):3d}  success {100 * rate:5.1f}%  "
          f"e2d median {np.median(e2):7.2f} px  e3d median {np.median(e3):8.2f} mm  "
          f"time {sum(r.seconds for r in results):7.1f} s")
    return rate


def write_rows(path, rows):
    if path is None or not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {path}")


def row(label, r):
    return {"variant": label, "frame": r.frame_id, "e2d_px": r.e2d, "e3d_mm": r.e3d, "rot_deg": r.rot_deg,
            "loss": r.loss, "seconds": r.seconds}

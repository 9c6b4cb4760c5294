"""Rigid-pose success rate for the mask, mask+dist and mask+dist+app objectives."""
from _common import parser, row, summarize, write_rows

from diffstate.pipeline.experiments import POSE_VARIANTS, pose_config, rigid_frames, rigid_trial


def main():
    p = parser(__doc__)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--no-offsets", action="store_true")
    a = p.parse_args()
    frames = rigid_frames(a.count, a.seed)
    rows, rates = [], {}
    for label, weights in POSE_VARIANTS.items():
        res = [rigid_trial(fr, weights=weights, config=pose_config(seed=i, restarts=a.restarts),
                           offsets=not a.no_offsets) for i, fr in enumerate(frames)]
        rates[label] = summarize(label, res, lambda r: r.e3d < 20.0)
        rows += [row(label, r) for r in res]
    r = list(rates.values())
    print("success non-decreasing as terms are added:", r[0] <= r[1] <= r[2])
    write_rows(a.out, rows)


if __name__ == "__main__":
    main()

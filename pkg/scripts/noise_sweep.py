"""Soft-shape and rigid-pose accuracy under pixel-flip mask noise, with and without mask cleaning.

Rigid trials start from the true pose so the numbers isolate the noise bias
from the global search.
"""
from _common import parser, row, summarize, write_rows

from diffstate.pipeline.experiments import (pose_config, rigid_frames, rigid_trial, shape_config, soft_frames,
                                            soft_trial)


def main():
    p = parser(__doc__, count=8)
    p.add_argument("--levels", type=float, nargs="+", default=[0.0, 0.005, 0.01, 0.02])
    a = p.parse_args()
    rows = []
    for noise in a.levels:
        for clean in (False, True):
            tag = f"noise {noise:g}{' clean' if clean else ''}"
            soft = [soft_trial(fr, perturb_seed=i, config=shape_config(seed=i), clean=clean)
                    for i, fr in enumerate(soft_frames(a.count, a.seed, noise=noise))]
            summarize("soft " + tag, soft, lambda r: r.e2d < 2.0 and r.e3d < 5.0)
            rigid = [rigid_trial(fr, config=pose_config(restarts=1), init=fr.pose, clean=clean)
                     for fr in rigid_frames(a.count, a.seed, noise=noise)]
            summarize("rigid " + tag, rigid, lambda r: r.e3d < 20.0 and r.rot_deg < 2.0)
            rows += [row("soft " + tag, r) for r in soft] + [row("rigid " + tag, r) for r in rigid]
    write_rows(a.out, rows)


if __name__ == "__main__":
    main()

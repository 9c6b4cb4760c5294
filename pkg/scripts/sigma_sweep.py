"""Recovery quality against the render blur used while optimizing."""
from _common import parser, row, summarize, write_rows

from diffstate.pipeline.experiments import (pose_config, rigid_frames, rigid_trial, shape_config, soft_frames,
                                            soft_trial)


def main():
    p = parser(__doc__, count=10)
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.01, 0.05, 0.2, 1.0, 4.0])
    p.add_argument("--scenario", choices=["soft", "rigid"], default="soft")
    a = p.parse_args()
    rows = []
    if a.scenario == "soft":
        frames = soft_frames(a.count, a.seed)
        for sigma in a.sigmas:
            res = [soft_trial(fr, perturb_seed=i, config=shape_config(sigma=sigma, seed=i))
                   for i, fr in enumerate(frames)]
            summarize(f"sigma {sigma:g}", res, lambda r: r.e2d < 2.0 and r.e3d < 5.0)
            rows += [row(f"sigma {sigma:g}", r) for r in res]
    else:
        frames = rigid_frames(a.count, a.seed)
        for sigma in a.sigmas:
            res = [rigid_trial(fr, config=pose_config(sigma=sigma, seed=i)) for i, fr in enumerate(frames)]
            summarize(f"sigma {sigma:g}", res, lambda r: r.e3d < 20.0 and r.rot_deg < 2.0)
            rows += [row(f"sigma {sigma:g}", r) for r in res]
    write_rows(a.out, rows)


if __name__ == "__main__":
    main()

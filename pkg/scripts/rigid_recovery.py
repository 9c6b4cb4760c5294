"""Camera-from-base pose recovery of the 3-link arm from random frustum starts."""
from _common import parser, row, summarize, write_rows

from diffstate.pipeline.experiments import pose_config, rigid_frames, rigid_trial


def main():
    p = parser(__doc__)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--sigma", type=float, help="render blur while optimizing (px^2)")
    p.add_argument("--no-offsets", action="store_true", help="hold the vertex offsets at zero")
    p.add_argument("--offset-l2", type=float, default=0.0, help="L2 penalty on the vertex offsets")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--clean", action="store_true")
    a = p.parse_args()
    extra = {} if a.sigma is None else {"sigma": a.sigma}
    res = []
    for i, fr in enumerate(rigid_frames(a.count, a.seed, noise=a.noise)):
        cfg = pose_config(iterations=a.iters, seed=i, restarts=a.restarts, **extra)
        r = rigid_trial(fr, config=cfg, offsets=not a.no_offsets, offset_l2=a.offset_l2, clean=a.clean)
        print(f"{fr.frame_id}  EE {r.e3d:8.1f} mm  {r.e2d:7.1f} px  rotation {r.rot_deg:6.2f} deg")
        res.append(r)
    summarize("offsets off" if a.no_offsets else "offsets on", res, lambda r: r.e3d < 20.0 and r.rot_deg < 2.0)
    write_rows(a.out, [row("rigid", r) for r in res])


if __name__ == "__main__":
    main()

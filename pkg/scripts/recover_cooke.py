"""Jitter the Cooke triplet's normalized curvatures and re-optimize it with the lens loss.

Default: +/-5% jitter, 2000 constant + 4000 decaying steps.  Writes the
trajectory, the recovered lens, a before/after layout and a summary.
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from lensforge.lens import builtin_lens, save_lens, system_from_prescription
from lensforge.losses import ConstraintConfig
from lensforge.optimize import OptimizerConfig, lens_objective, optimize_lens, perturb_curvatures
from lensforge.plots import layout_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/recover_cooke")
    ap.add_argument("--jitter", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps-constant", type=int, default=2000)
    ap.add_argument("--steps-decay", type=int, default=4000)
    ap.add_argument("--margin-deg", type=float, default=ConstraintConfig().margin_deg)
    ap.add_argument("--margin-mm", type=float, default=ConstraintConfig().margin_mm)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = OptimizerConfig(steps_constant=args.steps_constant, steps_decay=args.steps_decay, seed=args.seed)
    constraints = ConstraintConfig(margin_deg=args.margin_deg, margin_mm=args.margin_mm)
    model = perturb_curvatures(builtin_lens("cooke"), args.jitter, seed=args.seed)
    start = model.prescription()
    t = time.perf_counter()

    def progress(res):
        if res.step % 250 == 0 and res.report is not None:
            print(f"step {res.step:5d}  spot {float(res.report.spot.detach()) * 1e3:7.2f} um  "
                  f"lr {res.lr:.2e}  {time.perf_counter() - t:6.0f} s", flush=True)

    res = optimize_lens(model, cfg, objective=lens_objective(cfg.sampling, constraints),
                        trajectory_path=out / "trajectory.jsonl", constraints=constraints, callback=progress)
    minutes = (time.perf_counter() - t) / 60
    save_lens(res.prescription, out / "lens.json")
    svg, _ = layout_svg(system_from_prescription(res.prescription), baseline=system_from_prescription(start))
    (out / "layout.svg").write_text(svg)
    summary = {"initial": res.initial.as_dict(), "final": res.final.as_dict(), "minutes": minutes,
               "config": {"jitter": args.jitter, "seed": args.seed, "margin_deg": args.margin_deg, "margin_mm": args.margin_mm,
                          "steps": cfg.steps}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    f = res.final
    print(f"spot {float(res.initial.spot) * 1e3:.2f} -> {float(f.spot) * 1e3:.2f} um; RP {float(f.path):.1e}  "
          f"RA {float(f.angle):.1e}  vignetting {100 * f.vignetting:.2f}%  glasses {res.prescription.glass_names()}  "
          f"{minutes:.1f} min")


if __name__ == "__main__":
    main()

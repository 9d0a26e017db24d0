"""Joint lens optimization with the image-fidelity surrogate as the downstream loss.

Scenes are PNGs from --scenes, or smooth random images when none are given.
Reports the joint loss before and after on a fixed evaluation batch and
renders one scene through the start and final lens.
"""

import argparse
import json
from pathlib import Path

import torch

from lensforge.imaging import ImageGeometry, read_image, render_lens, simulate_lens, write_image
from lensforge.lens import LensModel, builtin_lens, save_lens
from lensforge.losses import ConstraintConfig
from lensforge.optimize import OptimizerConfig, joint_objective, optimize_lens
from lensforge.raytrace import SamplingConfig, spot_diagrams


def synthetic_scenes(n, h, w, seed=7):
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(n, 3, h + 4, w + 4, generator=g, dtype=torch.float64)
    return list(torch.nn.functional.avg_pool2d(base, 5, stride=1))


def rendered(model, scene, geom, sampling):
    with torch.no_grad():
        sys = model.system()
        return render_lens(scene, simulate_lens(sys, spot_diagrams(sys, sampling), geom))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/joint")
    ap.add_argument("--lens", default="doublet")
    ap.add_argument("--scenes", help="directory of equally sized PNG scenes")
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--lens-weight", type=float, default=1.0)
    ap.add_argument("--batch-size", type=int, default=2)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.scenes:
        scenes = [read_image(f)[0] for f in sorted(Path(args.scenes).glob("*.png"))]
    else:
        scenes = synthetic_scenes(4, 64, 96)
    geom = ImageGeometry(*scenes[0].shape[1:])
    sampling = SamplingConfig(n_h=7, n_p=256, n_rings=8)
    evaluate = joint_objective(scenes, geom, args.lens_weight, sampling,
                               ConstraintConfig(margin_deg=0.0), batch_size=len(scenes))
    model = LensModel(builtin_lens(args.lens))
    before = evaluate(model, model.params, 0)
    write_image(rendered(model, scenes[0], geom, sampling), out / "start.png")

    cfg = OptimizerConfig(lr=args.lr, steps_constant=args.steps // 2, steps_decay=args.steps - args.steps // 2,
                          sampling=sampling)
    objective = joint_objective(scenes, geom, args.lens_weight, sampling, batch_size=args.batch_size)
    res = optimize_lens(model, cfg, objective=objective, trajectory_path=out / "trajectory.jsonl",
                        eval_sampling=sampling)
    for v in model.params.values():
        v.requires_grad_(True)
    after = evaluate(model, model.params, 0)
    write_image(rendered(model, scenes[0], geom, sampling), out / "final.png")
    write_image(scenes[0], out / "scene.png")
    save_lens(res.prescription, out / "lens.json")
    summary = {"before": before.report.as_dict(), "after": after.report.as_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    b, a = before.report, after.report
    print(f"l_joint {float(b.joint):.6f} -> {float(a.joint):.6f}  l_down {float(b.downstream):.6f} -> "
          f"{float(a.downstream):.6f}  spot {float(b.spot) * 1e3:.2f} -> {float(a.spot) * 1e3:.2f} um  "
          f"RP {float(a.path):.1e}  RA {float(a.angle):.1e}")


if __name__ == "__main__":
    main()

"""Command-line entry point: info, optimize, render, plot, tolerance."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch

from .config import ConfigError, RunConfig, load_config_file, resolve_config
from .diffcore import ContractError, GradientFailure
from .glass import GlassError
from .imaging import PSFError, RenderError
from .lens import (LensFileError, LensModel, LensPrescription, SolveError, bfl, builtin_lens, efl,
                   entrance_pupil, load_lens, save_lens, system_from_prescription, BUILTIN_LENSES)
from .losses import LossError, lens_loss, spot_loss
from .raytrace import AimingError, FieldFailure, SamplingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ABORTED = 0, 2, 3, 4

log = logging.getLogger("lensforge")


class UsageError(Exception):
    pass


def _threads() -> None:
    n = os.environ.get("LENSFORGE_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"LENSFORGE_THREADS must be an integer, got {n!r}") from None


def _load_lens(spec: str) -> LensPrescription:
    if spec in BUILTIN_LENSES and not Path(spec).exists():
        return builtin_lens(spec)
    return load_lens(spec)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    return out


# ------------------------------------------------------------------ commands

def cmd_info(args, cfg: RunConfig) -> int:
    from .imaging import distortion_field, relative_illumination
    from .losses import ray_angle_loss, ray_path_loss

    p = _load_lens(args.lens)
    model = LensModel(p)
    sampling = replace(cfg.sampling, seed=cfg.seed)
    with torch.no_grad():
        raw = system_from_prescription(p)
        rep, sys_, spots = lens_loss(model, model.params, sampling, cfg.constraints, return_spots=True)
        z_ep, r_ep, _ = entrance_pupil(raw)
        D, _ = distortion_field(sys_, spots)
        R = relative_illumination(sys_, spots.fields_deg, spots.aim)
    info = {
        "name": p.name,
        "efl_mm": float(efl(raw)),
        "efl_evaluated_mm": float(rep.efl),
        "bfl_mm": float(bfl(raw)),
        "entrance_pupil_z_mm": float(z_ep),
        "entrance_pupil_radius_mm": float(r_ep),
        "spot_um": float(rep.spot) * 1e3,
        "ray_path": float(rep.path),
        "ray_angle": float(rep.angle),
        "vignetting": rep.vignetting,
        "feasible": float(rep.path) == 0.0 and float(rep.angle) == 0.0,
        "glasses": rep.glass_names,
        "fields_deg": [float(h) for h in spots.fields_deg],
        "distortion": [float(d) for d in D],
        "relative_illumination": [float(r) for r in R],
    }
    if args.out:
        out = _out_dir(cfg)
        (out / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
    else:
        print(f"lens            {p.name or args.lens}")
        print(f"EFL             {info['efl_mm']:.4f} mm (as written), {info['efl_evaluated_mm']:.4f} mm (evaluated)")
        print(f"BFL             {info['bfl_mm']:.4f} mm")
        print(f"entrance pupil  z = {info['entrance_pupil_z_mm']:.4f} mm, r = {info['entrance_pupil_radius_mm']:.4f} mm")
        print(f"spot size       {info['spot_um']:.2f} um")
        print(f"vignetting      {100 * info['vignetting']:.3f} %")
        print(f"ray path loss   {info['ray_path']:.3e}")
        print(f"ray angle loss  {info['ray_angle']:.3e}")
        print(f"constraints     {'satisfied' if info['feasible'] else 'violated'}")
        print(f"glasses         {', '.join(info['glasses'])}")
        print("field (deg)   D_h        R_h")
        for h, d, r in zip(info["fields_deg"], info["distortion"], info["relative_illumination"]):
            print(f"{h:9.2f}  {d:+.5f}  {r:.4f}")
    return EXIT_OK


def cmd_optimize(args, cfg: RunConfig) -> int:
    from .imaging import ImageGeometry, read_image
    from .optimize import (OptimizationAborted, OptimizerConfig, joint_objective, lens_objective,
                           optimize_lens, perturb_curvatures)
    from .plots import layout_svg

    p = _load_lens(args.lens)
    opt_cfg = replace(cfg.optimizer, seed=cfg.seed)
    if args.steps is not None:
        opt_cfg = replace(opt_cfg, steps_constant=args.steps // 3, steps_decay=args.steps - args.steps // 3)
    out = _out_dir(cfg)
    if opt_cfg.steps == 0 and not args.perturb:
        save_lens(p, out / "lens.json")
        (out / "trajectory.jsonl").write_text("", encoding="utf-8")
        print(f"0 steps: wrote {out / 'lens.json'} unchanged")
        return EXIT_OK
    model = perturb_curvatures(p, args.perturb, cfg.seed) if args.perturb else LensModel(p)
    start = model.prescription()
    sampling = replace(opt_cfg.sampling, seed=cfg.seed)
    if args.loss == "joint":
        scene_dir = args.scenes or cfg.paths.scenes
        if not scene_dir:
            raise UsageError("--loss joint needs --scenes DIR")
        files = sorted(f for f in Path(scene_dir).iterdir() if f.suffix.lower() == ".png")
        if not files:
            raise UsageError(f"no PNG scenes in {scene_dir}")
        scenes = [read_image(f)[0] for f in files]
        h, w = scenes[0].shape[1:]
        if any(s.shape[1:] != (h, w) for s in scenes):
            raise UsageError("all scenes must share one size")
        geom = ImageGeometry(h, w, p.specs.sensor_diag_mm, p.specs.half_fov_deg, cfg.res2x)
        objective = joint_objective(scenes, geom, cfg.lens_weight, sampling, cfg.constraints,
                                    batch_size=cfg.batch_size, seed=cfg.seed)
    else:
        objective = lens_objective(sampling, cfg.constraints)

    def progress(res):
        if res.step % 100 == 0 and res.report is not None:
            log.info("step %d  spot %.2f um  lens %.4g", res.step, float(res.report.spot.detach()) * 1e3,
                     float(res.report.lens.detach()))

    try:
        result = optimize_lens(model, opt_cfg, objective, out / "trajectory.jsonl",
                               replace(cfg.sampling, seed=cfg.seed), cfg.constraints, callback=progress)
    except OptimizationAborted as exc:
        model.params.assign(exc.params.flatten())
        save_lens(model.prescription(), out / "lens_last_good.json")
        (out / "abort.txt").write_text(f"aborted at step {exc.step}: {exc}\n", encoding="utf-8")
        print(f"optimization aborted at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    save_lens(result.prescription, out / "lens.json")
    (out / "report.json").write_text(json.dumps({"initial": result.initial.as_dict(),
                                                 "final": result.final.as_dict()}, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    svg, _ = layout_svg(system_from_prescription(result.prescription), baseline=system_from_prescription(start))
    (out / "layout.svg").write_text(svg, encoding="utf-8")
    print(f"spot size {float(result.initial.spot) * 1e3:.2f} -> {float(result.final.spot) * 1e3:.2f} um; "
          f"wrote {out / 'lens.json'}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    from .imaging import (ImageGeometry, correct_bboxes, read_boxes, read_image, render_lens, simulate_lens,
                          write_boxes, write_image)
    from .raytrace import spot_diagrams

    p = _load_lens(args.lens)
    scene, depth = read_image(args.image)
    geom = ImageGeometry(scene.shape[1], scene.shape[2], p.specs.sensor_diag_mm, p.specs.half_fov_deg, cfg.res2x)
    out = _out_dir(cfg)
    with torch.no_grad():
        model = LensModel(p)
        sys_ = model.system()
        spots = spot_diagrams(sys_, replace(cfg.sampling, seed=cfg.seed))
        sim = simulate_lens(sys_, spots, geom)
        image = render_lens(scene, sim)
    name = args.output or (Path(args.image).stem + "_aberrated.png")
    write_image(image, out / name, args.depth or depth)
    print(f"wrote {out / name}")
    if args.boxes:
        boxes = correct_bboxes(read_boxes(args.boxes), sim.distortion)
        bname = Path(args.boxes).stem + "_corrected.txt"
        write_boxes(boxes, out / bname)
        clipped = sum(b.clipped for b in boxes)
        print(f"wrote {out / bname} ({len(boxes)} boxes, {clipped} clipped)")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    from .imaging import field_psfs
    from .plots import layout_svg, psf_mosaic_svg, ray_fan_svg, spots_svg
    from .raytrace import spot_diagrams

    p = _load_lens(args.lens)
    out = _out_dir(cfg)
    with torch.no_grad():
        sys_ = LensModel(p).system()
        spots = spot_diagrams(sys_, replace(cfg.sampling, seed=cfg.seed))
        ls = float(spot_loss(spots))
        half = p.specs.half_fov_deg
        waves, chans = cfg.sampling.spectrum()
        mid = [i for i in range(len(waves)) if i % 5 == 2]
        figures = {
            "layout.svg": layout_svg(sys_)[0],
            "spots.svg": spots_svg(spots, ls)[0],
            "psf.svg": psf_mosaic_svg(field_psfs(spots), spots.fields_deg)[0],
            "ray_fan.svg": ray_fan_svg(sys_, [0.0, half / 2, half], [float(waves[i]) for i in mid],
                                       [int(chans[i]) for i in mid])[0],
        }
    for name, text in figures.items():
        (out / name).write_text(text, encoding="utf-8")
        print(f"wrote {out / name}")
    return EXIT_OK


def cmd_tolerance(args, cfg: RunConfig) -> int:
    from .optimize import tolerance_mc
    from .plots import histogram_svg

    p = _load_lens(args.lens)
    out = _out_dir(cfg)
    rep = tolerance_mc(p, cfg.tolerance, args.n, cfg.seed, replace(cfg.tolerance_sampling, seed=cfg.seed))
    (out / "tolerance.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    svg, _ = histogram_svg([v * 1e3 for v in rep.spots_mm], rep.nominal_mm * 1e3)
    (out / "tolerance_hist.svg").write_text(svg, encoding="utf-8")
    q = rep.quantiles()
    print(f"nominal spot {rep.nominal_mm * 1e3:.2f} um, {len(rep.spots_mm)} trials, {rep.failures} failed")
    for k in ("mean", "q05", "q25", "median", "q75", "q95"):
        if k in q:
            print(f"  {k:<6} {q[k] * 1e3:8.2f} um")
    return EXIT_OK


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lensforge", description="Differentiable lens design and image simulation.")
    ap.add_argument("--config", help="JSON or YAML run configuration")
    ap.add_argument("--seed", type=int, help="random seed (overrides the config)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--res2x", action="store_true", default=None,
                    help="image covers the upper-left quadrant of a 2x sensor")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("info", help="first-order data, spot size, distortion and illumination")
    s.add_argument("lens", help="lens file or built-in name")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("optimize", help="optimize a lens")
    s.add_argument("lens")
    s.add_argument("--steps", type=int, help="total steps (one third constant, the rest decaying)")
    s.add_argument("--loss", choices=("lens", "joint"), default="lens")
    s.add_argument("--scenes", help="directory of PNG scenes for --loss joint")
    s.add_argument("--perturb", type=float, default=0.0, help="jitter normalized curvatures by this fraction first")

    s = sub.add_parser("render", help="simulate the image formed by a lens")
    s.add_argument("lens")
    s.add_argument("image")
    s.add_argument("--boxes", help="bounding boxes to correct for distortion")
    s.add_argument("--output", help="output file name inside --out")
    s.add_argument("--depth", type=int, choices=(8, 16))

    s = sub.add_parser("plot", help="write layout, spot, PSF and ray-fan SVGs")
    s.add_argument("lens")

    s = sub.add_parser("tolerance", help="Monte-Carlo tolerancing")
    s.add_argument("lens")
    s.add_argument("-n", type=int, default=1000, help="number of trials")
    return ap


COMMANDS = {"info": cmd_info, "optimize": cmd_optimize, "render": cmd_render, "plot": cmd_plot,
            "tolerance": cmd_tolerance}


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads()
        file_data = load_config_file(args.config) if args.config else None
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["paths"] = {"out": args.out}
        if args.res2x:
            overrides["res2x"] = True
        cfg = resolve_config(file_data, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, LensFileError, GlassError, UsageError, SamplingError, ContractError, RenderError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolveError, FieldFailure, AimingError, LossError, GradientFailure, PSFError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

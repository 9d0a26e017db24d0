"""Evaluate the bundled baseline lenses: EFL, spot size, distortion and illumination.

Writes ``spots.json`` and per-lens plots to --out.
"""

import argparse
import json
import time
from pathlib import Path

import torch

from lensforge.imaging import distortion_field, relative_illumination
from lensforge.lens import BUILTIN_LENSES, LensModel, builtin_lens, efl, system_from_prescription
from lensforge.losses import ray_angle_loss, ray_path_loss, spot_loss
from lensforge.plots import layout_svg, spots_svg
from lensforge.raytrace import SamplingConfig, spot_diagrams

PUBLISHED_UM = {"doublet": 80.1, "cooke": 30.6, "tessar": 14.8}


def evaluate(name: str, sampling: SamplingConfig) -> dict:
    p = builtin_lens(name)
    t = time.perf_counter()
    with torch.no_grad():
        raw = system_from_prescription(p)
        sys = LensModel(p).system()
        sd = spot_diagrams(sys, sampling)
        spot = float(spot_loss(sd))
        raw_spot = float(spot_loss(spot_diagrams(raw, sampling)))
        D, _ = distortion_field(sys, sd)
        R = relative_illumination(sys, sd.fields_deg, sd.aim)
    return {
        "efl_mm": float(efl(raw)), "spot_um": spot * 1e3, "spot_as_written_um": raw_spot * 1e3,
        "published_um": PUBLISHED_UM.get(name), "ray_path": float(ray_path_loss(sd.record, sys.medium)),
        "ray_angle": float(ray_angle_loss(sd.record)), "vignetting": sd.vignetting,
        "distortion_edge": float(D[-1]), "illumination_edge": float(R[-1]),
        "seconds": time.perf_counter() - t, "_sys": sys, "_spots": sd,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/spots")
    ap.add_argument("--all", action="store_true", help="include the optimized variants")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = BUILTIN_LENSES if args.all else tuple(PUBLISHED_UM)
    table = {}
    for name in names:
        r = evaluate(name, SamplingConfig())
        sys, sd = r.pop("_sys"), r.pop("_spots")
        (out / f"{name}_layout.svg").write_text(layout_svg(sys)[0])
        (out / f"{name}_spots.svg").write_text(spots_svg(sd, r["spot_um"] * 1e-3)[0])
        table[name] = r
        ref = f" (published {r['published_um']})" if r["published_um"] else ""
        print(f"{name:<14} EFL {r['efl_mm']:.3f} mm  spot {r['spot_um']:.2f} um{ref}  "
              f"RP {r['ray_path']:.1e}  RA {r['ray_angle']:.1e}  D {100 * r['distortion_edge']:+.2f}%  "
              f"R {r['illumination_edge']:.3f}  {r['seconds']:.1f} s")
    (out / "spots.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

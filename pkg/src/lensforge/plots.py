"""Static SVG figures: layout, spot diagrams, PSF mosaic, ray fans, histograms.

Every function returns ``(svg_text, data)`` where ``data`` holds the plotted
numbers so they can be checked without parsing the SVG.
"""

from __future__ import annotations

import io
import math
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .glass import LAMBDA_D  # noqa: E402
from .lens import System  # noqa: E402
from .raytrace import AimCorrection, SpotDiagrams, make_rays, ray_aim, trace  # noqa: E402

plt.rcParams["svg.hashsalt"] = "lensforge"
plt.rcParams["svg.fonttype"] = "none"

CHANNEL_COLORS = ("#c0392b", "#27ae60", "#2e5fc1")


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def _np(t) -> np.ndarray:
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)


def fan_rays(sys: System, field_deg: float, n: int = 7, aim: Optional[AimCorrection] = None,
             wavelength: float = LAMBDA_D, sagittal: bool = False):
    """Trace a meridional (or sagittal) fan across the corrected pupil; returns the trace record."""
    fields = torch.tensor([float(field_deg)])
    if aim is None:
        aim = ray_aim(sys, fields, 2)
    p = torch.linspace(-1.0, 1.0, n) if n > 1 else torch.zeros(1)
    unit = torch.stack([p, torch.zeros(n)], 1) if sagittal else torch.stack([torch.zeros(n), p], 1)
    rays = make_rays(sys, fields, unit, aim, 1)
    return p, trace(sys, rays, [wavelength], record_all=True)


def surface_profiles(sys: System, semi_apertures: Sequence[float], n: int = 41):
    vert = _np(sys.vertices)
    out = []
    for k in range(sys.K):
        c = float(sys.c[k])
        r = np.linspace(-semi_apertures[k], semi_apertures[k], n)
        arg = np.clip(1.0 - c * c * r * r, 0.0, None)
        sag = c * r * r / (1.0 + np.sqrt(arg))
        out.append((vert[k] + sag, r))
    return out


def _semi_apertures(sys: System, fields: Sequence[float]) -> List[float]:
    semi = np.zeros(sys.K)
    for h in fields:
        for sag in (False, True):
            _, rec = fan_rays(sys, h, 9, sagittal=sag)
            for k in range(sys.K):
                pos = _np(rec.positions[k + 1])
                semi[k] = max(semi[k], float(np.hypot(pos[:, 0], pos[:, 1]).max()))
    return [s * 1.05 for s in semi]


def layout_svg(sys: System, baseline: Optional[System] = None, fields: Optional[Sequence[float]] = None):
    """Cross-section with ray fans for three fields; ``baseline`` is drawn dashed."""
    with torch.no_grad():
        half = sys.specs.half_fov_deg
        fields = list(fields) if fields is not None else [0.0, half / 2, half]
        fig, ax = plt.subplots(figsize=(8, 4))
        data: Dict[str, object] = {"surfaces": sys.K, "fields": fields}
        for s, style, alpha in ((baseline, "--", 0.6), (sys, "-", 1.0)):
            if s is None:
                continue
            semi = _semi_apertures(s, fields)
            prof = surface_profiles(s, semi)
            for k, (z, r) in enumerate(prof):
                lw = 0.8 if k == s.stop else 1.4
                ax.plot(z, r, style, color="black", lw=lw, alpha=alpha)
            # element edges
            for k, m in enumerate(s.medium[:-1]):
                if m >= 0:
                    top = max(semi[k], semi[k + 1])
                    for sign in (1, -1):
                        ax.plot([prof[k][0][0 if sign < 0 else -1], prof[k + 1][0][0 if sign < 0 else -1]],
                                [sign * semi[k], sign * semi[k + 1]], style, color="black", lw=1.0, alpha=alpha)
            if s is sys:
                for i, h in enumerate(fields):
                    _, rec = fan_rays(s, h, 7)
                    zs = np.stack([_np(p)[:, 2] for p in rec.positions])
                    ys = np.stack([_np(p)[:, 1] for p in rec.positions])
                    ax.plot(zs, ys, color=CHANNEL_COLORS[i % 3], lw=0.6)
            if s is sys:
                data["semi_apertures"] = [float(a) for a in semi]
        ax.set_aspect("equal")
        ax.set_xlabel("z (mm)")
        ax.set_ylabel("y (mm)")
        return _svg(fig), data


def spots_svg(spots: SpotDiagrams, spot_loss_mm: float, n_show: int = 5, max_points: int = 3000):
    """Spot diagrams for a subset of fields, centered on the y-centroid.

    The common axis half-extent is three times the mean RMS spot size.
    """
    x, y, v = spots.mirrored()
    cy = _np(spots.centroid_y)
    n_h = x.shape[0]
    idx = np.unique(np.round(np.linspace(0, n_h - 1, min(n_show, n_h))).astype(int))
    extent = 3.0 * spot_loss_mm * 1e3
    fig, axes = plt.subplots(1, len(idx), figsize=(2.2 * len(idx), 2.4), squeeze=False)
    chans = np.asarray(spots.channels)
    for ax, h in zip(axes[0], idx):
        for ch in range(3):
            sel = chans == ch
            xs = _np(x[h][sel])[_np(v[h][sel])] * 1e3
            ys = (_np(y[h][sel])[_np(v[h][sel])] - cy[h]) * 1e3
            stride = max(1, len(xs) // max_points)
            xs, ys = xs[::stride], ys[::stride]
            ax.scatter(xs, ys, s=0.3, color=CHANNEL_COLORS[ch], alpha=0.4, linewidths=0, rasterized=False)
        ax.set_xlim(-extent, extent)
        ax.set_ylim(-extent, extent)
        ax.set_aspect("equal")
        ax.set_title(f"{float(spots.fields_deg[h]):.1f}°", fontsize=8)
        ax.tick_params(labelsize=6)
    axes[0][0].set_ylabel("μm")
    return _svg(fig), {"fields": [float(spots.fields_deg[h]) for h in idx], "extent_um": extent}


def psf_mosaic_svg(psfs: torch.Tensor, fields_deg, n_show: int = 5):
    p = _np(psfs)
    n_h = p.shape[0]
    idx = np.unique(np.round(np.linspace(0, n_h - 1, min(n_show, n_h))).astype(int))
    fig, axes = plt.subplots(1, len(idx), figsize=(2.0 * len(idx), 2.2), squeeze=False)
    for ax, h in zip(axes[0], idx):
        rgb = np.moveaxis(p[h], 0, -1)
        rgb = rgb / max(rgb.max(), 1e-300)
        ax.imshow(np.clip(rgb, 0, 1) ** 0.5, origin="lower", interpolation="nearest")
        ax.set_title(f"{float(fields_deg[h]):.1f}°", fontsize=8)
        ax.axis("off")
    return _svg(fig), {"fields": [float(fields_deg[h]) for h in idx]}


def ray_fan_data(sys: System, fields: Sequence[float], wavelengths: Sequence[float], n: int = 33):
    """Transverse ray errors against normalized pupil coordinate.

    Errors are relative to the d-line chief ray of each field.
    """
    out = []
    with torch.no_grad():
        for h in fields:
            aim = ray_aim(sys, torch.tensor([float(h)]), 2)
            _, chief = fan_rays(sys, h, 1, aim=aim)
            y0 = float(chief.y[0])
            entry = {"field": float(h), "wavelengths": list(map(float, wavelengths))}
            ey, ex = [], []
            for w in wavelengths:
                p, rm = fan_rays(sys, h, n, aim=aim, wavelength=w)
                _, rs = fan_rays(sys, h, n, aim=aim, wavelength=w, sagittal=True)
                ey.append(((_np(rm.y) - y0) * 1e3).tolist())
                ex.append((_np(rs.x) * 1e3).tolist())
            entry.update({"pupil": _np(p).tolist(), "ey_um": ey, "ex_um": ex})
            out.append(entry)
    return out


def ray_fan_svg(sys: System, fields: Sequence[float], wavelengths: Sequence[float], channels: Sequence[int],
                n: int = 33):
    data = ray_fan_data(sys, fields, wavelengths, n)
    fig, axes = plt.subplots(len(data), 2, figsize=(6, 2.0 * len(data)), squeeze=False)
    for row, entry in zip(axes, data):
        for j, key in enumerate(("ey_um", "ex_um")):
            for w, ch in enumerate(channels):
                row[j].plot(entry["pupil"], entry[key][w], color=CHANNEL_COLORS[ch], lw=0.8)
            row[j].axhline(0.0, color="grey", lw=0.5)
            row[j].set_title(f"{entry['field']:.1f}° {'meridional' if j == 0 else 'sagittal'}", fontsize=8)
            row[j].tick_params(labelsize=6)
    fig.tight_layout()
    return _svg(fig), data


def histogram_svg(values_um: Sequence[float], nominal_um: float, bins: int = 40):
    fig, ax = plt.subplots(figsize=(4, 3))
    counts, edges = np.histogram(np.asarray(values_um), bins=bins) if len(values_um) else (np.zeros(0), np.zeros(1))
    if len(values_um):
        ax.hist(values_um, bins=edges, color="#7f8c8d")
    ax.axvline(nominal_um, color="black", ls="--", lw=1)
    ax.set_xlabel("mean spot size (μm)")
    ax.set_ylabel("trials")
    return _svg(fig), {"counts": counts.tolist(), "edges": edges.tolist(), "nominal_um": nominal_um}

"""Batched exact ray tracing through spherical interfaces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .diffcore import as_tensor
from .glass import LAMBDA_D
from .lens import System, entrance_pupil, field_angles

CHANNELS = ("R", "G", "B")
QUANTILE_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


class SamplingError(ValueError):
    pass


class FieldFailure(RuntimeError):
    """Every ray of some field failed (missed a surface or was totally reflected)."""


class AimingError(ArithmeticError):
    pass


# ---------------------------------------------------------------- wavelengths

@dataclass(frozen=True)
class QECurve:
    wavelengths: np.ndarray  # (L,) nm, increasing
    response: np.ndarray  # (L, 3) for R, G, B


def parse_qe_curve(text: str) -> QECurve:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if len(parts) != 4:
            raise SamplingError(f"QE line {lineno}: expected 'lambda R G B'")
        rows.append([float(p) for p in parts])
    if not rows:
        raise SamplingError("empty QE curve")
    arr = np.array(rows)
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise SamplingError("QE wavelengths must be strictly increasing")
    return QECurve(arr[:, 0], arr[:, 1:])


def load_qe_curve(path=None) -> QECurve:
    if path is None:
        return default_qe_curve()
    return parse_qe_curve(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_qe_curve() -> QECurve:
    text = resources.files("lensforge.data").joinpath("imx172_qe.csv").read_text(encoding="utf-8")
    return parse_qe_curve(text)


def response_quantiles(lam: np.ndarray, q: np.ndarray, levels: Sequence[float]) -> np.ndarray:
    """Quantiles of a response curve treated as a density over wavelength.

    The response is linear between samples, so the CDF is piecewise
    quadratic and is inverted exactly inside each cell.
    """
    lam = np.asarray(lam, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.size < 2 or np.any(q < 0) or not np.any(q > 0):
        raise SamplingError("response must be non-negative and not identically zero")
    dl = np.diff(lam)
    mass = 0.5 * (q[:-1] + q[1:]) * dl
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    total = cdf[-1]
    out = []
    for p in levels:
        target = p * total
        i = int(np.searchsorted(cdf, target, side="left")) - 1
        i = min(max(i, 0), len(dl) - 1)
        r = target - cdf[i]
        a = (q[i + 1] - q[i]) / (2 * dl[i])
        b = q[i]
        if abs(a) < 1e-300:
            s = r / b
        else:
            # root of a s^2 + b s - r = 0 in [0, dl], written without cancellation
            s = 2 * r / (b + math.sqrt(b * b + 4 * a * r))
        out.append(lam[i] + s)
    return np.array(out)


def sample_wavelengths(curve: QECurve | None = None, levels=QUANTILE_LEVELS):
    """Five wavelengths per color channel at odd 10-quantiles of the response.

    Returns ``(wavelengths, channel)``: 15 wavelengths ordered R, G, B and
    the channel index (0, 1, 2) of each.
    """
    curve = curve or default_qe_curve()
    waves, chan = [], []
    for c in range(3):
        waves.extend(response_quantiles(curve.wavelengths, curve.response[:, c], levels))
        chan.extend([c] * len(levels))
    return np.array(waves), np.array(chan)


# ------------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SamplingConfig:
    n_h: int = 21
    n_p: int = 2048
    n_rings: int = 32
    seed: int = 0
    symmetric: bool = True  # trace only x >= 0 and mirror
    aim_iterations: int = 2  # one linear correction plus one refinement
    refresh_jitter: bool = False  # redraw azimuthal jitter on every call
    wavelengths: Optional[Tuple[float, ...]] = None  # None -> QE quantiles
    channels: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.n_p % self.n_rings:
            raise SamplingError("n_p must be divisible by n_rings")
        if self.symmetric and (self.n_p // self.n_rings) % 2:
            raise SamplingError("symmetric sampling needs an even number of points per ring")

    def spectrum(self):
        if self.wavelengths is None:
            return sample_wavelengths()
        ch = self.channels if self.channels is not None else (1,) * len(self.wavelengths)
        return np.array(self.wavelengths, dtype=float), np.array(ch)

    @property
    def n_w(self) -> int:
        return len(self.spectrum()[0])

    @property
    def per_field(self) -> int:
        """Rays actually traced per field and wavelength."""
        return self.n_p // 2 if self.symmetric else self.n_p


def sample_pupil(config: SamplingConfig, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Unit-disk pupil samples, shape ``(n, 2)`` of (x, y).

    Rings have radii sqrt(i / n_rings), i = 1..n_rings, so each ring closes an
    equal-area annulus and the outermost ring lies on the pupil edge.  Every
    ring holds the same number of points with stratified azimuthal jitter.
    With ``symmetric`` only the x >= 0 half is returned.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(config.seed if rng is None else rng)
    per_ring = config.n_p // config.n_rings
    n_az = per_ring // 2 if config.symmetric else per_ring
    span = math.pi if config.symmetric else 2 * math.pi
    start = -math.pi / 2 if config.symmetric else 0.0
    pts = []
    for i in range(1, config.n_rings + 1):
        r = math.sqrt(i / config.n_rings)
        phi = start + (np.arange(n_az) + rng.random(n_az)) * span / n_az
        pts.append(np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1))
    return np.concatenate(pts)


@dataclass
class AimCorrection:
    """Pupil-plane displacements for each field (mm)."""

    dy_top: torch.Tensor
    dy_bottom: torch.Tensor
    dx_side: torch.Tensor

    @classmethod
    def zeros(cls, n: int) -> "AimCorrection":
        z = torch.zeros(n)
        return cls(z, z.clone(), z.clone())

    def ellipse(self, radius: float):
        """Per-field (center_y, semi_x, semi_y) of the corrected pupil."""
        r = as_tensor(radius)
        center = 0.5 * (self.dy_top + self.dy_bottom)
        semi_y = r + 0.5 * (self.dy_top - self.dy_bottom)
        semi_x = r + self.dx_side
        return center, semi_x, semi_y


@dataclass
class RayBundle:
    origin: torch.Tensor  # (N, 3)
    direction: torch.Tensor  # (N, 3)
    wavelength_index: torch.Tensor  # (N,) long


def make_rays(sys: System, fields_deg, pupil_unit, aim: AimCorrection | None, n_w: int) -> RayBundle:
    """Rays ordered (field, wavelength, pupil) starting on the entrance-pupil plane."""
    fields_deg = as_tensor(fields_deg).reshape(-1)
    n_h = len(fields_deg)
    pu = as_tensor(pupil_unit)
    n_p = len(pu)
    z_ep, r_ep, _ = entrance_pupil(sys)
    aim = aim or AimCorrection.zeros(n_h)
    center, sx, sy = aim.ellipse(float(r_ep))
    x = sx[:, None] * pu[None, :, 0]
    y = center[:, None] + sy[:, None] * pu[None, :, 1]
    h = torch.deg2rad(fields_deg)
    d = torch.stack([torch.zeros_like(h), torch.sin(h), torch.cos(h)], dim=1)  # (n_h, 3)
    origin = torch.stack([x, y, torch.zeros_like(x) + z_ep], dim=-1)  # (n_h, n_p, 3)
    origin = origin[:, None].expand(n_h, n_w, n_p, 3).reshape(-1, 3)
    direction = d[:, None, None, :].expand(n_h, n_w, n_p, 3).reshape(-1, 3)
    widx = torch.arange(n_w)[None, :, None].expand(n_h, n_w, n_p).reshape(-1)
    return RayBundle(origin, direction, widx)


# --------------------------------------------------------------------- trace

@dataclass
class TraceRecord:
    """Ray state through every interface.

    ``zeta``/``zeta_p`` hold cos^2 of the incidence/refraction angle per
    interface (``(K, N)``; the incidence value is the intersection
    discriminant, negative when the surface is missed).  ``dz`` is the axial
    travel across each spacing, the last one ending on the image plane.
    Failed rays keep their last valid state.
    """

    x: torch.Tensor  # (N,) image plane
    y: torch.Tensor
    direction: torch.Tensor  # (N, 3) image space
    zeta: torch.Tensor  # (K, N)
    zeta_p: torch.Tensor  # (K, N)
    dz: torch.Tensor  # (K, N)
    valid: torch.Tensor  # (N,) bool
    positions: Optional[List[torch.Tensor]] = None  # K+1 entries of (N, 3)
    directions: Optional[List[torch.Tensor]] = None  # K entries of (N, 3)

    @property
    def n_rays(self) -> int:
        return self.x.shape[0]


def refract(d: torch.Tensor, normal: torch.Tensor, mu):
    """Vector Snell refraction of unit directions ``d`` at unit ``normal``.

    ``mu`` is n / n'.  The normal is oriented along propagation
    (``d . normal > 0``).  Returns ``(d', zeta, zeta')`` with the squared
    cosines of incidence and refraction; ``zeta' < 0`` flags total internal
    reflection.
    """
    mu = as_tensor(mu)
    cos_i = (d * normal).sum(-1)
    zeta = cos_i * cos_i
    zeta_p = 1.0 - mu * mu * (1.0 - zeta)
    cos_t = torch.sqrt(torch.clamp(zeta_p, min=0.0))
    d_new = mu[..., None] * d + (cos_t - mu * cos_i)[..., None] * normal
    return d_new, zeta, zeta_p


def trace(sys: System, rays: RayBundle, wavelengths, stop_at: int | None = None,
          record_all: bool = False) -> TraceRecord:
    """Trace ``rays`` through ``sys`` onto the image plane (or up to surface ``stop_at``)."""
    n_all = sys.indices(wavelengths)  # (K+1, W)
    widx = rays.wavelength_index
    vert = sys.vertices
    px, py, pz = rays.origin.unbind(1)
    dx, dy, dzc = rays.direction.unbind(1)
    N = px.shape[0]
    valid = torch.ones(N, dtype=torch.bool)
    zetas, zetas_p, dzs = [], [], []
    positions = [rays.origin] if record_all else None
    directions = [] if record_all else None
    last = sys.K if stop_at is None else stop_at + 1
    prev_z = None
    tiny = 1e-30
    n_ray = n_all[:, widx]  # (K+1, N)
    for k in range(last):
        c = sys.c[k]
        zl = pz - vert[k]
        B = dzc - c * (px * dx + py * dy + zl * dzc)
        C = c * (px * px + py * py + zl * zl) - 2.0 * zl
        zeta = B * B - c * C
        cos_i = torch.sqrt(torch.clamp(zeta, min=tiny))
        t = C / (B + cos_i)
        qx, qy, qz = px + t * dx, py + t * dy, pz + t * dzc
        nx, ny, nz = -c * qx, -c * qy, 1.0 - c * (qz - vert[k])
        mu = n_ray[k] / n_ray[k + 1]
        zeta_p = 1.0 - mu * mu * (1.0 - zeta)
        cos_t = torch.sqrt(torch.clamp(zeta_p, min=tiny))
        g = cos_t - mu * cos_i
        ex, ey, ez = mu * dx + g * nx, mu * dy + g * ny, mu * dzc + g * nz
        valid = valid & (zeta > 0) & (zeta_p > 0) & (ez > 0)
        zetas.append(zeta)
        zetas_p.append(zeta_p)
        if prev_z is not None:
            dzs.append(qz - prev_z)
        px, py, pz = (torch.where(valid, a, b) for a, b in ((qx, px), (qy, py), (qz, pz)))
        dx, dy, dzc = (torch.where(valid, a, b) for a, b in ((ex, dx), (ey, dy), (ez, dzc)))
        prev_z = pz
        if record_all:
            positions.append(torch.stack([px, py, pz], 1))
            directions.append(torch.stack([dx, dy, dzc], 1))
    if stop_at is None:
        z_img = vert[-1]
        dzs.append(z_img - prev_z)
        t = (z_img - pz) / dzc
        px, py, pz = px + t * dx, py + t * dy, pz + t * dzc
        if record_all:
            positions.append(torch.stack([px, py, pz], 1))
    dz = torch.stack(dzs) if dzs else px.new_zeros(0, N)
    return TraceRecord(px, py, torch.stack([dx, dy, dzc], 1), torch.stack(zetas), torch.stack(zetas_p), dz,
                       valid, positions, directions)


# --------------------------------------------------------------- ray aiming

def _trace_to_stop(sys: System, origin: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    rays = RayBundle(origin, direction, torch.zeros(len(origin), dtype=torch.long))
    rec = trace(sys, rays, [LAMBDA_D], stop_at=sys.stop, record_all=True)
    if not bool(rec.valid.all()):
        raise AimingError("aiming ray failed before reaching the stop")
    return rec.positions[-1]


def stop_radius(sys: System) -> torch.Tensor:
    """Real stop semi-aperture: height at the stop of the on-axis pupil-edge ray."""
    z_ep, r_ep, _ = entrance_pupil(sys)
    o = torch.stack([torch.zeros(()), as_tensor(r_ep), as_tensor(z_ep)]).reshape(1, 3)
    d = as_tensor([[0.0, 0.0, 1.0]])
    return _trace_to_stop(sys, o, d)[0, 1]


def aiming_errors(sys: System, fields_deg, aim: AimCorrection | None = None):
    """Stop-plane miss of the top, bottom and side edge rays, ``(3, n_h)`` (mm).

    Positive values mean the ray must move outwards (+y, -y edge outward is
    negative miss, +x) to reach the stop edge.
    """
    sys = sys.detach()
    fields_deg = as_tensor(fields_deg).reshape(-1)
    n_h = len(fields_deg)
    aim = aim or AimCorrection.zeros(n_h)
    z_ep, r_ep, _ = entrance_pupil(sys)
    r_s = stop_radius(sys)
    center, sx, sy = aim.ellipse(float(r_ep))
    h = torch.deg2rad(fields_deg)
    d = torch.stack([torch.zeros_like(h), torch.sin(h), torch.cos(h)], 1)
    zeros = torch.zeros(n_h)
    z = torch.full((n_h,), float(z_ep))
    top = torch.stack([zeros, center + sy, z], 1)
    bot = torch.stack([zeros, center - sy, z], 1)
    side = torch.stack([sx, center, z], 1)
    o = torch.cat([top, bot, side])
    s = _trace_to_stop(sys, o, torch.cat([d, d, d]))
    miss_top = r_s - s[:n_h, 1]
    miss_bot = -r_s - s[n_h:2 * n_h, 1]
    miss_side = r_s - s[2 * n_h:, 0]
    return torch.stack([miss_top, miss_bot, miss_side]), r_s


def ray_aim(sys: System, fields_deg, iterations: int = 1, differentiable: bool = True) -> AimCorrection:
    """Elliptic entrance-pupil correction per field.

    The stop coordinate of each edge ray is assumed linear in its pupil
    coordinate; the slope comes from autodiff through the trace.  With
    ``differentiable`` the Newton steps stay on the graph (slopes included),
    so lens gradients account for the re-aimed pupil.
    """
    if not any(v.requires_grad for v in (sys.c, sys.t, sys.n_d, sys.V_d)):
        differentiable = False
    if not differentiable:
        sys = sys.detach()
    fields_deg = as_tensor(fields_deg).reshape(-1)
    n_h = len(fields_deg)
    aim = AimCorrection.zeros(n_h)
    if iterations <= 0:
        return aim
    with torch.enable_grad() if differentiable else torch.no_grad():
        z_ep, r_ep, _ = entrance_pupil(sys)
        r_s = stop_radius(sys)
    h = torch.deg2rad(fields_deg)
    d = torch.stack([torch.zeros_like(h), torch.sin(h), torch.cos(h)], 1)
    zeros = torch.zeros(n_h)
    for _ in range(iterations):
        with torch.enable_grad():
            center, sx, sy = aim.ellipse(float(r_ep))
            # zero leaves: the gradient with respect to them is the per-ray slope
            probe = torch.zeros(3, n_h, requires_grad=True)
            z = z_ep.expand(n_h) if isinstance(z_ep, torch.Tensor) else torch.full((n_h,), float(z_ep))
            o = torch.cat([
                torch.stack([zeros, center + sy + probe[0], z], 1),
                torch.stack([zeros, center - sy + probe[1], z], 1),
                torch.stack([sx + probe[2], center, z], 1),
            ])
            s = _trace_to_stop(sys, o, torch.cat([d, d, d]))
            ys_top, ys_bot, xs_side = s[:n_h, 1], s[n_h:2 * n_h, 1], s[2 * n_h:, 0]
            # each output depends only on its own ray, so the sum gives per-ray slopes
            (g,) = torch.autograd.grad(ys_top.sum() + ys_bot.sum() + xs_side.sum(), [probe],
                                       create_graph=differentiable)
            if bool((g.detach().abs() < 1e-9).any()):
                raise AimingError("stop coordinate insensitive to pupil coordinate")
            dy_top = (r_s - ys_top) / g[0]
            dy_bot = (-r_s - ys_bot) / g[1]
            dx_side = (r_s - xs_side) / g[2]
            aim = AimCorrection(aim.dy_top + dy_top, aim.dy_bottom + dy_bot, aim.dx_side + dx_side)
        if not differentiable or not torch.is_grad_enabled():
            aim = AimCorrection(aim.dy_top.detach(), aim.dy_bottom.detach(), aim.dx_side.detach())
    zero = (fields_deg == 0).to(aim.dy_top.dtype)
    keep = 1.0 - zero
    return AimCorrection(aim.dy_top * keep, aim.dy_bottom * keep, aim.dx_side * keep)


# ------------------------------------------------------------- spot diagrams

@dataclass
class SpotDiagrams:
    """Image-plane coordinates per field, wavelength and pupil sample."""

    x: torch.Tensor  # (n_h, n_w, n_p)
    y: torch.Tensor
    valid: torch.Tensor  # (n_h, n_w, n_p) bool
    fields_deg: torch.Tensor
    wavelengths: np.ndarray
    channels: np.ndarray
    symmetric: bool
    record: Optional[TraceRecord] = None
    aim: Optional[AimCorrection] = None

    @property
    def centroid_y(self) -> torch.Tensor:
        w = self.valid.to(self.y.dtype)
        return (self.y * w).sum((1, 2)) / w.sum((1, 2)).clamp(min=1)

    @property
    def vignetting(self) -> float:
        return 1.0 - float(self.valid.double().mean())

    def mirrored(self):
        """Coordinates including the mirrored x < 0 half (when symmetric)."""
        if not self.symmetric:
            return self.x, self.y, self.valid
        return (torch.cat([self.x, -self.x], -1), torch.cat([self.y, self.y], -1),
                torch.cat([self.valid, self.valid], -1))


class PupilSampler:
    """Holds the (frozen or refreshed) pupil jitter for a run."""

    def __init__(self, config: SamplingConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._frozen = sample_pupil(config, self.rng)

    def __call__(self) -> np.ndarray:
        if self.config.refresh_jitter:
            return sample_pupil(self.config, self.rng)
        return self._frozen


def spot_diagrams(sys: System, config: SamplingConfig = SamplingConfig(), fields_deg=None,
                  aim: AimCorrection | None = None, pupil=None, raise_on_failure: bool = True) -> SpotDiagrams:
    """Trace every field/wavelength/pupil sample to the image plane.

    ``aim`` defaults to a fresh :func:`ray_aim` with ``config.aim_iterations``.
    """
    if fields_deg is None:
        fields_deg = field_angles(sys.specs, config.n_h)
    fields_deg = as_tensor(fields_deg).reshape(-1)
    waves, chans = config.spectrum()
    if aim is None:
        aim = ray_aim(sys, fields_deg, config.aim_iterations)
    if pupil is None:
        pupil = sample_pupil(config)
    rays = make_rays(sys, fields_deg, pupil, aim, len(waves))
    rec = trace(sys, rays, waves)
    shape = (len(fields_deg), len(waves), len(pupil))
    valid = rec.valid.reshape(shape)
    if raise_on_failure:
        dead = ~valid.reshape(shape[0], -1).any(1)
        if bool(dead.any()):
            bad = [float(f) for f in fields_deg[dead]]
            raise FieldFailure(f"all rays failed for field(s) {bad} deg")
    return SpotDiagrams(rec.x.reshape(shape), rec.y.reshape(shape), valid, fields_deg,
                        waves, chans, config.symmetric, rec, aim)

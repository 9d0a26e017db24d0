"""Image formation: KDE PSFs, PSF grid, relative illumination, distortion, rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import as_tensor
from .glass import LAMBDA_D
from .lens import System, reference_heights
from .raytrace import AimCorrection, RayBundle, SpotDiagrams, make_rays, ray_aim, trace


class PSFError(ValueError):
    pass


class IlluminationError(ArithmeticError):
    pass


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class PSFConfig:
    size_mm: float = 0.260
    bins: int = 65
    bandwidth_mm: Optional[float] = None  # default: half a bin

    @property
    def bin_mm(self) -> float:
        return self.size_mm / self.bins

    @property
    def sigma(self) -> float:
        return self.bandwidth_mm if self.bandwidth_mm is not None else 0.5 * self.bin_mm

    def centers(self) -> torch.Tensor:
        half = (self.bins - 1) / 2
        return (torch.arange(self.bins, dtype=torch.float64) - half) * self.bin_mm


# ----------------------------------------------------------------------- PSFs

def _axis_weights(pos: torch.Tensor, config: PSFConfig, reach: int):
    """Gaussian weights of each position on its nearest ``2*reach+1`` bins, summing to one."""
    half = (config.bins - 1) / 2
    nearest = torch.round(pos.detach() / config.bin_mm + half).long()
    offs = torch.arange(-reach, reach + 1)
    idx = nearest[:, None] + offs[None, :]
    centers = (idx.to(pos.dtype) - half) * config.bin_mm
    w = torch.exp(-(centers - pos[:, None]) ** 2 / (2.0 * config.sigma**2))
    # unit mass per ray (before clipping at the grid edge)
    w = w / w.sum(1, keepdim=True)
    inside = (idx >= 0) & (idx < config.bins)
    return torch.where(inside, w, torch.zeros_like(w)), idx.clamp(0, config.bins - 1)


def kde_psf(x: torch.Tensor, y: torch.Tensor, valid: torch.Tensor, channels: Sequence[int],
            center_y, config: PSFConfig = PSFConfig(), mirror: bool = True) -> torch.Tensor:
    """Gaussian-KDE PSF of one field, ``(3, bins, bins)`` indexed [channel, y, x].

    ``x``/``y``/``valid`` are ``(n_w, n_p)`` spot coordinates; ``channels`` maps
    each wavelength to R/G/B.  With ``mirror`` the rays are duplicated at -x.
    The kernel is truncated at about 4 bandwidths.  Each channel sums to one.
    """
    reach = max(1, int(math.ceil(4.0 * config.sigma / config.bin_mm)))
    nb = config.bins
    chans = np.asarray(channels)
    out = []
    for ch in range(3):
        sel = torch.as_tensor(np.nonzero(chans == ch)[0])
        if len(sel) == 0:
            out.append(x.new_zeros(nb, nb))
            continue
        keep = valid[sel].reshape(-1)
        if not bool(keep.any()):
            raise PSFError(f"channel {'RGB'[ch]} has no valid rays")
        xs = x[sel].reshape(-1)[keep]
        ys = y[sel].reshape(-1)[keep] - center_y
        if mirror:
            xs = torch.cat([xs, -xs])
            ys = torch.cat([ys, ys])
        wx, ix = _axis_weights(xs, config, reach)
        wy, iy = _axis_weights(ys, config, reach)
        vals = (wy[:, :, None] * wx[:, None, :]).reshape(-1)
        flat = (iy[:, :, None] * nb + ix[:, None, :]).reshape(-1)
        psf = x.new_zeros(nb * nb).index_add(0, flat, vals).reshape(nb, nb)
        total = psf.sum()
        if float(total.detach()) <= 0:
            raise PSFError(f"channel {'RGB'[ch]}: all rays fall outside the PSF grid")
        out.append(psf / total)
    return torch.stack(out)


def histogram_psf(x, y, valid, channels, center_y, config: PSFConfig = PSFConfig(), mirror: bool = True) -> np.ndarray:
    """Naive ray-counting PSF on the same grid (reference for the KDE)."""
    x = np.asarray(x.detach() if isinstance(x, torch.Tensor) else x)
    y = np.asarray(y.detach() if isinstance(y, torch.Tensor) else y) - float(center_y)
    v = np.asarray(valid.detach() if isinstance(valid, torch.Tensor) else valid)
    edges = (np.arange(config.bins + 1) - config.bins / 2) * config.bin_mm
    chans = np.asarray(channels)
    out = np.zeros((3, config.bins, config.bins))
    for ch in range(3):
        sel = chans == ch
        xs, ys = x[sel][v[sel]], y[sel][v[sel]]
        if mirror:
            xs, ys = np.concatenate([xs, -xs]), np.concatenate([ys, ys])
        h, _, _ = np.histogram2d(ys, xs, bins=[edges, edges])
        out[ch] = h / max(h.sum(), 1)
    return out


def field_psfs(spots: SpotDiagrams, config: PSFConfig = PSFConfig()) -> torch.Tensor:
    """KDE PSFs for every field, ``(n_h, 3, bins, bins)``."""
    cy = spots.centroid_y
    out = []
    for h in range(len(spots.fields_deg)):
        psf = kde_psf(spots.x[h], spots.y[h], spots.valid[h], spots.channels, cy[h], config, spots.symmetric)
        if float(spots.fields_deg[h]) == 0.0:
            psf = symmetrize_d4(psf)
        out.append(psf)
    return torch.stack(out)


def symmetrize_d4(psf: torch.Tensor) -> torch.Tensor:
    """Average over the 8 symmetries of the square (on-axis PSFs are rotationally symmetric)."""
    t = psf.transpose(-1, -2)
    views = [psf, psf.flip(-1), psf.flip(-2), psf.flip(-1, -2), t, t.flip(-1), t.flip(-2), t.flip(-1, -2)]
    return torch.stack(views).mean(0)


# ------------------------------------------------------------ image geometry

@dataclass(frozen=True)
class ImageGeometry:
    """Pixel layout of the simulated sensor.

    In ``res2x`` mode the image covers the upper-left quadrant of a virtual
    sensor twice as large, so the optical axis sits at its lower-right corner.
    """

    height: int
    width: int
    sensor_diag_mm: float = 16.0
    half_fov_deg: float = 25.0
    res2x: bool = False

    @property
    def scale(self) -> int:
        return 2 if self.res2x else 1

    @property
    def pitch_mm(self) -> float:
        s = self.scale
        return self.sensor_diag_mm / math.hypot(s * self.width, s * self.height)

    @property
    def center(self) -> Tuple[float, float]:
        """Optical center (x, y) in pixel coordinates (pixel centers at integers)."""
        if self.res2x:
            return self.width - 0.5, self.height - 0.5
        return (self.width - 1) / 2, (self.height - 1) / 2

    def pixel_offsets(self):
        """Pixel offsets from the optical center (dx, dy), in pixels."""
        cx, cy = self.center
        yy, xx = torch.meshgrid(torch.arange(self.height, dtype=torch.float64),
                                torch.arange(self.width, dtype=torch.float64), indexing="ij")
        return xx - cx, yy - cy

    def field_radius_mm(self, fields_deg) -> torch.Tensor:
        """Sensor radius assigned to each field angle; the FOV edge maps to the corner."""
        h = torch.deg2rad(as_tensor(fields_deg))
        return 0.5 * self.sensor_diag_mm * torch.tan(h) / math.tan(math.radians(self.half_fov_deg))

    def patch_edges(self, n: int = 9):
        ys = [round(i * self.height / n) for i in range(n + 1)]
        xs = [round(i * self.width / n) for i in range(n + 1)]
        return ys, xs


def _interp1(xq: torch.Tensor, xp: torch.Tensor, fp: torch.Tensor) -> torch.Tensor:
    """Differentiable piecewise-linear interpolation with end clamping."""
    xq_c = xq.clamp(float(xp[0]), float(xp[-1]))
    idx = torch.searchsorted(xp.detach().contiguous(), xq_c.detach().contiguous().reshape(-1)).reshape(xq.shape)
    idx = idx.clamp(1, len(xp) - 1)
    x0, x1 = xp[idx - 1], xp[idx]
    f0, f1 = fp[idx - 1], fp[idx]
    t = (xq_c - x0) / (x1 - x0)
    return f0 + t * (f1 - f0)


# ------------------------------------------------------------------ PSF grid

@dataclass
class PSFGrid:
    kernels: torch.Tensor  # (n, n, 3, k, k)
    weights: torch.Tensor  # (n, n, n_h) field weights per patch
    geometry: ImageGeometry
    illumination: Optional[torch.Tensor] = None  # R_h, (n_h,)
    distortion: Optional[torch.Tensor] = None  # D_h, (n_h,)
    ref_max_mm: Optional[float] = None
    fields_deg: Optional[torch.Tensor] = None

    @property
    def n(self) -> int:
        return self.kernels.shape[0]


def patch_field_weights(geom: ImageGeometry, fields_deg, n: int = 9) -> torch.Tensor:
    """Share of each patch's pixels whose nearest sampled field is h, ``(n, n, n_h)``."""
    dx, dy = geom.pixel_offsets()
    rho = torch.hypot(dx, dy) * geom.pitch_mm
    r_h = geom.field_radius_mm(fields_deg)
    mid = 0.5 * (r_h[1:] + r_h[:-1])
    nearest = torch.searchsorted(mid.contiguous(), rho.reshape(-1).contiguous(), right=False).reshape(rho.shape)
    n_h = len(r_h)
    ys, xs = geom.patch_edges(n)
    out = torch.zeros(n, n, n_h)
    for i in range(n):
        for j in range(n):
            block = nearest[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].reshape(-1)
            counts = torch.bincount(block, minlength=n_h).to(torch.float64)
            out[i, j] = counts / counts.sum()
    return out


def kernel_size(geom: ImageGeometry, config: PSFConfig = PSFConfig()) -> int:
    k = int(math.ceil(config.size_mm / geom.pitch_mm))
    return k if k % 2 else k + 1


def resample_psf(psf: torch.Tensor, angle: float, geom: ImageGeometry,
                 config: PSFConfig = PSFConfig(), k: Optional[int] = None, supersample: int = 0) -> torch.Tensor:
    """Rotate a field PSF by ``angle`` and integrate it onto the pixel grid.

    ``angle`` is the azimuth (radians) of the radial direction in pixel
    coordinates (x right, y down); the PSF's +y axis is mapped onto it.
    Kernel pixels are supersampled and bilinearly sampled from the PSF grid,
    then averaged; channels are renormalized.
    """
    k = k or kernel_size(geom, config)
    p = geom.pitch_mm
    if supersample <= 0:
        supersample = max(1, int(math.ceil(2 * p / config.bin_mm)))
    s = supersample
    sub = (torch.arange(k * s, dtype=torch.float64) - (k * s - 1) / 2) * (p / s)
    vy, vx = torch.meshgrid(sub, sub, indexing="ij")  # pixel-frame offsets (mm)
    # radial unit e_r = (cos a, sin a); tangential e_t = (-sin a, cos a)
    ca, sa = math.cos(angle), math.sin(angle)
    local_y = vx * ca + vy * sa
    local_x = -vx * sa + vy * ca
    half = config.size_mm / 2 - config.bin_mm / 2
    grid = torch.stack([local_x / half, local_y / half], dim=-1)[None]
    sampled = F.grid_sample(psf[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True)[0]
    kern = F.avg_pool2d(sampled[None], s)[0]
    total = kern.sum((-1, -2), keepdim=True)
    return kern / total.clamp(min=1e-300)


def build_psf_grid(psfs: torch.Tensor, fields_deg, geom: ImageGeometry, config: PSFConfig = PSFConfig(),
                   n: int = 9, k: Optional[int] = None) -> PSFGrid:
    """Assemble the n x n patch kernels from per-field PSFs ``(n_h, 3, b, b)``."""
    weights = patch_field_weights(geom, fields_deg, n)
    k = k or kernel_size(geom, config)
    ys, xs = geom.patch_edges(n)
    cx, cy = geom.center
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            pcx = 0.5 * (xs[j] + xs[j + 1] - 1) - cx
            pcy = 0.5 * (ys[i] + ys[i + 1] - 1) - cy
            angle = math.atan2(pcy, pcx) if (pcx or pcy) else math.pi / 2
            avg = (weights[i, j][:, None, None, None] * psfs).sum(0)
            row.append(resample_psf(avg, angle, geom, config, k))
        rows.append(torch.stack(row))
    return PSFGrid(torch.stack(rows), weights, geom, fields_deg=as_tensor(fields_deg))


# ------------------------------------------------------ relative illumination

def marginal_direction_cosines(sys: System, fields_deg, aim: AimCorrection | None = None):
    """Image-space direction cosines of upper/lower meridional and sagittal rays at the d-line."""
    fields_deg = as_tensor(fields_deg).reshape(-1)
    n_h = len(fields_deg)
    if aim is None:
        aim = ray_aim(sys, fields_deg)
    unit = torch.tensor([[0.0, 1.0], [0.0, -1.0], [1.0, 0.0]])
    rays = make_rays(sys, fields_deg, unit, aim, 1)
    rec = trace(sys, rays, [LAMBDA_D])
    if not bool(rec.valid.all()):
        raise IlluminationError("marginal ray failed while estimating illumination")
    d = rec.direction.reshape(n_h, 3, 3)
    return d[:, 0, 1], d[:, 1, 1], d[:, 2, 0]


def relative_illumination(sys: System, fields_deg, aim: AimCorrection | None = None) -> torch.Tensor:
    """R_h from the image-space projected solid angle of the elliptic beam, R_0 = 1."""
    return illumination_from_cosines(*marginal_direction_cosines(sys, fields_deg, aim))


def illumination_from_cosines(m_up: torch.Tensor, m_lo: torch.Tensor, l_sag: torch.Tensor) -> torch.Tensor:
    """Normalized solid-angle product (m_up - m_lo) * 2 l_sag; first entry is on-axis."""
    omega = (m_up - m_lo).abs() * 2.0 * l_sag.abs()
    if bool((omega <= 1e-15).any()):
        raise IlluminationError("degenerate marginal ray bundle")
    R = omega / omega[0]
    return R.clamp(min=1e-12, max=1.0)


def illumination_map(R: torch.Tensor, fields_deg, geom: ImageGeometry) -> torch.Tensor:
    dx, dy = geom.pixel_offsets()
    rho = torch.hypot(dx, dy) * geom.pitch_mm
    return _interp1(rho, geom.field_radius_mm(fields_deg), R)


# --------------------------------------------------------------- distortion

def distortion_shifts(centroids: torch.Tensor, y_ref: torch.Tensor) -> torch.Tensor:
    """D_h = (ybar_h - y_ref_h) / y_ref_max."""
    return (centroids - y_ref) / y_ref[-1]


def distortion_field(sys: System, spots: SpotDiagrams) -> Tuple[torch.Tensor, torch.Tensor]:
    y_ref = reference_heights(sys, spots.fields_deg)
    D = distortion_shifts(spots.centroid_y, y_ref)
    # the on-axis centroid is 0 by symmetry; the sampled pupil only approximates it
    return torch.where(spots.fields_deg == 0, torch.zeros_like(D), D), y_ref


@dataclass
class DistortionMap:
    """Radial displacement (pixels) as a function of pixel radius."""

    radii_px: torch.Tensor
    shift_px: torch.Tensor
    geometry: ImageGeometry

    @classmethod
    def from_shifts(cls, D: torch.Tensor, ref_max_mm: float, fields_deg, geom: ImageGeometry) -> "DistortionMap":
        r = geom.field_radius_mm(fields_deg) / geom.pitch_mm
        return cls(r, D * ref_max_mm / geom.pitch_mm, geom)

    def shift_at(self, rho_px: torch.Tensor) -> torch.Tensor:
        return _interp1(rho_px, self.radii_px, self.shift_px)

    def forward(self, x: torch.Tensor, y: torch.Tensor):
        """Distorted pixel positions of scene points (x, y)."""
        cx, cy = self.geometry.center
        dx, dy = x - cx, y - cy
        rho = torch.hypot(dx, dy)
        s = self.shift_at(rho)
        scale = torch.where(rho > 0, (rho + s) / rho.clamp(min=1e-12), torch.ones_like(rho))
        return cx + dx * scale, cy + dy * scale

    def source_coords(self, iterations: int = 4):
        """For every output pixel, the scene position that lands on it."""
        dx, dy = self.geometry.pixel_offsets()
        rho_out = torch.hypot(dx, dy)
        rho = rho_out
        for _ in range(iterations):
            rho = rho_out - self.shift_at(rho)
        scale = torch.where(rho_out > 0, rho / rho_out.clamp(min=1e-12), torch.ones_like(rho_out))
        cx, cy = self.geometry.center
        return cx + dx * scale, cy + dy * scale

    def warp(self, image: torch.Tensor) -> torch.Tensor:
        if not bool((self.shift_px != 0).any()):
            return image
        sx, sy = self.source_coords()
        return bicubic_sample(image, sx, sy)


def _keys(t: torch.Tensor, a: float = -0.5):
    """Keys cubic weights for taps at offsets -1, 0, 1, 2 given fraction t."""
    def w(d):
        d = d.abs()
        return torch.where(
            d <= 1, (a + 2) * d**3 - (a + 3) * d**2 + 1,
            torch.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, torch.zeros_like(d)),
        )
    return [w(t + 1), w(t), w(1 - t), w(2 - t)]


def bicubic_sample(image: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` (C, H, W) at pixel coordinates with replicate borders."""
    C, H, W = image.shape
    x0 = torch.floor(sx.detach())
    y0 = torch.floor(sy.detach())
    tx, ty = sx - x0, sy - y0
    wx, wy = _keys(tx), _keys(ty)
    x0 = x0.long()
    y0 = y0.long()
    out = image.new_zeros(C, *sx.shape)
    flat = image.reshape(C, -1)
    for i, oy in enumerate((-1, 0, 1, 2)):
        yi = (y0 + oy).clamp(0, H - 1)
        for j, ox in enumerate((-1, 0, 1, 2)):
            xi = (x0 + ox).clamp(0, W - 1)
            vals = flat[:, (yi * W + xi).reshape(-1)].reshape(C, *sx.shape)
            out = out + vals * (wy[i] * wx[j])[None]
    return out


# -------------------------------------------------------------------- render

def hann_windows(length: int, n: int = 9, overlap: float = 0.25) -> torch.Tensor:
    """``(n, length)`` 1-D windows that sum to one at every sample.

    Window i is a Hann bump spanning patch i extended by ``overlap`` of the
    patch size on each side, normalized by the sum over all windows.
    """
    edges = [i * length / n for i in range(n + 1)]
    pos = torch.arange(length, dtype=torch.float64) + 0.5
    ws = []
    for i in range(n):
        a, b = edges[i], edges[i + 1]
        ext = overlap * (b - a)
        lo, hi = a - ext, b + ext
        if i == 0:
            lo = -math.inf
        if i == n - 1:
            hi = math.inf
        u = torch.zeros(length)
        inside = (pos > lo) & (pos < hi)
        core = (pos >= a) & (pos <= b)
        # cosine roll-off over the overlap zones, flat inside the patch core
        left = (pos > lo) & (pos < a)
        right = (pos > b) & (pos < hi)
        u[core] = 1.0
        if ext > 0:
            u[left] = 0.5 - 0.5 * torch.cos(math.pi * (pos[left] - lo) / (2 * ext))
            u[right] = 0.5 - 0.5 * torch.cos(math.pi * (hi - pos[right]) / (2 * ext))
        u[~inside] = 0.0
        ws.append(u)
    w = torch.stack(ws)
    return w / w.sum(0, keepdim=True)


def convolve_patches(image: torch.Tensor, kernels: torch.Tensor, overlap: float = 0.25) -> torch.Tensor:
    """Spatially varying overlap-add convolution of ``image`` (3, H, W).

    Each patch region (extended by the overlap) is convolved with its kernel
    and blended with separable windows that form a partition of unity.
    Borders use replicate padding.
    """
    C, H, W = image.shape
    n = kernels.shape[0]
    k = kernels.shape[-1]
    r = k // 2
    wy = hann_windows(H, n, overlap)
    wx = hann_windows(W, n, overlap)
    padded = F.pad(image[None], (r, r, r, r), mode="replicate")[0]
    out = image.new_zeros(C, H, W)
    for i in range(n):
        rows = torch.nonzero(wy[i] > 0).flatten()
        y0, y1 = int(rows[0]), int(rows[-1]) + 1
        for j in range(n):
            cols = torch.nonzero(wx[j] > 0).flatten()
            x0, x1 = int(cols[0]), int(cols[-1]) + 1
            region = padded[:, y0:y1 + 2 * r, x0:x1 + 2 * r]
            kern = torch.flip(kernels[i, j], dims=[-1, -2])[:, None]
            conv = F.conv2d(region[None], kern, groups=C)[0]
            win = wy[i, y0:y1][:, None] * wx[j, x0:x1][None, :]
            out[:, y0:y1, x0:x1] = out[:, y0:y1, x0:x1] + conv * win[None]
    return out


def direct_convolution(image: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Per-pixel convolution with the kernel of the patch containing the pixel."""
    C, H, W = image.shape
    n = kernels.shape[0]
    k = kernels.shape[-1]
    r = k // 2
    padded = F.pad(image[None], (r, r, r, r), mode="replicate")[0]
    ys = [round(i * H / n) for i in range(n + 1)]
    xs = [round(i * W / n) for i in range(n + 1)]
    out = image.new_zeros(C, H, W)
    for py in range(H):
        i = next(a for a in range(n) if ys[a] <= py < ys[a + 1])
        for px in range(W):
            j = next(b for b in range(n) if xs[b] <= px < xs[b + 1])
            window = padded[:, py:py + k, px:px + k]
            out[:, py, px] = (window * torch.flip(kernels[i, j], dims=[-1, -2])).sum((-1, -2))
    return out


def render(scene: torch.Tensor, grid: PSFGrid, illumination: Optional[torch.Tensor] = None,
           distortion: Optional[DistortionMap] = None, overlap: float = 0.25) -> torch.Tensor:
    """Aberrated image: patch convolution, then illumination falloff, then distortion."""
    if scene.dim() != 3 or scene.shape[0] != 3:
        raise RenderError("scene must be (3, H, W)")
    g = grid.geometry
    if scene.shape[1:] != (g.height, g.width):
        raise RenderError(f"scene is {tuple(scene.shape[1:])}, grid was built for {(g.height, g.width)}")
    out = convolve_patches(scene, grid.kernels, overlap)
    if illumination is not None:
        out = out * illumination[None]
    if distortion is not None:
        out = distortion.warp(out)
    return out


# ---------------------------------------------------------------- pipeline

@dataclass
class Simulation:
    grid: PSFGrid
    illumination: torch.Tensor  # pixel map
    distortion: DistortionMap
    R: torch.Tensor
    D: torch.Tensor
    psfs: torch.Tensor


def simulate_lens(sys: System, spots: SpotDiagrams, geom: ImageGeometry,
                  config: PSFConfig = PSFConfig(), n: int = 9) -> Simulation:
    """Everything :func:`render` needs, built from one set of spot diagrams."""
    psfs = field_psfs(spots, config)
    grid = build_psf_grid(psfs, spots.fields_deg, geom, config, n)
    R = relative_illumination(sys, spots.fields_deg, spots.aim)
    D, y_ref = distortion_field(sys, spots)
    grid.illumination, grid.distortion = R, D
    grid.ref_max_mm = float(y_ref[-1].detach())
    illum = illumination_map(R, spots.fields_deg, geom)
    dmap = DistortionMap.from_shifts(D, float(y_ref[-1].detach()), spots.fields_deg, geom)
    return Simulation(grid, illum, dmap, R, D, psfs)


def render_lens(scene: torch.Tensor, sim: Simulation) -> torch.Tensor:
    return render(scene, sim.grid, sim.illumination, sim.distortion)


# ----------------------------------------------------------- bounding boxes

@dataclass
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str = ""
    clipped: bool = False


def correct_bboxes(boxes: Sequence[Box], distortion: DistortionMap) -> List[Box]:
    """Move the four edge midpoints through the distortion and take their hull."""
    g = distortion.geometry
    out = []
    for b in boxes:
        xc, yc = 0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max)
        px = torch.tensor([xc, xc, b.x_min, b.x_max], dtype=torch.float64)
        py = torch.tensor([b.y_min, b.y_max, yc, yc], dtype=torch.float64)
        with torch.no_grad():
            qx, qy = distortion.forward(px, py)
        x0, x1 = float(qx[2]), float(qx[3])
        y0, y1 = float(qy[0]), float(qy[1])
        x0, x1 = min(x0, x1, float(qx[:2].min())), max(x0, x1, float(qx[:2].max()))
        y0, y1 = min(y0, y1, float(qy[2:].min())), max(y0, y1, float(qy[2:].max()))
        cx0, cy0 = min(max(x0, 0.0), g.width - 1.0), min(max(y0, 0.0), g.height - 1.0)
        cx1, cy1 = min(max(x1, 0.0), g.width - 1.0), min(max(y1, 0.0), g.height - 1.0)
        clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
        out.append(Box(cx0, cy0, cx1, cy1, b.label, clipped))
    return out


def read_boxes(path) -> List[Box]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        if len(parts) < 4:
            raise ValueError(f"{path}:{lineno}: expected x_min y_min x_max y_max [class]")
        boxes.append(Box(*map(float, parts[:4]), label=" ".join(parts[4:])))
    return boxes


def write_boxes(boxes: Sequence[Box], path) -> None:
    lines = [f"{b.x_min:.3f},{b.y_min:.3f},{b.x_max:.3f},{b.y_max:.3f},{b.label}" for b in boxes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------- image I/O

def read_image(path) -> Tuple[torch.Tensor, int]:
    """PNG to a linear float (3, H, W) tensor in [0, 1]; also returns the bit depth."""
    import cv2

    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise RenderError(f"cannot read image {path}")
    depth = 16 if arr.dtype == np.uint16 else 8
    scale = 65535.0 if depth == 16 else 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = arr[:, :, :3][:, :, ::-1]
    return torch.as_tensor(arr.astype(np.float64) / scale).permute(2, 0, 1).contiguous(), depth


def write_image(image: torch.Tensor, path, depth: int = 8) -> None:
    import cv2

    arr = image.detach().clamp(0, 1).permute(1, 2, 0).numpy()[:, :, ::-1]
    if depth == 16:
        out = np.round(arr * 65535.0).astype(np.uint16)
    else:
        out = np.round(arr * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
        raise RenderError(f"cannot write image {path}")

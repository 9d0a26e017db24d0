"""Design losses: spot size, ray path, ray angle, glass variable, combined."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional

import torch

from .diffcore import ContractError, ParameterSet, hinge
from .glass import GlassCatalog, glass_loss
from .lens import LensModel, System
from .raytrace import SamplingConfig, SpotDiagrams, TraceRecord, spot_diagrams


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintConfig:
    air_min: float = 0.01
    glass_min: float = 1.0
    glass_max: float = 3.0
    clearance_min: float = 12.0
    theta_max_deg: float = 60.0
    w_spot: float = 1.0
    w_path: float = 100.0
    w_angle: float = 100.0
    w_glass: float = 0.01
    # Safety margins applied only while optimizing. The penalties are soft, so
    # the optimum of the penalized objective sits slightly outside the true
    # limits; tightening them during descent leaves the final design inside.
    margin_deg: float = 0.5
    margin_mm: float = 0.01

    def __post_init__(self):
        if self.glass_min > self.glass_max:
            raise ContractError("glass_min must not exceed glass_max")
        for k in ("w_spot", "w_path", "w_angle", "w_glass", "margin_deg", "margin_mm"):
            if getattr(self, k) < 0:
                raise ContractError(f"{k} must be non-negative")

    def tightened(self) -> "ConstraintConfig":
        """Limits shrunk by the margins (margins then reset to zero)."""
        m = self.margin_mm
        return replace(self, air_min=self.air_min + m, glass_min=self.glass_min + m,
                       glass_max=max(self.glass_max - m, self.glass_min + m),
                       clearance_min=self.clearance_min + m, theta_max_deg=self.theta_max_deg - self.margin_deg,
                       margin_deg=0.0, margin_mm=0.0)


def spacing_bounds(medium: List[int], config: ConstraintConfig):
    """(min, max) axial travel per spacing; glass, image clearance or air."""
    K = len(medium)
    lo, hi = [], []
    for k, m in enumerate(medium):
        if m >= 0:
            lo.append(config.glass_min)
            hi.append(config.glass_max)
        elif k == K - 1:
            lo.append(config.clearance_min)
            hi.append(math.inf)
        else:
            lo.append(config.air_min)
            hi.append(math.inf)
    return torch.tensor(lo), torch.tensor(hi)


def spot_loss(spots: SpotDiagrams) -> torch.Tensor:
    """Mean over fields of the RMS spot radius about the y-centroid (mm).

    x is taken uncentered: the meridional symmetry puts its mean at 0.
    """
    w = spots.valid.to(spots.y.dtype)
    count = w.sum((1, 2))
    if bool((count == 0).any()):
        bad = [float(f) for f in spots.fields_deg[count == 0]]
        raise LossError(f"no valid rays for field(s) {bad} deg")
    ybar = (spots.y * w).sum((1, 2)) / count
    ms = (((spots.y - ybar[:, None, None]) ** 2 + spots.x**2) * w).sum((1, 2)) / count
    return torch.sqrt(ms).mean()


def ray_path_loss(record: TraceRecord, medium: List[int], config: ConstraintConfig = ConstraintConfig()) -> torch.Tensor:
    lo, hi = spacing_bounds(medium, config)
    dz = record.dz
    lo = lo[:, None]
    term = hinge(lo - dz)
    finite = torch.isfinite(hi)
    if bool(finite.any()):
        term = term + torch.where(finite[:, None], hinge(dz - torch.where(finite, hi, 0.0)[:, None]), 0.0)
    return term.sum(0).mean()


def ray_angle_loss(record: TraceRecord, theta_max_deg: float = 60.0) -> torch.Tensor:
    c2 = math.cos(math.radians(theta_max_deg)) ** 2
    term = hinge(c2 - record.zeta) + hinge(c2 - record.zeta_p)
    return term.sum(0).mean()


@dataclass
class DesignLossReport:
    spot: torch.Tensor
    path: torch.Tensor
    angle: torch.Tensor
    glass: torch.Tensor
    lens: torch.Tensor
    vignetting: float
    downstream: Optional[torch.Tensor] = None
    joint: Optional[torch.Tensor] = None
    gradient: Optional[torch.Tensor] = None
    efl: Optional[float] = None
    glass_names: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, object]:
        def f(v):
            return None if v is None else float(v.detach() if isinstance(v, torch.Tensor) else v)

        out = {
            "spot_mm": f(self.spot), "ray_path": f(self.path), "ray_angle": f(self.angle),
            "glass_var": f(self.glass), "lens": f(self.lens), "downstream": f(self.downstream),
            "joint": f(self.joint), "vignetting": self.vignetting, "efl_mm": self.efl,
            "glass_names": list(self.glass_names),
        }
        if self.gradient is not None:
            out["gradient"] = [float(v) for v in self.gradient.detach()]
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def combine(spot, path, angle, glass, config: ConstraintConfig) -> torch.Tensor:
    return config.w_spot * spot + config.w_path * path + config.w_angle * angle + config.w_glass * glass


def lens_loss(model: LensModel, params: ParameterSet | None = None,
              sampling: SamplingConfig = SamplingConfig(),
              config: ConstraintConfig = ConstraintConfig(),
              pupil=None, aim=None, with_gradient: bool = False, return_spots: bool = False,
              quantize: bool = True):
    """Evaluate the combined lens loss on ``model`` (optionally with gradient).

    ``quantize=False`` keeps glasses continuous, which makes the glass
    gradient a true derivative (used for finite-difference checks).
    """
    params = params or model.params
    sys = model.system(params, quantize=quantize)
    spots = spot_diagrams(sys, sampling, aim=aim, pupil=pupil)
    rec = spots.record
    l_s = spot_loss(spots)
    l_rp = ray_path_loss(rec, sys.medium, config)
    l_ra = ray_angle_loss(rec, config.theta_max_deg)
    l_gv = glass_loss(params["glass"], model.catalog) if len(params["glass"]) else l_s.new_zeros(())
    total = combine(l_s, l_rp, l_ra, l_gv, config)
    from .lens import efl

    report = DesignLossReport(l_s, l_rp, l_ra, l_gv, total, spots.vignetting,
                              efl=float(efl(sys.detach())), glass_names=list(sys.glass_names))
    if with_gradient:
        from .diffcore import grad

        report.gradient = grad(total, params)
    if return_spots:
        return report, sys, spots
    return report


def joint_loss(report: DesignLossReport, downstream: torch.Tensor, lens_weight: float,
               params: ParameterSet | None = None) -> torch.Tensor:
    """``downstream + lens_weight * lens``; the downstream term must depend on the lens."""
    if not isinstance(downstream, torch.Tensor) or (downstream.grad_fn is None and not downstream.requires_grad):
        raise ContractError("downstream loss is detached from the lens parameters")
    if params is not None:
        leaves = params.values()
        gs = torch.autograd.grad(downstream, leaves, retain_graph=True, allow_unused=True)
        if all(g is None for g in gs):
            raise ContractError("downstream loss is detached from the lens parameters")
    total = downstream + lens_weight * report.lens
    report.downstream = downstream
    report.joint = total
    return total


def fidelity_loss(rendered: torch.Tensor, scene: torch.Tensor) -> torch.Tensor:
    """Mean-squared error against the unaberrated scene (stand-in downstream loss)."""
    return ((rendered - scene) ** 2).mean()

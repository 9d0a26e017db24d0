"""Lens prescriptions, normalized parameters and paraxial (first-order) optics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .diffcore import ContractError, ParameterSet, as_tensor, step_through
from .glass import LAMBDA_D, GlassCatalog, GlassError, default_catalog, index_table

Material = Union[str, Tuple[float, float]]


class LensFileError(ValueError):
    """Malformed lens file; the message names the offending surface/field."""


class SolveError(ArithmeticError):
    """A first-order solve has no finite solution (afocal system, ray height 0...)."""


@dataclass(frozen=True)
class Specs:
    f_mm: float = 17.2
    f_number: float = 2.0
    half_fov_deg: float = 25.0
    sensor_diag_mm: float = 16.0

    @property
    def pupil_radius(self) -> float:
        return self.f_mm / (2.0 * self.f_number)

    def focal_from_fov(self) -> float:
        return self.sensor_diag_mm / (2.0 * math.tan(math.radians(self.half_fov_deg)))


@dataclass(frozen=True)
class Surface:
    radius: float  # mm, math.inf for flat
    thickness: float  # mm to the next surface (or image plane)
    material: Material = "air"  # medium after this surface
    stop: bool = False

    @property
    def curvature(self) -> float:
        return 0.0 if math.isinf(self.radius) else 1.0 / self.radius

    @property
    def is_glass(self) -> bool:
        return self.material != "air"


@dataclass(frozen=True)
class LensPrescription:
    surfaces: Tuple[Surface, ...]
    specs: Specs = field(default_factory=Specs)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if len(self.surfaces) < 2:
            raise ContractError("a prescription needs at least two surfaces")
        stops = [i for i, s in enumerate(self.surfaces) if s.stop]
        if len(stops) != 1:
            raise ContractError(f"exactly one stop surface required, found {len(stops)}")
        if self.surfaces[stops[0]].curvature != 0.0:
            raise ContractError("the stop surface must be flat")
        if self.surfaces[-1].is_glass:
            raise ContractError("the image space must be air")
        for i, s in enumerate(self.surfaces):
            if not math.isfinite(s.thickness):
                raise ContractError(f"surface {i + 1}: non-finite thickness")
            if s.is_glass and s.thickness <= 0:
                raise ContractError(f"surface {i + 1}: glass thickness must be positive")

    @property
    def K(self) -> int:
        return len(self.surfaces)

    @property
    def stop_index(self) -> int:
        return next(i for i, s in enumerate(self.surfaces) if s.stop)

    @property
    def glass_spacings(self) -> List[int]:
        """Spacing indices filled with glass, one per glass element."""
        return [i for i, s in enumerate(self.surfaces) if s.is_glass]

    @property
    def M(self) -> int:
        return len(self.glass_spacings)

    @property
    def curvatures(self) -> np.ndarray:
        return np.array([s.curvature for s in self.surfaces])

    @property
    def thicknesses(self) -> np.ndarray:
        return np.array([s.thickness for s in self.surfaces])

    def glass_names(self) -> List[str]:
        return [s.material if isinstance(s.material, str) else "custom" for s in self.surfaces if s.is_glass]

    def with_surfaces(self, surfaces) -> "LensPrescription":
        return replace(self, surfaces=tuple(surfaces))


# ---------------------------------------------------------------- file format

def _parse_material(value, idx: int) -> Material:
    if value is None or value == "air":
        return "air"
    if isinstance(value, str):
        return value
    if isinstance(value, dict) and set(value) >= {"n_d", "V_d"}:
        try:
            return (float(value["n_d"]), float(value["V_d"]))
        except (TypeError, ValueError):
            raise LensFileError(f"surface {idx}: material n_d/V_d must be numbers") from None
    raise LensFileError(f"surface {idx}: bad material {value!r}")


def prescription_from_dict(data: dict) -> LensPrescription:
    if not isinstance(data, dict) or "surfaces" not in data:
        raise LensFileError("lens file must be an object with a 'surfaces' list")
    sp = data.get("specs", {})
    try:
        specs = Specs(
            f_mm=float(sp.get("f_mm", 17.2)),
            f_number=float(sp.get("f_number", 2.0)),
            half_fov_deg=float(sp.get("half_fov_deg", 25.0)),
            sensor_diag_mm=float(sp.get("sensor_diag_mm", 16.0)),
        )
    except (TypeError, ValueError) as exc:
        raise LensFileError(f"specs: {exc}") from None
    surfaces = []
    for i, row in enumerate(data["surfaces"], 1):
        if not isinstance(row, dict):
            raise LensFileError(f"surface {i}: expected an object")
        r = row.get("radius_mm", "flat")
        if r == "flat" or r is None:
            radius = math.inf
        else:
            try:
                radius = float(r)
            except (TypeError, ValueError):
                raise LensFileError(f"surface {i}: malformed radius {r!r}") from None
            if radius == 0.0 or math.isnan(radius):
                raise LensFileError(f"surface {i}: malformed radius {r!r}")
        try:
            thickness = float(row["thickness_mm"])
        except KeyError:
            raise LensFileError(f"surface {i}: missing thickness_mm") from None
        except (TypeError, ValueError):
            raise LensFileError(f"surface {i}: malformed thickness {row['thickness_mm']!r}") from None
        surfaces.append(Surface(radius, thickness, _parse_material(row.get("material", "air"), i), bool(row.get("stop", False))))
    try:
        return LensPrescription(tuple(surfaces), specs, str(data.get("name", "")))
    except ContractError as exc:
        raise LensFileError(str(exc)) from None


def prescription_to_dict(p: LensPrescription) -> dict:
    rows = []
    for s in p.surfaces:
        mat = s.material
        if isinstance(mat, tuple):
            mat = {"n_d": mat[0], "V_d": mat[1]}
        rows.append({
            "radius_mm": "flat" if math.isinf(s.radius) else s.radius,
            "thickness_mm": s.thickness,
            "material": mat,
            "stop": s.stop,
        })
    return {
        "version": 1,
        "name": p.name,
        "specs": {
            "f_mm": p.specs.f_mm,
            "f_number": p.specs.f_number,
            "half_fov_deg": p.specs.half_fov_deg,
            "sensor_diag_mm": p.specs.sensor_diag_mm,
        },
        "surfaces": rows,
    }


def load_lens(path) -> LensPrescription:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LensFileError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return prescription_from_dict(data)


def save_lens(p: LensPrescription, path) -> None:
    Path(path).write_text(json.dumps(prescription_to_dict(p), indent=2) + "\n", encoding="utf-8")


BUILTIN_LENSES = (
    "doublet", "cooke", "tessar",
    "doublet_opt1x", "doublet_opt2x",
    "cooke_opt1x", "cooke_opt2x",
    "tessar_opt1x", "tessar_opt2x",
)


def builtin_lens(name: str) -> LensPrescription:
    from importlib import resources

    text = resources.files("lensforge.data").joinpath("lenses", f"{name}.json").read_text(encoding="utf-8")
    return prescription_from_dict(json.loads(text))


# ----------------------------------------------------------- optical system

@dataclass
class System:
    """Tensor view of a lens, the unit every tracing routine consumes.

    ``c[k]`` and ``t[k]`` are the curvature of interface k and the axial
    spacing after it; ``t[-1]`` is the distance to the image plane.
    ``medium[k]`` is the glass element filling spacing k, or -1 for air.
    """

    c: torch.Tensor
    t: torch.Tensor
    n_d: torch.Tensor
    V_d: torch.Tensor
    medium: List[int]
    stop: int
    specs: Specs
    glass_names: List[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.medium)

    @property
    def vertices(self) -> torch.Tensor:
        """Axial vertex positions, first vertex at z = 0, plus the image plane."""
        return torch.cat([self.c.new_zeros(1), torch.cumsum(self.t, 0)])

    def indices(self, wavelengths) -> torch.Tensor:
        """Refractive index of object space and of every spacing, ``(K+1, W)``."""
        w = as_tensor(wavelengths).reshape(-1)
        table = index_table(self.n_d, self.V_d, w) if len(self.n_d) else w.new_zeros(0, len(w))
        rows = [torch.ones_like(w)]
        for m in self.medium:
            rows.append(torch.ones_like(w) if m < 0 else table[m])
        return torch.stack(rows)

    def indices_d(self) -> torch.Tensor:
        return self.indices([LAMBDA_D])[:, 0]

    def detach(self) -> "System":
        return replace(self, c=self.c.detach(), t=self.t.detach(), n_d=self.n_d.detach(), V_d=self.V_d.detach())

    def with_image_distance(self, t_last) -> "System":
        t = torch.cat([self.t[:-1], as_tensor(t_last).reshape(1)])
        return replace(self, t=t)


def _material_constants(mat: Material, catalog: GlassCatalog) -> Tuple[float, float, str]:
    if isinstance(mat, tuple):
        return float(mat[0]), float(mat[1]), "custom"
    try:
        g = catalog[mat]
    except GlassError:
        raise LensFileError(f"unknown glass {mat!r}") from None
    return g.n_d, g.V_d, g.name


def system_from_prescription(p: LensPrescription, catalog: GlassCatalog | None = None) -> System:
    catalog = catalog or default_catalog()
    medium, nd, vd, names = [], [], [], []
    for s in p.surfaces:
        if s.is_glass:
            a, b, name = _material_constants(s.material, catalog)
            medium.append(len(nd))
            nd.append(a)
            vd.append(b)
            names.append(name)
        else:
            medium.append(-1)
    return System(
        c=as_tensor(p.curvatures), t=as_tensor(p.thicknesses),
        n_d=as_tensor(nd), V_d=as_tensor(vd),
        medium=medium, stop=p.stop_index, specs=p.specs, glass_names=names,
    )


def system_to_prescription(sys: System, template: LensPrescription, glass_names=None) -> LensPrescription:
    names = glass_names if glass_names is not None else sys.glass_names
    c = sys.c.detach().numpy()
    t = sys.t.detach().numpy()
    surfaces = []
    for k, old in enumerate(template.surfaces):
        radius = math.inf if c[k] == 0.0 else 1.0 / float(c[k])
        m = sys.medium[k]
        if m < 0:
            mat: Material = "air"
        elif names and names[m] != "custom":
            mat = names[m]
        else:
            mat = (float(sys.n_d[m]), float(sys.V_d[m]))
        surfaces.append(Surface(radius, float(t[k]), mat, old.stop))
    return LensPrescription(tuple(surfaces), sys.specs, template.name)


# ---------------------------------------------------------------- paraxial

def paraxial_trace(sys: System, y0, u0, n=None, wavelength: float = LAMBDA_D):
    """Trace a paraxial ray given its height at surface 1 and object-space angle.

    Returns ``(y, u)``: heights at each interface and angles after each
    interface, both ``(K,)``.  Heights on the image plane are
    ``y[-1] + u[-1] * t[-1]``.
    """
    if n is None:
        n = sys.indices([wavelength])[:, 0]
    y = as_tensor(y0)
    u = as_tensor(u0)
    ys, us = [], []
    for k in range(sys.K):
        if k > 0:
            y = y + u * sys.t[k - 1]
        u = (n[k] * u - y * sys.c[k] * (n[k + 1] - n[k])) / n[k + 1]
        ys.append(y)
        us.append(u)
    return torch.stack(ys), torch.stack(us)


def efl(sys: System, n=None) -> torch.Tensor:
    _, u = paraxial_trace(sys, 1.0, 0.0, n)
    if float(u[-1].detach().abs()) < 1e-15:
        raise SolveError("afocal system: zero output ray angle")
    return -1.0 / u[-1]


def bfl(sys: System, n=None) -> torch.Tensor:
    y, u = paraxial_trace(sys, 1.0, 0.0, n)
    if float(u[-1].detach().abs()) < 1e-15:
        raise SolveError("afocal system: no back focus")
    return -y[-1] / u[-1]


def bfl_and_image_solve(sys: System, defocus=0.0, n=None):
    """Back focal length and the resulting image distance ``BFL + defocus`` (mm)."""
    b = bfl(sys, n)
    return b, b + defocus


def solve_last_curvature(c_head: torch.Tensor, t: torch.Tensor, n: torch.Tensor, focal: float) -> torch.Tensor:
    """Curvature of the last interface giving effective focal length ``focal``.

    ``c_head`` holds the first K-1 curvatures, ``n`` the d-line indices of
    object space and every spacing.  Closed form from the axial marginal ray.
    """
    K = len(t)
    y, u = as_tensor(1.0), as_tensor(0.0)
    for k in range(K - 1):
        if k > 0:
            y = y + u * t[k - 1]
        u = (n[k] * u - y * c_head[k] * (n[k + 1] - n[k])) / n[k + 1]
    y = y + u * t[K - 2]
    n_in, n_out = n[K - 1], n[K]
    u_out = -1.0 / focal
    denom = y * (n_out - n_in)
    if abs(float(denom.detach())) < 1e-15:
        raise SolveError("marginal ray height or index step is zero at the last surface")
    c = (n_in * u - n_out * u_out) / denom
    if not bool(torch.isfinite(c.detach())):
        raise SolveError("non-finite last curvature")
    return c


def entrance_pupil(sys: System, n=None):
    """Paraxial entrance pupil ``(z, radius, stop_magnification)``.

    ``z`` is measured from the first vertex (positive towards the image);
    ``radius = f / (2 N)`` from the specs; ``stop_magnification`` is the
    ratio of stop height to pupil height for an axial beam.
    """
    s = sys.stop
    ya, _ = paraxial_trace(sys, 1.0, 0.0, n)
    yb, _ = paraxial_trace(sys, 0.0, 1.0, n)
    ma, mb = ya[s], yb[s]
    if abs(float(ma.detach())) < 1e-12:
        raise SolveError("stop is imaged at infinity; entrance pupil undefined")
    z = mb / ma
    return z, as_tensor(sys.specs.pupil_radius), ma


def reference_heights(sys: System, fields_deg, n=None) -> torch.Tensor:
    """Paraxial chief-ray heights on the image plane for each field angle."""
    z_ep, _, _ = entrance_pupil(sys, n)
    u0 = torch.tan(torch.deg2rad(as_tensor(fields_deg)))
    y1 = -u0 * z_ep
    y, u = paraxial_trace(sys, y1, u0, n)
    return y[-1] + u[-1] * sys.t[-1]


def field_angles(specs: Specs, n_h: int = 21) -> torch.Tensor:
    return torch.linspace(0.0, specs.half_fov_deg, n_h, dtype=torch.float64)


def hyperfocal(f_mm: float, f_number: float, confusion_mm: float) -> float:
    """Hyperfocal distance f^2 / (N c) in mm."""
    return f_mm**2 / (f_number * confusion_mm)


# ------------------------------------------------------ normalized variables

class LensModel:
    """Normalized, differentiable parameterization of a prescription.

    Free variables: curvatures of every interface except the stop and the
    last one (scaled by f), all spacings (scaled by f; the last one is the
    defocus relative to the paraxial focus) and whitened glass coordinates.
    ``system()`` rebuilds a :class:`System`, quantizing glasses with the
    straight-through operator and solving the last curvature so EFL = f.
    """

    def __init__(self, prescription: LensPrescription, catalog: GlassCatalog | None = None,
                 solve_curvature: bool = True, image_solve: bool = True):
        self.template = prescription
        self.catalog = catalog or default_catalog()
        self.solve_curvature = solve_curvature
        self.image_solve = image_solve
        self.f = prescription.specs.f_mm
        K = prescription.K
        self.free_curvatures = [k for k in range(K - 1) if k != prescription.stop_index]
        base = system_from_prescription(prescription, self.catalog)
        self.medium = base.medium
        self._fixed_last_c = float(base.c[-1])

        g = []
        for m, name in enumerate(base.glass_names):
            if name == "custom":
                g.append(self.catalog.to_normalized(float(base.n_d[m]), float(base.V_d[m])))
            else:
                g.append(self.catalog.points[self.catalog.index(name)])
        s_norm = base.t / self.f
        if image_solve:
            s_norm = s_norm.clone()
            s_norm[-1] = (base.t[-1] - bfl(base)) / self.f
        self.params = ParameterSet()
        self.params.add("curvature", base.c[self.free_curvatures] * self.f)
        self.params.add("spacing", s_norm)
        self.params.add("glass", np.array(g, dtype=float).reshape(-1, 2))

    @property
    def K(self) -> int:
        return self.template.K

    def quantized_glasses(self, params: ParameterSet | None = None):
        params = params or self.params
        return self.catalog.quantize(params["glass"])

    def system(self, params: ParameterSet | None = None, quantize: bool = True) -> System:
        params = params or self.params
        K = self.K
        g = params["glass"]
        names = ["custom"] * len(g)
        if quantize and len(g):
            idx, q = self.catalog.quantize(g)
            g = step_through(g, q)
            names = [self.catalog.names[i] for i in idx]
        if len(g):
            x = self.catalog.from_normalized(g)
            n_d, V_d = x[:, 0], x[:, 1]
        else:
            n_d = V_d = torch.zeros(0)
        c_free = params["curvature"] / self.f
        parts = []
        j = 0
        for k in range(K - 1):
            if k in self.free_curvatures:
                parts.append(c_free[j])
                j += 1
            else:
                parts.append(c_free.new_zeros(()))
        c_head = torch.stack(parts)
        t = params["spacing"] * self.f
        sys = System(torch.cat([c_head, c_head.new_zeros(1)]), t, n_d, V_d, list(self.medium),
                     self.template.stop_index, self.template.specs, names)
        n = sys.indices_d()
        if self.solve_curvature:
            c_last = solve_last_curvature(c_head, t, n, self.f)
        else:
            c_last = as_tensor(self._fixed_last_c)
        sys.c = torch.cat([c_head, c_last.reshape(1)])
        if self.image_solve:
            sys.t = torch.cat([t[:-1], (t[-1] + bfl(sys, n)).reshape(1)])
        return sys

    def prescription(self, params: ParameterSet | None = None) -> LensPrescription:
        with torch.no_grad():
            sys = self.system(params)
        return system_to_prescription(sys, self.template)

    def refreshed_glass_targets(self, params: ParameterSet | None = None) -> torch.Tensor:
        return self.quantized_glasses(params)[1]

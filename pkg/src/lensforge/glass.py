"""Glass catalog, two-term dispersion model and whitened glass space."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .diffcore import as_tensor

LAMBDA_D = 587.6
LAMBDA_F = 486.1
LAMBDA_C = 656.3
WAVELENGTH_WINDOW = (350.0, 750.0)

_TIE_RTOL = 1e-12


class GlassError(ValueError):
    pass


@dataclass(frozen=True)
class GlassMaterial:
    name: str
    n_d: float
    V_d: float

    def __post_init__(self):
        if not 1.3 < self.n_d < 2.2:
            raise GlassError(f"{self.name}: n_d={self.n_d} outside (1.3, 2.2)")
        if not 15.0 < self.V_d < 100.0:
            raise GlassError(f"{self.name}: V_d={self.V_d} outside (15, 100)")


def dispersion_coeffs(n_d, V_d):
    """Return ``(A, B)`` of ``n(lambda) = A + B / lambda**2`` with lambda in nm.

    B is fixed by the Abbe number over the F and C lines, A by the d-line index.
    Works on floats and on tensors (differentiable).
    """
    if isinstance(V_d, torch.Tensor):
        if bool((V_d <= 0).any()):
            raise GlassError("Abbe number must be positive")
    elif V_d <= 0:
        raise GlassError("Abbe number must be positive")
    B = (n_d - 1.0) / (V_d * (1.0 / LAMBDA_F**2 - 1.0 / LAMBDA_C**2))
    A = n_d - B / LAMBDA_D**2
    return A, B


def _check_window(wavelength) -> None:
    w = np.asarray(wavelength.detach() if isinstance(wavelength, torch.Tensor) else wavelength, dtype=float)
    lo, hi = WAVELENGTH_WINDOW
    if np.any(w < lo) or np.any(w > hi):
        raise GlassError(f"wavelength outside the {lo:g}-{hi:g} nm validity window")


def refractive_index(material, wavelength):
    """Refractive index of ``material`` at ``wavelength`` (nm).

    ``material`` is ``None``/``"air"`` (n = 1), a :class:`GlassMaterial`, or a
    ``(n_d, V_d)`` pair of floats or tensors.  Tensor inputs broadcast.
    """
    _check_window(wavelength)
    if material is None or material == "air":
        if isinstance(wavelength, torch.Tensor):
            return torch.ones_like(wavelength, dtype=torch.float64)
        return 1.0
    if isinstance(material, GlassMaterial):
        n_d, V_d = material.n_d, material.V_d
    else:
        n_d, V_d = material
    A, B = dispersion_coeffs(n_d, V_d)
    return A + B / wavelength**2


def index_table(n_d: torch.Tensor, V_d: torch.Tensor, wavelengths: torch.Tensor) -> torch.Tensor:
    """Indices for M glasses at W wavelengths, shape ``(M, W)``."""
    _check_window(wavelengths)
    A, B = dispersion_coeffs(n_d, V_d)
    return A[:, None] + B[:, None] / wavelengths[None, :] ** 2


@dataclass(frozen=True)
class Whitening:
    mean: np.ndarray  # (2,)
    matrix: np.ndarray  # (2, 2): g = matrix @ (x - mean)
    inverse: np.ndarray  # (2, 2): x = inverse @ g + mean

    def to_normalized(self, x):
        if isinstance(x, torch.Tensor):
            W = torch.as_tensor(self.matrix)
            mu = torch.as_tensor(self.mean)
            return (x - mu) @ W.T
        return (np.asarray(x, dtype=float) - self.mean) @ self.matrix.T

    def from_normalized(self, g):
        if isinstance(g, torch.Tensor):
            Wi = torch.as_tensor(self.inverse)
            mu = torch.as_tensor(self.mean)
            return g @ Wi.T + mu
        return np.asarray(g, dtype=float) @ self.inverse.T + self.mean


def fit_whitening(materials: Sequence[GlassMaterial]) -> Whitening:
    """PCA whitening of the (n_d, V_d) cloud: zero mean, identity covariance.

    Eigenvectors are sign-fixed so their largest component is positive,
    which keeps the transform stable across runs.
    """
    if len(materials) < 3:
        raise GlassError("whitening needs at least 3 materials")
    X = np.array([[m.n_d, m.V_d] for m in materials], dtype=float)
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= 1e-12 * max(evals.max(), 1e-300):
        raise GlassError("singular covariance; cannot whiten catalog")
    for j in range(2):
        if evecs[np.argmax(np.abs(evecs[:, j])), j] < 0:
            evecs[:, j] *= -1
    matrix = np.diag(evals**-0.5) @ evecs.T
    inverse = evecs @ np.diag(evals**0.5)
    return Whitening(mean, matrix, inverse)


class GlassCatalog:
    """Immutable list of catalog glasses plus their whitened coordinates."""

    def __init__(self, materials: Sequence[GlassMaterial]):
        self.materials: Tuple[GlassMaterial, ...] = tuple(materials)
        names = [m.name for m in self.materials]
        if len(set(names)) != len(names):
            raise GlassError("duplicate glass names in catalog")
        self._by_name = {m.name: i for i, m in enumerate(self.materials)}
        self.whitening = fit_whitening(self.materials)
        raw = np.array([[m.n_d, m.V_d] for m in self.materials])
        self.points = self.whitening.to_normalized(raw)
        self._points_t = torch.as_tensor(self.points)

    def __len__(self):
        return len(self.materials)

    def __getitem__(self, key) -> GlassMaterial:
        if isinstance(key, str):
            return self.materials[self.index(key)]
        return self.materials[key]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise GlassError(f"unknown glass {name!r}") from None

    @property
    def names(self) -> List[str]:
        return [m.name for m in self.materials]

    def to_normalized(self, n_d, V_d):
        if isinstance(n_d, torch.Tensor) or isinstance(V_d, torch.Tensor):
            x = torch.stack([as_tensor(n_d), as_tensor(V_d)], dim=-1)
        else:
            x = np.array([n_d, V_d], dtype=float)
        return self.whitening.to_normalized(x)

    def from_normalized(self, g):
        return self.whitening.from_normalized(g)

    def quantize(self, g) -> Tuple[np.ndarray, torch.Tensor]:
        """Nearest catalog point for each row of ``g`` (shape ``(M, 2)`` or ``(2,)``).

        Returns the catalog indices and the whitened catalog points (detached).
        Equal distances resolve to the lowest catalog index.
        """
        g = as_tensor(g).detach()
        single = g.dim() == 1
        g2 = g.reshape(-1, 2)
        d2 = ((g2[:, None, :] - self._points_t[None, :, :]) ** 2).sum(-1)
        dmin = d2.min(dim=1, keepdim=True).values
        near = d2 <= dmin * (1 + _TIE_RTOL) + 1e-300
        # first True along each row
        idx = near.to(torch.int8).argmax(dim=1).numpy()
        q = self._points_t[torch.as_tensor(idx)]
        if single:
            return idx[:1], q[0]
        return idx, q


def glass_loss(g: torch.Tensor, catalog: GlassCatalog) -> torch.Tensor:
    """Sum of squared whitened distances to the nearest catalog glasses."""
    g = g.reshape(-1, 2)
    _, q = catalog.quantize(g)
    return ((g - q) ** 2).sum()


_RECORD = re.compile(r"[,\s]+")


def parse_catalog(text: str) -> List[GlassMaterial]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in _RECORD.split(line) if p]
        if len(parts) != 3:
            raise GlassError(f"catalog line {lineno}: expected 'name n_d V_d', got {line!r}")
        try:
            out.append(GlassMaterial(parts[0], float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise GlassError(f"catalog line {lineno}: {exc}") from None
    return out


def load_catalog(path: str | Path | None = None) -> GlassCatalog:
    if path is None:
        return default_catalog()
    return GlassCatalog(parse_catalog(Path(path).read_text(encoding="utf-8")))


@lru_cache(maxsize=1)
def default_catalog() -> GlassCatalog:
    text = resources.files("lensforge.data").joinpath("ohara_catalog.txt").read_text(encoding="utf-8")
    return GlassCatalog(parse_catalog(text))

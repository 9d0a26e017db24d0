"""Autodiff contract shared by the numerical modules.

Everything differentiable in the package is a float64 ``torch.Tensor``; this
module adds the named parameter vector, a gradient helper with eager
non-finite detection, the straight-through operator and a central
finite-difference checker.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping

import torch

DTYPE = torch.float64


class GradientFailure(RuntimeError):
    """A non-finite value was produced while recording or back-propagating."""


class ContractError(ValueError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def hinge(x: torch.Tensor) -> torch.Tensor:
    """max(x, 0) with derivative 0 at exactly 0."""
    return torch.relu(x)


class ParameterSet:
    """Ordered collection of named leaf tensors.

    Gradients and flat vectors always follow insertion order, and within a
    leaf the row-major element order.
    """

    def __init__(self, named: Mapping[str, torch.Tensor] | Iterable | None = None):
        self._leaves: Dict[str, torch.Tensor] = {}
        if named is not None:
            items = named.items() if isinstance(named, Mapping) else named
            for name, value in items:
                self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._leaves:
            raise ContractError(f"duplicate parameter name {name!r}")
        leaf = as_tensor(value).detach().clone().requires_grad_(True)
        self._leaves[name] = leaf
        return leaf

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self._leaves

    def __iter__(self):
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)

    def items(self):
        return self._leaves.items()

    def values(self) -> List[torch.Tensor]:
        return list(self._leaves.values())

    @property
    def names(self) -> List[str]:
        return list(self._leaves)

    def flat_names(self) -> List[str]:
        out = []
        for name, leaf in self._leaves.items():
            if leaf.dim() == 0:
                out.append(name)
            else:
                out.extend(f"{name}[{i}]" for i in range(leaf.numel()))
        return out

    def numel(self) -> int:
        return sum(v.numel() for v in self._leaves.values())

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.detach().reshape(-1) for v in self._leaves.values()])

    def assign(self, flat: torch.Tensor) -> None:
        """Overwrite leaf values in place from a flat vector."""
        flat = as_tensor(flat)
        if flat.numel() != self.numel():
            raise ContractError("flat vector length does not match parameter set")
        i = 0
        with torch.no_grad():
            for leaf in self._leaves.values():
                n = leaf.numel()
                leaf.copy_(flat[i:i + n].reshape(leaf.shape))
                i += n

    def clone(self) -> "ParameterSet":
        return ParameterSet((k, v.detach().clone()) for k, v in self._leaves.items())

    def state_dict(self) -> Dict[str, list]:
        return {k: v.detach().tolist() for k, v in self._leaves.items()}


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(value).all()):
        raise GradientFailure(f"non-finite value in {what}")


def grad(f: Callable[[], torch.Tensor] | torch.Tensor, params: ParameterSet) -> torch.Tensor:
    """Gradient of a scalar w.r.t. every leaf of ``params``, flattened in order.

    ``f`` is either an already-recorded scalar tensor or a zero-argument
    callable that builds one.  With a callable the recording runs under
    anomaly detection so the failing backward node is named in the error.
    """
    leaves = params.values()
    if callable(f):
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message="Anomaly Detection has been enabled")
                ctx = torch.autograd.detect_anomaly(check_nan=True)
            with ctx:
                value = f()
                _check_finite(value, "forward result")
                gs = torch.autograd.grad(value, leaves, allow_unused=True)
        except RuntimeError as exc:
            if isinstance(exc, GradientFailure):
                raise
            raise GradientFailure(str(exc).splitlines()[0]) from exc
    else:
        value = f
        _check_finite(value, "forward result")
        gs = torch.autograd.grad(value, leaves, allow_unused=True, retain_graph=True)
    out = []
    for leaf, g in zip(leaves, gs):
        g = torch.zeros_like(leaf) if g is None else g
        out.append(g.reshape(-1))
    flat = torch.cat(out).detach()
    _check_finite(flat, "gradient")
    return flat


class _StepThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, q):
        return q.clone()

    @staticmethod
    def backward(ctx, g):
        return g, None


def step_through(x: torch.Tensor, q) -> torch.Tensor:
    """Forward value ``q``, identity Jacobian w.r.t. ``x``."""
    q = as_tensor(q).detach()
    if x.shape != q.shape:
        raise ContractError(f"step_through shape mismatch: {tuple(x.shape)} vs {tuple(q.shape)}")
    return _StepThrough.apply(x, q)


@dataclass
class GradCheckEntry:
    name: str
    analytic: float
    numeric: float
    rel_error: float
    status: str  # "pass" | "fail" | "inconclusive"


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.status != "fail" for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        errs = [e.rel_error for e in self.entries if e.status != "inconclusive"]
        return max(errs) if errs else 0.0

    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.status == "fail"]


def check_grad(
    f: Callable[[], torch.Tensor],
    params: ParameterSet,
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-9,
) -> GradCheckReport:
    """Compare ``grad`` against central differences, component by component.

    A component passes when ``|a - n| <= rtol * max(|a|, |n|) + atol``.  Non-finite
    values at a perturbed point make that component inconclusive.
    """
    analytic = grad(f, params)
    base = params.flatten()
    names = params.flat_names()
    report = GradCheckReport()
    try:
        for i, name in enumerate(names):
            vals = []
            for sign in (1.0, -1.0):
                x = base.clone()
                x[i] += sign * step
                params.assign(x)
                with torch.no_grad():
                    try:
                        vals.append(float(f()))
                    except (GradientFailure, ArithmeticError, ValueError):
                        vals.append(math.nan)
            a = float(analytic[i])
            if not all(math.isfinite(v) for v in vals):
                report.entries.append(GradCheckEntry(name, a, math.nan, math.nan, "inconclusive"))
                continue
            n = (vals[0] - vals[1]) / (2 * step)
            scale = max(abs(a), abs(n))
            err = abs(a - n) / scale if scale > 0 else 0.0
            ok = abs(a - n) <= rtol * scale + atol
            report.entries.append(GradCheckEntry(name, a, n, err, "pass" if ok else "fail"))
    finally:
        params.assign(base)
    return report

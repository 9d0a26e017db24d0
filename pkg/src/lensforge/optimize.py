"""Adam optimization loop, learning-rate schedule and Monte-Carlo tolerancing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .diffcore import ContractError, GradientFailure, ParameterSet
from .glass import GlassCatalog
from .imaging import (IlluminationError, ImageGeometry, PSFConfig, PSFError, simulate_lens, render_lens)
from .lens import (LensModel, LensPrescription, SolveError, Surface, bfl, efl, system_from_prescription)
from .losses import ConstraintConfig, DesignLossReport, LossError, fidelity_loss, joint_loss, lens_loss
from .raytrace import AimingError, FieldFailure, PupilSampler, SamplingConfig, spot_diagrams

log = logging.getLogger(__name__)

RECOVERABLE = (FieldFailure, GradientFailure, LossError, AimingError, SolveError, PSFError,
               IlluminationError, FloatingPointError)


class OptimizationAborted(RuntimeError):
    def __init__(self, message: str, params: ParameterSet, step: int):
        super().__init__(message)
        self.params = params
        self.step = step


# Reduced sampling used inside the loop; final numbers use the default sampling.
FAST_SAMPLING = SamplingConfig(n_h=11, n_p=512, n_rings=16)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps_constant: int = 2000
    steps_decay: int = 4000
    seed: int = 0
    max_failures: int = 25
    sampling: SamplingConfig = FAST_SAMPLING
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.steps_constant < 0 or self.steps_decay < 0:
            raise ContractError("step counts must be non-negative")

    @property
    def steps(self) -> int:
        return self.steps_constant + self.steps_decay

    def lr_at(self, step: int) -> float:
        """Constant, then a half cosine down to zero."""
        if step < self.steps_constant:
            return self.lr
        if self.steps_decay == 0:
            return 0.0
        u = min(1.0, (step - self.steps_constant) / self.steps_decay)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * u))


# ------------------------------------------------------------------ objectives

@dataclass
class Evaluation:
    report: DesignLossReport
    objective: torch.Tensor


Objective = Callable[[LensModel, ParameterSet, int], Evaluation]


def lens_objective(sampling: SamplingConfig = FAST_SAMPLING,
                   constraints: ConstraintConfig = ConstraintConfig()) -> Objective:
    sampler = PupilSampler(sampling)
    constraints = constraints.tightened()

    def f(model: LensModel, params: ParameterSet, step: int) -> Evaluation:
        rep = lens_loss(model, params, sampling, constraints, pupil=sampler())
        return Evaluation(rep, rep.lens)

    return f


def joint_objective(scenes: Sequence[torch.Tensor], geometry: ImageGeometry, lens_weight: float = 1.0,
                    sampling: SamplingConfig = FAST_SAMPLING, constraints: ConstraintConfig = ConstraintConfig(),
                    psf: PSFConfig = PSFConfig(), batch_size: int = 4, seed: int = 0) -> Objective:
    """ℓ_down + λ_lens ℓ_lens with the image-fidelity surrogate as ℓ_down.

    Scenes are drawn in batches from a seeded shuffle.
    """
    if not scenes:
        raise ContractError("joint objective needs at least one scene")
    sampler = PupilSampler(sampling)
    constraints = constraints.tightened()
    rng = np.random.default_rng(seed)
    order: List[int] = []

    def next_batch() -> List[int]:
        out = []
        while len(out) < min(batch_size, len(scenes)):
            if not order:
                order.extend(rng.permutation(len(scenes)).tolist())
            out.append(order.pop(0))
        return out

    def f(model: LensModel, params: ParameterSet, step: int) -> Evaluation:
        rep, sys, spots = lens_loss(model, params, sampling, constraints, pupil=sampler(), return_spots=True)
        sim = simulate_lens(sys, spots, geometry, psf)
        idx = next_batch()
        down = torch.stack([fidelity_loss(render_lens(scenes[i], sim), scenes[i]) for i in idx]).mean()
        total = joint_loss(rep, down, lens_weight)
        return Evaluation(rep, total)

    return f


# ------------------------------------------------------------------ optimizer

@dataclass
class StepResult:
    step: int
    lr: float
    accepted: bool
    report: Optional[DesignLossReport]
    message: str = ""

    def log_record(self) -> Dict[str, object]:
        rec: Dict[str, object] = {"step": self.step, "lr": self.lr, "accepted": self.accepted}
        if self.report is not None:
            d = self.report.as_dict()
            rec.update({
                "loss_spot": d["spot_mm"], "loss_path": d["ray_path"], "loss_angle": d["ray_angle"],
                "loss_glass": d["glass_var"], "loss_lens": d["lens"], "loss_down": d["downstream"],
                "loss_joint": d["joint"], "efl_mm": d["efl_mm"], "vignetting": d["vignetting"],
                "glasses": d["glass_names"],
            })
        if self.message:
            rec["message"] = self.message
        return rec


class AdamLoop:
    """Adam over a :class:`ParameterSet` with a schedule and step rejection.

    ``objective(params, step)`` returns ``(loss, report)``.  A step whose loss
    or gradient is non-finite, or which raises a recoverable numerical
    error, is rejected: parameters and optimizer state stay unchanged.
    """

    def __init__(self, params: ParameterSet, objective, config: OptimizerConfig = OptimizerConfig()):
        self.params = params
        self.objective = objective
        self.config = config
        for v in params.values():
            v.requires_grad_(True)
        self.adam = torch.optim.Adam(params.values(), lr=config.lr, betas=(config.beta1, config.beta2),
                                     eps=config.eps)
        self.iteration = 0
        self.failures = 0

    def step(self) -> StepResult:
        i = self.iteration
        self.iteration += 1
        lr = self.config.lr_at(i)
        for group in self.adam.param_groups:
            group["lr"] = lr
        self.adam.zero_grad(set_to_none=True)
        backup = [v.detach().clone() for v in self.params.values()]
        state = {k: {n: (t.clone() if isinstance(t, torch.Tensor) else t) for n, t in st.items()}
                 for k, st in self.adam.state.items()}
        try:
            loss, report = self.objective(self.params, i)
            if not bool(torch.isfinite(loss)):
                raise FloatingPointError("non-finite loss")
            loss.backward()
            for name, v in self.params.items():
                if v.grad is not None and not bool(torch.isfinite(v.grad).all()):
                    raise GradientFailure(f"non-finite gradient in {name}")
        except RECOVERABLE as exc:
            self.failures += 1
            log.warning("step %d rejected: %s", i, exc)
            self.adam.zero_grad(set_to_none=True)
            return StepResult(i, lr, False, None, str(exc))
        self.adam.step()
        if not all(bool(torch.isfinite(v).all()) for v in self.params.values()):
            with torch.no_grad():
                for v, b in zip(self.params.values(), backup):
                    v.copy_(b)
            for k, st in state.items():
                self.adam.state[k] = st
            self.failures += 1
            return StepResult(i, lr, False, report, "non-finite parameters after update")
        self.failures = 0
        return StepResult(i, lr, True, report)


class LensOptimizer(AdamLoop):
    """Adam over every free leaf of a :class:`LensModel`.

    Glass quantization, the last-curvature solve, the image solve and ray
    aiming are recomputed from the parameters on every evaluation.
    """

    def __init__(self, model: LensModel, config: OptimizerConfig = OptimizerConfig(),
                 objective: Optional[Objective] = None):
        self.model = model
        lens_obj = objective or lens_objective(config.sampling)

        def f(params, step):
            ev = lens_obj(model, params, step)
            return ev.objective, ev.report

        super().__init__(model.params, f, config)


@dataclass
class OptimizationResult:
    params: ParameterSet
    prescription: LensPrescription
    history: List[Dict[str, object]]
    final: DesignLossReport
    initial: Optional[DesignLossReport] = None


def optimize_lens(prescription: LensPrescription | LensModel, config: OptimizerConfig = OptimizerConfig(),
                  objective: Optional[Objective] = None, trajectory_path=None,
                  eval_sampling: SamplingConfig = SamplingConfig(),
                  constraints: ConstraintConfig = ConstraintConfig(),
                  catalog: GlassCatalog | None = None, callback=None) -> OptimizationResult:
    """Run the full schedule; write one JSON line per step to ``trajectory_path``.

    Raises :class:`OptimizationAborted` (carrying the last good parameters)
    after ``max_failures`` consecutive rejected steps.
    """
    torch.manual_seed(config.seed)
    model = prescription if isinstance(prescription, LensModel) else LensModel(prescription, catalog)
    opt = LensOptimizer(model, config, objective)
    history: List[Dict[str, object]] = []
    fh = open(trajectory_path, "w", encoding="utf-8") if trajectory_path else None
    last_good = model.params.clone()
    try:
        with torch.no_grad():
            initial = lens_loss(model, model.params, eval_sampling, constraints)
        for _ in range(config.steps):
            res = opt.step()
            rec = res.log_record()
            history.append(rec)
            if fh and (res.step % config.log_every == 0 or not res.accepted):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback:
                callback(res)
            if res.accepted:
                last_good = model.params.clone()
            elif opt.failures >= config.max_failures:
                raise OptimizationAborted(
                    f"{opt.failures} consecutive failed steps (last: {res.message})", last_good, res.step)
    finally:
        if fh:
            fh.close()
    with torch.no_grad():
        final = lens_loss(model, model.params, eval_sampling, constraints)
    for v in model.params.values():
        v.requires_grad_(False)
    return OptimizationResult(model.params, model.prescription(), history, final, initial)


def perturb_curvatures(prescription: LensPrescription, amount: float = 0.05, seed: int = 0,
                       catalog: GlassCatalog | None = None) -> LensModel:
    """Model whose free normalized curvatures are scaled by 1 + U(-amount, amount)."""
    model = LensModel(prescription, catalog)
    rng = np.random.default_rng(seed)
    c = model.params["curvature"]
    with torch.no_grad():
        c.mul_(torch.as_tensor(1.0 + rng.uniform(-amount, amount, size=c.shape)))
    return model


# ---------------------------------------------------------------- tolerancing

@dataclass(frozen=True)
class ToleranceSpec:
    curvature_rel: float = 0.002
    glass_thickness_mm: float = 0.05
    n_d: float = 5e-4
    V_d_rel: float = 0.005

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ContractError(f"tolerance {k} must be non-negative")


# Tolerancing runs many trials, so it samples fewer fields and rays.
TOLERANCE_SAMPLING = SamplingConfig(n_h=11, n_p=1024, n_rings=16)


@dataclass
class ToleranceReport:
    nominal_mm: float
    spots_mm: List[float]
    vignetting: List[float]
    failures: int
    seed: int
    spec: ToleranceSpec

    def quantiles(self) -> Dict[str, float]:
        if not self.spots_mm:
            return {}
        a = np.asarray(self.spots_mm)
        return {
            "mean": float(a.mean()), "median": float(np.median(a)), "q05": float(np.quantile(a, 0.05)),
            "q25": float(np.quantile(a, 0.25)), "q75": float(np.quantile(a, 0.75)),
            "q95": float(np.quantile(a, 0.95)), "std": float(a.std()),
        }

    def as_dict(self) -> Dict[str, object]:
        return {
            "nominal_spot_mm": self.nominal_mm, "trials": len(self.spots_mm) + self.failures,
            "failures": self.failures, "seed": self.seed, "spec": asdict(self.spec),
            "statistics": self.quantiles(),
            "mean_vignetting": float(np.mean(self.vignetting)) if self.vignetting else 0.0,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def perturbed_system(prescription: LensPrescription, spec: ToleranceSpec, rng: np.random.Generator,
                     catalog: GlassCatalog | None = None):
    """One Monte-Carlo realization, refocused with the paraxial image solve."""
    nominal = system_from_prescription(prescription, catalog)
    defocus = nominal.t[-1] - bfl(nominal)
    K, M = nominal.K, len(nominal.n_d)
    u = lambda n: torch.as_tensor(rng.uniform(-1.0, 1.0, size=n))  # noqa: E731
    sys = replace(nominal)
    sys.c = nominal.c * (1.0 + spec.curvature_rel * u(K))
    glass = torch.tensor([m >= 0 for m in nominal.medium])
    sys.t = nominal.t + torch.where(glass, spec.glass_thickness_mm * u(K), torch.zeros(K))
    sys.n_d = nominal.n_d + spec.n_d * u(M)
    sys.V_d = nominal.V_d * (1.0 + spec.V_d_rel * u(M))
    return sys.with_image_distance(bfl(sys) + defocus)


def tolerance_mc(prescription: LensPrescription, spec: ToleranceSpec = ToleranceSpec(), n_trials: int = 1000,
                 seed: int = 0, sampling: SamplingConfig = TOLERANCE_SAMPLING,
                 catalog: GlassCatalog | None = None, progress=None) -> ToleranceReport:
    """Uniform perturbations within ``spec``; every trial uses the same pupil samples."""
    from .losses import spot_loss

    rng = np.random.default_rng(seed)
    pupil = PupilSampler(sampling)()
    with torch.no_grad():
        nominal = float(spot_loss(spot_diagrams(system_from_prescription(prescription, catalog), sampling,
                                                pupil=pupil)))
        spots, vig, failures = [], [], 0
        for i in range(n_trials):
            sys = perturbed_system(prescription, spec, rng, catalog)
            try:
                sd = spot_diagrams(sys, sampling, pupil=pupil)
                spots.append(float(spot_loss(sd)))
                vig.append(sd.vignetting)
            except RECOVERABLE:
                failures += 1
            if progress:
                progress(i)
    return ToleranceReport(nominal, spots, vig, failures, seed, spec)

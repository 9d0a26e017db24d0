import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lensforge.glass import LAMBDA_D
from lensforge.lens import Specs, System, builtin_lens, field_angles
from lensforge.raytrace import (AimCorrection, FieldFailure, QECurve, RayBundle, SamplingConfig, SamplingError,
                                aiming_errors, make_rays, parse_qe_curve, ray_aim, refract, response_quantiles,
                                sample_pupil, sample_wavelengths, spot_diagrams, trace)

from conftest import BASELINES, SMALL, baseline_spots, baseline_system

TABLE_S1 = {
    0: [584.1, 604.2, 622.5, 642.2, 665.9],
    1: [487.1, 512.1, 535.1, 560.8, 596.3],
    2: [409.4, 435.4, 456.6, 477.9, 505.9],
}


# --------------------------------------------------------------- wavelengths

def test_uniform_response_quantiles():
    lam = np.linspace(400, 500, 11)
    q = response_quantiles(lam, np.ones_like(lam), (0.1, 0.3, 0.5, 0.7, 0.9))
    assert q == pytest.approx([410, 430, 450, 470, 490], abs=1e-9)


@pytest.mark.parametrize("channel", [0, 1, 2])
def test_bundled_curve_reproduces_selected_wavelengths(channel):
    w, ch = sample_wavelengths()
    assert len(w) == 15
    got = w[ch == channel]
    assert np.abs(got - TABLE_S1[channel]).max() <= 0.05 + 1e-9


def test_linear_ramp_quantile_is_exact():
    # density proportional to (lambda - 400) on [400, 500]: F^-1(p) = 400 + 100 sqrt(p)
    lam = np.array([400.0, 500.0])
    q = response_quantiles(lam, np.array([0.0, 1.0]), (0.25, 0.5))
    assert q == pytest.approx([450.0, 400 + 100 * math.sqrt(0.5)], rel=1e-12)


def test_bad_response_rejected():
    with pytest.raises(SamplingError):
        response_quantiles(np.array([1.0, 2.0]), np.array([0.0, 0.0]), (0.5,))
    with pytest.raises(SamplingError):
        parse_qe_curve("")
    with pytest.raises(SamplingError):
        parse_qe_curve("500 1 1\n")


# ------------------------------------------------------------------- pupil

def test_pupil_radii_and_edge_ring():
    cfg = SamplingConfig(symmetric=False)
    p = sample_pupil(cfg)
    r = np.hypot(p[:, 0], p[:, 1])
    assert len(p) == 2048
    assert r.max() == pytest.approx(1.0) and np.all(r <= 1 + 1e-12)
    assert np.isclose(r, 1.0).sum() == 64


def test_pupil_mean_square_radius():
    p = sample_pupil(SamplingConfig(n_p=64 * 256, n_rings=256, symmetric=False))
    assert (p**2).sum(1).mean() == pytest.approx(0.5, rel=0.01)


def test_pupil_determinism_and_half_disk():
    cfg = SamplingConfig(seed=7)
    a, b = sample_pupil(cfg), sample_pupil(cfg)
    assert np.array_equal(a, b)
    assert np.all(a[:, 0] >= 0) and len(a) == 1024
    assert not np.array_equal(a, sample_pupil(SamplingConfig(seed=8)))


def test_sampling_config_validation():
    with pytest.raises(SamplingError):
        SamplingConfig(n_p=100, n_rings=32)
    with pytest.raises(SamplingError):
        SamplingConfig(n_p=96, n_rings=32, symmetric=True)


# -------------------------------------------------------------- refraction

def _flat_block(n=1.5):
    return System(torch.tensor([0.0]), torch.tensor([10.0]), torch.tensor([n]), torch.tensor([60.0]), [0], 0,
                  Specs())


def _ray(direction, origin=(0.0, 0.0, -1.0)):
    return RayBundle(torch.tensor([origin]), torch.tensor([direction]), torch.zeros(1, dtype=torch.long))


def test_normal_incidence_on_flat():
    rec = trace(_flat_block(), _ray([0.0, 0.0, 1.0]), [LAMBDA_D])
    assert rec.direction[0].tolist() == [0.0, 0.0, 1.0]
    assert float(rec.zeta[0, 0]) == 1.0 and float(rec.zeta_p[0, 0]) == 1.0


def test_scalar_snell_at_30_degrees():
    th = math.radians(30)
    rec = trace(_flat_block(), _ray([0.0, math.sin(th), math.cos(th)]), [LAMBDA_D])
    tp = math.asin(0.5 / 1.5)
    assert math.degrees(tp) == pytest.approx(19.47, abs=0.01)
    assert float(rec.direction[0, 1]) == pytest.approx(math.sin(tp), abs=1e-12)
    assert float(rec.zeta_p[0, 0]) == pytest.approx(math.cos(tp) ** 2, abs=1e-12)


unit3 = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 1)).map(
    lambda v: torch.tensor(v, dtype=torch.float64) / torch.tensor(v, dtype=torch.float64).norm())


@settings(max_examples=100, deadline=None)
@given(unit3, unit3, st.floats(1.0, 2.0), st.floats(1.0, 2.0))
def test_refraction_properties(d, nrm, n1, n2):
    if float((d * nrm).sum()) < 0.05:
        nrm = d.clone()
    d2, zeta, zeta_p = refract(d, nrm, n1 / n2)
    if float(zeta_p) <= 1e-6:
        return  # total internal reflection
    assert float(d2.norm()) == pytest.approx(1.0, abs=1e-9)
    # Snell invariant
    assert n1**2 * (1 - float(zeta)) == pytest.approx(n2**2 * (1 - float(zeta_p)), abs=1e-12)
    back, _, _ = refract(-d2, -nrm, n2 / n1)
    assert torch.allclose(back, -d, atol=1e-9)


def test_total_internal_reflection_invalidates():
    sys = System(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 5.0]), torch.tensor([1.9]), torch.tensor([40.0]),
                 [0, -1], 0, Specs())
    th = math.radians(80)
    rec = trace(sys, _ray([0.0, math.sin(th), math.cos(th)]), [LAMBDA_D])
    # a flat exit face undoes the entry refraction
    assert bool(rec.valid[0])
    # a curved exit face pushes the internal angle past critical
    big = System(torch.tensor([0.0, 0.1]), torch.tensor([1.0, 5.0]), torch.tensor([1.9]), torch.tensor([40.0]),
                 [0, -1], 0, Specs())
    rec = trace(big, _ray([0.0, math.sin(th), math.cos(th)], origin=(0.0, 4.0, -1.0)), [LAMBDA_D])
    assert not bool(rec.valid[0])


@pytest.mark.parametrize("name", BASELINES)
def test_trace_invariants_on_baselines(name):
    sys = baseline_system(name)
    waves, _ = SMALL.spectrum()
    fields = field_angles(sys.specs, 5)
    rays = make_rays(sys, fields, sample_pupil(SMALL), ray_aim(sys, fields, 2), len(waves))
    rec = trace(sys, rays, waves, record_all=True)
    assert bool(rec.valid.all())
    n = sys.indices(waves)[:, rays.wavelength_index]
    for k, d in enumerate(rec.directions):
        assert torch.allclose(d.norm(dim=1), torch.ones(len(d)), atol=1e-9)
        lhs = n[k] ** 2 * (1 - rec.zeta[k])
        rhs = n[k + 1] ** 2 * (1 - rec.zeta_p[k])
        assert torch.allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize("name", BASELINES)
def test_axial_ray_stays_on_axis(name):
    sys = baseline_system(name)
    rec = trace(sys, _ray([0.0, 0.0, 1.0], origin=(0.0, 0.0, 0.0)), [450.0, 550.0])
    assert float(rec.x[0]) == 0.0 and float(rec.y[0]) == 0.0


def test_trace_matches_refract_helper():
    sys = baseline_system("cooke")
    o = torch.tensor([[0.0, 2.0, 0.0]])
    d = torch.tensor([[0.0, 0.1, 1.0]])
    d = d / d.norm()
    rec = trace(sys, RayBundle(o, d, torch.zeros(1, dtype=torch.long)), [LAMBDA_D], stop_at=0, record_all=True)
    q = rec.positions[1][0]
    c = float(sys.c[0])
    nrm = torch.tensor([-c * q[0], -c * q[1], 1 - c * q[2]])
    n = sys.indices_d()
    d2, _, _ = refract(d[0], nrm, n[0] / n[1])
    assert torch.allclose(rec.directions[0][0], d2, atol=1e-12)


def test_missed_surface_keeps_last_state_and_field_failure():
    sys = baseline_system("doublet")
    far = AimCorrection(torch.tensor([40.0]), torch.tensor([40.0]), torch.tensor([0.0]))
    with pytest.raises(FieldFailure):
        spot_diagrams(sys, SMALL, fields_deg=[25.0], aim=far)
    sd = spot_diagrams(sys, SMALL, fields_deg=[25.0], aim=far, raise_on_failure=False)
    assert sd.vignetting == 1.0
    assert torch.isfinite(sd.record.zeta).all()


# ------------------------------------------------------------------ aiming

def test_on_axis_aim_is_zero():
    aim = ray_aim(baseline_system("tessar"), [0.0, 10.0], 2)
    assert aim.dy_top[0] == 0 and aim.dy_bottom[0] == 0 and aim.dx_side[0] == 0
    assert float(aim.dy_top[1].abs()) > 0


def test_aiming_reduces_cooke_miss():
    sys = baseline_system("cooke")
    f = torch.tensor([25.0])
    none, r_s = aiming_errors(sys, f)
    one, _ = aiming_errors(sys, f, ray_aim(sys, f, 1))
    assert float(one.abs().max()) < float(none.abs().max())


# ----------------------------------------------------------- spot diagrams

@pytest.mark.parametrize("name", BASELINES)
def test_no_vignetting_on_baselines(name):
    assert baseline_spots(name).vignetting == 0.0


def test_mirrored_points_are_exact():
    sd = baseline_spots("doublet", SMALL)
    x, y, v = sd.mirrored()
    n = sd.x.shape[-1]
    assert torch.equal(x[..., n:], -x[..., :n]) and torch.equal(y[..., n:], y[..., :n])


def test_spot_shrinks_with_aperture():
    from lensforge.losses import spot_loss

    sys = baseline_system("doublet")
    sizes = []
    for N in (4.0, 16.0, 64.0):
        s = System(sys.c, sys.t, sys.n_d, sys.V_d, sys.medium, sys.stop, Specs(f_number=N), sys.glass_names)
        sizes.append(float(spot_loss(spot_diagrams(s, SamplingConfig(n_h=1, n_p=256, n_rings=8)))))
    assert sizes[0] > sizes[1] > sizes[2] and sizes[2] < 0.2 * sizes[0]


def test_trace_is_deterministic():
    sys = baseline_system("tessar")
    a = spot_diagrams(sys, SMALL)
    b = spot_diagrams(sys, SMALL)
    assert torch.equal(a.x, b.x) and torch.equal(a.record.zeta, b.record.zeta)


def test_centroid_is_mean_y():
    sd = baseline_spots("cooke", SMALL)
    assert torch.allclose(sd.centroid_y, sd.y.mean((1, 2)))

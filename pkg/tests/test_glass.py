import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lensforge.glass import (LAMBDA_C, LAMBDA_D, LAMBDA_F, GlassCatalog, GlassError, GlassMaterial,
                             default_catalog, dispersion_coeffs, fit_whitening, glass_loss, index_table,
                             parse_catalog, refractive_index)

TABLE_GLASSES = {"S-LAL12": (1.678, 55.3), "S-TIM1": (1.626, 35.7), "S-LAH92": (1.892, 37.1),
                 "S-LAH96": (1.764, 48.5), "S-LAH88": (1.916, 31.6), "S-TIL25": (1.581, 40.7)}


@pytest.mark.parametrize("name", sorted(TABLE_GLASSES))
def test_catalog_contains_lens_glasses(name):
    g = default_catalog()[name]
    assert (g.n_d, g.V_d) == TABLE_GLASSES[name]


@settings(max_examples=50, deadline=None)
@given(st.floats(1.4, 2.0), st.floats(20.0, 90.0))
def test_dispersion_reproduces_nd_and_abbe(n_d, V_d):
    m = GlassMaterial("x", n_d, V_d)
    assert refractive_index(m, LAMBDA_D) == pytest.approx(n_d, abs=1e-12)
    nF, nC = refractive_index(m, LAMBDA_F), refractive_index(m, LAMBDA_C)
    assert (n_d - 1) / (nF - nC) == pytest.approx(V_d, rel=1e-10)


def test_index_decreases_with_wavelength():
    m = default_catalog()["S-TIM1"]
    n = [refractive_index(m, w) for w in (400.0, 500.0, 600.0, 700.0)]
    assert all(a > b for a, b in zip(n, n[1:]))


def test_air_is_one_and_window_enforced():
    assert refractive_index("air", 500.0) == 1.0
    with pytest.raises(GlassError):
        refractive_index(GlassMaterial("x", 1.5, 60), 900.0)


def test_index_table_matches_scalar():
    cat = default_catalog()
    nd = torch.tensor([1.5, 1.8])
    vd = torch.tensor([60.0, 30.0])
    w = torch.tensor([450.0, 587.6])
    t = index_table(nd, vd, w)
    assert t.shape == (2, 2)
    assert float(t[1, 0]) == pytest.approx(refractive_index((1.8, 30.0), 450.0))


def test_whitening_has_zero_mean_identity_covariance():
    cat = default_catalog()
    P = cat.points
    assert np.allclose(P.mean(0), 0, atol=1e-12)
    assert np.allclose(np.cov(P, rowvar=False), np.eye(2), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.45, 1.95), st.floats(20.0, 85.0))
def test_whitening_round_trip(n_d, V_d):
    cat = default_catalog()
    g = cat.to_normalized(n_d, V_d)
    back = cat.from_normalized(g)
    assert back == pytest.approx([n_d, V_d], abs=1e-10)


def test_quantize_returns_nearest_and_tie_lowest_index():
    cat = GlassCatalog([GlassMaterial("a", 1.5, 60), GlassMaterial("b", 1.7, 40), GlassMaterial("c", 1.9, 25)])
    for i in range(3):
        idx, q = cat.quantize(torch.tensor(cat.points[i]) + 1e-3)
        assert idx[0] == i
    mid = torch.tensor(0.5 * (cat.points[0] + cat.points[1]))
    idx, _ = cat.quantize(mid)
    assert idx[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_quantize_matches_brute_force(a, b):
    cat = default_catalog()
    idx, q = cat.quantize(torch.tensor([[a, b]]))
    d = ((cat.points - np.array([a, b])) ** 2).sum(1)
    assert d[idx[0]] <= d.min() * (1 + 1e-12) + 1e-300
    assert torch.equal(q[0], torch.as_tensor(cat.points[idx[0]]))


def test_glass_loss_zero_on_catalog_and_pulls_toward_point():
    cat = default_catalog()
    g = torch.tensor(cat.points[[3, 7]], requires_grad=True)
    assert glass_loss(g, cat).item() == 0.0
    g2 = (torch.tensor(cat.points[[3]]) + torch.tensor([[0.01, -0.02]])).requires_grad_(True)
    loss = glass_loss(g2, cat)
    assert loss.item() == pytest.approx(0.01**2 + 0.02**2)
    loss.backward()
    assert torch.allclose(g2.grad, torch.tensor([[0.02, -0.04]]))


def test_parse_catalog_errors():
    assert parse_catalog("# c\nA 1.5 60\n\nB,1.6,50\n")[1].name == "B"
    with pytest.raises(GlassError, match="line 1"):
        parse_catalog("A 1.5\n")
    with pytest.raises(GlassError):
        parse_catalog("A x 60\n")
    with pytest.raises(GlassError):
        fit_whitening([GlassMaterial("a", 1.5, 60), GlassMaterial("b", 1.6, 50)])
    with pytest.raises(GlassError):
        GlassCatalog([GlassMaterial("a", 1.5, 60)] * 3)


def test_dispersion_coeffs_accept_tensors():
    A, B = dispersion_coeffs(torch.tensor([1.5]), torch.tensor([60.0]))
    assert float(A + B / LAMBDA_D**2) == pytest.approx(1.5)

"""Derivations, divergences, symmetric moduli and the built-in fields."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmslab.space import (
    build_product_with_circle,
    build_sphere_mesh,
    build_torus_grid,
)
from mmslab.spectral import assemble_laplacian, eigendecompose
from mmslab.fields import (
    VectorField,
    apply_derivation,
    builtin_field,
    chart_gradient,
    divergence,
    regularity_moduli,
    sym_derivative_modulus,
    verify_pair_kernel_estimate,
)
from mmslab.fields import _discrete_divergence, _shear_profile


def torus_basis(dims, res):
    space = build_torus_grid(dims, res)
    return space, eigendecompose(assemble_laplacian(space, "torus-fourier-exact"))


# ---------------------------------------------------------------------------
# derivations and gradients


def test_constant_field_derivation_error_bound():
    space = build_torus_grid(3, 16)
    b = builtin_field("constant", {"space": space, "v": [1.0, 0.0, 0.0]})
    f = np.cos(2 * np.pi * space.points[:, 0])
    exact = -2 * np.pi * np.sin(2 * np.pi * space.points[:, 0])
    err = np.abs(apply_derivation(b, f, 0.0) - exact).max()
    # third-derivative bound for the centered difference
    assert err <= (2 * np.pi) ** 3 * space.spacing**2 / 6


def test_leibniz_rule_with_analytic_partials():
    space, basis = torus_basis(2, 16)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    f = basis.eigenfunctions[:, 5]
    g = basis.eigenfunctions[:, 6]
    grads = basis.evaluate_mode_gradients(space.points)
    gf, gg = grads[:, 5, :], grads[:, 6, :]
    gfg = gf * g[:, None] + f[:, None] * gg
    lhs = apply_derivation(b, f * g, 0.0, f_gradient=gfg)
    rhs = (apply_derivation(b, f, 0.0, f_gradient=gf) * g
           + f * apply_derivation(b, g, 0.0, f_gradient=gg))
    assert np.abs(lhs - rhs).max() < 1e-8
    # the pure finite-difference route is only O(h^2) on entangled products
    fd = apply_derivation(b, f * g, 0.0)
    assert np.abs(fd - rhs).max() > 1e-2


def test_derivation_bounded_by_gradient():
    space, basis = torus_basis(2, 16)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    f = basis.eigenfunctions[:, 5]
    gf = chart_gradient(space, f)
    action = apply_derivation(b, f, 0.0, f_gradient=gf)
    bmag = np.linalg.norm(b.at_nodes(0.0), axis=1)
    gmag = np.linalg.norm(gf, axis=1)
    assert np.all(np.abs(action) <= bmag * gmag + 1e-12)


def test_chart_gradient_product_circle_matches_torus():
    prod = build_product_with_circle(build_torus_grid(2, 8), 8)
    cube = build_torus_grid(3, 8)
    assert_allclose(prod.points, cube.points, atol=1e-14)
    f = np.cos(2 * np.pi * cube.points[:, 0]) * np.sin(2 * np.pi * cube.points[:, 2])
    assert_allclose(chart_gradient(prod, f), chart_gradient(cube, f), atol=1e-14)


def test_time_span_enforced():
    space = build_torus_grid(2, 8)
    b = builtin_field("constant", {"space": space, "v": [1.0, 0.0],
                                   "time_span": (0.0, 2.0)})
    b.at_nodes(1.5)
    with pytest.raises(ValueError):
        b.at_nodes(2.5)
    with pytest.raises(ValueError):
        b.at_nodes(-0.1)


# ---------------------------------------------------------------------------
# divergence


def test_divergence_constant_and_shear_zero():
    space = build_torus_grid(2, 16)
    for b in [builtin_field("constant", {"space": space, "v": [0.3, -0.2]}),
              builtin_field("shear", {"space": space, "s": 0.7})]:
        assert_allclose(divergence(space, b, 0.0), 0.0, atol=1e-12)


def test_divergence_gradient_field():
    space, basis = torus_basis(2, 16)
    b = builtin_field("gradient_heat",
                      {"basis": basis, "f0": basis.eigenfunctions[:, 1], "tau": 0.0})
    target = -basis.eigenvalues[1] * basis.eigenfunctions[:, 1]
    assert_allclose(divergence(space, b, 0.0), target, atol=1e-10)
    w = space.weights
    fd = _discrete_divergence(space, b, 0.0)
    rel = np.sqrt(np.sum((fd - target) ** 2 * w) / np.sum(target**2 * w))
    assert rel < 0.10


def test_divergence_is_weighted_adjoint_of_derivation():
    rng = np.random.default_rng(8)
    space = build_torus_grid(2, 12)
    b = builtin_field("constant", {"space": space, "v": [0.4, 0.1]})
    div = _discrete_divergence(space, b, 0.0)
    w = space.weights
    for _ in range(6):
        f = rng.standard_normal(space.npoints)
        lhs = np.sum(apply_derivation(b, f, 0.0) * w)
        rhs = -np.sum(div * f * w)
        assert abs(lhs - rhs) < 1e-10


def test_wrong_closed_form_divergence_rejected():
    space = build_torus_grid(2, 16)
    good = builtin_field("shear", {"space": space, "s": 0.5})
    bad = VectorField(name="broken", space=space,
                      analytic_form=good.analytic_form,
                      time_span=good.time_span,
                      bounded_norm=good.bounded_norm,
                      params=good.params,
                      div_form=lambda coords, t: np.full(len(np.atleast_2d(coords)), 5.0),
                      sym_form=good.sym_form)
    with pytest.raises(ValueError, match="adjoint"):
        divergence(space, bad, 0.0)


# ---------------------------------------------------------------------------
# symmetric derivative modulus


def test_sym_modulus_constant_field_zero():
    space = build_torus_grid(2, 16)
    b = builtin_field("constant", {"space": space, "v": [0.3, -0.1]})
    assert np.abs(sym_derivative_modulus(b, 0.0, mode="chart")).max() < 1e-8
    assert np.abs(sym_derivative_modulus(b, 0.0, mode="bilinear-probe")).max() < 1e-8


def test_sym_modulus_unknown_mode():
    space = build_torus_grid(2, 8)
    b = builtin_field("constant", {"space": space, "v": [1.0, 0.0]})
    with pytest.raises(ValueError):
        sym_derivative_modulus(b, 0.0, mode="spectral")


def test_rotation_field_is_killing():
    space = build_sphere_mesh(500)
    b = builtin_field("rotation", {"space": space, "axis": [0, 0, 1], "speed": 0.7})
    v = b.at_nodes(0.0)
    assert np.abs((v * space.points).sum(axis=1)).max() < 1e-12
    assert b.bounded_norm <= 0.7 + 1e-12
    sym = sym_derivative_modulus(b, 0.0, mode="chart")
    assert np.abs(sym).max() < 1e-3 * 0.7
    # the latitude is invariant under the rotation
    lat = space.points[:, 2]
    assert np.abs(apply_derivation(b, lat, 0.0)).max() < 1e-3


def test_shear_profile_shape():
    s, delta = 0.5, 0.25
    x = np.arange(4096) / 4096.0
    phi, dphi = _shear_profile(s, delta, x)
    # odd, zero mean, C^1 across the seam
    assert abs(phi.mean()) < 1e-12
    assert_allclose(phi, -_shear_profile(s, delta, (1.0 - x) % 1.0)[0], atol=1e-12)
    fd = (np.roll(phi, -1) - np.roll(phi, 1)) * 4096 / 2.0
    assert np.abs(fd - dphi).max() < 1e-3
    interior = np.abs(x - 0.5) < 0.25 - 1e-9
    assert_allclose(dphi[interior], s, atol=1e-12)
    assert_allclose(np.abs(dphi).max(), s * (1.0 / delta - 1.0), atol=1e-12)


def test_shear_sym_modulus():
    space = build_torus_grid(2, 16)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    sym = sym_derivative_modulus(b, 0.0, mode="chart")
    interior = np.abs(space.points[:, 1] - 0.5) < 0.25 - 1e-9
    assert_allclose(sym[interior], 0.25, atol=1e-12)
    # global peak 1.5 s at the seam center, finite differences within 5%
    assert abs(sym.max() - 0.75) / 0.75 < 0.05
    closed = b.sym_form(space.points, 0.0)
    assert_allclose(closed.max(), 0.75, atol=1e-12)


def test_probe_envelope_against_chart_shear():
    space = build_torus_grid(2, 16)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    w = space.weights
    chart = sym_derivative_modulus(b, 0.0, mode="chart")
    probe = sym_derivative_modulus(b, 0.0, mode="bilinear-probe")
    assert np.all(probe >= -1e-12)
    l2c = np.sqrt(np.sum(chart**2 * w))
    l2p = np.sqrt(np.sum(probe**2 * w))
    assert l2p <= 1.5 * l2c


# ---------------------------------------------------------------------------
# built-in fields, closed forms


def test_gradient_heat_field_values_and_divergence():
    space, basis = torus_basis(2, 10)
    i = 5
    tau = 0.02
    b = builtin_field("gradient_heat",
                      {"basis": basis, "f0": basis.eigenfunctions[:, i], "tau": tau})
    lam = basis.eigenvalues[i]
    grads = basis.evaluate_mode_gradients(space.points)[:, i, :]
    assert_allclose(b.at_nodes(0.0), np.exp(-lam * tau) * grads, atol=1e-12)
    closed = b.div_form(space.points, 0.0)
    target = -lam * np.exp(-lam * tau) * basis.eigenfunctions[:, i]
    assert_allclose(closed, target, atol=1e-12)
    w = space.weights
    fd = _discrete_divergence(space, b, 0.0)
    rel = np.sqrt(np.sum((fd - closed) ** 2 * w) / np.sum(closed**2 * w))
    assert rel < 0.10


def test_gradient_heat_requires_exact_basis():
    space = build_torus_grid(2, 8)
    basis = eigendecompose(assemble_laplacian(space, "graph-gaussian-weights"))
    with pytest.raises(ValueError):
        builtin_field("gradient_heat",
                      {"basis": basis, "f0": np.ones(64), "tau": 0.1})


def cdl_field(res, alpha=0.5, rho=0.25):
    space = build_torus_grid(3, res)
    b = builtin_field("cdl_singular", {"space": space, "center": [0.5, 0.5, 0.5],
                                       "alpha": alpha, "rho": rho})
    return space, b


def test_cdl_speed_profile():
    space, b = cdl_field(16)
    v = b.at_nodes(0.0)
    speed = np.linalg.norm(v, axis=1)
    assert_allclose(speed.max(), 0.25**0.5, atol=1e-12)
    assert b.bounded_norm == pytest.approx(0.25**0.5)
    center = 8 * 256 + 8 * 16 + 8
    assert speed[center] == 0.0
    # in-plane point at distance 2h inside the core: |b| = d^{1-alpha}
    assert_allclose(speed[10 * 256 + 8 * 16 + 8], 0.125**0.5, atol=1e-12)
    # points on the vertical line through the center are fixed
    line = np.all(np.abs(space.points[:, :2] - 0.5) < 1e-12, axis=1)
    assert np.abs(v[line]).max() == 0.0


def test_cdl_divergence_free():
    space, b = cdl_field(16)
    assert_allclose(divergence(space, b, 0.0), 0.0, atol=1e-12)


def test_cdl_core_modulus_grows_like_h_to_minus_alpha():
    vals = {}
    for res in (8, 16):
        space, b = cdl_field(res)
        sym = b.sym_form(space.points, 0.0)
        inner = (res // 2 + 1) * res * res + (res // 2) * res + res // 2
        vals[res] = sym[inner]
    assert_allclose(vals[16], 1.0, atol=1e-12)  # (alpha/2) h^{-alpha}
    assert_allclose(vals[16] / vals[8], 2.0**0.5, rtol=1e-9)


def test_cdl_global_modulus_resolution_independent():
    # away from the core the modulus peaks on the cutoff shoulder, so the
    # global maximum does not scale with the grid
    space16, b16 = cdl_field(16)
    space8, b8 = cdl_field(8)
    m16 = b16.sym_form(space16.points, 0.0).max()
    m8 = b8.sym_form(space8.points, 0.0).max()
    assert_allclose(m16, 2.2454024217662174, rtol=1e-9)
    assert abs(m8 - m16) / m16 < 0.02
    fd = sym_derivative_modulus(b16, 0.0, mode="chart")
    assert abs(fd.max() - m16) / m16 < 0.10


def test_builtin_field_validation():
    t2 = build_torus_grid(2, 8)
    sphere = build_sphere_mesh(100)
    with pytest.raises(ValueError):
        builtin_field("shear", {"space": sphere, "s": 0.5})
    with pytest.raises(ValueError):
        builtin_field("rotation", {"space": t2, "axis": [0, 0, 1], "speed": 1.0})
    with pytest.raises(ValueError):
        builtin_field("shear", {"space": t2, "s": 0.5, "delta": 0.7})
    with pytest.raises(ValueError):
        builtin_field("vortex", {"space": t2})


# ---------------------------------------------------------------------------
# combined moduli and maximal estimates


def test_regularity_moduli_shear():
    space = build_torus_grid(2, 16)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    rep = regularity_moduli(b, [0.0, 0.5, 1.0])
    assert np.abs(rep.div).max() < 1e-12
    assert_allclose(rep.g_combined, rep.sym_modulus, atol=1e-12)
    # autonomous field: the time integral is |t1 - t0| * ||g||_L2
    g0 = np.sqrt(np.sum(rep.g_combined[0] ** 2 * space.weights))
    assert_allclose(rep.l2_time_integral, g0, rtol=1e-12)
    chart = regularity_moduli(b, [0.0, 1.0], mode="chart")
    assert np.abs(chart.div).max() < 1e-10


def test_pair_kernel_estimate_bounded_and_stable():
    rng = np.random.default_rng(11)
    consts = {}
    for res in (8, 12, 16):
        space = build_torus_grid(3, res)
        pairs = rng.integers(0, space.npoints, (40, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        consts[res] = verify_pair_kernel_estimate(space, np.ones(space.npoints),
                                                  3, pairs)
    assert consts[12] < 50.0
    assert 0.5 < consts[8] / consts[12] < 2.0
    assert 0.5 < consts[16] / consts[12] < 2.0


def test_pair_kernel_estimate_input_validation():
    space = build_torus_grid(3, 8)
    with pytest.raises(ValueError):
        verify_pair_kernel_estimate(space, -np.ones(space.npoints), 3, [[0, 1]])
    with pytest.raises(ValueError):
        verify_pair_kernel_estimate(space, np.ones(space.npoints), 3, [[2, 2]])

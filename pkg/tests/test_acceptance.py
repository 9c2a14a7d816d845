"""End-to-end runs of every workflow at production scale."""

import os
from functools import lru_cache

import numpy as np
import pytest

from mmslab import flows
from mmslab import transport as tr
from mmslab.fields import (
    builtin_field,
    regularity_moduli,
    verify_key_maximal_estimate,
    verify_pair_kernel_estimate,
)
from mmslab.green import (
    fit_comparability_constants,
    fit_slope_constant,
    green,
    green_function,
    green_time_quadrature,
    verify_green_action,
    verify_green_laplacian,
)
from mmslab.space import (
    build_sphere_mesh,
    build_torus_grid,
    build_weighted_graph,
    chart_distance,
)
from mmslab.spectral import (
    assemble_laplacian,
    eigendecompose,
    heat_kernel,
    heat_kernel_matrix,
)

# sum over Z of exp(-4 pi^2 k^2 / 100), evaluated to 30 digits independently
THETA_001 = 2.820947917817136


@lru_cache(maxsize=None)
def torus_basis(dims, res):
    space = build_torus_grid(dims, res)
    return space, eigendecompose(assemble_laplacian(space))


@lru_cache(maxsize=None)
def torus_green(dims, res):
    space, basis = torus_basis(dims, res)
    return space, basis, green_function(basis)


def cdl_field(space):
    return builtin_field("cdl_singular", {"space": space, "alpha": 0.5,
                                          "rho": 0.25, "center": (0.5, 0.5, 0.5)})


# ---------------------------------------------------------------------------
# heat kernel identities


def test_heat_kernel_identities_at_scale():
    space, basis = torus_basis(1, 32)
    w = space.weights
    p = heat_kernel_matrix(basis, 0.01)
    trace = float(np.sum(np.diag(p) * w))
    assert abs(trace - np.sum(np.exp(-0.01 * basis.eigenvalues))) < 1e-9
    assert abs(heat_kernel(basis, 0.01, 0, 0) - THETA_001) < 1e-6
    # semigroup property through an uneven split of the time interval
    ps, pt = heat_kernel_matrix(basis, 0.004), heat_kernel_matrix(basis, 0.006)
    assert np.abs((ps * w[None, :]) @ pt - p).max() < 1e-9
    assert np.abs(p @ w - 1.0).max() < 1e-9


# ---------------------------------------------------------------------------
# Green function identities


def test_green_defining_identities_at_scale():
    space, basis, G = torus_green(3, 10)
    rng = np.random.default_rng(0)
    worst = max(verify_green_action(basis, rng.standard_normal(space.npoints),
                                    int(rng.integers(space.npoints)))
                for _ in range(50))
    assert worst < 1e-8
    assert verify_green_laplacian(basis, 0.01, 0) < 1e-8
    assert verify_green_laplacian(basis, 0.5, 123) < 1e-8
    for x, y in [(0, 5), (17, 901), (250, 750)]:
        assert abs(green_time_quadrature(basis, x, y) - green(basis, 0.0, x, y)) < 1e-4


def test_green_matches_pseudo_inverse_on_graph():
    g = build_weighted_graph(3, [(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0)],
                             weights=[0.25, 0.5, 0.25])
    basis = eigendecompose(assemble_laplacian(g))
    sq = np.sqrt(g.weights)
    pinv = np.linalg.pinv(sq[:, None] * assemble_laplacian(g).matrix() / sq[None, :])
    oracle = pinv / sq[:, None] / sq[None, :]
    assert np.abs(green_function(basis).values - oracle).max() < 1e-10


# ---------------------------------------------------------------------------
# Green-distance comparability


def test_comparability_constants_across_resolutions():
    A = {}
    for res in (8, 12):
        space, _, G = torus_green(3, res)
        A[res] = fit_comparability_constants(G, space, 3).A
    assert np.isfinite(A[12]) and A[12] > 0
    assert abs(A[12] - A[8]) <= 0.3 * A[8]

    space, basis, G = torus_green(3, 12)
    d = space.pairwise()
    near = np.abs(d - space.spacing) < 1e-12
    prod = (G.values * d)[near]
    # flat-space reference for the product is 1/(4 pi) = 0.0796
    assert prod.min() > 0.04
    assert prod.max() < 0.16

    rng = np.random.default_rng(2)
    sample = rng.choice(space.npoints, 24, replace=False)
    C = fit_slope_constant(basis, space, 3, sample, green_fn=G)
    assert np.isfinite(C) and C > 0


# ---------------------------------------------------------------------------
# maximal estimates


def test_maximal_estimates_at_scale():
    rng = np.random.default_rng(11)
    consts = {}
    for res in (8, 12, 16):
        space = build_torus_grid(3, res)
        pairs = rng.integers(0, space.npoints, (1100, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]][:1000]
        consts[res] = verify_pair_kernel_estimate(space, np.ones(space.npoints),
                                                  3, pairs)
    assert consts[12] < 50.0
    assert 0.5 < consts[8] / consts[12] < 2.0
    assert 0.5 < consts[16] / consts[12] < 2.0

    space, basis, G = torus_green(3, 12)
    pairs = rng.integers(0, space.npoints, (1100, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]][:1000]
    gh = builtin_field("gradient_heat",
                       {"basis": basis, "tau": 0.1,
                        "f0": 3.0 * rng.standard_normal(space.npoints)})
    assert verify_key_maximal_estimate(basis, G, gh, 0.0, pairs) < 100.0
    assert np.isfinite(verify_key_maximal_estimate(basis, G, cdl_field(space),
                                                   0.0, pairs))


# ---------------------------------------------------------------------------
# W2 contraction


def test_contraction_at_scale():
    sphere = build_sphere_mesh(500)
    rot = builtin_field("rotation", {"space": sphere, "axis": (0.0, 0.0, 1.0),
                                     "speed": 1.0})
    rng = np.random.default_rng(4)
    mu0 = tr.node_measure(sphere, rng.choice(sphere.npoints, 25, replace=False))
    nu0 = tr.node_measure(sphere, rng.choice(sphere.npoints, 25, replace=False))
    rep = tr.verify_contraction(sphere, rot, mu0, nu0, T=1.0, L_sym=0.0, seed=9)
    # the rotation is isometric: the W2 series must hold still both ways
    assert np.abs(rep.w2 / rep.w2[0] - 1.0).max() <= rep.tol_disc
    assert rep.pair_worst <= 1.0 + 1e-3
    assert rep.pair_count >= 900

    space = build_torus_grid(2, 16)
    shear = builtin_field("shear", {"space": space, "s": 0.5})
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    nu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    # |phi'| peaks at 3s on the seam bridge, so the analytic rate is 3s/2
    rep = tr.verify_contraction(space, shear, mu0, nu0, T=1.0, L_sym=0.75, seed=9)
    assert np.all(rep.ratio <= 1.0)
    assert rep.pair_worst <= 1.0 + 1e-3
    assert rep.pair_count >= 900


# ---------------------------------------------------------------------------
# distortion envelope and Lusin approximation


def test_distortion_lusin_pipeline_at_scale():
    space, basis = torus_basis(3, 16)
    rho, center = 0.25, np.array([0.5, 0.5, 0.5])
    b = cdl_field(space)
    t_grid = np.linspace(0.0, 0.5, 6)
    flow = flows.integrate_flow(space, b, t_grid, step=0.005)

    shifted = fit_comparability_constants(green_function(basis), space, 3)
    comp = flows.verify_q_le_phi(flow, shifted, t_grid[1:],
                                 np.linspace(2.5, 4.0, 4) * space.spacing)
    assert comp.violations == 0

    q = flows.q_star(flow, space, t_grid=t_grid)
    lus = flows.lusin_set(q, space, 0.1)
    assert lus.excluded_mass < 0.1
    # exhaustive scan: every retained pair at every node obeys the bound
    lus = flows.verify_lipschitz_on_set(flow, lus, max_pairs=None)
    assert np.isfinite(lus.structural_C) and lus.structural_C > 0
    assert np.isfinite(lus.lip_constant)

    # whatever mass is dropped must sit near the singular core
    excluded = np.setdiff1d(np.arange(space.npoints), lus.E)
    if excluded.size:
        dc = chart_distance(space, space.points[excluded], center)
        wexc = space.weights[excluded]
        assert wexc[dc <= 2.0 * rho].sum() >= 0.8 * wexc.sum()


def test_distortion_budget_stable_across_fields():
    space, basis = torus_basis(3, 12)
    t_grid = np.linspace(0.0, 0.5, 6)
    rng = np.random.default_rng(5)
    fields = [
        builtin_field("constant", {"space": space, "v": (0.3, 0.1, 0.05)}),
        builtin_field("gradient_heat",
                      {"basis": basis, "tau": 0.1,
                       "f0": 3.0 * rng.standard_normal(space.npoints)}),
        cdl_field(space),
    ]
    ratios = []
    for b in fields:
        flow = flows.integrate_flow(space, b, t_grid, step=0.005)
        q = flows.q_star(flow, space, t_grid=t_grid)
        ratios.append(flows.verify_qstar_bound(q, regularity_moduli(b, t_grid),
                                               flows.compressibility(flow)))
    ratios = np.array(ratios)
    assert np.all(np.isfinite(ratios))
    assert ratios.max() / ratios.min() < 2.0


# ---------------------------------------------------------------------------
# circle lift of a two-dimensional base


def test_circle_lift_pipeline_at_scale():
    base = build_torus_grid(2, 16)
    b = builtin_field("shear", {"space": base, "s": 0.5})
    rep = flows.lift_and_verify_n2(base, b, np.linspace(0.0, 0.5, 6),
                                   circle_resolution=8, epsilon=0.1,
                                   max_pairs=100_000, seed=0)
    assert rep.tensor_residual < 1e-8
    assert rep.div_residual < 1e-10
    assert rep.sym_residual < 1e-8
    assert rep.base.excluded_mass < 0.1
    assert np.isfinite(rep.base.structural_C)
    assert np.isfinite(rep.base.lip_constant)


# ---------------------------------------------------------------------------
# flow integrator gates


def test_integrator_error_drops_fourth_order():
    space, basis = torus_basis(2, 16)
    rng = np.random.default_rng(7)
    b = builtin_field("gradient_heat", {"space": space, "basis": basis,
                                        "f0": 6.0 * rng.standard_normal(space.npoints),
                                        "tau": 0.02})
    starts = np.arange(0, space.npoints, 4)
    ends = {}
    for h in (0.01, 0.005, 0.00125):
        ends[h] = flows.integrate_flow(space, b, (0.0, 1.0), step=h,
                                       starts=starts, check=False).positions[-1]
    err_h = chart_distance(space, ends[0.01], ends[0.00125]).max()
    err_h2 = chart_distance(space, ends[0.005], ends[0.00125]).max()
    assert 1e-9 < err_h < 1e-6  # above the float floor, so the ratio is real
    assert err_h / err_h2 >= 8.0


def test_flow_gates_and_isometric_invariants():
    t_grid = np.linspace(0.0, 0.5, 6)
    space2, basis2 = torus_basis(2, 12)
    space3 = build_torus_grid(3, 8)
    sphere = build_sphere_mesh(500)
    rng = np.random.default_rng(3)
    fields = [
        builtin_field("constant", {"space": space2, "v": (0.4, -0.2)}),
        builtin_field("shear", {"space": space2, "s": 0.5}),
        builtin_field("gradient_heat", {"space": space2, "basis": basis2,
                                        "f0": rng.standard_normal(space2.npoints),
                                        "tau": 0.05}),
        cdl_field(space3),
        builtin_field("rotation", {"space": sphere, "axis": (0.0, 0.0, 1.0),
                                   "speed": 1.0}),
    ]
    by_name = {}
    for b in fields:
        fl = flows.integrate_flow(b.space, b, t_grid, step=0.004)
        assert fl.rlf_ratio < 1.0, b.name
        by_name[b.name] = fl

    # isometries neither compress nor move the distortion envelope; the
    # sphere runs with the formal exponent of the three-dimensional charts
    trans = builtin_field("constant", {"space": space3, "v": (0.3, 0.1, 0.05)})
    tflow = flows.integrate_flow(space3, trans, t_grid, step=0.005)
    for fl, n in ((tflow, None), (by_name["rotation"], 3)):
        assert flows.compressibility(fl) <= 1.1
        q0 = flows.q_star(fl, fl.space, t_grid=[0.0], n=n).values
        for t in t_grid[1:]:
            qt = flows.q_star(fl, fl.space, t_grid=[t], n=n).values
            assert np.abs(qt - q0).max() <= 1e-6


# ---------------------------------------------------------------------------
# deterministic reporting


def test_cli_reports_are_byte_identical(tmp_path):
    from mmslab import cli

    cfg = tmp_path / "run.toml"
    cfg.write_text('scenario = "contraction"\n\n[space]\nchart = "sphere"\n'
                   'points = 200\n\n[numerics]\ntime_nodes = 6\n')
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "a"),
                     "--seed", "0"]) == 0
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "b"),
                     "--seed", "0"]) == 0
    for rel in ("report.csv", os.path.join("series", "contraction.csv"),
                os.path.join("series", "coupling-initial.csv")):
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes()

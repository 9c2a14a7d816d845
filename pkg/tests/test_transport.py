"""Optimal transport solves, measure evolution and the derivative formulas."""

import functools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmslab.space import build_sphere_mesh, build_torus_grid, nearest_node
from mmslab.spectral import assemble_laplacian, eigendecompose
from mmslab.fields import builtin_field
from mmslab.flows import integrate_flow
from mmslab import transport as tr


@functools.lru_cache(maxsize=None)
def torus16():
    return build_torus_grid(2, 16)


@functools.lru_cache(maxsize=None)
def circle16():
    return build_torus_grid(1, 16)


# ---------------------------------------------------------------------------
# measures


def test_measure_validation():
    space = circle16()
    with pytest.raises(ValueError, match="every space point"):
        tr.DiscreteMeasure(space, np.ones(3) / 3)
    bad = np.full(space.npoints, 1.0 / space.npoints)
    bad[0] = -bad[0]
    with pytest.raises(ValueError, match="nonnegative"):
        tr.DiscreteMeasure(space, bad)
    with pytest.raises(ValueError, match="sum"):
        tr.DiscreteMeasure(space, np.full(space.npoints, 1.0))


def test_measure_builders():
    space = circle16()
    uni = tr.uniform_measure(space)
    assert uni.density_bound == pytest.approx(1.0)
    atoms = tr.node_measure(space, [2, 2, 5])  # duplicates accumulate
    assert atoms.weights[2] == pytest.approx(2.0 / 3.0)
    assert set(atoms.support.tolist()) == {2, 5}
    # the doubled atom holds 2/3 of the mass on a 1/16 cell
    assert atoms.density_bound == pytest.approx((2 / 3) / (1 / 16))


# ---------------------------------------------------------------------------
# the exact solver


def test_dirac_pair_cost():
    space = circle16()
    sol = tr.wasserstein2(space, tr.node_measure(space, [0]), tr.node_measure(space, [4]))
    assert sol.cost == pytest.approx(0.25**2, abs=1e-14)
    assert sol.w2 == pytest.approx(0.25, abs=1e-12)
    assert sol.coupling.shape == (1, 1) and sol.coupling[0, 0] == pytest.approx(1.0)
    assert sol.phi[0] == 0.0  # normalization anchor


def test_identical_measures_cost_zero():
    space = circle16()
    mu = tr.node_measure(space, [1, 7, 9])
    sol = tr.wasserstein2(space, mu, mu)
    assert abs(sol.cost) < 1e-14
    assert_allclose(sol.coupling, np.diag(mu.weights[mu.support]), atol=1e-12)


def test_two_atom_pairing_matches_brute_force():
    space = circle16()
    sol = tr.wasserstein2(space, tr.node_measure(space, [0, 8]),
                          tr.node_measure(space, [2, 10]))
    # one-parameter coupling family: gamma on the direct pairs, rest crossed
    d2 = np.array([[0.125**2, 0.375**2], [0.375**2, 0.125**2]])
    gs = np.linspace(0.0, 0.5, 2001)
    family = gs * (d2[0, 0] + d2[1, 1]) + (0.5 - gs) * (d2[0, 1] + d2[1, 0])
    assert sol.cost == pytest.approx(family.min(), abs=1e-14)
    assert sol.cost == pytest.approx(0.125**2, abs=1e-14)


def test_cost_is_symmetric():
    space = torus16()
    rng = np.random.default_rng(0)
    mu = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    nu = tr.node_measure(space, rng.choice(space.npoints, 9, replace=False))
    assert tr.wasserstein2(space, mu, nu).cost == pytest.approx(
        tr.wasserstein2(space, nu, mu).cost, abs=1e-12)


def test_potentials_feasible_everywhere_and_tight_on_coupling():
    space = torus16()
    rng = np.random.default_rng(1)
    mu = tr.node_measure(space, rng.choice(space.npoints, 15, replace=False))
    nu = tr.node_measure(space, rng.choice(space.npoints, 10, replace=False))
    sol = tr.wasserstein2(space, mu, nu)
    d2 = space.pairwise() ** 2
    slack = d2 - sol.phi_full[:, None] - sol.psi_full[None, :]
    assert slack.min() > -1e-9
    ii, jj, _ = sol.coupling_triplets()
    support_slack = (d2[np.ix_(sol.x_ids, sol.y_ids)]
                     - sol.phi[:, None] - sol.psi[None, :])[ii, jj]
    assert np.abs(support_slack).max() < 1e-8
    # the c-transform evaluator reproduces the duals on the support
    assert_allclose(sol.phi_at(space.points[sol.x_ids]), sol.phi, atol=1e-8)


def test_support_cap_enforced():
    space = build_torus_grid(2, 32)
    mu = tr.uniform_measure(space)  # 1024-point support
    with pytest.raises(ValueError, match="support too large"):
        tr.wasserstein2(space, mu, mu)


def test_sqrt_cost_triangle_inequality():
    space = torus16()
    rng = np.random.default_rng(5)
    measures = [tr.node_measure(space, rng.choice(space.npoints, 6, replace=False))
                for _ in range(20)]
    n = len(measures)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            w[i, j] = w[j, i] = tr.wasserstein2(space, measures[i], measures[j]).w2
    worst = -np.inf
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                worst = max(worst, w[i, k] - w[i, j] - w[j, k],
                            w[i, j] - w[i, k] - w[k, j],
                            w[j, k] - w[j, i] - w[i, k])
    assert worst <= 1e-8


def test_position_cloud_solver_matches_node_solver():
    space = torus16()
    rng = np.random.default_rng(2)
    mu = tr.node_measure(space, rng.choice(space.npoints, 8, replace=False))
    nu = tr.node_measure(space, rng.choice(space.npoints, 8, replace=False))
    node_sol = tr.wasserstein2(space, mu, nu)
    cloud_sol = tr.wasserstein2_positions(space, space.points[mu.support],
                                          mu.weights[mu.support],
                                          space.points[nu.support],
                                          nu.weights[nu.support])
    assert cloud_sol.cost == pytest.approx(node_sol.cost, abs=1e-12)


# ---------------------------------------------------------------------------
# measure evolution


def test_zero_field_keeps_the_measure():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.0, 0.0)})
    mu0 = tr.node_measure(space, [3, 77, 130])
    grid = np.linspace(0.0, 1.0, 5)
    for method in ("pushforward", "upwind"):
        traj = tr.continuity_equation_solve(space, b, mu0, grid, method=method)
        for m in traj.measures:
            assert_allclose(m.weights, mu0.weights, atol=1e-14)


def test_translation_rebinning_matches_reference():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.25, 0.0)})
    rng = np.random.default_rng(4)
    ids = rng.choice(space.npoints, 40, replace=False)
    mu0 = tr.node_measure(space, ids)
    grid = np.linspace(0.0, 1.0, 6)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    shifted = (space.points[ids] + np.array([0.25, 0.0])) % 1.0
    reference = tr.node_measure(space, nearest_node(space, shifted))
    gap = tr.wasserstein2(space, traj.measure_at(1.0), reference).w2
    assert gap <= space.spacing
    for m in traj.measures:
        assert abs(m.weights.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError, match="recorded"):
        traj.measure_at(0.37)


def test_pushforward_and_upwind_agree_for_smooth_fields():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.25, 0.0)})
    rng = np.random.default_rng(4)
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 30, replace=False))
    grid = np.linspace(0.0, 1.0, 6)
    push = tr.continuity_equation_solve(space, b, mu0, grid)
    up = tr.continuity_equation_solve(space, b, mu0, grid, method="upwind")
    for k in range(len(grid)):
        gap = tr.wasserstein2(space, push.measures[k], up.measures[k]).w2
        assert gap <= 3.0 * space.spacing


def test_upwind_guards():
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    mu0 = tr.node_measure(space, [0, 50])
    with pytest.raises(ValueError, match="CFL violation"):
        tr.continuity_equation_solve(space, b, mu0, (0.0, 1.0), method="upwind",
                                     step=1.0)
    sphere = build_sphere_mesh(60)
    rb = builtin_field("rotation", {"space": sphere, "axis": (0, 0, 1.0), "speed": 1.0})
    with pytest.raises(ValueError, match="torus grids"):
        tr.continuity_equation_solve(sphere, rb, tr.node_measure(sphere, [0]),
                                     (0.0, 1.0), method="upwind")


def test_pushforward_density_check_against_reference():
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    grid = np.linspace(0.0, 0.5, 6)
    flow = integrate_flow(space, b, grid, step=0.005)
    rng = np.random.default_rng(9)
    raw = rng.random(space.npoints) * space.weights
    mu0 = tr.DiscreteMeasure(space, raw / raw.sum())
    traj = tr.continuity_equation_solve(space, b, mu0, grid, flow=flow,
                                        density_check=True)
    assert traj.source == "pushforward"
    wrong_grid = np.linspace(0.0, 0.4, 6)
    with pytest.raises(ValueError, match="different time grid"):
        tr.continuity_equation_solve(space, b, mu0, wrong_grid, flow=flow)


def test_weak_continuity_residual_small():
    space = torus16()
    basis = eigendecompose(assemble_laplacian(space))
    b = builtin_field("shear", {"space": space, "s": 0.5})
    rng = np.random.default_rng(11)
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 30, replace=False))
    grid = np.linspace(0.0, 0.5, 101)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    resid = tr.continuity_residual(traj, b, basis)
    # budget 5 h Lip(f) sup|b| with probe Lipschitz constants of order one
    assert resid < 5.0 * space.spacing * b.bounded_norm
    assert resid < 1e-4


# ---------------------------------------------------------------------------
# derivative of t -> W2^2 / 2


def test_derivative_zero_field():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.0, 0.0)})
    mu0 = tr.node_measure(space, [10, 60, 200])
    nu = tr.node_measure(space, [30, 90])
    grid = np.linspace(0.0, 0.5, 101)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    report = tr.verify_w2_derivative(space, traj, b, nu)
    assert report.passed
    assert np.abs(report.lhs).max() < 1e-12
    assert np.abs(report.rhs).max() < 1e-12


def test_derivative_translation_closed_form():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.25, 0.0)})
    # quarter-spaced sublattice: first re-pairing only at t|v| = 0.125
    ids = [4 * i * 16 + 4 * j for i in range(4) for j in range(4)][:9]
    mu0 = tr.node_measure(space, ids)
    grid = np.linspace(0.0, 0.2, 101)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    report = tr.verify_w2_derivative(space, traj, b, mu0)
    assert report.passed
    expected = grid[1:-1] * 0.25**2
    assert np.abs(report.lhs - expected).max() < 0.1 * expected.max()
    assert np.abs(report.rhs - expected).max() < 0.1 * expected.max()


def test_derivative_needs_fine_recording():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.25, 0.0)})
    mu0 = tr.node_measure(space, [0, 40])
    grid = np.linspace(0.0, 1.0, 11)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    with pytest.raises(ValueError, match="too coarse"):
        tr.verify_w2_derivative(space, traj, b, mu0)


def test_derivative_vanishes_against_invariant_target():
    sphere = build_sphere_mesh(200)
    b = builtin_field("rotation", {"space": sphere, "axis": (0.0, 0.0, 1.0),
                                   "speed": 1.0})
    rng = np.random.default_rng(6)
    mu0 = tr.node_measure(sphere, rng.choice(sphere.npoints, 10, replace=False))
    grid = np.linspace(0.0, 0.3, 101)
    traj = tr.continuity_equation_solve(sphere, b, mu0, grid)
    report = tr.verify_w2_derivative(sphere, traj, b, tr.uniform_measure(sphere))
    assert report.passed
    # the flow is isometric and the target nearly invariant
    assert np.abs(report.lhs).max() < 0.05


def test_joint_derivative_identical_trajectories():
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    mu0 = tr.node_measure(space, [5, 100, 210])
    grid = np.linspace(0.0, 0.5, 101)
    traj = tr.continuity_equation_solve(space, b, mu0, grid)
    report = tr.verify_joint_derivative(space, traj, traj, b)
    assert report.one_sided and report.passed
    assert np.abs(report.lhs).max() < 1e-12
    assert np.abs(report.rhs).max() < 1e-12


def test_joint_derivative_common_translation():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.3, 0.1)})
    rng = np.random.default_rng(7)
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    nu0 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    grid = np.linspace(0.0, 0.5, 101)
    tm = tr.continuity_equation_solve(space, b, mu0, grid)
    tn = tr.continuity_equation_solve(space, b, nu0, grid)
    report = tr.verify_joint_derivative(space, tm, tn, b)
    assert report.passed
    # rigid common translation: the distance never moves
    assert np.abs(report.lhs).max() < 1e-10
    assert np.abs(report.rhs).max() < 1e-10


def test_joint_derivative_gradient_flow_blobs():
    space = torus16()
    basis = eigendecompose(assemble_laplacian(space))
    rng = np.random.default_rng(8)
    b = builtin_field("gradient_heat", {"space": space, "basis": basis,
                                        "f0": 2.0 * rng.standard_normal(space.npoints),
                                        "tau": 0.05})

    def blob(center):
        d = np.linalg.norm((space.points - center + 0.5) % 1.0 - 0.5, axis=1)
        w = np.exp(-(d / 0.12) ** 2)
        w[w < 1e-3] = 0.0
        return tr.DiscreteMeasure(space, w / w.sum())

    grid = np.linspace(0.0, 0.5, 101)
    tm = tr.continuity_equation_solve(space, b, blob(np.array([0.25, 0.25])), grid)
    tn = tr.continuity_equation_solve(space, b, blob(np.array([0.7, 0.6])), grid)
    report = tr.verify_joint_derivative(space, tm, tn, b)
    assert report.passed
    assert report.max_violation <= 0.0


# ---------------------------------------------------------------------------
# contraction


def test_contraction_shear_plateau_rate():
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    rng = np.random.default_rng(4)
    plateau = np.nonzero((space.points[:, 1] > 0.3) & (space.points[:, 1] < 0.7))[0]
    mu0 = tr.node_measure(space, rng.choice(plateau, 20, replace=False))
    nu0 = tr.node_measure(space, rng.choice(plateau, 20, replace=False))
    # phi' = s on the plateau, so the sharp rate is s/2
    report = tr.verify_contraction(space, b, mu0, nu0, T=1.0, L_sym=0.25, seed=9)
    assert np.all(report.ratio <= 1.0)
    assert report.pair_worst <= 1.0 + 1e-3


def test_contraction_shear_global_rate():
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    rng = np.random.default_rng(4)
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    nu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    # |phi'| peaks at 3s on the seam bridge: global rate 3s/2
    report = tr.verify_contraction(space, b, mu0, nu0, T=1.0, L_sym=0.75, seed=9)
    assert report.pair_worst <= 1.0 + 1e-3


def test_contraction_isometric_flows_conserve_w2():
    sphere = build_sphere_mesh(400)
    b = builtin_field("rotation", {"space": sphere, "axis": (0.0, 0.0, 1.0),
                                   "speed": 1.0})
    rng = np.random.default_rng(4)
    mu0 = tr.node_measure(sphere, rng.choice(sphere.npoints, 25, replace=False))
    nu0 = tr.node_measure(sphere, rng.choice(sphere.npoints, 25, replace=False))
    report = tr.verify_contraction(sphere, b, mu0, nu0, T=1.0, L_sym=0.0, seed=9)
    # constancy, not just the upper bound
    drift = np.abs(report.w2 - report.w2[0]).max()
    assert drift <= report.tol_disc * report.w2[0]
    assert report.pair_worst <= 1.0 + 1e-9


def test_contraction_translation_exact():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.3, 0.1)})
    rng = np.random.default_rng(4)
    mu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    nu0 = tr.node_measure(space, rng.choice(space.npoints, 25, replace=False))
    report = tr.verify_contraction(space, b, mu0, nu0, T=1.0, L_sym=0.0, seed=9)
    assert np.abs(report.w2 - report.w2[0]).max() < 1e-12
    assert report.pair_worst == pytest.approx(1.0, abs=1e-12)


def test_contraction_rejects_identical_measures():
    space = torus16()
    b = builtin_field("constant", {"space": space, "v": (0.3, 0.1)})
    mu0 = tr.node_measure(space, [0, 17])
    with pytest.raises(ValueError, match="identical"):
        tr.verify_contraction(space, b, mu0, mu0, T=1.0, L_sym=0.0)


# ---------------------------------------------------------------------------
# differentiation along displacement geodesics


def test_geodesic_dirac_closed_form():
    space = build_torus_grid(2, 24)
    b = builtin_field("shear", {"space": space, "s": 0.5})
    eta0 = tr.node_measure(space, [6 * 24 + 3])
    eta1 = tr.node_measure(space, [17 * 24 + 11])
    s_grid = np.linspace(0.0, 1.0, 21)
    report = tr.verify_geodesic_differentiation(space, b, eta0, eta1, s_grid)
    assert report.experimental
    assert report.passed
    assert report.max_relative < 0.05
    # reversing the geodesic re-parametrizes the quadratic form
    swapped = tr.verify_geodesic_differentiation(space, b, eta1, eta0, s_grid)
    assert_allclose(report.quadratic_form, swapped.quadratic_form[::-1], atol=1e-12)


def test_geodesic_constant_field_vanishes():
    space = build_torus_grid(2, 24)
    b = builtin_field("constant", {"space": space, "v": (0.2, 0.1)})
    rng = np.random.default_rng(8)
    eta0 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    eta1 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    report = tr.verify_geodesic_differentiation(space, b, eta0, eta1,
                                                np.linspace(0.0, 1.0, 11))
    assert report.passed
    assert np.abs(report.slope[1:-1]).max() == 0.0
    assert np.abs(report.quadratic_form).max() == 0.0


def test_geodesic_multi_atom_smooth_field():
    space = build_torus_grid(2, 24)
    basis = eigendecompose(assemble_laplacian(space))
    rng = np.random.default_rng(8)
    b = builtin_field("gradient_heat", {"space": space, "basis": basis,
                                        "f0": 3.0 * rng.standard_normal(space.npoints),
                                        "tau": 0.05})
    eta0 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    eta1 = tr.node_measure(space, rng.choice(space.npoints, 12, replace=False))
    report = tr.verify_geodesic_differentiation(space, b, eta0, eta1,
                                                np.linspace(0.0, 1.0, 21))
    assert report.passed


def test_geodesic_validation():
    sphere = build_sphere_mesh(60)
    rb = builtin_field("rotation", {"space": sphere, "axis": (0, 0, 1.0), "speed": 1.0})
    one = tr.node_measure(sphere, [0])
    with pytest.raises(ValueError, match="flat periodic"):
        tr.verify_geodesic_differentiation(sphere, rb, one, one, np.linspace(0, 1, 5))
    space = torus16()
    b = builtin_field("shear", {"space": space, "s": 0.5})
    big = tr.uniform_measure(space)
    with pytest.raises(ValueError, match="too large"):
        tr.verify_geodesic_differentiation(space, b, big, big, np.linspace(0, 1, 5))
    small = tr.node_measure(space, [0])
    with pytest.raises(ValueError, match="increasing"):
        tr.verify_geodesic_differentiation(space, b, small, small, [0.5, 0.2])

"""Optical coefficient formulas, D-N maps, the identity gap, star norms,
probe fields, and the stability sweep."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from singdot.coefficients import (
    ConstantMatrix,
    ConstantScalar,
    GaussianBumpScalar,
    StructuralConstants,
    matrix_from_config,
)
from singdot.dot import (
    AbsorptionQ,
    DiffusionMatrix,
    DNMap,
    OpticalParameters,
    admissible_k_threshold,
    alessandrini_gap,
    alessandrini_sides,
    assemble_dn_map,
    boundary_derivative_norm,
    boundary_spectrum,
    dn_map_from_operator,
    dot_coefficients,
    dump_dn_map,
    gradient_bound_profile,
    harmonic_extension,
    load_dn_map,
    optical_matrix_from_config,
    optical_params_from_config,
    singular_probe_fields,
    stability_sweep,
    star_norm,
    validate_optical,
    volume_pairing,
)
from singdot.errors import (
    InadmissiblePerturbation,
    MeshMismatch,
    PoleInsideDomain,
    SingularMatrix,
)
from singdot.fdsolver import GridDomain, assemble, solve_dirichlet
from singdot.kernels import FrozenOperator, SingularTerm


def box(npts, half_width=0.5):
    return GridDomain(center=np.zeros(3), half_width=half_width, npts=npts,
                      kind="box")


def bump_params(k=0.0, amp=0.03):
    mu_a = GaussianBumpScalar(base=0.05, amp=amp, center=(0.1, 0.0, 0.2),
                              width=0.4)
    return OpticalParameters(mu_a=mu_a, mu_s=1.0, B=None, k=k)


# ---------------------------------------------------------------------------
# coefficient formulas


def test_isotropic_coefficients_oracle():
    # mu_a = 0.01, mu_s = 1, B = 0, k = 0: M = 1.01 I, K = I / 3.03
    params = OpticalParameters(mu_a=0.01, mu_s=1.0)
    K, q = dot_coefficients(params, np.array([0.2, -0.1, 0.3]))
    assert_allclose(K, np.eye(3) / 3.03, rtol=1e-14)
    assert q == pytest.approx(0.01)


def test_coefficients_complex_k():
    params = OpticalParameters(mu_a=0.02, mu_s=0.8, k=0.3)
    K, q = dot_coefficients(params, np.zeros(3))
    assert q == pytest.approx(0.02 - 0.3j)
    # diagonal entry 1 / (3 (0.82 - 0.3i))
    assert_allclose(K[0, 0], 1.0 / (3.0 * (0.82 - 0.3j)), rtol=1e-14)
    assert K.imag[0, 0] > 0


def test_anisotropic_coefficients_admissible():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3))
    B = 0.15 * (A + A.T) / 2.0
    params = OpticalParameters(mu_a=0.05, mu_s=1.0, B=B, k=0.4)
    pts = rng.uniform(-0.5, 0.5, size=(12, 3))
    rep = validate_optical(params, StructuralConstants(), pts)
    assert rep.passed
    assert rep.imag_sign == 1
    assert not rep.real_mode


def test_singular_diffusion_raises():
    params = OpticalParameters(mu_a=1.0, mu_s=-1.0)
    with pytest.raises(SingularMatrix):
        dot_coefficients(params, np.zeros(3))


def test_absorption_q_field():
    params = bump_params(k=0.2)
    qf = AbsorptionQ(params)
    pts = np.array([[0.1, 0.0, 0.2], [0.4, 0.4, -0.4]])
    vals = qf(pts)
    assert_allclose(vals.imag, [-0.2, -0.2])
    assert_allclose(vals.real, params.mu_a(pts).real)


def test_k_threshold_oracle_and_monotone():
    # constant isotropic medium: a = mu_a + mu_s; the real-part ellipticity
    # edge sits at k = sqrt(lam a / 3 - a^2)
    params = OpticalParameters(mu_a=0.05, mu_s=1.0)
    pts = np.array([[0.0, 0.0, 0.0], [0.2, -0.3, 0.1]])
    a = 1.05
    thr100 = admissible_k_threshold(params, StructuralConstants(), pts, 100.0)
    assert thr100 == pytest.approx(math.sqrt(100.0 * a / 3.0 - a * a),
                                   rel=1e-6)
    thr300 = admissible_k_threshold(params, StructuralConstants(), pts, 300.0)
    assert thr300 > thr100
    # at lam = 300 the q magnitude bound |q| < 10 takes over
    assert thr300 == pytest.approx(math.sqrt(100.0 - 0.05**2), rel=1e-6)
    # tiny positive k fails the imaginary-part lower bound
    rep = validate_optical(
        OpticalParameters(mu_a=0.05, mu_s=1.0, k=1e-3),
        StructuralConstants(), pts, declared_lambda=100.0)
    assert not rep.passed


def test_optical_config_round_trip():
    params = bump_params(k=0.15)
    field = DiffusionMatrix(params)
    cfg = field.to_config()
    assert cfg["kind"] == "dot-formula"
    rebuilt = matrix_from_config(cfg)
    assert isinstance(rebuilt, DiffusionMatrix)
    pts = np.array([[0.3, -0.2, 0.1], [0.0, 0.0, 0.45]])
    assert_allclose(rebuilt(pts), field(pts), rtol=1e-14)
    params2 = optical_params_from_config({"mu_a": 0.04, "k": 0.1})
    assert params2.mu_a(np.zeros((1, 3)))[0] == pytest.approx(0.04)
    assert params2.k == pytest.approx(0.1)
    direct = optical_matrix_from_config(cfg)
    assert_allclose(direct(pts), field(pts), rtol=1e-14)


# ---------------------------------------------------------------------------
# D-N maps


def test_dn_pairing_matches_volume_form():
    grid = box(8)
    params = bump_params(k=0.05)
    opr = assemble(DiffusionMatrix(params), AbsorptionQ(params), grid)
    dn = dn_map_from_operator(opr)
    rng = np.random.default_rng(11)
    nB = dn.matrix.shape[0]
    for _ in range(3):
        f = rng.standard_normal(nB) + 1j * rng.standard_normal(nB)
        g = rng.standard_normal(nB) + 1j * rng.standard_normal(nB)
        u = solve_dirichlet(opr, f, method="complex")
        phi = harmonic_extension(grid, g)
        direct = volume_pairing(opr, u, phi)
        via_map = dn.pairing(f, g)
        scale = max(abs(direct), abs(via_map))
        assert abs(direct - via_map) <= 1e-10 * scale


def test_constant_data_zero_flux():
    # q = 0: constants are discrete solutions with zero response
    grid = box(8)
    K = ConstantMatrix(np.diag([1.0, 2.0, 0.5]).astype(complex))
    opr = assemble(K, 0.0, grid)
    dn = dn_map_from_operator(opr)
    ones = np.ones(dn.matrix.shape[0])
    scale = np.max(np.abs(dn.matrix)) * ones.size
    assert np.max(np.abs(dn.matrix @ ones)) <= 1e-10 * scale


def test_dn_map_complex_symmetric():
    grid = box(8)
    for k in (0.0, 0.05):
        dn = assemble_dn_map(bump_params(k=k), grid)
        scale = np.max(np.abs(dn.matrix))
        assert np.max(np.abs(dn.matrix - dn.matrix.T)) <= 1e-12 * scale


def test_identical_params_zero_difference():
    grid = box(8)
    dn1 = assemble_dn_map(bump_params(k=0.05), grid)
    dn2 = assemble_dn_map(bump_params(k=0.05), grid)
    diff = dn1 - dn2
    assert np.max(np.abs(diff.matrix)) == 0.0


def test_dn_dump_round_trip(tmp_path):
    grid = box(6)
    dn = assemble_dn_map(bump_params(k=0.1), grid)
    path = tmp_path / "dn.bin"
    dump_dn_map(path, dn)
    back = load_dn_map(path)
    assert np.array_equal(back.matrix, dn.matrix)


def test_dn_difference_shape_guard():
    dn1 = DNMap(np.zeros((4, 4), dtype=complex))
    dn2 = DNMap(np.zeros((5, 5), dtype=complex))
    with pytest.raises(MeshMismatch):
        dn1 - dn2


# ---------------------------------------------------------------------------
# Alessandrini identity


def test_alessandrini_gap_k0():
    grid = box(10)
    p1 = bump_params(k=0.0, amp=0.03)
    p2 = OpticalParameters(
        mu_a=GaussianBumpScalar(base=0.05, amp=-0.02, center=(-0.1, 0.2, 0.0),
                                width=0.3),
        mu_s=1.0, B=None, k=0.0)
    o1 = assemble(DiffusionMatrix(p1), AbsorptionQ(p1), grid)
    o2 = assemble(DiffusionMatrix(p2), AbsorptionQ(p2), grid)
    rng = np.random.default_rng(5)
    nB = o1.boundary_idx.size
    f = rng.standard_normal(nB)
    g = rng.standard_normal(nB)
    u1 = solve_dirichlet(o1, f, method="complex")
    u2 = solve_dirichlet(o2, g, method="complex")
    lhs, rhs = alessandrini_sides(p1, p2, u1, u2, grid)
    scale = max(abs(lhs), abs(rhs))
    assert scale > 0
    assert abs(lhs - rhs) <= 1e-9 * scale


def test_alessandrini_gap_conjugate_convention():
    # at k > 0 the second field solves the conjugate system
    grid = box(10)
    p1 = bump_params(k=0.07, amp=0.03)
    p2 = bump_params(k=0.07, amp=-0.02)
    o1 = assemble(DiffusionMatrix(p1), AbsorptionQ(p1), grid)
    p2c = p2.conjugate()
    o2c = assemble(DiffusionMatrix(p2c), AbsorptionQ(p2c), grid)
    rng = np.random.default_rng(8)
    nB = o1.boundary_idx.size
    f = rng.standard_normal(nB) + 1j * rng.standard_normal(nB)
    g = rng.standard_normal(nB) + 1j * rng.standard_normal(nB)
    u1 = solve_dirichlet(o1, f, method="complex")
    u2 = solve_dirichlet(o2c, g, method="complex")
    gap = alessandrini_gap(p1, p2, u1, u2, grid)
    lhs, rhs = alessandrini_sides(p1, p2, u1, u2, grid)
    scale = max(abs(lhs), abs(rhs))
    assert abs(gap) <= 1e-9 * scale


def test_alessandrini_mesh_guard():
    p1 = bump_params()
    u = harmonic_extension(box(8), np.ones(296))
    with pytest.raises(MeshMismatch):
        alessandrini_gap(p1, p1, u, u, box(10))


# ---------------------------------------------------------------------------
# star norm


def test_star_norm_identity_map():
    grid = box(6)
    w = boundary_spectrum(grid)
    n = w.n
    assert n == 6**3 - 4**3
    # P I P has singular values (1 + lam_j)^{-1/2}; the top one sits at
    # the zero eigenvalue of the connected boundary graph
    sn = star_norm(np.eye(n, dtype=complex), weights=w)
    assert sn.value == pytest.approx(1.0, abs=1e-9)
    assert sn.method == "dense-svd"


def test_star_norm_zero_and_homogeneity():
    grid = box(6)
    w = boundary_spectrum(grid)
    rng = np.random.default_rng(2)
    M = rng.standard_normal((w.n, w.n)) + 1j * rng.standard_normal((w.n, w.n))
    assert star_norm(np.zeros_like(M), weights=w).value == 0.0
    s1 = star_norm(M, weights=w).value
    s3 = star_norm(3.5 * M, weights=w).value
    assert s3 == pytest.approx(3.5 * s1, rel=1e-12)
    M2 = rng.standard_normal((w.n, w.n))
    s_sum = star_norm(M + M2, weights=w).value
    assert s_sum <= s1 + star_norm(M2, weights=w).value + 1e-12


def test_star_norm_power_matches_dense():
    grid = box(6)
    w = boundary_spectrum(grid)
    rng = np.random.default_rng(7)
    M = rng.standard_normal((w.n, w.n)) + 1j * rng.standard_normal((w.n, w.n))
    dense = star_norm(M, weights=w, dense_cap=1000)
    power = star_norm(M, weights=w, dense_cap=1)
    assert power.method == "power"
    assert power.value == pytest.approx(dense.value, rel=1e-6)


def test_star_norm_size_guard():
    grid = box(6)
    w = boundary_spectrum(grid)
    with pytest.raises(MeshMismatch):
        star_norm(np.zeros((3, 3), dtype=complex), weights=w)


# ---------------------------------------------------------------------------
# singular probe fields


def test_probe_pole_inside_raises():
    params = bump_params()
    with pytest.raises(PoleInsideDomain):
        singular_probe_fields(params, [0.1, 0.0, 0.3], 0, box(8))
    with pytest.raises(PoleInsideDomain):
        singular_probe_fields(params, [0.0, 0.0, 0.5], 0, box(8))


def test_probe_matches_frozen_kernel():
    # nearly zero absorption: the discrete field reproduces the constant
    # coefficient singular solution away from the pole, improving with h
    params = OpticalParameters(mu_a=1e-4, mu_s=0.33)
    z = np.array([0.0, 0.0, 0.62])
    errs = {}
    for npts in (13, 25):
        grid = box(npts)
        u1, _ = singular_probe_fields(params, z, 0, grid)
        K0, _ = dot_coefficients(params, np.array([0.0, 0.0, 0.5]))
        term = SingularTerm(0, FrozenOperator(z, K0))
        pts = grid.node_points(grid.interior)
        d = np.linalg.norm(pts - z, axis=1)
        sel = d >= 0.3
        num = u1.values[grid.interior][sel]
        ref = term(pts[sel])
        errs[npts] = float(np.max(np.abs(num - ref) / np.abs(ref)))
    assert errs[25] <= 0.05
    assert errs[25] <= 0.45 * errs[13]


def test_probe_conjugate_pair_coincides_at_k0():
    grid = box(9)
    params = bump_params(k=0.0)
    u1, u2 = singular_probe_fields(params, [0.0, 0.0, 0.7], 1, grid)
    a = u1.values[grid.active]
    b = u2.values[grid.active]
    assert np.array_equal(a, b)


def test_probe_pair_with_gap():
    grid = box(12)
    p1 = bump_params(k=0.05, amp=0.03)
    p2 = bump_params(k=0.05, amp=-0.02)
    z = np.array([0.0, 0.1, 0.68])
    u1, _ = singular_probe_fields(p1, z, 0, grid)
    _, u2 = singular_probe_fields(p2, z, 0, grid)
    lhs, rhs = alessandrini_sides(p1, p2, u1, u2, grid)
    scale = max(abs(lhs), abs(rhs))
    assert scale > 0
    assert abs(lhs - rhs) <= 1e-9 * scale


def test_gradient_profile_stays_comparable():
    grid = box(21)
    params = bump_params(k=0.05)
    z = np.array([0.0, 0.0, 0.65])
    for m in (0, 1):
        u1, _ = singular_probe_fields(params, z, m, grid)
        centers, mins = gradient_bound_profile(u1, z, m, rings=5, span=3.5)
        assert mins.size >= 4
        assert np.all(mins >= 0.5 * mins[0])


# ---------------------------------------------------------------------------
# stability sweep


def shape_bump():
    return GaussianBumpScalar(base=0.0, amp=1.0, center=(0.0, 0.0, 0.5),
                              width=0.35)


def test_boundary_derivative_norm_orders():
    g = shape_bump()
    pts = box(9).node_points(box(9).boundary)
    n0 = boundary_derivative_norm(g, pts, 0)
    assert n0 == pytest.approx(1.0, rel=1e-6)
    n1 = boundary_derivative_norm(g, pts, 1, step=1e-4)
    grad = g.gradient(pts)
    assert n1 == pytest.approx(float(np.max(np.abs(grad))), rel=1e-5)


def test_stability_sweep_table():
    grid = box(8)
    base = OpticalParameters(mu_a=0.05, mu_s=1.0)
    eps = [0.02 * 2.0**-j for j in range(1, 5)] + [0.0]
    ks = [0.0, 0.05]
    table = stability_sweep(base, shape_bump(), eps, 0, ks, grid)
    assert len(table.rows) == len(eps) * len(ks)
    stars = table.column("star_norm")
    bn = table.column("boundary_norm")
    deltas = table.column("fitted_delta")
    kcol = table.column("k")
    for k in ks:
        blk = kcol == k
        s = stars[blk][:-1]       # epsilon rows, descending, zero row last
        assert np.all(np.diff(s) < 0)
        assert stars[blk][-1] == 0.0
        assert bn[blk][-1] == 0.0
        d = deltas[blk]
        assert np.all(d == d[0])
        assert d[0] > 0
        # near-linear response: halving epsilon roughly halves the norm
        ratios = s[1:] / s[:-1]
        assert np.all((ratios > 0.35) & (ratios < 0.7))
    # wave-number continuity between the two blocks
    s0 = stars[kcol == 0.0][:-1]
    s5 = stars[kcol == 0.05][:-1]
    assert np.all(np.abs(s5 - s0) <= 0.5 * s0)


def test_stability_sweep_csv(tmp_path):
    grid = box(6)
    base = OpticalParameters(mu_a=0.05, mu_s=1.0)
    table = stability_sweep(base, shape_bump(), [0.01, 0.005], 0, [0.0], grid)
    path = table.to_csv(tmp_path / "sweep.csv")
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "epsilon,k,boundary_norm,star_norm,fitted_delta"
    assert len(lines) == 3
    vals = [float(v) for v in lines[1].split(",")]
    assert vals[0] == pytest.approx(0.01)


def test_stability_sweep_inadmissible():
    grid = box(6)
    base = OpticalParameters(mu_a=0.05, mu_s=1.0)
    bad = GaussianBumpScalar(base=0.0, amp=-1.0, center=(0.0, 0.0, 0.5),
                             width=0.35)
    with pytest.raises(InadmissiblePerturbation):
        stability_sweep(base, bad, [0.2], 0, [0.0], grid)

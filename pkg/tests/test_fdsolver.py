import numpy as np
import pytest
from numpy.testing import assert_allclose

from singdot.coefficients import ConstantMatrix, ScalarTimesMatrix, SineScalar
from singdot.errors import ExcisionTooSmall, MaskedNeighborError
from singdot.fdsolver import (
    GridDomain,
    assemble,
    dump_grid_field,
    load_grid_field,
    solve_dirichlet,
    solve_punctured,
)
from singdot.kernels import FrozenOperator, SingularTerm, grad_u_m


def aniso_K(seed=0):
    rng = np.random.default_rng(seed)
    A = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    KR = A @ np.diag([1.2, 1.5, 2.0]) @ A.T
    KI = A @ np.diag([0.3, 0.4, 0.5]) @ A.T
    return KR + 1j * KI


def manufactured():
    """u = exp(x1) sin(x2) + i x3^2 with a variable commuting K field."""
    K0 = aniso_K(0)
    prof = SineScalar(const=1.0, amp=0.3, wave=(0.9, 0.4, -0.7), phase=0.5)
    Kf = ScalarTimesMatrix(profile=prof, matrix=K0)
    qv = 0.7 - 0.4j

    def exact(p):
        return np.exp(p[:, 0]) * np.sin(p[:, 1]) + 1j * p[:, 2] ** 2

    def grad(p):
        g = np.zeros(p.shape[:-1] + (3,), complex)
        g[..., 0] = np.exp(p[..., 0]) * np.sin(p[..., 1])
        g[..., 1] = np.exp(p[..., 0]) * np.cos(p[..., 1])
        g[..., 2] = 2j * p[..., 2]
        return g

    def hess(p):
        H = np.zeros(p.shape[:-1] + (3, 3), complex)
        H[..., 0, 0] = np.exp(p[..., 0]) * np.sin(p[..., 1])
        H[..., 0, 1] = H[..., 1, 0] = np.exp(p[..., 0]) * np.cos(p[..., 1])
        H[..., 1, 1] = -np.exp(p[..., 0]) * np.sin(p[..., 1])
        H[..., 2, 2] = 2j
        return H

    def f(p):
        divK = prof.gradient(p) @ K0
        return (
            -(np.einsum("...ij,...ij->...", Kf(p), hess(p))
              + np.einsum("...i,...i->...", divK, grad(p)))
            + qv * exact(p)
        )

    return Kf, qv, exact, f


def test_identity_reduces_to_seven_point():
    g = GridDomain(center=np.zeros(3), half_width=1.0, npts=9, kind="box")
    op = assemble(ConstantMatrix(matrix=np.eye(3)), 0.0, g)
    N, h = g.npts, g.h
    flat = (4 * N + 4) * N + 4
    cols, wts = op.stencil_at(flat)
    assert len(cols) == 7
    w = wts * h**2
    assert_allclose(w[cols == flat], [6.0], rtol=1e-13)
    assert_allclose(np.sort(w[cols != flat].real), -np.ones(6), rtol=1e-13)
    assert_allclose(w[cols != flat].imag, np.zeros(6), atol=1e-15)


@pytest.mark.parametrize("kind", ["box", "ball"])
def test_affine_annihilation(kind):
    K0 = aniso_K(1)
    g = GridDomain(center=np.zeros(3), half_width=1.0, npts=13, kind=kind)
    op = assemble(ConstantMatrix(matrix=K0), 0.0, g)
    u = 1.7 + op.points @ np.array([0.3, -1.1, 0.8]) + 0j
    res = op.apply(u)
    assert np.abs(res).max() < 1e-11


def test_affine_solve_reproduces_affine():
    K0 = aniso_K(2)
    g = GridDomain(center=np.zeros(3), half_width=1.0, npts=11, kind="box")
    op = assemble(ConstantMatrix(matrix=K0), 0.0, g)
    coeffs = np.array([0.4, 0.9, -0.6])

    def affine(p):
        return 0.3 + p @ coeffs + 0j

    fld = solve_dirichlet(op, affine)
    got = fld.values[g.interior]
    assert_allclose(got, affine(op.points[op.interior_idx]), atol=1e-11)


def test_transpose_symmetry_real_and_complex():
    for K0, q in [(aniso_K(3).real, 0.5), (aniso_K(3), 0.7 - 0.4j)]:
        g = GridDomain(center=np.zeros(3), half_width=0.8, npts=11,
                       kind="ball")
        op = assemble(ConstantMatrix(matrix=K0), q, g)
        diff = (op.matrix - op.matrix.T).tocoo()
        assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0


def test_manufactured_truncation_halves_by_four():
    Kf, qv, exact, f = manufactured()
    errs = []
    for N in [9, 17, 33]:
        g = GridDomain(center=np.zeros(3), half_width=0.8, npts=N,
                       kind="box")
        op = assemble(Kf, qv, g)
        res = op.apply(exact(op.points)) - f(op.points[op.interior_idx])
        errs.append(np.sqrt(np.mean(np.abs(res) ** 2)))
    assert errs[0] / errs[1] > 3.2
    assert errs[1] / errs[2] > 3.4


def test_manufactured_solution_order():
    Kf, qv, exact, f = manufactured()
    errs = []
    for N in [9, 17, 33]:
        g = GridDomain(center=np.zeros(3), half_width=0.8, npts=N,
                       kind="box")
        op = assemble(Kf, qv, g)
        fld = solve_dirichlet(op, exact, method="complex", rhs=f)
        e = fld.values[g.interior] - exact(op.points[op.interior_idx])
        errs.append(np.sqrt(np.mean(np.abs(e) ** 2)))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 1.9)


def test_pole_trace_solution_order():
    # boundary data from a singular solution with pole outside the box,
    # frozen constant K: the exact field is available everywhere inside
    K0 = aniso_K(0)
    fro = FrozenOperator(y0=np.array([0.0, 0.0, 1.25]), K0=K0)
    term = SingularTerm(m=1, frozen=fro)
    errs = []
    for N in [9, 17, 33]:
        g = GridDomain(center=np.zeros(3), half_width=0.8, npts=N,
                       kind="box")
        op = assemble(ConstantMatrix(matrix=K0), 0.0, g)
        fld = solve_dirichlet(op, lambda p: term(p), method="complex")
        ue = term(op.points[op.interior_idx])
        e = fld.values[g.interior] - ue
        errs.append(np.sqrt(np.mean(np.abs(e) ** 2))
                    / np.sqrt(np.mean(np.abs(ue) ** 2)))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 1.9)


def test_block_and_complex_paths_agree():
    Kf, qv, exact, _ = manufactured()
    g = GridDomain(center=np.zeros(3), half_width=0.8, npts=17, kind="ball")
    op = assemble(Kf, qv, g)
    f1 = solve_dirichlet(op, exact, method="block")
    f2 = solve_dirichlet(op, exact, method="complex")
    scale = np.nanmax(np.abs(f1.values))
    d = np.nanmax(np.abs(f1.values - f2.values)) / scale
    assert d < 1e-10
    assert f1.meta["residual"] < 1e-10
    assert f2.meta["residual"] < 1e-10


def test_punctured_zero_field():
    K0 = aniso_K(4)
    zero = lambda p: np.zeros(len(p), complex)
    fld = solve_punctured(ConstantMatrix(matrix=K0), 0.3 - 0.1j, np.zeros(3),
                          zero, 0.2, zero, half_width=0.5, npts=17,
                          method="complex")
    assert np.nanmax(np.abs(fld.values)) == 0.0


def test_excision_too_small():
    zero = lambda p: np.zeros(len(p), complex)
    with pytest.raises(ExcisionTooSmall):
        solve_punctured(ConstantMatrix(matrix=np.eye(3)), 0.0, np.zeros(3),
                        zero, 0.05, zero, half_width=0.5, npts=17)


def test_excision_sensitivity_monitor():
    # -lap(u) = r^{-3/2} has exact radial solution -(4/3) sqrt(r) once the
    # inner sphere shrinks; monitored values near the outer shell are stable
    def rhs(p):
        return np.linalg.norm(p, axis=1) ** -1.5 + 0j

    def outer(p):
        return -(4.0 / 3.0) * np.linalg.norm(p, axis=1) ** 0.5 + 0j

    fld = solve_punctured(ConstantMatrix(matrix=np.eye(3)), 0.0, np.zeros(3),
                          rhs, 3.0 / 32.0, outer, half_width=0.5, npts=33,
                          method="complex", monitor_excision=True)
    assert fld.meta["excision_sensitivity"] < 0.01


def test_stencil_masked_neighbor():
    g = GridDomain(center=np.zeros(3), half_width=1.0, npts=9, kind="ball")
    op = assemble(ConstantMatrix(matrix=np.eye(3)), 0.0, g)
    bnode = op.active_flat[op.boundary_idx[0]]
    with pytest.raises(MaskedNeighborError):
        op.stencil_at(bnode)
    with pytest.raises(MaskedNeighborError):
        op.stencil_at(0)  # corner of the box, outside the ball


def test_custom_mask_isolated_cell_rejected():
    N = 9
    mask = np.zeros((N, N, N), dtype=bool)
    mask[2:7, 2:7, 2:7] = True
    mask[0, 0, 0] = True  # isolated
    with pytest.raises(MaskedNeighborError):
        GridDomain(center=np.zeros(3), half_width=1.0, npts=N, kind="custom",
                   custom_mask=mask)


def test_gradient_lower_bound_near_pole():
    # pole just outside the box; for k = 0 (real K) the scaled gradient
    # |grad u| d^{n+m-1} along the pole axis stays above a positive level
    K0 = aniso_K(5).real
    z_tau = np.array([0.0, 0.0, 0.55])
    fro = FrozenOperator(y0=z_tau, K0=K0)
    m = 1
    term = SingularTerm(m=m, frozen=fro)
    g = GridDomain(center=np.zeros(3), half_width=0.4, npts=25, kind="box")
    op = assemble(ConstantMatrix(matrix=K0), 0.0, g)
    fld = solve_dirichlet(op, lambda p: term(p), method="complex")

    h = g.h
    N = g.npts
    c = N // 2
    scaled_disc, scaled_exact = [], []
    for iz in range(c + 2, N - 2):
        pt = np.array([0.0, 0.0, -0.4 + iz * h])
        d = np.linalg.norm(pt - z_tau)
        gz = (fld.values[c, c, iz + 1] - fld.values[c, c, iz - 1]) / (2 * h)
        gx = (fld.values[c + 1, c, iz] - fld.values[c - 1, c, iz]) / (2 * h)
        gy = (fld.values[c, c + 1, iz] - fld.values[c, c - 1, iz]) / (2 * h)
        scaled_disc.append(np.sqrt(abs(gx) ** 2 + abs(gy) ** 2 + abs(gz) ** 2)
                           * d ** (3 + m - 1))
        ge = grad_u_m(pt[None], term)[0]
        scaled_exact.append(np.linalg.norm(ge) * d ** (3 + m - 1))
    scaled_disc = np.array(scaled_disc)
    scaled_exact = np.array(scaled_exact)
    assert np.all(scaled_disc > 0.5 * scaled_exact.min())
    assert_allclose(scaled_disc, scaled_exact, rtol=0.08)


def test_dump_load_roundtrip(tmp_path):
    Kf, qv, exact, _ = manufactured()
    g = GridDomain(center=np.zeros(3), half_width=0.8, npts=13, kind="ball")
    op = assemble(Kf, qv, g)
    fld = solve_dirichlet(op, exact, method="complex")
    path = str(tmp_path / "field.bin")
    dump_grid_field(path, fld)
    back = load_grid_field(path)
    assert back.domain.kind == "ball"
    assert back.domain.npts == 13
    assert_allclose(back.domain.h, g.h, rtol=1e-15)
    a = np.nan_to_num(back.values, nan=-7.5)
    b = np.nan_to_num(fld.values, nan=-7.5)
    assert np.array_equal(a, b)

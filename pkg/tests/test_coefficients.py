import numpy as np
import pytest
from numpy.testing import assert_allclose

from singdot.coefficients import (
    ConstantMatrix,
    ConstantScalar,
    GaussianBumpScalar,
    GridMatrixField,
    ScalarTimesMatrix,
    SineScalar,
    StructuralConstants,
    block_embed,
    block_embed_scalar,
    block_quadratic_identity_gap,
    ensure_admissible,
    matrix_from_config,
    principal_sqrt_matrix,
    scalar_from_config,
    simultaneous_diagonalization,
    sqrt_det,
    validate_coefficients,
)
from singdot.errors import (
    BoundViolation,
    CommutationViolation,
    EllipticityViolation,
    NonSymmetric,
)


def rand_commuting_K(rng, definite_sign=1):
    # shared orthogonal eigenbasis makes Re and Im parts commute
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    d_re = rng.uniform(0.5, 2.0, 3)
    d_im = definite_sign * rng.uniform(0.2, 0.8, 3)
    return (q * (d_re + 1j * d_im)) @ q.T


def test_structural_constants_defaults():
    c = StructuralConstants()
    assert c.n == 3 and c.p == 4.0
    assert_allclose(c.beta, 0.25, rtol=0)
    assert_allclose(c.alpha, 0.25 / np.sqrt(2.0), rtol=1e-15)
    with pytest.raises(ValueError):
        StructuralConstants(p=3.0)
    with pytest.raises(ValueError):
        StructuralConstants(alpha=0.3)  # >= beta


def test_block_embed_structure():
    K = np.eye(3) * (0.1 + 1.0j)
    kappa = block_embed(K)
    assert kappa.shape == (6, 6)
    assert_allclose(kappa[:3, :3], 0.1 * np.eye(3), rtol=0)
    assert_allclose(kappa[:3, 3:], -np.eye(3), rtol=0)
    assert_allclose(kappa[3:, :3], np.eye(3), rtol=0)
    assert_allclose(block_embed_scalar(2.0 - 0.5j),
                    [[2.0, 0.5], [-0.5, 2.0]], rtol=0)


def test_block_quadratic_identity():
    # kappa xi . xi sees only the real part: skew pairings cancel for symmetric K_I
    rng = np.random.default_rng(0)
    for _ in range(20):
        K = rand_commuting_K(rng)
        xi = rng.normal(size=6)
        assert block_quadratic_identity_gap(K, xi) < 1e-12 * (1 + xi @ xi)


def test_simultaneous_diagonalization_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(10):
        K = rand_commuting_K(rng)
        O, d = simultaneous_diagonalization(K)
        assert np.isrealobj(O)
        assert_allclose(O @ O.T, np.eye(3), atol=1e-12)
        assert_allclose((O * d) @ O.T, K, atol=1e-12)


def test_simultaneous_diagonalization_degenerate_real_part():
    # repeated Re-eigenvalue split by the imaginary part
    q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(3, 3)))
    K = (q * (np.array([2.0, 2.0, 3.0]) + 1j * np.array([0.5, 0.9, 0.7]))) @ q.T
    O, d = simultaneous_diagonalization(K)
    assert_allclose((O * d) @ O.T, K, atol=1e-11)
    assert_allclose(np.sort(d.imag), [0.5, 0.7, 0.9], atol=1e-11)


def test_principal_sqrt_and_det():
    rng = np.random.default_rng(3)
    for _ in range(10):
        K = rand_commuting_K(rng)
        J = principal_sqrt_matrix(K)
        assert_allclose(J @ J, K, atol=1e-11)
        assert_allclose(J, J.T, atol=1e-12)
        # branch: all eigenvalues of J in the right half-plane
        assert np.all(np.linalg.eigvals(J).real > 0)
        _, d = simultaneous_diagonalization(K)
        assert_allclose(sqrt_det(K), np.prod(np.sqrt(d)), rtol=1e-12)
    K = np.diag([1.0 + 1.0j, 1.0, 1.0])
    assert_allclose(sqrt_det(K), np.sqrt(1.0 + 1.0j), rtol=1e-13)


def test_validate_identity_real_mode():
    consts = StructuralConstants()
    rep = validate_coefficients(
        ConstantMatrix(np.eye(3)), ConstantScalar(0.0), consts,
        np.random.default_rng(4).uniform(-1, 1, (40, 3)),
    )
    assert rep.passed and rep.real_mode and rep.imag_sign == 0
    assert_allclose(rep.fitted_lambda, 1.0, rtol=1e-12)
    ensure_admissible(rep)


def test_validate_fitted_lambda_value():
    # K = (2 + 0.5i) I: |K| = sqrt(4.25), 1/min eig Re = 0.5, 1/|eig Im| = 2
    consts = StructuralConstants()
    rep = validate_coefficients(
        ConstantMatrix((2.0 + 0.5j) * np.eye(3)), ConstantScalar(1.0), consts,
        np.zeros((1, 3)),
    )
    assert rep.passed and not rep.real_mode and rep.imag_sign == 1
    assert_allclose(rep.fitted_lambda, np.sqrt(4.25), rtol=1e-12)


def test_validate_declared_lambda_too_small():
    consts = StructuralConstants()
    rep = validate_coefficients(
        ConstantMatrix((2.0 + 0.5j) * np.eye(3)), ConstantScalar(0.0), consts,
        np.zeros((1, 3)), declared_lambda=1.5,
    )
    assert not rep.passed
    with pytest.raises(BoundViolation):
        ensure_admissible(rep)


def test_validate_failures_raise_typed_errors():
    consts = StructuralConstants()
    pts = np.zeros((1, 3))

    asym = np.eye(3, dtype=complex)
    asym[0, 1] = 0.3
    with pytest.raises(NonSymmetric):
        ensure_admissible(validate_coefficients(
            ConstantMatrix(asym), ConstantScalar(0.0), consts, pts))

    # symmetric but non-commuting parts
    KI = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    K = np.diag([1.0, 2.0, 3.0]) + 1j * KI
    with pytest.raises(CommutationViolation):
        ensure_admissible(validate_coefficients(
            ConstantMatrix(K), ConstantScalar(0.0), consts, pts))

    # indefinite imaginary part
    K = np.eye(3) + 1j * np.diag([1.0, -1.0, 1.0])
    with pytest.raises(EllipticityViolation):
        ensure_admissible(validate_coefficients(
            ConstantMatrix(K), ConstantScalar(0.0), consts, pts))

    # negative real part
    K = np.diag([-1.0, 1.0, 1.0]).astype(complex)
    with pytest.raises(EllipticityViolation):
        ensure_admissible(validate_coefficients(
            ConstantMatrix(K), ConstantScalar(0.0), consts, pts))

    # |q| >= Lambda (strict inequality required)
    with pytest.raises(BoundViolation):
        ensure_admissible(validate_coefficients(
            ConstantMatrix(np.eye(3)), ConstantScalar(10.0), consts, pts))


def test_validate_negative_definite_imag():
    rep = validate_coefficients(
        ConstantMatrix(np.eye(3) * (1.0 - 0.3j)), ConstantScalar(0.0),
        StructuralConstants(), np.zeros((1, 3)),
    )
    assert rep.passed and rep.imag_sign == -1


def test_scalar_fields_and_gradients():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, (30, 3))
    h = 1e-6
    for f in (
        SineScalar(1.5 + 0.2j, 0.3 - 0.1j, (1.0, 2.0, 0.5), 0.3),
        GaussianBumpScalar(0.5, 0.25 + 0.1j, (0.2, -0.1, 0.0), 0.7),
    ):
        g = f.gradient(pts)
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            fd = (f(pts + dp) - f(pts - dp)) / (2 * h)
            assert_allclose(g[:, i], fd, rtol=1e-7, atol=1e-9)
    assert_allclose(ConstantScalar(2.0 + 1.0j).gradient(pts), 0.0, rtol=0)


def test_scalar_times_matrix_jacobian():
    prof = SineScalar(2.0, 0.4, (0.7, -0.3, 1.1))
    M0 = (1.0 + 0.5j) * np.array([[2.0, 0.3, 0.0],
                                  [0.3, 1.5, 0.0],
                                  [0.0, 0.0, 1.0]])
    field = ScalarTimesMatrix(prof, M0)
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, (10, 3))
    jac = field.jacobian(pts)
    h = 1e-6
    for i in range(3):
        dp = np.zeros(3)
        dp[i] = h
        fd = (field(pts + dp) - field(pts - dp)) / (2 * h)
        assert_allclose(jac[:, i], fd, rtol=1e-6, atol=1e-8)
    # real positive profile times admissible M0 stays admissible
    rep = validate_coefficients(field, ConstantScalar(0.1), StructuralConstants(), pts)
    assert rep.passed


def test_grid_matrix_field_interpolation():
    bounds = ((-1.0, 1.0),) * 3
    axes = [np.linspace(-1, 1, 17)] * 3
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X, Y, Z], axis=-1)
    exact = ScalarTimesMatrix(SineScalar(2.0, 0.3, (1.0, 0.5, -0.4)),
                              (1.0 + 0.2j) * np.eye(3))
    grid = GridMatrixField(exact(nodes), bounds)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.9, 0.9, (50, 3))
    # trilinear error is O(h^2) with h = 0.125
    assert np.max(np.abs(grid(pts) - exact(pts))) < 5e-3
    # exact at the nodes
    assert_allclose(grid(nodes[3, 5, 2][None]), exact(nodes[3, 5, 2][None]),
                    atol=1e-13)


def test_json_roundtrip():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-1, 1, (20, 3))
    fields = [
        ConstantMatrix(rand_commuting_K(rng)),
        ScalarTimesMatrix(SineScalar(2.0, 0.4, (0.7, -0.3, 1.1)),
                          (1.0 + 0.5j) * np.eye(3)),
    ]
    for f in fields:
        g = matrix_from_config(f.to_config())
        assert_allclose(g(pts), f(pts), rtol=1e-15, atol=1e-15)
    scalars = [
        ConstantScalar(0.3 - 0.2j),
        SineScalar(1.0, 0.5j, (1.0, 0.0, 0.0), 0.1),
        GaussianBumpScalar(0.2, 0.1, (0.0, 0.0, 0.5), 0.4),
    ]
    for s in scalars:
        g = scalar_from_config(s.to_config())
        assert_allclose(g(pts), s(pts), rtol=1e-15, atol=1e-15)
    # grid field round-trips through the row-major entry list
    bounds = ((-1.0, 1.0),) * 3
    ax = np.linspace(-1, 1, 5)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    nodes = np.stack([X, Y, Z], axis=-1)
    gf = GridMatrixField(fields[1](nodes), bounds)
    g2 = matrix_from_config(gf.to_config())
    assert_allclose(g2(pts), gf(pts), rtol=1e-14, atol=1e-14)

"""Diffuse optical tomography layer.

Optical parameters to diffusion coefficients (K, q), discrete
Dirichlet-to-Neumann maps through the symmetric volume-form assembly,
the Alessandrini identity gap, boundary star norms, singular probe
fields, and the boundary-stability sweep.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import (
    ConstantMatrix,
    ConstantScalar,
    MatrixField,
    ScalarField,
    StructuralConstants,
    matrix_from_config,
    scalar_from_config,
    validate_coefficients,
)
from .errors import (
    ConfigParseError,
    EigensolveFailure,
    InadmissiblePerturbation,
    MeshMismatch,
    PoleInsideDomain,
    SingularMatrix,
    SingularSystem,
)
from .fdsolver import GridDomain, GridField, assemble, solve_dirichlet
from .kernels import FrozenOperator, SingularTerm, u_m_eval


def _as_scalar_field(v) -> ScalarField:
    if isinstance(v, ScalarField):
        return v
    return ConstantScalar(complex(v))


def _as_matrix_field(v, n: int = 3) -> MatrixField:
    if v is None:
        return ConstantMatrix(np.zeros((n, n), dtype=complex))
    if isinstance(v, MatrixField):
        return v
    return ConstantMatrix(np.asarray(v, dtype=complex))


@dataclass(frozen=True)
class OpticalParameters:
    """Absorption, scattering, known anisotropy B, and the wave number k.

    mu_a and mu_s accept numbers or scalar fields; B accepts None (isotropic),
    a matrix, or a matrix field.  The diffusion scaling is dimension 3.
    """

    mu_a: object
    mu_s: object = 1.0
    B: object = None
    k: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu_a", _as_scalar_field(self.mu_a))
        object.__setattr__(self, "mu_s", _as_scalar_field(self.mu_s))
        object.__setattr__(self, "B", _as_matrix_field(self.B))
        object.__setattr__(self, "k", float(self.k))

    def coefficients(self, points):
        """K = n^-1 ((mu_a - ik) I + (I - B) mu_s)^-1 and q = mu_a - ik."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        ma = np.asarray(self.mu_a(pts), dtype=complex)
        ms = np.asarray(self.mu_s(pts), dtype=complex)
        Bv = np.asarray(self.B(pts), dtype=complex)
        eye = np.eye(3, dtype=complex)
        q = ma - 1j * self.k
        M = q[:, None, None] * eye + (eye - Bv) * ms[:, None, None]
        try:
            K = np.linalg.inv(M) / 3.0
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(f"diffusion matrix not invertible: {exc}")
        return K, q

    def conjugate(self) -> "OpticalParameters":
        """Same medium at reversed wave number; K and q conjugate exactly
        when the optical fields are real."""
        return replace(self, k=-self.k)


def dot_coefficients(params: OpticalParameters, x):
    """(K, q) at a single point or a batch of points."""
    x = np.asarray(x, dtype=float)
    K, q = params.coefficients(x)
    if x.ndim == 1:
        return K[0], q[0]
    return K, q


@dataclass(frozen=True)
class DiffusionMatrix(MatrixField):
    """Matrix field view of the diffusion coefficient of a parameter set."""

    params: OpticalParameters
    kind = "dot-formula"

    def __call__(self, points):
        return self.params.coefficients(points)[0]

    @property
    def is_constant(self):
        return (isinstance(self.params.mu_a, ConstantScalar)
                and isinstance(self.params.mu_s, ConstantScalar)
                and isinstance(self.params.B, ConstantMatrix))

    def to_config(self):
        p = self.params
        return {
            "kind": "dot-formula",
            "mu_a": p.mu_a.to_config(),
            "mu_s": p.mu_s.to_config(),
            "B": None if self.is_constant and np.all(p.B.matrix == 0)
            else p.B.to_config(),
            "k": p.k,
        }


@dataclass(frozen=True)
class AbsorptionQ(ScalarField):
    """Zero-order coefficient q = mu_a - ik of a parameter set."""

    params: OpticalParameters
    kind = "dot-q"

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        return (np.asarray(self.params.mu_a(pts), dtype=complex)
                - 1j * self.params.k)

    def gradient(self, points, h: float = 1e-6):
        return self.params.mu_a.gradient(points, h)

    def to_config(self):
        return {"kind": "dot-q", "mu_a": self.params.mu_a.to_config(),
                "k": self.params.k}


def optical_params_from_config(cfg: dict) -> OpticalParameters:
    if "mu_a" not in cfg:
        raise ConfigParseError("optical config needs mu_a")

    def scal(v, default=None):
        if v is None:
            return default
        return scalar_from_config(v) if isinstance(v, dict) else float(v)

    B = cfg.get("B")
    if isinstance(B, dict):
        B = matrix_from_config(B)
    elif B is not None:
        B = np.asarray(B, dtype=complex)
    return OpticalParameters(
        mu_a=scal(cfg["mu_a"]),
        mu_s=scal(cfg.get("mu_s"), 1.0),
        B=B,
        k=float(cfg.get("k", 0.0)),
    )


def optical_matrix_from_config(cfg: dict) -> DiffusionMatrix:
    return DiffusionMatrix(optical_params_from_config(cfg))


def validate_optical(params: OpticalParameters, consts: StructuralConstants,
                     points, declared_lambda=None):
    """Admissibility report of the derived (K, q) at the sample points."""
    return validate_coefficients(DiffusionMatrix(params), AbsorptionQ(params),
                                 consts, points, declared_lambda)


def admissible_k_threshold(params: OpticalParameters,
                           consts: StructuralConstants, points,
                           declared_lambda: float, k_hi: float = 1e3,
                           iters: int = 40) -> float:
    """Largest wave number keeping the derived coefficients admissible.

    Scans a geometric ladder for the topmost passing k, then bisects the
    first failing edge above it.  Returns 0.0 when no positive k passes.
    """

    def ok(k):
        return validate_optical(replace(params, k=k), consts, points,
                                declared_lambda).passed

    grid = np.geomspace(1e-3, k_hi, 25)
    passing = [k for k in grid if ok(k)]
    if not passing:
        return 0.0
    lo = max(passing)
    hi = grid[np.searchsorted(grid, lo) + 1] if lo < grid[-1] else k_hi * 2.0
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# discrete D-N maps


@dataclass
class DNMap:
    """Boundary response matrix in the sesquilinear volume-form pairing.

    Column j holds the boundary functional of the lifted solution for the
    j-th boundary indicator; <Lambda f, g> = conj(g) . (matrix @ f).
    """

    matrix: np.ndarray
    boundary_points: np.ndarray = None
    grid_h: float = 0.0
    meta: dict = field(default_factory=dict)

    def pairing(self, f, g) -> complex:
        return complex(np.vdot(np.asarray(g), self.matrix @ np.asarray(f)))

    def __sub__(self, other: "DNMap") -> "DNMap":
        if self.matrix.shape != other.matrix.shape:
            raise MeshMismatch("boundary dimensions differ")
        return DNMap(self.matrix - other.matrix, self.boundary_points,
                     self.grid_h, {"difference": True})


def dn_map_from_operator(opr, block: int = 256) -> DNMap:
    """Schur-complement D-N matrix of an assembled symmetric operator."""
    S = opr.matrix
    I = opr.interior_idx
    B = opr.boundary_idx
    S_II = S[I][:, I].tocsc()
    S_IB = S[I][:, B].tocsc()
    S_BI = S[B][:, I].tocsr()
    S_BB = S[B][:, B].tocsc()
    try:
        lu = spla.splu(S_II)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    nB = B.size
    M = np.empty((nB, nB), dtype=complex)
    for lo in range(0, nB, block):
        cols = slice(lo, min(lo + block, nB))
        rhs = -S_IB[:, cols].toarray()
        U = lu.solve(rhs)
        if not np.all(np.isfinite(U)):
            raise SingularSystem("factorization produced non-finite values")
        M[:, cols] = S_BI @ U + S_BB[:, cols].toarray()
    return DNMap(matrix=M, boundary_points=opr.points[B],
                 grid_h=opr.grid.h, meta={"npts": opr.grid.npts})


def assemble_dn_map(params: OpticalParameters, grid: GridDomain,
                    block: int = 256) -> DNMap:
    opr = assemble(DiffusionMatrix(params), AbsorptionQ(params), grid)
    return dn_map_from_operator(opr, block=block)


def volume_pairing(opr, u_field: GridField, phi_field: GridField) -> complex:
    """Discrete volume form int K grad u . grad conj(phi) + q u conj(phi).

    Evaluated through the assembled symmetric matrix, so it agrees with the
    D-N pairing exactly whenever u solves the interior equations.
    """
    act = opr.grid.active
    u = u_field.values[act]
    phi = phi_field.values[act]
    return complex(np.vdot(phi, opr.matrix @ u))


def harmonic_extension(grid: GridDomain, boundary_data,
                       method: str = "complex") -> GridField:
    """Discrete harmonic lift of boundary data (identity coefficients)."""
    opr = assemble(ConstantMatrix(np.eye(3, dtype=complex)), 0.0, grid)
    return solve_dirichlet(opr, boundary_data, method=method)


def dump_dn_map(path, dn: DNMap):
    n = dn.matrix.shape[0]
    with open(path, "wb") as fh:
        fh.write(np.asarray([n, n], dtype=np.int64).tobytes())
        fh.write(np.ascontiguousarray(dn.matrix, dtype=complex).tobytes())


def load_dn_map(path) -> DNMap:
    with open(path, "rb") as fh:
        dims = np.frombuffer(fh.read(16), dtype=np.int64)
        M = np.frombuffer(fh.read(), dtype=complex).reshape(dims[0], dims[1])
    return DNMap(matrix=M.copy(), meta={"loaded": str(path)})


# ---------------------------------------------------------------------------
# Alessandrini identity


def _check_field_on(grid: GridDomain, fld: GridField, name: str):
    d = fld.domain
    if (d.npts != grid.npts or d.half_width != grid.half_width
            or not np.allclose(d.center, grid.center) or d.kind != grid.kind):
        raise MeshMismatch(f"{name} lives on a different grid")


def alessandrini_sides(params1: OpticalParameters, params2: OpticalParameters,
                       u1: GridField, u2: GridField, grid: GridDomain,
                       method: str = "complex"):
    """Both sides of the D-N difference identity for the given solutions.

    u1 must solve the first system; conj(u2) must solve the interior
    equations of the second system (at k = 0 this is just the second
    system's solution).  Returns (lhs, rhs).
    """
    _check_field_on(grid, u1, "u1")
    _check_field_on(grid, u2, "u2")
    o1 = assemble(DiffusionMatrix(params1), AbsorptionQ(params1), grid)
    o2 = assemble(DiffusionMatrix(params2), AbsorptionQ(params2), grid)
    act = grid.active
    B = o1.boundary_idx
    u1a = u1.values[act]
    u2a = u2.values[act]
    f = u1a[B]
    g = u2a[B]
    u2p = solve_dirichlet(o2, f, method=method).values[act]
    lhs = (np.vdot(g, (o1.matrix @ u1a)[B])
           - np.vdot(g, (o2.matrix @ u2p)[B]))
    rhs = np.vdot(u2a, o1.matrix @ u1a) - np.vdot(u2a, o2.matrix @ u1a)
    return complex(lhs), complex(rhs)


def alessandrini_gap(params1: OpticalParameters, params2: OpticalParameters,
                     u1: GridField, u2: GridField, grid: GridDomain,
                     method: str = "complex") -> complex:
    """LHS minus RHS of the identity; algebraically zero up to solver
    round-off for consistent discrete solutions."""
    lhs, rhs = alessandrini_sides(params1, params2, u1, u2, grid, method)
    return lhs - rhs


# ---------------------------------------------------------------------------
# boundary star norm


@dataclass
class BoundaryWeights:
    """Eigen data of the boundary-graph Laplacian and the H^{1/2} scaler."""

    lam: np.ndarray
    P: np.ndarray          # (I + L)^(-1/4), dense symmetric

    @property
    def n(self) -> int:
        return self.lam.size


def boundary_spectrum(grid: GridDomain) -> BoundaryWeights:
    """Combinatorial Laplacian spectrum of the boundary-node graph."""
    bmask = grid.boundary
    nb = int(np.count_nonzero(bmask))
    N = grid.npts
    pos = -np.ones(N**3, dtype=np.int64)
    flat = np.flatnonzero(bmask.ravel())
    pos[flat] = np.arange(nb)
    idx3 = np.arange(N**3).reshape(N, N, N)
    rows, cols = [], []
    for d in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[d] = slice(None, -1)
        sl_hi[d] = slice(1, None)
        both = bmask[tuple(sl_lo)] & bmask[tuple(sl_hi)]
        a = pos[idx3[tuple(sl_lo)][both]]
        b = pos[idx3[tuple(sl_hi)][both]]
        rows.extend([a, b])
        cols.extend([b, a])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    A = sp.coo_matrix((np.ones(r.size), (r, c)), shape=(nb, nb)).tocsr()
    L = (sp.diags(np.asarray(A.sum(axis=1)).reshape(-1)) - A).toarray()
    try:
        lam, V = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise EigensolveFailure(str(exc)) from exc
    lam = np.maximum(lam, 0.0)
    P = (V * (1.0 + lam) ** -0.25) @ V.T
    return BoundaryWeights(lam=lam, P=P)


@dataclass
class StarNorm:
    value: float
    n_boundary: int
    method: str
    realization: str = "H^{1/2} -> H^{-1/2} via graph-Laplacian eigenweights"


def star_norm(dn_diff, grid: GridDomain = None,
              weights: BoundaryWeights = None,
              dense_cap: int = 640) -> StarNorm:
    """Largest generalized singular value of a boundary map.

    The discrete H^{+-1/2} norms are realized by the eigenweights
    (1 + lam_j)^{+-1/2} of the boundary-graph Laplacian; the value is the
    top singular value of P M P with P = (I + L)^(-1/4).
    """
    M = dn_diff.matrix if isinstance(dn_diff, DNMap) else np.asarray(dn_diff)
    if weights is None:
        if grid is None:
            raise ValueError("star_norm needs grid or precomputed weights")
        weights = boundary_spectrum(grid)
    if M.shape != (weights.n, weights.n):
        raise MeshMismatch("map size does not match the boundary graph")
    P = weights.P
    if weights.n <= dense_cap:
        T = P @ M @ P
        val = float(np.linalg.svd(T, compute_uv=False)[0])
        return StarNorm(val, weights.n, "dense-svd")
    # deterministic power iteration on (PMP)^H (PMP)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(weights.n) + 0j
    x /= np.linalg.norm(x)
    Mh = M.conj().T
    sig2 = 0.0
    for _ in range(1000):
        y = P @ (M @ (P @ x))
        z = P @ (Mh @ (P @ y))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return StarNorm(0.0, weights.n, "power")
        new = float(np.vdot(x, z).real)
        x = z / nz
        if abs(new - sig2) <= 1e-13 * max(new, 1e-300):
            sig2 = new
            break
        sig2 = new
    return StarNorm(math.sqrt(max(sig2, 0.0)), weights.n, "power")


# ---------------------------------------------------------------------------
# singular probe fields and the gradient lower bound


def singular_probe_fields(params: OpticalParameters, z_tau, m: int,
                          grid: GridDomain, method: str = "complex"):
    """Discrete fields with the order-m singular trace, pole outside the box.

    Returns (u1, u2): u1 solves the params system, u2 the conjugate system,
    both with boundary data from the leading singular term frozen at the
    boundary point nearest the pole.  The pair feeds the sesquilinear
    Alessandrini pairing.
    """
    z = np.asarray(z_tau, dtype=float)
    c, R = grid.center, grid.half_width
    if np.max(np.abs(z - c)) <= R:
        raise PoleInsideDomain(f"pole {z.tolist()} meets the closed domain")
    x0 = np.clip(z, c - R, c + R)
    K0, _ = dot_coefficients(params, x0)
    term = SingularTerm(m, FrozenOperator(z, K0))
    bpts = grid.node_points(grid.boundary)
    bdata = u_m_eval(bpts, term)
    o1 = assemble(DiffusionMatrix(params), AbsorptionQ(params), grid)
    u1 = solve_dirichlet(o1, bdata, method=method)
    pc = params.conjugate()
    o2 = assemble(DiffusionMatrix(pc), AbsorptionQ(pc), grid)
    u2 = solve_dirichlet(o2, bdata, method=method)
    return u1, u2


def gradient_bound_profile(u: GridField, z_tau, m: int, rings: int = 6,
                           span: float = 4.0):
    """Per-ring minima of |grad u| |x - z|^(n+m-1) near the pole.

    Rings are geometric distance bands starting at the closest interior
    node; empty bands are dropped.  Returns (ring_centers, minima).
    """
    dom = u.domain
    h = dom.h
    inter = dom.interior
    pts = dom.node_points(inter)
    d = np.linalg.norm(pts - np.asarray(z_tau, dtype=float), axis=1)
    vol = u.values
    ii, jj, kk = np.nonzero(inter)
    g2 = np.zeros(pts.shape[0])
    for ax, (di, dj, dk) in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
        up = vol[ii + di, jj + dj, kk + dk]
        dn = vol[ii - di, jj - dj, kk - dk]
        g2 = g2 + np.abs((up - dn) / (2.0 * h)) ** 2
    norm = np.sqrt(g2) * d ** (m + 2)
    d0 = float(d.min())
    edges = np.geomspace(d0 * (1.0 - 1e-12), d0 * span, rings + 1)
    centers, mins = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (d >= a) & (d < b)
        if np.any(sel):
            centers.append(math.sqrt(a * b))
            mins.append(float(np.min(norm[sel])))
    return np.asarray(centers), np.asarray(mins)


# ---------------------------------------------------------------------------
# stability sweep


@dataclass(frozen=True)
class ShiftedScalar(ScalarField):
    """base + scale * bump; the sweep's perturbed absorption field."""

    base: ScalarField
    bump: ScalarField
    scale: float
    kind = "shifted"

    def __call__(self, points):
        return self.base(points) + self.scale * self.bump(points)

    def gradient(self, points, h: float = 1e-6):
        return (self.base.gradient(points, h)
                + self.scale * self.bump.gradient(points, h))

    def to_config(self):
        return {"kind": "shifted", "base": self.base.to_config(),
                "bump": self.bump.to_config(), "scale": self.scale}


def _nested_diff(f, pts, axes, step):
    if not axes:
        return np.asarray(f(pts), dtype=complex)
    e = np.zeros(3)
    e[axes[0]] = step
    return (_nested_diff(f, pts + e, axes[1:], step)
            - _nested_diff(f, pts - e, axes[1:], step)) / (2.0 * step)


def boundary_derivative_norm(fieldobj: ScalarField, pts, order: int,
                             step: float = 1e-3) -> float:
    """Sup over the points of the largest order-th mixed derivative entry."""
    if order == 0:
        return float(np.max(np.abs(fieldobj(pts))))
    if order > 3:
        raise ValueError("derivative order capped at 3")
    best = 0.0
    from itertools import product

    for axes in product(range(3), repeat=order):
        vals = _nested_diff(fieldobj, np.asarray(pts, dtype=float),
                            tuple(axes), step)
        best = max(best, float(np.max(np.abs(vals))))
    return best


def _check_admissible_mu(mu: ScalarField, pts, lam: float):
    vals = np.asarray(mu(pts), dtype=complex)
    if np.max(np.abs(vals.imag)) > 1e-12 * max(1.0, np.max(np.abs(vals))):
        raise InadmissiblePerturbation("perturbed absorption is not real")
    lo, hi = float(np.min(vals.real)), float(np.max(vals.real))
    if lo < 1.0 / lam or hi > lam:
        raise InadmissiblePerturbation(
            f"absorption range [{lo:g}, {hi:g}] leaves [1/{lam:g}, {lam:g}]")


@dataclass
class StabilityTable:
    """Sweep rows (epsilon, k, boundary_norm, star_norm, fitted_delta)."""

    rows: list
    columns = ("epsilon", "k", "boundary_norm", "star_norm", "fitted_delta")

    def column(self, name):
        i = self.columns.index(name)
        return np.asarray([r[i] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.columns) + "\n")
            for r in self.rows:
                fh.write(",".join(f"{v:.17g}" for v in r) + "\n")
        return path


def stability_sweep(base: OpticalParameters, shape: ScalarField, epsilons,
                    h_order: int, k_values, grid: GridDomain,
                    consts: StructuralConstants = None,
                    fd_step: float = 1e-3) -> StabilityTable:
    """D-N difference star norm against the boundary derivative norm.

    For each wave number the unperturbed map is assembled once; each epsilon
    perturbs the absorption by epsilon * shape, and the fitted exponent of
    boundary_norm against star_norm over the epsilon block is reported on
    every row of that block (reported, never asserted against the theorem).
    """
    consts = consts or StructuralConstants()
    weights = boundary_spectrum(grid)
    bpts = grid.node_points(grid.boundary)
    sample = np.concatenate([bpts, grid.node_points(grid.interior)[::7]])
    shape_norm = boundary_derivative_norm(shape, bpts, h_order, fd_step)
    rows = []
    for k in k_values:
        p1 = replace(base, k=float(k))
        dn1 = assemble_dn_map(p1, grid)
        block = []
        for eps in epsilons:
            eps = float(eps)
            if eps == 0.0:
                block.append([0.0, float(k), 0.0, 0.0])
                continue
            mu2 = ShiftedScalar(base.mu_a, shape, eps)
            _check_admissible_mu(mu2, sample, consts.lam)
            p2 = replace(p1, mu_a=mu2)
            dn2 = assemble_dn_map(p2, grid)
            star = star_norm(dn1 - dn2, weights=weights).value
            block.append([eps, float(k), eps * shape_norm, star])
        good = [(r[2], r[3]) for r in block if r[2] > 0 and r[3] > 0]
        if len(good) >= 2:
            b = np.log([g[0] for g in good])
            s = np.log([g[1] for g in good])
            delta = float(np.polyfit(s, b, 1)[0])
        else:
            delta = 0.0
        rows.extend([r + [delta] for r in block])
    return StabilityTable(rows=[tuple(r) for r in rows])

"""Modified Newton potentials and correction ladders.

A source decaying like |y|^{-s} near the origin with s > n makes the plain
Newton integral diverge.  Subtracting the first floor(s)-n+1 expansion terms
P_j of the fundamental kernel restores absolute convergence while keeping
L_0 u = f away from the origin, since each P_j is L_0-harmonic there.  The
same subtracted kernel, tabulated once on an octave product grid, powers the
correction ladder: a chain of potentials whose decay improves rung by rung,
closed out by a single discrete solve on a punctured ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import ConstantMatrix, MatrixField
from .errors import (
    LadderStageFailure,
    NonIntegralViolation,
    QuadratureNotConverged,
    RegionViolation,
)
from .fdsolver import GridDomain, GridField, solve_punctured
from .gegenbauer import GegenbauerEvaluator
from .kernels import (
    FrozenOperator,
    SingularTerm,
    ellipticity_ratio_constant,
    gamma_eval,
    gamma_normalization,
    p_j_eval_fixed_x,
)
from .quadrature import ProductGrid, SphereGrid, gl_panel, smoothstep


# ---------------------------------------------------------------------------
# decaying sources


@dataclass
class DecaySourceField:
    """Source on the ball of radius R with |f| ~ A |y|^{-s} toward 0.

    func maps point arrays (N, n) to complex values; calls through the field
    return 0 outside [support_lo, R].  A is the measured annulus constant
    sup_r ||f||_{L^p(C_{0,r})} / r^{n/p - s} over dyadic radii; it is taken
    at construction when not supplied.
    """

    func: object
    s: float
    R: float
    p: float = 4.0
    support_lo: float = 0.0
    A: float = None
    rings: int = 8

    def __post_init__(self):
        if self.A is None:
            self.A = self.measure_constant()
        if not np.isfinite(self.A):
            raise RegionViolation("annulus constant of the source is not finite")

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        vals = np.asarray(self.func(points), dtype=complex)
        r = np.linalg.norm(points, axis=-1)
        inside = (r <= self.R) & (r >= self.support_lo)
        return np.where(inside, vals, 0.0)

    def measure_constant(self, npd: int = 10) -> float:
        n = 3
        best = 0.0
        lo = max(self.support_lo, self.R * 2.0 ** (-self.rings - 1))
        r = self.R / 2.0
        while r >= lo:
            nrm = _annulus_lp_once(self, np.zeros(n), r, self.p, npd)
            best = max(best, nrm / r ** (n / self.p - self.s))
            r /= 2.0
        return best


def _annulus_lp_once(f, y, r, p, npd):
    rad, wr = gl_panel(npd, r, 2.0 * r)
    sph = SphereGrid(npd, npd + npd % 2)
    pts = y + rad[:, None, None] * sph.dirs[None]
    w = rad[:, None] ** 2 * wr[:, None] * sph.weights[None]
    vals = np.abs(np.asarray(f(pts.reshape(-1, 3)), dtype=complex))
    return float(np.sum(vals**p * w.reshape(-1)) ** (1.0 / p))


def annulus_lp_norm(f, y, r, p, points_per_dim: int = 12) -> float:
    """L^p norm of f over the annulus r < |x - y| < 2r.

    Spherical tensor-product quadrature; the value at doubled resolution must
    agree within 0.5 percent or QuadratureNotConverged is raised.
    """
    y = np.asarray(y, dtype=float)
    coarse = _annulus_lp_once(f, y, r, p, points_per_dim)
    fine = _annulus_lp_once(f, y, r, p, 2 * points_per_dim)
    if fine == 0.0 and coarse == 0.0:
        return 0.0
    if abs(fine - coarse) > 5e-3 * abs(fine):
        raise QuadratureNotConverged(
            f"annulus norm moved {abs(fine - coarse) / abs(fine):.2e} under refinement"
        )
    return fine


# ---------------------------------------------------------------------------
# rotation helpers


def _rotation_to(u):
    """Orthogonal matrix mapping e3 to the unit vector u."""
    u = np.asarray(u, dtype=float)
    if u[2] < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    W = np.array([[0.0, 0.0, u[0]], [0.0, 0.0, u[1]], [-u[0], -u[1], 0.0]])
    return np.eye(3) + W + (W @ W) / (1.0 + u[2])


def _rotations_to(units):
    """Batch of _rotation_to over rows."""
    units = np.asarray(units, dtype=float)
    out = np.empty(units.shape[:1] + (3, 3))
    for i, u in enumerate(units):
        out[i] = _rotation_to(u)
    return out


# ---------------------------------------------------------------------------
# public per-point potential


@dataclass(frozen=True)
class QuadratureConfig:
    """Resolution of the per-point potential quadrature.

    Radial panels are dyadic with edges phased so the evaluation radius sits
    mid-panel, and the sphere grid is rotated to put the evaluation direction
    at the pole: the quadrature error then varies smoothly with x, which is
    what finite-difference residual checks of the potential rely on.
    """

    radial_order: int = 12
    n_mu: int = 16
    n_phi: int = 12
    octaves_below: int = 40
    patch_delta: float = 0.6
    patch_radial: int = 10
    patch_mu: int = 10
    patch_phi: int = 8
    series_tol: float = 1e-12
    refine: bool = False
    refine_tol: float = 5e-3


def _aligned_panels(rx, lo, hi):
    """Dyadic (a, b) panels covering [lo, hi], edges phased at rx 2^{k+1/2}."""
    out = []
    k = math.floor(math.log2(hi / rx) - 0.5 - 1e-12)
    e = rx * 2.0 ** (k + 0.5)
    while e >= hi * (1.0 - 1e-12):
        k -= 1
        e = rx * 2.0 ** (k + 0.5)
    b = hi
    while b > lo * (1.0 + 1e-12):
        a = max(lo, e)
        out.append((a, b))
        b = a
        k -= 1
        e = rx * 2.0 ** (k + 0.5)
    return out


def _region_split_radius(frozen: FrozenOperator) -> float:
    dirs = SphereGrid(8, 12).dirs
    r0, cscr = ellipticity_ratio_constant(ConstantMatrix(matrix=frozen.K0), dirs)
    return cscr / (2.0 * r0)


def _series_tail(x, ys, Kinv, nu, j_stop):
    """sum_{j > nu}^{j_stop} P_j(x, y) inside the convergence region."""
    n = Kinv.shape[0]
    g = x[None] @ Kinv
    Q = np.einsum("ij,ij->i", g, x[None].astype(complex))
    S = np.sqrt(Q)[0]
    Y = ys.astype(complex)
    My = np.matmul(Kinv[None], Y[:, :, None])[:, :, 0]
    b2 = np.matmul(Y[:, None, :], My[:, :, None])[:, 0, 0]
    b = np.sqrt(b2)
    T = np.matmul(
        np.broadcast_to(x, ys.shape)[:, None, :].astype(complex),
        My[:, :, None])[:, 0, 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        z = T / (b * S)
        z = np.where(b2 == 0, 0.0, z)
        t = b / S
    ev = GegenbauerEvaluator((n - 2) / 2.0, max(j_stop, 1))
    C = ev.eval_many(j_stop, z)
    acc = np.zeros(ys.shape[0], dtype=complex)
    pw = t ** (nu + 1)
    for j in range(nu + 1, j_stop + 1):
        acc = acc + pw * C[j]
        pw = pw * t
    return S ** (2 - n) * acc


class _SourceModel:
    """Separable spectral model of a source tabulated on a product grid.

    Truncated Fourier modes in phi, a Legendre fit in mu per mode and a
    Chebyshev fit in log r after factoring out the reference power law
    r^{-s_ref}.  Off-node evaluation is then smooth in the evaluation point,
    so downstream quadrature error stays differentiable, and it reduces to
    one small matmul per chunk instead of a wide interpolation gather.
    Below the deepest shell the whitened profile is frozen, continuing the
    source as r^{-s_ref} times the seam profile.
    """

    def __init__(self, grid, vals, s_ref, taper=None):
        nr, nm, nph = grid.shape
        self.s_ref = float(s_ref)
        self.taper = taper
        v = np.asarray(vals, dtype=complex).reshape(grid.shape)
        kmax = min(nph // 2 - 1, 10)
        Fk = np.fft.fft(v, axis=2) / nph
        kidx = np.concatenate([np.arange(kmax + 1), np.arange(nph - kmax, nph)])
        kvals = np.where(kidx <= nph // 2, kidx, kidx - nph)
        Fk = Fk[:, :, kidx]

        shell = grid.points.reshape(grid.shape + (3,))[0]
        mu = shell[:, 0, 2] / np.linalg.norm(shell[:, 0], axis=-1)
        self.L = min(nm - 3, 10)
        B = np.polynomial.legendre.legvander(mu, self.L)
        C, *_ = np.linalg.lstsq(B, Fk.transpose(1, 0, 2).reshape(nm, -1),
                                rcond=None)
        C = C.reshape(self.L + 1, nr, kidx.size).transpose(1, 0, 2)

        rr = grid.radial.radii
        self._ln_lo = math.log(rr[-1])
        self._ln_hi = math.log(rr[0])
        t = 2.0 * (np.log(rr) - self._ln_lo) / (self._ln_hi - self._ln_lo) - 1.0
        white = C * (rr ** self.s_ref)[:, None, None]
        self.deg = min(nr - 2, 16)
        V = np.polynomial.chebyshev.chebvander(t, self.deg)
        R, *_ = np.linalg.lstsq(V, white.reshape(nr, -1), rcond=None)

        # prune angular modes that carry nothing
        norms = np.linalg.norm(R, axis=0)
        keep = norms > 1e-6 * max(norms.max(), 1e-300)
        ls, ks = np.meshgrid(np.arange(self.L + 1), kvals, indexing="ij")
        self._R = R[:, keep]
        self._ls = ls.reshape(-1)[keep]
        ks = ks.reshape(-1)[keep]
        self._kuniq, self._kpos = np.unique(ks, return_inverse=True)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        out = np.zeros(pts.shape[0], dtype=complex)
        for lo in range(0, pts.shape[0], 131072):
            out[lo:lo + 131072] = self._eval(pts[lo:lo + 131072])
        return out

    def _eval(self, pts):
        r = np.linalg.norm(pts, axis=1)
        ok = r > 0
        rs = np.where(ok, r, 1.0)
        t = np.clip(2.0 * (np.log(rs) - self._ln_lo)
                    / (self._ln_hi - self._ln_lo) - 1.0, -1.0, 1.0)
        W = np.polynomial.chebyshev.chebvander(t, self.deg)
        M = W @ self._R
        mu = np.clip(pts[:, 2] / rs, -1.0, 1.0)
        legP = np.polynomial.legendre.legvander(mu, self.L)
        M *= legP[:, self._ls]
        # collapse to the unique Fourier modes before the transcendentals
        acc = np.zeros((pts.shape[0], self._kuniq.size), dtype=complex)
        for col, kp in enumerate(self._kpos):
            acc[:, kp] += M[:, col]
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        val = np.einsum("pk,pk->p", acc,
                        np.exp(1j * phi[:, None] * self._kuniq[None]))
        val = val * rs ** (-self.s_ref)
        if self.taper is not None:
            val = val * self.taper(rs)
        return np.where(ok, val, 0.0)


def _potential_once(f, frozen, x, quad: QuadratureConfig, nu, c_split):
    rx = float(np.linalg.norm(x))
    fro0 = FrozenOperator(np.zeros(frozen.n), frozen.K0)
    lo = f.support_lo if f.support_lo > 0 else rx * 2.0 ** (-quad.octaves_below)
    panels = _aligned_panels(rx, lo, f.R)

    rot = _rotation_to(x / rx)
    sph = SphereGrid(quad.n_mu, quad.n_phi)
    dirs = sph.dirs @ rot.T

    rs, ws = [], []
    for a, b in panels:
        t, wt = gl_panel(quad.radial_order, math.log(a), math.log(b))
        rs.append(np.exp(t))
        ws.append(wt * np.exp(t))
    rs = np.concatenate(rs)
    ws = np.concatenate(ws)
    ys = (rs[:, None, None] * dirs[None]).reshape(-1, 3)
    wq = (rs[:, None] ** 2 * ws[:, None] * sph.weights[None]).reshape(-1)
    fy = np.asarray(f(ys), dtype=complex)

    r_nodes = np.repeat(rs, dirs.shape[0])
    inner = r_nodes < c_split * rx
    outer = ~inner

    total = 0.0 + 0.0j
    # outer region: subtracted kernel, partition of unity around the x-ring
    yo = ys[outer]
    ker = gamma_eval(x[None] - yo, fro0)
    for j in range(nu + 1):
        ker = ker - p_j_eval_fixed_x(j, x, yo, frozen.Kinv)
    delta = quad.patch_delta * rx
    dist = np.linalg.norm(yo - x[None], axis=1)
    chi = smoothstep((dist / delta - 0.4) / 0.5)
    total += np.sum(ker * (1.0 - chi) * fy[outer] * wq[outer])

    # inner region: convergent tail of the expansion
    if np.any(inner):
        yi = ys[inner]
        t_max = np.max(r_nodes[inner]) / (rx * 2.0 * c_split)
        j_stop = nu + 1 + max(8, math.ceil(
            math.log(quad.series_tol) / math.log(min(t_max, 0.75)))) + 5
        total += np.sum(_series_tail(x, yi, frozen.Kinv, nu, j_stop)
                        * fy[inner] * wq[inner])

    # patch: polar quadrature around x for the chi-weighted near field
    rho, wrho = gl_panel(quad.patch_radial, 0.0, 0.9 * delta)
    psph = SphereGrid(quad.patch_mu, quad.patch_phi)
    pdirs = psph.dirs @ rot.T
    yp = (x[None, None] + rho[:, None, None] * pdirs[None]).reshape(-1, 3)
    rp = np.repeat(rho, pdirs.shape[0])
    wp = (rho[:, None] ** 2 * wrho[:, None] * psph.weights[None]).reshape(-1)
    kerp = gamma_eval(x[None] - yp, fro0)
    for j in range(nu + 1):
        kerp = kerp - p_j_eval_fixed_x(j, x, yp, frozen.Kinv)
    chip = smoothstep((rp / delta - 0.4) / 0.5)
    total += np.sum(kerp * chip * np.asarray(f(yp), dtype=complex) * wp)

    return total


def modified_newton_potential(f: DecaySourceField, frozen: FrozenOperator, x,
                              quad: QuadratureConfig = None):
    """Potential of f against the frozen kernel with the s-adapted subtraction.

    For s > n the first floor(s)-n+1 expansion terms are removed under the
    integral in the outer region |y| > c |x| and the convergent tail of the
    expansion is summed in the inner region; for s < n this reduces to the
    classical Newton potential.  Exponents within 1e-3 of an integer are
    rejected.  Returns complex values of shape x.shape[:-1].
    """
    quad = quad or QuadratureConfig()
    s = float(f.s)
    if abs(s - round(s)) < 1e-3:
        raise NonIntegralViolation(f"decay exponent s = {s} is too close to an integer")
    # nothing is subtracted below s = n - 1, so deeper nu are equivalent
    nu = max(math.floor(s) - frozen.n, -1)
    c_split = _region_split_radius(frozen)

    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    c_K = gamma_normalization(frozen.K0, frozen.n)
    out = np.empty(pts.shape[0], dtype=complex)
    for i, xp in enumerate(pts):
        val = c_K * _potential_once(f, frozen, xp, quad, nu, c_split)
        if quad.refine:
            finer = QuadratureConfig(
                radial_order=quad.radial_order + 4, n_mu=quad.n_mu + 4,
                n_phi=quad.n_phi + 4, octaves_below=quad.octaves_below,
                patch_delta=quad.patch_delta, patch_radial=quad.patch_radial + 4,
                patch_mu=quad.patch_mu + 2, patch_phi=quad.patch_phi + 2,
                series_tol=quad.series_tol,
            )
            ref = c_K * _potential_once(f, frozen, xp, finer, nu, c_split)
            if abs(ref - val) > quad.refine_tol * max(abs(ref), 1e-300):
                raise QuadratureNotConverged(
                    f"potential at |x| = {np.linalg.norm(xp):.3e} moved "
                    f"{abs(ref - val) / abs(ref):.2e} under refinement"
                )
            val = ref
        out[i] = val
    return out[0] if single else out.reshape(np.asarray(x).shape[:-1])


# ---------------------------------------------------------------------------
# cached-pair engine for ladder rungs


class PotentialEngine:
    """Subtracted-kernel quadrature between all product-grid node pairs.

    The pair matrix stores G - P_0 - P_1 in single precision (the entries are
    then small relative errors of themselves, never of the much larger G);
    lower subtraction orders add the separable P_0 / P_1 sums back in double
    precision.  A smooth partition of unity swaps the near-diagonal pairs for
    a per-node polar patch, and deep octaves with per-direction power-law
    extension of the source carry the integral far below the main grid.
    Subtraction orders above nu = 1 are not tabulated.
    """

    def __init__(self, frozen: FrozenOperator, R: float, octaves: int = 8,
                 radial_order: int = 8, n_mu: int = 14, n_phi: int = 16,
                 deep_octaves: int = 21, deep_order: int = 2,
                 patch_delta: float = 0.6, patch_radial: int = 8,
                 patch_mu: int = 8, patch_phi: int = 8, taper=None):
        if frozen.n != 3:
            raise ValueError("pair engine is three-dimensional")
        self.frozen = frozen
        self.R = R
        self.grid = ProductGrid(R, octaves, radial_order, n_mu, n_phi)
        self.deep = ProductGrid(R * 2.0 ** (-octaves), deep_octaves,
                                deep_order, n_mu, n_phi)
        self.patch_delta = patch_delta
        self.patch_radial = patch_radial
        self.patch_mu = patch_mu
        self.patch_phi = patch_phi
        self.taper = taper
        self.c_K = gamma_normalization(frozen.K0, 3)

        X = self.grid.points
        self.n_main = X.shape[0]
        self.n_dirs = n_mu * n_phi
        Kinv = frozen.Kinv
        self._Xk = X @ Kinv
        self._qx = np.einsum("ij,ij->i", self._Xk, X.astype(complex))
        self._S = np.sqrt(self._qx)
        self._rx = np.repeat(self.grid.radial.radii, self.n_dirs)
        self._allY = np.vstack([self.grid.points, self.deep.points])
        rd = np.repeat(self.deep.radial.radii, self.n_dirs)
        if taper is None:
            self._taper_main = np.ones(self.n_main)
            self._taper_deep = np.ones(rd.size)
        else:
            self._taper_main = np.asarray(taper(self._rx), dtype=float)
            self._taper_deep = np.asarray(taper(rd), dtype=float)

        self._build_pairs()
        self._build_patch_geometry()

    # ---- pair caches

    def _dker_block(self, rows, Y, qy):
        G = self._Xk[rows] @ Y.T.astype(complex)
        Q = self._qx[rows][:, None] + qy[None, :] - 2.0 * G
        S = self._S[rows][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 1.0 / np.sqrt(Q) - 1.0 / S - G / S**3
        return out

    def _build_pairs(self):
        Kinv = self.frozen.Kinv
        for name, g in (("_DM", self.grid), ("_DD", self.deep)):
            Y = g.points
            Yk = Y @ Kinv
            qy = np.einsum("ij,ij->i", Yk, Y.astype(complex))
            cache = np.empty((self.n_main, Y.shape[0]), dtype=np.complex64)
            step = max(1, 2**24 // max(Y.shape[0], 1))
            for lo in range(0, self.n_main, step):
                rows = slice(lo, min(lo + step, self.n_main))
                blk = self._dker_block(rows, Y, qy)
                if g is self.grid:
                    idx = np.arange(rows.start, rows.stop)
                    blk[np.arange(idx.size), idx] = 0.0
                cache[rows] = blk.astype(np.complex64)
            setattr(self, name, cache)

    # ---- patch geometry

    def _build_patch_geometry(self):
        X = self.grid.points
        rx = self._rx
        self._delta = self.patch_delta * rx

        # neighbor lists: cached nodes under each patch support, prefiltered
        # by radius (|y - x| < 0.9 delta forces the radius window)
        r_all = np.concatenate([
            np.repeat(self.grid.radial.radii, self.n_dirs),
            np.repeat(self.deep.radial.radii, self.n_dirs),
        ])
        order = np.argsort(r_all)
        r_sorted = r_all[order]
        nbr_idx, nbr_chi, offs = [], [], [0]
        for i in range(self.n_main):
            cap = 0.9 * self._delta[i]
            lo = np.searchsorted(r_sorted, rx[i] - cap)
            hi = np.searchsorted(r_sorted, rx[i] + cap, side="right")
            cand = order[lo:hi]
            d = np.linalg.norm(self._allY[cand] - X[i], axis=1)
            keep = d < cap
            cand = cand[keep]
            nbr_idx.append(cand)
            nbr_chi.append(smoothstep((d[keep] / self._delta[i] - 0.4) / 0.5))
            offs.append(offs[-1] + cand.size)
        self._nbr_idx = np.concatenate(nbr_idx)
        self._nbr_chi = np.concatenate(nbr_chi)
        self._nbr_off = np.asarray(offs)

        self._rho_base, self._wrho_base = gl_panel(self.patch_radial, 0.0, 0.9)
        self._psph = SphereGrid(self.patch_mu, self.patch_phi)
        self._rot = _rotations_to(X / rx[:, None])

    def release(self):
        """Drop the pair caches (rebuild required for further rungs)."""
        self._DM = None
        self._DD = None

    # ---- source handling

    def source_to_deep(self, F_main, nu):
        """Per-direction power-law extension of a main-grid source downward."""
        v = np.asarray(F_main).reshape(self.grid.shape)
        k = self.grid.radial.order
        fa = v[-1].reshape(-1)          # deepest radial shell, all directions
        fb = v[-1 - k].reshape(-1)      # same node pattern one octave up
        ra = self.grid.radial.radii[-1]
        rb = self.grid.radial.radii[-1 - k]
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.log(np.abs(fa) / np.abs(fb)) / math.log(ra / rb)
        e = np.where(np.isfinite(e), e, 0.0)
        e = np.clip(e, -(3.0 + nu + 1.0) + 0.1, 2.0)
        rr = self.deep.radial.radii
        F_deep = fa[None, :] * (rr[:, None] / ra) ** e[None, :]
        F_deep[:, np.abs(fa) < 1e-300] = 0.0
        return F_deep.reshape(-1)

    def clean_bottom(self, F_main, nu, panels: int = 1):
        """Power-law continuation of the deepest radial panels per direction.

        Differentiating a rung on the product grid is least accurate on the
        bottom panel where the main grid hands off to the deep grid, and the
        low moments of a slowly decaying source are dominated by exactly that
        region.  The scheduled sources are asymptotically separable power
        laws, so the bottom panels are refit from the two shells above."""
        v = np.asarray(F_main, dtype=complex).reshape(self.grid.shape).copy()
        k = self.grid.radial.order
        cut = panels * k
        rr = self.grid.radial.radii
        ia = len(rr) - cut - 1
        fa = v[ia].reshape(-1)
        fb = v[ia - k].reshape(-1)
        ra, rb = rr[ia], rr[ia - k]
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.log(np.abs(fa) / np.abs(fb)) / math.log(ra / rb)
        e = np.where(np.isfinite(e), e, 0.0)
        e = np.clip(e, -(3.0 + nu + 1.0) + 0.1, 2.0)
        scale = (rr[-cut:, None] / ra) ** e[None, :]
        repl = (fa[None, :] * scale)
        repl[:, np.abs(fa) < 1e-300] = 0.0
        v[-cut:] = repl.reshape((cut,) + self.grid.shape[1:])
        return v.reshape(-1)

    # ---- evaluation

    def _addback(self, u, fw_all, nu):
        if nu <= 0:
            T3 = self._allY.astype(complex).T @ fw_all
            u += (self._Xk @ T3) / self._S**3
        if nu <= -1:
            u += np.sum(fw_all) / self._S
        return u

    def _pair_addback_vals(self, i, j_idx, nu):
        """P_0/P_1 add-back for pairs (i, j_idx), double precision."""
        out = np.zeros(j_idx.shape, dtype=complex)
        if nu <= 0:
            G = self._allY[j_idx].astype(complex) @ self._Xk[i]
            out += G / self._S[i] ** 3
        if nu <= -1:
            out += 1.0 / self._S[i]
        return out

    def potential(self, F_main, F_deep, nu):
        """c_K * integral of (Gamma - sum_{j<=nu} P_j)(x, y) F(y) dy at the
        main nodes.  F_deep comes from source_to_deep or from direct
        evaluation at the deep nodes; the engine taper multiplies both."""
        if nu > 1:
            raise NotImplementedError(
                "pair caches subtract P_0 and P_1 only (nu <= 1)")
        if self._DM is None:
            raise RegionViolation("pair caches were released")
        fw_m = (np.asarray(F_main, dtype=complex) * self._taper_main
                * self.grid.quad_weights)
        fw_d = (np.asarray(F_deep, dtype=complex) * self._taper_deep
                * self.deep.quad_weights)
        u = (self._DM @ fw_m.astype(np.complex64)).astype(complex)
        u += (self._DD @ fw_d.astype(np.complex64)).astype(complex)
        fw_all = np.concatenate([fw_m, fw_d])
        u = self._addback(u, fw_all, nu)
        model = _SourceModel(self.grid, F_main, nu + 3.5, taper=self.taper)
        u += self._patch_correction(model, fw_all, nu)
        return self.c_K * u

    def _patch_correction(self, model, fw_all, nu):
        X = self.grid.points
        out = np.zeros(self.n_main, dtype=complex)
        n_m = self.n_main
        # crude part: remove what the cached quadrature put on near pairs
        for i in range(n_m):
            js = self._nbr_idx[self._nbr_off[i]:self._nbr_off[i + 1]]
            if js.size == 0:
                continue
            chi = self._nbr_chi[self._nbr_off[i]:self._nbr_off[i + 1]]
            main_js = js < n_m
            vals = np.empty(js.size, dtype=complex)
            vals[main_js] = self._DM[i, js[main_js]].astype(complex)
            vals[~main_js] = self._DD[i, js[~main_js] - n_m].astype(complex)
            vals += self._pair_addback_vals(i, js, nu)
            out[i] -= np.sum(vals * chi * fw_all[js])
        # accurate part: per-node polar patches, geometry scaled by |x|
        npq = self._rho_base.size * self._psph.dirs.shape[0]
        step = max(1, 2**21 // npq)
        for lo in range(0, n_m, step):
            rows = np.arange(lo, min(lo + step, n_m))
            C = rows.size
            delta = self._delta[rows]
            rho = self._rho_base[None, :] * delta[:, None]
            wrho = self._wrho_base[None, :] * delta[:, None]
            pd = np.einsum("cab,db->cda", self._rot[rows], self._psph.dirs)
            yp = (X[rows, None, None] +
                  rho[:, :, None, None] * pd[:, None]).reshape(C, -1, 3)
            rp = np.repeat(rho, pd.shape[1], axis=1)
            wp = ((rho**2 * wrho)[:, :, None]
                  * self._psph.weights[None, None, :]).reshape(C, -1)
            chi = smoothstep((rp / delta[:, None] - 0.4) / 0.5)
            ker = self._dker_rows(X[rows], yp, nu)
            fv = model(yp.reshape(-1, 3))
            out[rows] += np.sum(ker * chi * fv.reshape(C, -1) * wp, axis=1)
        return out

    def _dker_rows(self, xs, ys, nu):
        """Subtracted kernel for row-wise points xs (C, 3) vs ys (C, T, 3)."""
        Kinv = self.frozen.Kinv
        xk = xs @ Kinv
        qx = np.einsum("ci,ci->c", xk, xs.astype(complex))
        S = np.sqrt(qx)
        yk = np.einsum("cti,ij->ctj", ys.astype(complex), Kinv)
        qy = np.einsum("cti,cti->ct", yk, ys.astype(complex))
        G = np.einsum("ci,cti->ct", xk.astype(complex), ys.astype(complex))
        Q = qx[:, None] + qy - 2.0 * G
        ker = 1.0 / np.sqrt(Q)
        if nu >= 0:
            ker = ker - 1.0 / S[:, None]
        if nu >= 1:
            ker = ker - G / S[:, None] ** 3
        return ker


# ---------------------------------------------------------------------------
# correction ladder


@dataclass(frozen=True)
class LadderConfig:
    """Build parameters.  R is the punctured-ball radius of the closing
    solve; the quadrature ball extends to ball_factor * R so sources can be
    tapered to zero before the quadrature boundary without touching any
    radius the closing solve or the fit windows see."""

    R: float = 0.5
    ball_factor: float = 2.0
    octaves: int = 8
    radial_order: int = 8
    n_mu: int = 14
    n_phi: int = 16
    deep_octaves: int = 21
    patch_delta: float = 0.6
    patch_radial: int = 8
    patch_mu: int = 8
    patch_phi: int = 8
    npts: int = 49
    method: str = "complex"
    rung_window: tuple = None      # defaults to (R/32, R/4)
    final_window: tuple = None     # defaults to (0.22 R, 0.7 R)
    rung_slack: float = 0.1
    final_slack: float = 0.2


@dataclass
class CorrectionLadder:
    """Rungs w_0 .. w_{J-1} on the product grid plus the discrete W_J.

    stage_values[j] holds w_j at the main product-grid nodes (complex);
    W_field is the finite-difference field N_J + V on the punctured ball,
    where N_J is the classical Newton tail of the last source and V absorbs
    its remaining defect with zero boundary data.
    """

    m: int
    alpha: float
    J: int
    s_values: tuple
    y0: np.ndarray
    frozen: FrozenOperator
    grid: ProductGrid
    stage_values: list
    stage_slopes: list
    stage_targets: list
    newton_tail: np.ndarray      # N_J at main nodes
    W_field: GridField
    W_slope: float
    rung_window: tuple
    final_window: tuple
    sum_main: np.ndarray = None  # sum of potential rungs at main nodes

    def __post_init__(self):
        if self.sum_main is None:
            total = np.zeros(self.grid.points.shape[0], dtype=complex)
            for v in self.stage_values:
                total = total + v
            self.sum_main = total

    @property
    def w(self):
        """Callable: total correction at absolute points inside the ball."""
        def eval_at(pts):
            pts = np.asarray(pts, dtype=float).reshape(-1, 3)
            smooth = self.grid.interpolate(
                self.sum_main.reshape(self.grid.shape), pts - self.y0)
            return smooth + _fd_trilinear(self.W_field, pts)
        return eval_at

    def shell_max(self, values):
        """Per-radius max of |values| over the product-grid spheres."""
        v = np.abs(np.asarray(values).reshape(self.grid.shape))
        return self.grid.radial.radii, v.max(axis=(1, 2))

    def dump_stage_csv(self, directory):
        import os

        os.makedirs(directory, exist_ok=True)
        paths = []
        for j, v in enumerate(self.stage_values):
            r, mx = self.shell_max(v)
            path = os.path.join(directory, f"stage_{j}.csv")
            _write_csv(path, r, mx)
            paths.append(path)
        r, mx = _fd_shell_profile(self.W_field, self.y0)
        path = os.path.join(directory, f"stage_{self.J}_discrete.csv")
        _write_csv(path, r, mx)
        paths.append(path)
        return paths


def _write_csv(path, r, v):
    with open(path, "w") as fh:
        fh.write("r,max_abs_w\n")
        for a, b in zip(r, v):
            fh.write(f"{a:.17g},{b:.17g}\n")


def _fit_slope(radii, vals):
    radii = np.asarray(radii, dtype=float)
    vals = np.asarray(vals, dtype=float)
    good = vals > 0
    if np.count_nonzero(good) < 2:
        return 0.0
    return float(np.polyfit(np.log(radii[good]), np.log(vals[good]), 1)[0])


def _window_slope(grid, values, window):
    r = grid.radial.radii
    v = np.abs(np.asarray(values).reshape(grid.shape)).max(axis=(1, 2))
    sel = (r >= window[0]) & (r <= window[1])
    return _fit_slope(r[sel], v[sel])


def _fd_shell_profile(fieldobj: GridField, y0, nbins: int = 24):
    dom = fieldobj.domain
    act = dom.active
    pts = dom.node_points(act)
    vals = np.abs(fieldobj.values[act])
    rad = np.linalg.norm(pts - y0, axis=1)
    edges = np.linspace(rad.min(), rad.max(), nbins + 1)
    rows_r, rows_v = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (rad >= a) & (rad < b)
        if np.any(sel):
            rows_r.append(0.5 * (a + b))
            rows_v.append(float(np.max(vals[sel])))
    return np.asarray(rows_r), np.asarray(rows_v)


def _shell_envelope_slope(rad, vals, window, h, samples: int = 8):
    """Fitted exponent of the per-shell max of vals against radius.

    Shells have fixed absolute thickness, so at the inner edge of the window
    they are radially wide and a plain max is biased toward the small-radius
    side of the band.  A second pass rescales every sample to the nominal
    shell radius with the first-pass exponent, which removes that bias."""
    radii = np.geomspace(window[0], window[1], samples)
    sels = [np.abs(rad - r) <= 0.75 * h for r in radii]
    slope = 0.0
    for _ in range(2):
        shell = []
        for r, sel in zip(radii, sels):
            if np.any(sel):
                v = vals[sel] * (rad[sel] / r) ** (-slope)
                shell.append(float(np.max(v)))
            else:
                shell.append(0.0)
        slope = _fit_slope(radii, shell)
    return slope


def _fd_window_slope(fieldobj: GridField, y0, window, samples: int = 8):
    dom = fieldobj.domain
    act = dom.active
    pts = dom.node_points(act)
    vals = np.abs(fieldobj.values[act])
    rad = np.linalg.norm(pts - y0, axis=1)
    return _shell_envelope_slope(rad, vals, window, dom.h, samples)


def _fd_trilinear(fieldobj: GridField, pts):
    """Trilinear sample of a grid field; cells with missing corners fall back
    to renormalized weights over the live corners."""
    dom = fieldobj.domain
    xs = dom.axis_nodes()
    h = dom.h
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    lo = np.array([a[0] for a in xs])
    idx = np.floor((pts - lo) / h).astype(int)
    idx = np.clip(idx, 0, dom.npts - 2)
    frac = np.clip((pts - (lo + idx * h)) / h, 0.0, 1.0)
    out = np.zeros(pts.shape[0], dtype=complex)
    wsum = np.zeros(pts.shape[0])
    vals = fieldobj.values
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
                     * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                     * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                v = vals[idx[:, 0] + dx, idx[:, 1] + dy, idx[:, 2] + dz]
                ok = ~np.isnan(v.real)
                out[ok] += (w * v)[ok]
                wsum[ok] += w[ok]
    good = wsum > 1e-12
    out[good] /= wsum[good]
    out[~good] = 0.0
    return out


def _defect_applier(Kfield: MatrixField, q, K0, pts):
    """Closure evaluating (L_0 - L) v = (K0 - K):D2v - divK . Dv + q v."""
    Kv = np.asarray(Kfield(pts), dtype=complex)
    jac = Kfield.jacobian(pts)
    divK = np.einsum("...iij->...j", jac)
    qv = np.asarray(q(pts), dtype=complex)
    dK = K0[None] - Kv

    def apply(val, grad, hess):
        return (np.einsum("...ij,...ij->...", dK, hess)
                - np.einsum("...i,...i->...", divK, grad) + qv * val)

    return apply


def _boundary_taper(R):
    """C^2 radial cutoff: 1 below 0.8 R, 0 above 0.95 R."""
    def taper(r):
        return smoothstep((np.asarray(r, dtype=float) / R - 0.8) / 0.15)
    return taper


def _ladder_schedule(m, consts):
    n, alpha, beta = 3, consts.alpha, consts.beta
    if not 0.0 < alpha < beta:
        raise ValueError("ladder requires 0 < alpha < beta")
    J = math.floor(m / alpha)
    s = [n + m - beta if j == 0 else n + m - (j + 1) * alpha
         for j in range(J + 1)]
    for sj in s:
        if abs(sj - round(sj)) < 1e-3:
            raise NonIntegralViolation(
                f"ladder exponent {sj} is too close to an integer; "
                "perturb alpha")
    return J, s


def build_ladder_family(Kfield: MatrixField, q, consts, ms, y0,
                        config: LadderConfig = None, engine=None):
    """Correction ladders for several orders m sharing one pair engine.

    All potential rungs run while the pair caches are alive; the caches are
    released before the discrete punctured solves so that peak memory stays
    bounded by one phase at a time.
    """
    config = config or LadderConfig()
    y0 = np.asarray(y0, dtype=float)
    schedules = {m: _ladder_schedule(m, consts) for m in ms}
    fro = FrozenOperator.from_field(Kfield, y0)
    own = engine is None
    if own:
        # sources vanish smoothly before the quadrature boundary; the taper
        # sits beyond every radius the closing solve and the fit windows see
        engine = PotentialEngine(
            fro, config.ball_factor * config.R, config.octaves,
            config.radial_order, config.n_mu, config.n_phi,
            config.deep_octaves, patch_delta=config.patch_delta,
            patch_radial=config.patch_radial, patch_mu=config.patch_mu,
            patch_phi=config.patch_phi,
            taper=_boundary_taper(config.ball_factor * config.R))
    grid = engine.grid
    rung_win = config.rung_window or (config.R / 32.0, config.R / 4.0)
    final_win = config.final_window or (0.22 * config.R, 0.7 * config.R)

    pts_main = y0 + grid.points
    pts_deep = y0 + engine.deep.points
    defect_main = _defect_applier(Kfield, q, fro.K0, pts_main)
    defect_deep = _defect_applier(Kfield, q, fro.K0, pts_deep)

    staged = []
    for m in ms:
        J, s_vals = schedules[m]
        term = SingularTerm(m, fro)
        v, gv, hv = term.value_grad_hess(pts_main)
        F_main = defect_main(v, gv, hv)
        vd, gd, hd = term.value_grad_hess(pts_deep)
        F_deep = defect_deep(vd, gd, hd)

        stage_values, stage_slopes, stage_targets = [], [], []
        trivial = np.max(np.abs(F_main)) == 0.0
        for j in range(J):
            nu_j = math.floor(s_vals[j]) - 3
            if j > 0:
                F_deep = engine.source_to_deep(F_main, nu_j)
            w_j = (np.zeros(grid.points.shape[0], dtype=complex) if trivial
                   else engine.potential(F_main, F_deep, nu_j))
            target = 2.0 - 3.0 - m + (j + 1) * consts.alpha
            slope = (_window_slope(grid, w_j, rung_win)
                     if not trivial else target)
            if slope < target - config.rung_slack:
                raise LadderStageFailure(
                    f"stage {j}: fitted decay slope {slope:.3f} violates "
                    f"the bound {target:.3f} (slack {config.rung_slack})")
            stage_values.append(w_j)
            stage_slopes.append(slope)
            stage_targets.append(target)
            if not trivial:
                gw = grid.gradient(w_j)
                hw = grid.hessian(w_j)
                nu_next = math.floor(s_vals[j + 1]) - 3
                F_main = engine.clean_bottom(defect_main(
                    w_j, gw.reshape(-1, 3), hw.reshape(-1, 3, 3)), nu_next)

        # classical Newton tail of the closing source (s_J < n)
        nu_J = math.floor(s_vals[J]) - 3
        if trivial:
            N_main = np.zeros(grid.points.shape[0], dtype=complex)
            N_interp = None
        else:
            if J > 0:
                F_deep = engine.source_to_deep(F_main, nu_J)
            N_main = engine.potential(F_main, F_deep, nu_J)
            gN = grid.gradient(N_main)
            hN = grid.hessian(N_main)
            N_interp = (N_main.reshape(grid.shape),
                        gN.reshape(grid.shape + (3,)),
                        hN.reshape(grid.shape + (3, 3)))
        staged.append(dict(m=m, J=J, s_vals=s_vals,
                           stage_values=stage_values,
                           stage_slopes=stage_slopes,
                           stage_targets=stage_targets,
                           N_main=N_main, N_interp=N_interp,
                           trivial=trivial))

    if own:
        engine.release()

    ladders = []
    for st in staged:
        W = _closing_solve(Kfield, q, y0, fro, grid, st, config)
        target = 2.0 - 3.0 - st["m"] + (st["J"] + 1) * consts.alpha
        if st["trivial"]:
            W_slope = target
        else:
            W_slope = _fd_window_slope(W, y0, final_win)
            if W_slope < target - config.final_slack:
                raise LadderStageFailure(
                    f"closing stage {st['J']}: fitted decay slope "
                    f"{W_slope:.3f} violates the bound {target:.3f} "
                    f"(slack {config.final_slack})")
        lad = CorrectionLadder(
            m=st["m"], alpha=consts.alpha, J=st["J"],
            s_values=tuple(st["s_vals"]), y0=y0, frozen=fro, grid=grid,
            stage_values=st["stage_values"], stage_slopes=st["stage_slopes"],
            stage_targets=st["stage_targets"], newton_tail=st["N_main"],
            W_field=W, W_slope=W_slope, rung_window=rung_win,
            final_window=final_win)
        ladders.append(lad)
    return ladders


def _closing_solve(Kfield, q, y0, fro, grid, st, config: LadderConfig):
    h = 2.0 * config.R / (config.npts - 1)
    excision = 3.0 * h * (1.0 + 1e-9)

    if st["trivial"]:
        dom = GridDomain(center=y0, half_width=config.R, npts=config.npts,
                         kind="punctured", excision_radius=excision)
        vals = np.full((config.npts,) * 3, np.nan + 1j * np.nan, dtype=complex)
        vals[dom.active] = 0.0
        return GridField(domain=dom, values=vals, meta={"trivial": True})

    Nval, Ngrad, Nhess = st["N_interp"]

    def rhs(p):
        rel = p - y0
        v = grid.interpolate(Nval, rel)
        g = np.stack([grid.interpolate(Ngrad[..., i], rel)
                      for i in range(3)], axis=-1)
        hs = np.empty((rel.shape[0], 3, 3), dtype=complex)
        for i in range(3):
            for k in range(3):
                hs[:, i, k] = grid.interpolate(Nhess[..., i, k], rel)
        app = _defect_applier(Kfield, q, fro.K0, p)
        return -app(v, g, hs)

    def outer(p):
        return np.zeros(p.shape[0], dtype=complex)

    V = solve_punctured(Kfield, q, y0, rhs, excision, outer,
                        half_width=config.R, npts=config.npts,
                        method=config.method)
    dom = V.domain
    act = dom.active
    W_vals = V.values.copy()
    W_vals[act] += grid.interpolate(Nval, dom.node_points(act) - y0)
    meta = dict(V.meta)
    meta["lifted"] = True
    return GridField(domain=dom, values=W_vals, meta=meta)


def build_correction_ladder(Kfield: MatrixField, q, consts, m: int, y0,
                            config: LadderConfig = None,
                            engine=None) -> CorrectionLadder:
    """Correction ladder of order m at the pole y0.

    w_0 solves L_0 w_0 = (L_0 - L) u_m with decay exponent n + m - beta; each
    later rung feeds the defect of its predecessor back through the modified
    potential with exponent n + m - (j+1) alpha, and the closing stage W_J
    (exponent below n) is the classical Newton tail plus a discrete
    punctured-ball correction with zero boundary data.
    """
    return build_ladder_family(Kfield, q, consts, [m], y0, config, engine)[0]


# ---------------------------------------------------------------------------
# estimate report


@dataclass
class EstimateReport:
    m: int
    alpha: float
    targets: dict
    slopes: dict
    passes: dict
    window: tuple
    radii: list
    annuli: list

    def to_json(self):
        import json

        return json.dumps({
            "m": self.m,
            "alpha": self.alpha,
            "targets": {k: float(v) for k, v in self.targets.items()},
            "slopes": {k: float(v) for k, v in self.slopes.items()},
            "passes": {k: bool(v) for k, v in self.passes.items()},
            "window": [float(w) for w in self.window],
            "radii": [float(r) for r in self.radii],
            "annuli": [float(r) for r in self.annuli],
        }, indent=2, sort_keys=True)


def verify_theorem_estimates(ladder: CorrectionLadder, consts,
                             samples: int = 8) -> EstimateReport:
    """Fitted decay of |w|, |x - y0| |Dw| and the annulus L^p norm of D2w.

    The total correction (interpolated rungs plus the discrete stage) is
    sampled on the finite-difference grid of the closing stage, and D and D2
    are taken there by centered differences.  Report only; no exceptions.
    """
    m, alpha, p = ladder.m, ladder.alpha, consts.p
    n = 3
    dom = ladder.W_field.domain
    h = dom.h
    act = dom.active
    interior = dom.interior[act]
    apts = dom.node_points(act)
    rel = apts - ladder.y0
    rad = np.linalg.norm(rel, axis=1)

    # total field at the live nodes, then centered differences on the volume
    vol = ladder.W_field.values.copy()
    if ladder.J > 0:
        vol[act] += ladder.grid.interpolate(
            ladder.sum_main.reshape(ladder.grid.shape), rel)
    w_tot = vol[act]
    ii, jj, kk = np.nonzero(act)
    g_tot = np.empty((rel.shape[0], 3), dtype=complex)
    h_tot = np.empty((rel.shape[0], 3, 3), dtype=complex)
    for axis in range(3):
        off = np.zeros(3, dtype=int)
        off[axis] = 1
        vu = _shift_vals(vol, ii, jj, kk, off, dom.npts)
        vd = _shift_vals(vol, ii, jj, kk, -off, dom.npts)
        g_tot[:, axis] = (vu - vd) / (2.0 * h)
        h_tot[:, axis, axis] = (vu - 2.0 * w_tot + vd) / h**2
    for a in range(3):
        for b in range(a + 1, 3):
            oa = np.zeros(3, dtype=int)
            oa[a] = 1
            ob = np.zeros(3, dtype=int)
            ob[b] = 1
            pp = _shift_vals(vol, ii, jj, kk, oa + ob, dom.npts)
            pm = _shift_vals(vol, ii, jj, kk, oa - ob, dom.npts)
            mp = _shift_vals(vol, ii, jj, kk, -oa + ob, dom.npts)
            mm = _shift_vals(vol, ii, jj, kk, -oa - ob, dom.npts)
            h_tot[:, a, b] = h_tot[:, b, a] = (pp - pm - mp + mm) / (4.0 * h**2)

    window = ladder.final_window
    radii = np.geomspace(window[0], window[1], samples)
    wv = np.abs(w_tot)
    gn = rad * np.linalg.norm(g_tot, axis=1)
    good_w = interior & np.isfinite(wv)
    good_g = interior & np.isfinite(gn)
    slope_w = _shell_envelope_slope(rad[good_w], wv[good_w], window, h, samples)
    slope_dw = _shell_envelope_slope(rad[good_g], gn[good_g], window, h, samples)

    annuli = np.geomspace(window[0], window[1] / 2.0, 3)
    d2 = []
    for r in annuli:
        sel = interior & (rad > r) & (rad < 2.0 * r)
        hn = np.linalg.norm(h_tot[sel].reshape(-1, 9), axis=1)
        hn = hn[np.isfinite(hn)]
        d2.append(float((np.sum(hn**p) * h**3) ** (1.0 / p)) if hn.size else 0.0)

    targets = {
        "w": 2.0 - n - m + alpha,
        "rDw": 2.0 - n - m + alpha,
        "D2w_lp": n / p - n - m + alpha,
    }
    slopes = {
        "w": slope_w,
        "rDw": slope_dw,
        "D2w_lp": _fit_slope(annuli, d2),
    }
    passes = {
        "w": slopes["w"] >= targets["w"] - 0.05,
        "rDw": slopes["rDw"] >= targets["rDw"] - 0.05,
        "D2w_lp": slopes["D2w_lp"] >= targets["D2w_lp"] - 0.1,
    }
    return EstimateReport(m=m, alpha=alpha, targets=targets, slopes=slopes,
                          passes=passes, window=window,
                          radii=list(radii), annuli=list(annuli))


def _shift_vals(vol, ii, jj, kk, off, npts):
    i2, j2, k2 = ii + off[0], jj + off[1], kk + off[2]
    ok = ((i2 >= 0) & (i2 < npts) & (j2 >= 0) & (j2 < npts)
          & (k2 >= 0) & (k2 < npts))
    out = np.full(ii.shape, np.nan, dtype=complex)
    out[ok] = vol[i2[ok], j2[ok], k2[ok]]
    return out

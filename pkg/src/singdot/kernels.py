"""Anisotropic fundamental solution, the singular family u_m, and series terms.

Everything here is built from one scalar structure

    F(x) = S(x)^{2-n-d} * C_d^{(n-2)/2}(z(x)),   S = (M xt . xt)^{1/2},
    z = (ell . xt) / (c S),

with M complex symmetric (an inverse coefficient matrix), ell a fixed complex
vector, c a fixed complex scalar, and xt a displacement.  The fundamental
solution is d = 0, the order-m singular solution u_m takes ell = M e_n and
c = sqrt(M_nn), and the expansion term P_j(x, y) takes ell = M y and
c = sqrt(M y . y).  Fractional powers are integer powers of the principal
square root S, which keeps every branch choice consistent with the one made
inside z.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import MatrixField, sqrt_det
from .errors import (
    DegeneratePoint,
    EllipticityViolation,
    RegionViolation,
    ZeroBase,
)
from .gegenbauer import GegenbauerEvaluator


def complex_power(base, exponent: float):
    """Principal-branch power exp(exponent * Log base); rejects zero base."""
    base = np.asarray(base, dtype=complex)
    if np.any(base == 0):
        raise ZeroBase("zero base in principal power")
    out = np.exp(exponent * np.log(base))
    return out if out.ndim else complex(out)


def _as_points(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(1, n) if single else x.reshape(-1, n)
    return pts, single, x.shape[:-1]


def _omega(n: int) -> float:
    """Surface measure of the unit (n-1)-sphere."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


# ---------------------------------------------------------------------------
# frozen operator and the core evaluation


@dataclass(frozen=True)
class FrozenOperator:
    """Constant-coefficient data K(y0) frozen at the pole y0."""

    y0: np.ndarray
    K0: np.ndarray
    Kinv: np.ndarray = field(init=False)
    Kinv_last: np.ndarray = field(init=False)   # n-th row of K^{-1}
    Kinv_nn: complex = field(init=False)
    c: complex = field(init=False)              # principal sqrt of Kinv_nn
    n: int = field(init=False)

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float)
        K0 = np.asarray(self.K0, dtype=complex)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "K0", K0)
        n = K0.shape[0]
        object.__setattr__(self, "n", n)
        Kinv = np.linalg.inv(K0)
        Kinv = 0.5 * (Kinv + Kinv.T)
        object.__setattr__(self, "Kinv", Kinv)
        object.__setattr__(self, "Kinv_last", Kinv[n - 1].copy())
        knn = complex(Kinv[n - 1, n - 1])
        object.__setattr__(self, "Kinv_nn", knn)
        if knn.real <= 0:
            raise EllipticityViolation("Re K^{-1}_nn must be positive")
        # right-half-plane property of the quadratic form, spot-checked
        w = np.linalg.eigvalsh(0.5 * (Kinv.real + Kinv.real.T))
        if np.min(w) <= 0:
            raise EllipticityViolation("Re K^{-1} not positive definite")
        object.__setattr__(self, "c", complex(np.sqrt(knn)))

    @classmethod
    def from_field(cls, Kfield: MatrixField, y0):
        y0 = np.asarray(y0, dtype=float)
        return cls(y0, Kfield(y0[None])[0])


def _core(xt, M, ell, cscale, deg, n, evs, order):
    """Value/grad/hess of S^{2-n-deg} C_deg(z) at displacements xt (N, n).

    evs is a tuple of Gegenbauer evaluators at orders (nu, nu+1, nu+2); only
    as many as `order` requires are used.  Returns (val, grad, hess) with the
    unused slots None.
    """
    g = xt @ M                       # (N, n), M symmetric
    Q = np.einsum("ij,ij->i", g, xt.astype(complex))
    if np.any(Q == 0):
        raise DegeneratePoint("evaluation at the pole")
    S = np.sqrt(Q)
    T = xt @ ell
    z = T / (cscale * S)
    k = 2 - n - deg

    nu = evs[0].nu
    C = evs[0].eval(deg, z)
    Sk = S**k
    val = Sk * C
    if order == 0:
        return val, None, None

    Cp = 2.0 * nu * evs[1].eval(deg - 1, z) if deg >= 1 else np.zeros_like(z)
    zp = (ell[None, :] - (T / Q)[:, None] * g) / (cscale * S)[:, None]
    Sk2 = S ** (k - 2)
    grad = (k * Sk2 * C)[:, None] * g + (Sk * Cp)[:, None] * zp
    if order == 1:
        return val, grad, None

    if deg >= 2:
        Cpp = 4.0 * nu * (nu + 1.0) * evs[2].eval(deg - 2, z)
    else:
        Cpp = np.zeros_like(z)
    Sk4 = S ** (k - 4)
    gg = g[:, :, None] * g[:, None, :]
    lg = ell[None, :, None] * g[:, None, :] + g[:, :, None] * ell[None, None, :]
    zpp = (
        -(lg + T[:, None, None] * M[None]) / (cscale * S**3)[:, None, None]
        + 3.0 * T[:, None, None] * gg / (cscale * S**5)[:, None, None]
    )
    zz = zp[:, :, None] * zp[:, None, :]
    gz = g[:, :, None] * zp[:, None, :] + zp[:, :, None] * g[:, None, :]
    hess = (
        (k * (k - 2) * Sk4 * C)[:, None, None] * gg
        + (k * Sk2 * C)[:, None, None] * M[None]
        + (k * Sk2 * Cp)[:, None, None] * gz
        + (Sk * Cpp)[:, None, None] * zz
        + (Sk * Cp)[:, None, None] * zpp
    )
    return val, grad, hess


# ---------------------------------------------------------------------------
# fundamental solution and u_m


def z_tilde(x, y, Kinv):
    """Projected variable K^{-1}_{(n)}(x-y) / (sqrt(K^{-1}_nn) sqrt(Q))."""
    Kinv = np.asarray(Kinv, dtype=complex)
    n = Kinv.shape[0]
    pts, single, shape = _as_points(x, n)
    yv = np.asarray(y, dtype=float)
    xt = pts - yv
    g = xt @ Kinv
    Q = np.einsum("ij,ij->i", g, xt.astype(complex))
    if np.any(Q == 0):
        raise DegeneratePoint("z_tilde at x = y")
    T = xt @ Kinv[n - 1]
    c = np.sqrt(complex(Kinv[n - 1, n - 1]))
    out = T / (c * np.sqrt(Q))
    return complex(out[0]) if single else out.reshape(shape)


def gamma_eval(x, frozen: FrozenOperator):
    """Unnormalized fundamental kernel (K^{-1}(y0)(x-y0).(x-y0))^{(2-n)/2}."""
    pts, single, shape = _as_points(x, frozen.n)
    evs = (GegenbauerEvaluator((frozen.n - 2) / 2.0, 1),)
    val, _, _ = _core(pts - frozen.y0, frozen.Kinv, frozen.Kinv_last,
                      frozen.c, 0, frozen.n, evs, 0)
    return complex(val[0]) if single else val.reshape(shape)


def gamma_normalization(K0, n: int) -> complex:
    """c_K with c_K Q^{(2-n)/2} the fundamental solution of div(K0 grad u) = delta."""
    return -1.0 / ((n - 2) * _omega(n) * sqrt_det(np.asarray(K0, dtype=complex)))


@dataclass(frozen=True)
class SingularTerm:
    """Order-m member u_m of the singular family for a frozen operator.

    u_m(x) = Q^{(2-n-m)/2} m! c^m C_m^{(n-2)/2}(z~), homogeneous of degree
    2-n-m in x - y0.
    """

    m: int
    frozen: FrozenOperator
    _evs: tuple = field(init=False, repr=False)
    _pref: complex = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("order m must be >= 0")
        nu = (self.frozen.n - 2) / 2.0
        cap = max(self.m, 1)
        evs = (
            GegenbauerEvaluator(nu, cap),
            GegenbauerEvaluator(nu + 1.0, cap),
            GegenbauerEvaluator(nu + 2.0, cap),
        )
        object.__setattr__(self, "_evs", evs)
        object.__setattr__(
            self, "_pref", math.factorial(self.m) * self.frozen.c**self.m
        )

    def _eval(self, x, order):
        pts, single, shape = _as_points(x, self.frozen.n)
        val, grad, hess = _core(
            pts - self.frozen.y0, self.frozen.Kinv, self.frozen.Kinv_last,
            self.frozen.c, self.m, self.frozen.n, self._evs, order,
        )
        out = [self._pref * val]
        if order >= 1:
            out.append(self._pref * grad)
        if order >= 2:
            out.append(self._pref * hess)
        if single:
            return tuple(o[0] for o in out) if order else complex(out[0][0])
        n = self.frozen.n
        shapes = [shape, shape + (n,), shape + (n, n)]
        res = tuple(o.reshape(s) for o, s in zip(out, shapes))
        return res if order else res[0]

    def __call__(self, x):
        return self._eval(x, 0)

    def value_grad(self, x):
        return self._eval(x, 1)

    def value_grad_hess(self, x):
        return self._eval(x, 2)


def u_m_eval(x, term: SingularTerm):
    return term(x)


def grad_u_m(x, term: SingularTerm):
    return term.value_grad(x)[1]


# ---------------------------------------------------------------------------
# expansion terms P_j and the truncated series


def _pj_core(j, pts, y, Kinv, evs, order=0):
    """P_j(x, y) for fixed y with K^{-1} already evaluated at y."""
    yv = np.asarray(y, dtype=float)
    n = Kinv.shape[0]
    My = Kinv @ yv
    b2 = complex(yv @ My)
    if b2 == 0:
        # all j >= 1 terms carry a factor b^j = 0
        if j == 0:
            val, grad, hess = _core(pts, Kinv, np.zeros(n, complex), 1.0,
                                    0, n, evs, order)
            return val, grad, hess
        zero = np.zeros(pts.shape[0], dtype=complex)
        return (zero,
                np.zeros((pts.shape[0], n), complex) if order >= 1 else None,
                np.zeros((pts.shape[0], n, n), complex) if order >= 2 else None)
    b = np.sqrt(b2)
    val, grad, hess = _core(pts, Kinv, My, b, j, n, evs, order)
    pref = b**j
    val = pref * val
    if grad is not None:
        grad = pref * grad
    if hess is not None:
        hess = pref * hess
    return val, grad, hess


def p_j_eval(j: int, x, y, Kfield: MatrixField):
    """Series term P_j(x,y) = (K^{-1}(y)y.y)^{j/2} (K^{-1}(y)x.x)^{(2-n-j)/2} C_j(z)."""
    if j < 0:
        raise ValueError("index j must be >= 0")
    yv = np.asarray(y, dtype=float)
    K = Kfield(yv[None])[0]
    Kinv = np.linalg.inv(K)
    Kinv = 0.5 * (Kinv + Kinv.T)
    n = Kinv.shape[0]
    pts, single, shape = _as_points(x, n)
    nu = (n - 2) / 2.0
    evs = (GegenbauerEvaluator(nu, max(j, 1)),)
    val, _, _ = _pj_core(j, pts, yv, Kinv, evs)
    return complex(val[0]) if single else val.reshape(shape)


def p_j_eval_fixed_x(j: int, x, ys, Kinv):
    """P_j(x, y) across integration points y for one observation point x.

    Batched counterpart of p_j_eval for quadrature loops: the per-row
    arithmetic goes through the same matmul kernels _pj_core invokes pair by
    pair, so subtracting these values stays bit-consistent with pointwise
    p_j_eval calls (same K^{-1}, symmetrized the same way).
    """
    if j < 0:
        raise ValueError("index j must be >= 0")
    Kinv = np.asarray(Kinv, dtype=complex)
    n = Kinv.shape[0]
    x = np.asarray(x, dtype=float).reshape(n)
    ys = np.asarray(ys, dtype=float).reshape(-1, n)
    ev = GegenbauerEvaluator((n - 2) / 2.0, max(j, 1))
    g = x[None] @ Kinv
    Q = np.einsum("ij,ij->i", g, x[None].astype(complex))
    if np.any(Q == 0):
        raise DegeneratePoint("evaluation at the pole")
    S = np.sqrt(Q)
    My = np.matmul(Kinv[None], ys[:, :, None].astype(complex))[:, :, 0]
    b2 = np.matmul(ys[:, None, :].astype(complex), My[:, :, None])[:, 0, 0]
    b = np.sqrt(b2)
    xr = np.broadcast_to(x, ys.shape)[:, None, :].astype(complex)
    T = np.matmul(xr, My[:, :, None])[:, 0, 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        z = T / (b * S)
        val = S ** (2 - n - j) * ev.eval(j, z)
        out = b**j * val
    zero = b2 == 0
    if np.any(zero):
        out = np.where(zero, 0.0 if j >= 1 else (S ** (2 - n))[0], out)
    return out


def ellipticity_ratio_constant(Kfield: MatrixField, samples):
    """Measured (R0, Cscript) over unit-vector pairs drawn from samples.

    R0 is the smallest admissible ellipse parameter: with rho the sampled sup
    of |K^{-1}x.y| / (|sqrt(K^{-1}x.x)| |sqrt(K^{-1}y.y)|), the requirement
    rho <= (R0^2-1)/(2R0) is met with equality at R0 = rho + sqrt(rho^2+1).
    Cscript is the largest constant with |sqrt(K^{-1}y.y)| / |sqrt(K^{-1}x.x)|
    <= 1/Cscript for unit x, y.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, Kfield.n)
    norms = np.linalg.norm(samples, axis=1)
    units = samples[norms > 0] / norms[norms > 0, None]
    Ks = Kfield(units)
    rho = 0.0
    ratio_max = 0.0
    for jdx in range(units.shape[0]):
        Kinv = np.linalg.inv(Ks[jdx])
        Kinv = 0.5 * (Kinv + Kinv.T)
        gx = units @ Kinv
        ax = np.abs(np.sqrt(np.einsum("ij,ij->i", gx, units.astype(complex))))
        by = abs(np.sqrt(complex(units[jdx] @ Kinv @ units[jdx])))
        cross = np.abs(gx @ units[jdx])
        rho = max(rho, float(np.max(cross / (ax * by))))
        ratio_max = max(ratio_max, float(np.max(by / ax)))
    r0 = rho + math.sqrt(rho * rho + 1.0)
    return r0, 1.0 / ratio_max


def gamma_series_truncated(x, y, Kfield: MatrixField, J: int, constants=None):
    """Partial sum sum_{j<=J} P_j(x,y) with a geometric tail estimate.

    Requires |y| < (Cscript / (2 R0)) |x|; the tail estimate continues the
    last computed term magnitudes geometrically with ratio
    t = (R0/Cscript)(|y|/|x|) and a fixed safety factor.
    """
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    n = xv.shape[-1]
    if constants is None:
        base = np.concatenate([np.eye(n), -np.eye(n),
                               _unit_sphere_grid(n, 48),
                               xv.reshape(1, n) if np.linalg.norm(xv) else np.zeros((0, n)),
                               yv.reshape(1, n) if np.linalg.norm(yv) else np.zeros((0, n))])
        constants = ellipticity_ratio_constant(Kfield, base)
    r0, cscript = constants
    rx, ry = np.linalg.norm(xv), np.linalg.norm(yv)
    if rx == 0:
        raise DegeneratePoint("series evaluation at x = 0")
    if not ry < (cscript / (2.0 * r0)) * rx:
        raise RegionViolation(
            f"|y| = {ry:.3g} outside |y| < (C/2R0)|x| = {cscript / (2 * r0) * rx:.3g}"
        )
    K = Kfield(yv[None])[0]
    Kinv = 0.5 * (np.linalg.inv(K) + np.linalg.inv(K).T)
    nu = (n - 2) / 2.0
    evs = (GegenbauerEvaluator(nu, max(J, 1)),)
    pts = xv.reshape(1, n)
    terms = [complex(_pj_core(j, pts, yv, Kinv, evs)[0][0]) for j in range(J + 1)]
    value = sum(terms)
    t = (r0 / cscript) * (ry / rx)
    if ry == 0:
        return value, 0.0
    last = max(abs(terms[-1]), abs(terms[-2]) * t if J >= 1 else 0.0)
    tail = 4.0 * last * t / (1.0 - t)
    return value, float(tail)


def _unit_sphere_grid(n: int, count: int):
    """Deterministic unit directions (Fibonacci spiral for n = 3)."""
    if n != 3:
        rng = np.random.default_rng(0)
        v = rng.normal(size=(count, n))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    i = np.arange(count, dtype=float) + 0.5
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    ct = 1.0 - 2.0 * i / count
    st = np.sqrt(1.0 - ct * ct)
    return np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=1)


def dump_field_csv(path, points, values):
    """Write sampled complex field rows (coords..., re, im) for plotting."""
    points = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
    values = np.asarray(values, dtype=complex).reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])] + ["re", "im"])
        for p, v in zip(points, values):
            w.writerow([f"{c:.17g}" for c in p] + [f"{v.real:.17g}", f"{v.imag:.17g}"])

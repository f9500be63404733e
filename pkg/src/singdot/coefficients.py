"""Complex matrix/scalar coefficient fields and their admissibility checks.

A coefficient pair (K, q) drives the operator L u = -div(K grad u) + q u.
K is complex symmetric (not Hermitian) with commuting real and imaginary
parts, uniformly elliptic real part, and sign-definite (or identically zero)
imaginary part.  Fields are callables on point arrays of shape (..., n) and
carry enough metadata to round-trip through JSON.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .errors import (
    BoundViolation,
    CommutationViolation,
    ConfigParseError,
    EllipticityViolation,
    NonSymmetric,
)

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class StructuralConstants:
    """Dimension and the uniform bounds the estimates are phrased in.

    beta = 1 - n/p is the Morrey exponent of W^{1,p}, p > n; alpha is the
    ladder exponent, 0 < alpha < beta, defaulting to beta/sqrt(2) so that the
    s-schedule stays safely away from integers.
    """

    n: int = 3
    p: float = 4.0
    lam: float = 100.0       # |K| <= lam, Re K >= lam^{-1}, |Im K| >= lam^{-1}
    big_lam: float = 10.0    # |q| < big_lam
    energy: float = 100.0    # W^{1,p} budget E (recorded, surrogate-checked)
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("dimension n must be >= 3")
        if not self.p > self.n:
            raise ValueError("need p > n")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.beta / math.sqrt(2.0))
        if not (0.0 < self.alpha < self.beta):
            raise ValueError("need 0 < alpha < beta = 1 - n/p")

    @property
    def beta(self) -> float:
        return 1.0 - self.n / self.p


# ---------------------------------------------------------------------------
# scalar fields


class ScalarField:
    """Complex scalar coefficient on R^n."""

    kind = "scalar"

    def __call__(self, points):
        raise NotImplementedError

    def gradient(self, points, h: float = 1e-6):
        """Central-difference gradient; closed-form kinds override."""
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape, dtype=complex)
        for i in range(points.shape[-1]):
            dp = np.zeros(points.shape[-1])
            dp[i] = h
            out[..., i] = (self(points + dp) - self(points - dp)) / (2 * h)
        return out

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantScalar(ScalarField):
    value: complex
    kind = "constant"

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        return np.full(points.shape[:-1], complex(self.value))

    def gradient(self, points, h: float = 1e-6):
        points = np.asarray(points, dtype=float)
        return np.zeros(points.shape, dtype=complex)

    def to_config(self):
        return {"kind": "constant", "value": _c2pair(self.value)}


@dataclass(frozen=True)
class SineScalar(ScalarField):
    """const + amp * sin(wave . x + phase); smooth with analytic gradient."""

    const: complex
    amp: complex
    wave: tuple
    phase: float = 0.0
    kind = "sine"

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        w = np.asarray(self.wave, dtype=float)
        return self.const + self.amp * np.sin(points @ w + self.phase)

    def gradient(self, points, h: float = 1e-6):
        points = np.asarray(points, dtype=float)
        w = np.asarray(self.wave, dtype=float)
        c = self.amp * np.cos(points @ w + self.phase)
        return c[..., None] * w

    def to_config(self):
        return {
            "kind": "sine",
            "const": _c2pair(self.const),
            "amp": _c2pair(self.amp),
            "wave": list(self.wave),
            "phase": self.phase,
        }


@dataclass(frozen=True)
class GaussianBumpScalar(ScalarField):
    """base + amp * exp(-|x - center|^2 / width^2)."""

    base: complex
    amp: complex
    center: tuple
    width: float
    kind = "gaussian"

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        d = points - np.asarray(self.center, dtype=float)
        r2 = np.sum(d * d, axis=-1)
        return self.base + self.amp * np.exp(-r2 / self.width**2)

    def gradient(self, points, h: float = 1e-6):
        points = np.asarray(points, dtype=float)
        d = points - np.asarray(self.center, dtype=float)
        r2 = np.sum(d * d, axis=-1)
        g = self.amp * np.exp(-r2 / self.width**2) * (-2.0 / self.width**2)
        return g[..., None] * d

    def to_config(self):
        return {
            "kind": "gaussian",
            "base": _c2pair(self.base),
            "amp": _c2pair(self.amp),
            "center": list(self.center),
            "width": self.width,
        }


# ---------------------------------------------------------------------------
# matrix fields


class MatrixField:
    """Complex symmetric matrix coefficient on R^n."""

    kind = "matrix"
    n = 3

    def __call__(self, points):
        """Values of shape points.shape[:-1] + (n, n)."""
        raise NotImplementedError

    def jacobian(self, points, h: float = 1e-6):
        """d_i K_{jk} of shape (..., n, n, n), first axis the derivative."""
        points = np.asarray(points, dtype=float)
        n = points.shape[-1]
        out = np.zeros(points.shape[:-1] + (n, n, n), dtype=complex)
        for i in range(n):
            dp = np.zeros(n)
            dp[i] = h
            out[..., i, :, :] = (self(points + dp) - self(points - dp)) / (2 * h)
        return out

    @property
    def is_constant(self) -> bool:
        return False

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantMatrix(MatrixField):
    matrix: np.ndarray
    kind = "constant-matrix"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "n", m.shape[0])

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        return np.broadcast_to(self.matrix, shape + self.matrix.shape).copy()

    def jacobian(self, points, h: float = 1e-6):
        points = np.asarray(points, dtype=float)
        n = self.matrix.shape[0]
        return np.zeros(points.shape[:-1] + (n, n, n), dtype=complex)

    @property
    def is_constant(self):
        return True

    def to_config(self):
        return {"kind": "constant-matrix", "entries": _cmat2pairs(self.matrix)}


@dataclass(frozen=True)
class ScalarTimesMatrix(MatrixField):
    """K(x) = profile(x) * M0 with M0 fixed complex symmetric.

    With a real-valued profile the commutation and sign structure of M0 is
    inherited pointwise.
    """

    profile: ScalarField
    matrix: np.ndarray
    kind = "scalar-times-matrix"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "n", m.shape[0])

    def __call__(self, points):
        c = self.profile(points)
        return c[..., None, None] * self.matrix

    def jacobian(self, points, h: float = 1e-6):
        g = self.profile.gradient(points)
        return g[..., :, None, None] * self.matrix

    def to_config(self):
        return {
            "kind": "scalar-times-matrix",
            "profile": self.profile.to_config(),
            "entries": _cmat2pairs(self.matrix),
        }


@dataclass(frozen=True)
class GridMatrixField(MatrixField):
    """Matrix field sampled on a uniform grid over a box; trilinear between nodes."""

    values: np.ndarray        # (g0, g1, g2, n, n) complex
    bounds: tuple             # ((lo, hi),) * n
    kind = "grid-matrix"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "n", v.shape[-1])

    @property
    def spacing(self):
        dims = self.values.shape[:3]
        return tuple(
            (hi - lo) / (d - 1) for (lo, hi), d in zip(self.bounds, dims)
        )

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, 3)
        dims = self.values.shape[:3]
        lo = np.array([b[0] for b in self.bounds])
        sp = np.array(self.spacing)
        t = np.clip((flat - lo) / sp, 0.0, np.array(dims) - 1.000001)
        i0 = np.floor(t).astype(int)
        f = t - i0
        out = np.zeros((flat.shape[0], self.n, self.n), dtype=complex)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    out += w[:, None, None] * self.values[
                        i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    ]
        return out.reshape(points.shape[:-1] + (self.n, self.n))

    def to_config(self):
        return {
            "kind": "grid-matrix",
            "dims": list(self.values.shape[:3]),
            "bounds": [list(b) for b in self.bounds],
            "spacing": list(self.spacing),
            "entries": _cmat2pairs(self.values.reshape(-1)),  # row-major
        }


# ---------------------------------------------------------------------------
# JSON round-trip


def _c2pair(z):
    z = complex(z)
    return [z.real, z.imag]


def _pair2c(p):
    return complex(p[0], p[1])


def _cmat2pairs(m):
    flat = np.asarray(m, dtype=complex).reshape(-1)
    return [[float(z.real), float(z.imag)] for z in flat]


def scalar_from_config(cfg: dict) -> ScalarField:
    kind = cfg.get("kind")
    if kind == "constant":
        return ConstantScalar(_pair2c(cfg["value"]))
    if kind == "sine":
        return SineScalar(
            _pair2c(cfg["const"]), _pair2c(cfg["amp"]),
            tuple(cfg["wave"]), cfg.get("phase", 0.0),
        )
    if kind == "gaussian":
        return GaussianBumpScalar(
            _pair2c(cfg["base"]), _pair2c(cfg["amp"]),
            tuple(cfg["center"]), cfg["width"],
        )
    raise ConfigParseError(f"unknown scalar field kind {kind!r}")


def matrix_from_config(cfg: dict) -> MatrixField:
    kind = cfg.get("kind")
    if kind == "constant-matrix":
        entries = np.array([_pair2c(p) for p in cfg["entries"]])
        n = int(round(math.sqrt(entries.size)))
        return ConstantMatrix(entries.reshape(n, n))
    if kind == "scalar-times-matrix":
        entries = np.array([_pair2c(p) for p in cfg["entries"]])
        n = int(round(math.sqrt(entries.size)))
        return ScalarTimesMatrix(
            scalar_from_config(cfg["profile"]), entries.reshape(n, n)
        )
    if kind == "grid-matrix":
        dims = cfg["dims"]
        entries = np.array([_pair2c(p) for p in cfg["entries"]])
        n = int(round(math.sqrt(entries.size / np.prod(dims))))
        values = entries.reshape(tuple(dims) + (n, n))
        return GridMatrixField(values, tuple(tuple(b) for b in cfg["bounds"]))
    if kind == "dot-formula":
        # resolved lazily to avoid an import cycle
        from .dot import optical_matrix_from_config

        return optical_matrix_from_config(cfg)
    raise ConfigParseError(f"unknown matrix field kind {kind!r}")


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_value: float
    worst_point: Optional[list]
    tolerance: float

    def to_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "worst_value": float(self.worst_value),
            "worst_point": self.worst_point,
            "tolerance": float(self.tolerance),
        }


@dataclass
class ValidationReport:
    checks: list
    fitted_lambda: float
    real_mode: bool
    imag_sign: int            # +1, -1, or 0 in real mode
    surrogate_w1p: float
    passed: bool = dc_field(init=False)

    def __post_init__(self):
        self.passed = all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "fitted_lambda": float(self.fitted_lambda),
            "real_mode": bool(self.real_mode),
            "imag_sign": int(self.imag_sign),
            "surrogate_w1p": float(self.surrogate_w1p),
            "checks": [c.to_dict() for c in self.checks],
        }


def validate_coefficients(
    Kfield: MatrixField,
    qfield: ScalarField,
    consts: StructuralConstants,
    points,
    declared_lambda: Optional[float] = None,
) -> ValidationReport:
    """Check (K, q) against the admissibility assumptions at sample points.

    With declared_lambda=None the smallest constant satisfying the magnitude,
    ellipticity, and definiteness requirements is fitted and reported; the
    bound checks then pass by construction unless the structure itself fails
    (asymmetry, indefinite imaginary part, non-commuting parts, |q| >= Lambda).
    """
    points = np.asarray(points, dtype=float).reshape(-1, consts.n)
    K = Kfield(points)
    q = qfield(points)
    KR, KI = K.real, K.imag

    checks = []

    # symmetry
    asym = np.max(np.abs(K - np.swapaxes(K, -1, -2)), axis=(-1, -2))
    scale = np.maximum(np.max(np.abs(K), axis=(-1, -2)), 1e-300)
    rel = asym / scale
    i = int(np.argmax(rel))
    checks.append(CheckResult("symmetry", bool(np.max(rel) <= 1e-10),
                              float(np.max(rel)), points[i].tolist(), 1e-10))

    # commutation of real and imaginary parts
    comm = KR @ KI - KI @ KR
    cnorm = np.max(np.abs(comm), axis=(-1, -2)) / np.maximum(scale**2, 1e-300)
    i = int(np.argmax(cnorm))
    checks.append(CheckResult("commutation", bool(np.max(cnorm) <= 1e-10),
                              float(np.max(cnorm)), points[i].tolist(), 1e-10))

    # spectra of the symmetrized parts
    KRs = 0.5 * (KR + np.swapaxes(KR, -1, -2))
    KIs = 0.5 * (KI + np.swapaxes(KI, -1, -2))
    eig_R = np.linalg.eigvalsh(KRs)
    eig_I = np.linalg.eigvalsh(KIs)
    opnorm = np.linalg.norm(K, ord=2, axis=(-1, -2))

    min_eig_R = float(np.min(eig_R))
    max_norm = float(np.max(opnorm))

    imax_abs = np.max(np.abs(KI), axis=(-1, -2))
    real_mode = bool(np.max(imax_abs) <= 1e-14 * max(1.0, max_norm))
    if real_mode:
        imag_sign = 0
        definite_ok = True
        min_abs_eig_I = math.inf
    else:
        all_pos = bool(np.all(eig_I > 0))
        all_neg = bool(np.all(eig_I < 0))
        definite_ok = all_pos or all_neg
        imag_sign = 1 if all_pos else (-1 if all_neg else 0)
        min_abs_eig_I = float(np.min(np.abs(eig_I))) if definite_ok else 0.0

    # fitted lambda: the smallest constant making (2)-(4) hold
    fit_parts = [max_norm]
    if min_eig_R > 0:
        fit_parts.append(1.0 / min_eig_R)
    else:
        fit_parts.append(math.inf)
    if not real_mode and definite_ok and min_abs_eig_I > 0:
        fit_parts.append(1.0 / min_abs_eig_I)
    fitted_lambda = float(max(fit_parts))

    lam = declared_lambda if declared_lambda is not None else fitted_lambda
    lam = float(lam) * (1.0 + 1e-12)

    i = int(np.argmax(opnorm))
    checks.append(CheckResult("magnitude |K| <= lambda", bool(max_norm <= lam),
                              max_norm, points[i].tolist(), lam))

    i = int(np.argmin(np.min(eig_R, axis=-1)))
    ok = min_eig_R >= 1.0 / lam if math.isfinite(lam) else False
    checks.append(CheckResult("real-part ellipticity", bool(ok and min_eig_R > 0),
                              min_eig_R, points[i].tolist(), 1.0 / lam))

    if real_mode:
        checks.append(CheckResult("imag-part definiteness (real mode)", True,
                                  0.0, None, 0.0))
    else:
        ok = definite_ok and (min_abs_eig_I >= 1.0 / lam)
        i = int(np.argmin(np.min(np.abs(eig_I), axis=-1)))
        checks.append(CheckResult("imag-part definiteness", bool(ok),
                                  min_abs_eig_I, points[i].tolist(), 1.0 / lam))

    qa = np.abs(q)
    i = int(np.argmax(qa))
    checks.append(CheckResult("q bound |q| < Lambda", bool(np.max(qa) < consts.big_lam),
                              float(np.max(qa)), points[i].tolist(), consts.big_lam))

    # W^{1,p} surrogate: sampled (mean |K|^p + mean |DK|^p)^{1/p}, reported vs E
    dK = Kfield.jacobian(points)
    dnorm = np.sqrt(np.sum(np.abs(dK) ** 2, axis=(-1, -2, -3)))
    surrogate = float(
        (np.mean(opnorm**consts.p) + np.mean(dnorm**consts.p)) ** (1.0 / consts.p)
    )
    checks.append(CheckResult("W1p surrogate <= E", bool(surrogate <= consts.energy),
                              surrogate, None, consts.energy))

    return ValidationReport(
        checks=checks,
        fitted_lambda=fitted_lambda,
        real_mode=real_mode,
        imag_sign=imag_sign,
        surrogate_w1p=surrogate,
    )


def ensure_admissible(report: ValidationReport):
    """Raise the typed error of the first failing check."""
    mapping = {
        "symmetry": NonSymmetric,
        "commutation": CommutationViolation,
        "real-part ellipticity": EllipticityViolation,
        "imag-part definiteness": EllipticityViolation,
    }
    for c in report.checks:
        if not c.passed:
            exc = mapping.get(c.name, BoundViolation)
            raise exc(f"{c.name}: worst {c.worst_value:.6g} at {c.worst_point}")


# ---------------------------------------------------------------------------
# block embedding


def block_embed(K: np.ndarray) -> np.ndarray:
    """Real 2n x 2n embedding [[K_R, -K_I], [K_I, K_R]] of complex symmetric K."""
    K = np.asarray(K, dtype=complex)
    KR, KI = K.real, K.imag
    top = np.concatenate([KR, -KI], axis=-1)
    bot = np.concatenate([KI, KR], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def block_embed_scalar(q: complex) -> np.ndarray:
    """2 x 2 real embedding [[q_R, -q_I], [q_I, q_R]]."""
    q = complex(q)
    return np.array([[q.real, -q.imag], [q.imag, q.real]])


def block_quadratic_identity_gap(K: np.ndarray, xi: np.ndarray) -> float:
    """| kappa xi . xi - (K_R xi1.xi1 + K_R xi2.xi2) | for xi = (xi1, xi2).

    Zero for symmetric K_I: the skew pairings of the off-diagonal blocks cancel.
    """
    K = np.asarray(K, dtype=complex)
    n = K.shape[0]
    kappa = block_embed(K)
    xi = np.asarray(xi, dtype=float)
    lhs = xi @ kappa @ xi
    xi1, xi2 = xi[:n], xi[n:]
    rhs = xi1 @ K.real @ xi1 + xi2 @ K.real @ xi2
    return float(abs(lhs - rhs))


def simultaneous_diagonalization(K: np.ndarray):
    """Real orthogonal O and complex eigenvalues d with K = O diag(d) O^T.

    Valid for complex symmetric K whose real and imaginary parts commute:
    they share a real orthogonal eigenbasis.  Degenerate Re-K eigenspaces are
    resolved by diagonalizing Im K inside each block.
    """
    K = np.asarray(K, dtype=complex)
    KR = 0.5 * (K.real + K.real.T)
    KI = 0.5 * (K.imag + K.imag.T)
    wR, O = np.linalg.eigh(KR)
    # split Im K inside (nearly) degenerate Re-K eigenspaces
    i = 0
    n = K.shape[0]
    scale = max(np.max(np.abs(wR)), 1.0)
    while i < n:
        j = i + 1
        while j < n and abs(wR[j] - wR[i]) <= 1e-10 * scale:
            j += 1
        if j - i > 1:
            block = O[:, i:j]
            sub = block.T @ KI @ block
            _, V = np.linalg.eigh(0.5 * (sub + sub.T))
            O[:, i:j] = block @ V
        i = j
    d = np.einsum("ji,jk,ki->i", O, K, O)
    return O, d


def principal_sqrt_matrix(K: np.ndarray) -> np.ndarray:
    """Complex symmetric J with J J = K, via principal roots of the eigenvalues."""
    O, d = simultaneous_diagonalization(K)
    return (O * np.sqrt(d.astype(complex))) @ O.T


def sqrt_det(K: np.ndarray) -> complex:
    """Product of principal square roots of the eigenvalues of K.

    This is the analytic continuation of sqrt(det) from the real SPD case:
    each eigenvalue stays in the right half-plane, so no branch is crossed.
    """
    _, d = simultaneous_diagonalization(K)
    return complex(np.prod(np.sqrt(d.astype(complex))))

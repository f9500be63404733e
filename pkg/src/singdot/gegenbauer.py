"""Gegenbauer polynomials C_m^nu on the complex plane.

Evaluation uses the three-term recurrence

    m C_m^nu(z) = 2 z (m + nu - 1) C_{m-1}^nu(z) - (m + 2 nu - 2) C_{m-2}^nu(z),

with C_0 = 1 and C_1 = 2 nu z, which is stable for the moderate degrees used
here (growth along the recurrence is polynomial for |z| <= 1 and geometric,
not catastrophic, on the ellipse regions we evaluate on).  Derivatives come
from d/dz C_m^nu = 2 nu C_{m-1}^{nu+1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegreeOverflow, SampleOutOfRegion


@dataclass(frozen=True)
class GegenbauerEvaluator:
    """Recurrence evaluator for a fixed order nu > 0."""

    nu: float
    max_degree: int = 200
    # recurrence coefficients a_m, b_m for m >= 2, precomputed once
    _a: np.ndarray = field(init=False, repr=False)
    _b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.nu > 0):
            raise ValueError(f"order nu must be positive, got {self.nu}")
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        m = np.arange(2, self.max_degree + 1, dtype=float)
        a = 2.0 * (m + self.nu - 1.0) / m
        b = (m + 2.0 * self.nu - 2.0) / m
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite recurrence coefficients")
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)

    def eval(self, m: int, z):
        """C_m^nu(z) for complex array z."""
        return self.eval_many(m, z)[m]

    def eval_many(self, m: int, z):
        """All degrees 0..m at once; returns array of shape (m+1,) + z.shape."""
        if m < 0:
            raise ValueError("degree must be >= 0")
        if m > self.max_degree:
            raise DegreeOverflow(f"degree {m} > max_degree {self.max_degree}")
        z = np.asarray(z, dtype=complex)
        out = np.empty((m + 1,) + z.shape, dtype=complex)
        out[0] = 1.0
        if m >= 1:
            out[1] = 2.0 * self.nu * z
        for k in range(2, m + 1):
            out[k] = self._a[k - 2] * z * out[k - 1] - self._b[k - 2] * out[k - 2]
        return out

    def derivative(self, m: int, z):
        """d/dz C_m^nu(z) = 2 nu C_{m-1}^{nu+1}(z)."""
        z = np.asarray(z, dtype=complex)
        if m == 0:
            return np.zeros(z.shape, dtype=complex)
        raised = GegenbauerEvaluator(self.nu + 1.0, self.max_degree)
        return 2.0 * self.nu * raised.eval(m - 1, z)


def gegenbauer_eval(m: int, nu: float, z, max_degree: int = 200):
    """One-off evaluation of C_m^nu(z)."""
    return GegenbauerEvaluator(nu, max_degree).eval(m, z)


def gegenbauer_derivative(m: int, nu: float, z, max_degree: int = 200):
    """One-off evaluation of (C_m^nu)'(z)."""
    return GegenbauerEvaluator(nu, max_degree).derivative(m, z)


def generating_series(nu: float, z, t, terms: int):
    """Partial sum sum_{j<terms} C_j^nu(z) t^j of (1 - 2tz + t^2)^(-nu).

    Independent oracle for the recurrence: the closed form is
    (1 - 2 t z + t^2)^(-nu) for |t| small enough.
    """
    ev = GegenbauerEvaluator(nu, max(terms, 1))
    cs = ev.eval_many(terms - 1, np.asarray(z, dtype=complex))
    t = np.asarray(t, dtype=complex)
    powers = t ** np.arange(terms).reshape((terms,) + (1,) * np.ndim(z))
    return np.sum(cs * powers, axis=0)


def bound_check_real(n: int, j_max: int, num_points: int = 10_000) -> dict:
    """Measure sup over [-1, 1] of |C_j^{(n-2)/2}| / max(1, j^{n-3}).

    The real-interval bound |C_j^{(n-2)/2}(z)| <= C j^{n-3} holds on [-1, 1];
    this returns the measured constant per degree and its maximum.
    """
    nu = (n - 2) / 2.0
    z = np.linspace(-1.0, 1.0, num_points)
    ev = GegenbauerEvaluator(nu, max(j_max, 1))
    vals = ev.eval_many(j_max, z.astype(complex))
    ratios = np.empty(j_max + 1)
    for j in range(j_max + 1):
        scale = max(1.0, float(j) ** (n - 3)) if j > 0 else 1.0
        ratios[j] = np.max(np.abs(vals[j])) / scale
    return {
        "n": n,
        "j_max": j_max,
        "per_degree": ratios,
        "constant": float(np.max(ratios)),
    }


def bernstein_walsh_check(n: int, r0: float, z_samples, j_max: int) -> dict:
    """Measure sup |C_j^{(n-2)/2}(z)| / (r0^j max(1, j^{n-3})) over complex samples.

    Samples must lie in the disk |z| <= (r0^2 - 1) / (2 r0), the region where
    the extension bound is claimed; points outside raise SampleOutOfRegion.
    """
    if not r0 > 1.0:
        raise ValueError("r0 must exceed 1")
    z = np.asarray(z_samples, dtype=complex).ravel()
    radius = (r0 * r0 - 1.0) / (2.0 * r0)
    bad = np.abs(z) > radius * (1.0 + 1e-12)
    if np.any(bad):
        raise SampleOutOfRegion(
            f"{int(bad.sum())} samples outside |z| <= {radius:.6g}"
        )
    nu = (n - 2) / 2.0
    ev = GegenbauerEvaluator(nu, max(j_max, 1))
    vals = ev.eval_many(j_max, z)
    ratios = np.empty(j_max + 1)
    for j in range(j_max + 1):
        scale = r0**j * (max(1.0, float(j) ** (n - 3)) if j > 0 else 1.0)
        ratios[j] = np.max(np.abs(vals[j])) / scale
    return {
        "n": n,
        "r0": r0,
        "region_radius": radius,
        "j_max": j_max,
        "per_degree": ratios,
        "constant": float(np.max(ratios)),
    }

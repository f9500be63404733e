"""Spherical product grids, panel quadrature, and grid differentiation.

The workhorse layout is octave-dyadic radial panels (Gauss-Legendre nodes per
panel) crossed with a Gauss-Legendre grid in mu = cos(theta) and a uniform
periodic grid in phi.  Smooth fields are integrated, differentiated, and
interpolated on this product structure; radial behavior is resolved per
octave so power-law fields are handled uniformly across scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def gl_panel(order: int, a: float, b: float):
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def barycentric_weights(nodes):
    nodes = np.asarray(nodes, dtype=float)
    k = nodes.size
    w = np.ones(k)
    for i in range(k):
        d = nodes[i] - np.delete(nodes, i)
        w[i] = 1.0 / np.prod(d)
    return w


def diff_matrix(nodes):
    """Dense differentiation matrix for polynomial interpolation on nodes."""
    nodes = np.asarray(nodes, dtype=float)
    k = nodes.size
    w = barycentric_weights(nodes)
    D = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (nodes[i] - nodes[j])
    D[np.diag_indices(k)] = -np.sum(D, axis=1)
    return D


def periodic_diff_matrix(n: int):
    """Spectral differentiation on a uniform periodic grid of even size n."""
    if n % 2 != 0:
        raise ValueError("periodic grid size must be even")
    D = np.zeros((n, n))
    for off in range(1, n):
        c = 0.5 * (-1.0) ** off / math.tan(off * math.pi / n)
        for i in range(n):
            D[i, (i + off) % n] = c
    return -D


def interp_weights(nodes, x):
    """Barycentric interpolation weights from nodes to points x."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    bw = barycentric_weights(nodes)
    d = x[..., None] - nodes
    exact = np.isclose(d, 0.0, atol=1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = bw / d
    t = np.where(exact, 0.0, t)
    out = t / np.sum(t, axis=-1, keepdims=True)
    hit = np.any(exact, axis=-1)
    if np.any(hit):
        out[hit] = exact[hit].astype(float)
    return out


@dataclass(frozen=True)
class SphereGrid:
    """Gauss-Legendre in mu = cos(theta) crossed with uniform phi."""

    n_mu: int
    n_phi: int
    mu: np.ndarray = field(init=False)
    mu_weights: np.ndarray = field(init=False)
    phi: np.ndarray = field(init=False)
    dirs: np.ndarray = field(init=False)        # (n_mu*n_phi, 3)
    weights: np.ndarray = field(init=False)     # solid-angle weights, sum 4 pi

    def __post_init__(self):
        mu, wm = np.polynomial.legendre.leggauss(self.n_mu)
        phi = 2.0 * math.pi * np.arange(self.n_phi) / self.n_phi
        st = np.sqrt(1.0 - mu**2)
        d = np.empty((self.n_mu, self.n_phi, 3))
        d[..., 0] = st[:, None] * np.cos(phi)[None, :]
        d[..., 1] = st[:, None] * np.sin(phi)[None, :]
        d[..., 2] = mu[:, None]
        w = np.broadcast_to(
            wm[:, None] * (2.0 * math.pi / self.n_phi), (self.n_mu, self.n_phi)
        )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "mu_weights", wm)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "dirs", d.reshape(-1, 3))
        object.__setattr__(self, "weights", w.reshape(-1).copy())


@dataclass(frozen=True)
class RadialPanels:
    """Dyadic octave panels [R 2^{-(o+1)}, R 2^{-o}], GL nodes in log radius.

    Power-law fields are exponentials in t = log r, so interpolation and
    differentiation on the t-nodes stay accurate uniformly across octaves.
    Weights are for integrals dr (the log-space jacobian is folded in).
    """

    R: float
    octaves: int
    order: int
    radii: np.ndarray = field(init=False)        # descending panel order, flat
    weights: np.ndarray = field(init=False)
    log_radii: np.ndarray = field(init=False)
    panel_slices: tuple = field(init=False)
    panel_bounds: tuple = field(init=False)

    def __post_init__(self):
        rs, ws, ts, sl, bo = [], [], [], [], []
        pos = 0
        for o in range(self.octaves):
            b = self.R * 2.0 ** (-o)
            a = 0.5 * b
            t, wt = gl_panel(self.order, math.log(a), math.log(b))
            x = np.exp(t)
            # keep radii descending within the flat layout
            rs.append(x[::-1])
            ws.append((wt * x)[::-1])
            ts.append(t[::-1])
            sl.append(slice(pos, pos + self.order))
            bo.append((a, b))
            pos += self.order
        object.__setattr__(self, "radii", np.concatenate(rs))
        object.__setattr__(self, "weights", np.concatenate(ws))
        object.__setattr__(self, "log_radii", np.concatenate(ts))
        object.__setattr__(self, "panel_slices", tuple(sl))
        object.__setattr__(self, "panel_bounds", tuple(bo))

    def panel_of(self, r):
        """Index of the octave panel containing each radius (clipped)."""
        r = np.asarray(r, dtype=float)
        o = np.floor(np.log2(self.R / np.maximum(r, 1e-300)))
        return np.clip(o.astype(int), 0, self.octaves - 1)


def meridian_diff_pair(mu):
    """Theta-differentiation matrices on GL-mu nodes via great circles.

    A smooth field restricted to the meridian circle through the poles is a
    trigonometric polynomial in theta; the circle is sampled at theta_i on
    one meridian and -theta_i on the antipodal one.  Returns (D_same,
    D_anti) with d/dtheta f(theta_i) = D_same f(theta_j) + D_anti
    f_antipodal(theta_j).
    """
    mu = np.asarray(mu, dtype=float)
    k = mu.size
    theta = np.arccos(mu)
    t = np.concatenate([theta, -theta])
    # balanced basis for symmetric nodes: k even + k odd functions
    # 1, cos t, ..., cos((k-1)t), sin t, ..., sin(k t)
    V = np.empty((2 * k, 2 * k))
    Vd = np.empty((k, 2 * k))
    V[:, 0] = 1.0
    Vd[:, 0] = 0.0
    for m in range(1, k):
        V[:, m] = np.cos(m * t)
        Vd[:, m] = -m * np.sin(m * theta)
    for m in range(1, k + 1):
        V[:, k + m - 1] = np.sin(m * t)
        Vd[:, k + m - 1] = m * np.cos(m * theta)
    D = Vd @ np.linalg.inv(V)
    return D[:, :k], D[:, k:]


class ProductGrid:
    """Radial panels x sphere grid with quadrature, calculus, interpolation.

    Field values live in arrays of shape (n_r, n_mu, n_phi).
    """

    def __init__(self, R: float, octaves: int, radial_order: int,
                 n_mu: int, n_phi: int):
        self.radial = RadialPanels(R, octaves, radial_order)
        self.sphere = SphereGrid(n_mu, n_phi)
        self.R = R
        self.n_r = self.radial.radii.size
        self.n_mu = n_mu
        self.n_phi = n_phi
        self.shape = (self.n_r, n_mu, n_phi)
        r = self.radial.radii
        d = self.sphere.dirs.reshape(n_mu, n_phi, 3)
        self.points = (r[:, None, None, None] * d[None]).reshape(-1, 3)
        self.quad_weights = (
            r[:, None] ** 2 * self.radial.weights[:, None] * self.sphere.weights
        ).reshape(-1)
        # differentiation operators (radial in log coordinates)
        self._Dt = [diff_matrix(self.radial.log_radii[s])
                    for s in self.radial.panel_slices]
        self._Dth_same, self._Dth_anti = meridian_diff_pair(self.sphere.mu)
        self._Dphi = periodic_diff_matrix(n_phi)
        mu = self.sphere.mu
        st = np.sqrt(1.0 - mu**2)
        cphi, sphi = np.cos(self.sphere.phi), np.sin(self.sphere.phi)
        # unit vectors on the (mu, phi) grid
        self._rhat = d
        self._that = np.empty_like(d)   # theta-hat
        self._that[..., 0] = mu[:, None] * cphi[None, :]
        self._that[..., 1] = mu[:, None] * sphi[None, :]
        self._that[..., 2] = -st[:, None]
        self._phat = np.zeros_like(d)   # phi-hat
        self._phat[..., 0] = -sphi[None, :]
        self._phat[..., 1] = cphi[None, :]
        self._st = st

    def to_grid(self, flat):
        return np.asarray(flat).reshape(self.shape)

    def integrate(self, values):
        return np.sum(np.asarray(values).reshape(-1) * self.quad_weights)

    def radial_derivative(self, values):
        v = self.to_grid(values)
        out = np.empty_like(v)
        for D, s in zip(self._Dt, self.radial.panel_slices):
            out[s] = np.einsum("ab,bmp->amp", D.astype(v.dtype), v[s])
        out /= self.radial.radii[:, None, None]
        return out

    def gradient(self, values):
        """Cartesian gradient, shape (n_r, n_mu, n_phi, 3)."""
        v = self.to_grid(values)
        dr = self.radial_derivative(v)
        anti = np.roll(v, self.n_phi // 2, axis=2)
        dth = np.einsum("ab,rbp->rap", self._Dth_same.astype(v.dtype), v)
        dth += np.einsum("ab,rbp->rap", self._Dth_anti.astype(v.dtype), anti)
        dphi = np.einsum("ab,rmb->rma", self._Dphi.astype(v.dtype), v)
        r = self.radial.radii[:, None, None]
        st = self._st[None, :, None]
        g = (
            dr[..., None] * self._rhat[None]
            + (dth / r)[..., None] * self._that[None]
            + (dphi / (r * st))[..., None] * self._phat[None]
        )
        return g

    def hessian(self, values):
        """Cartesian Hessian (n_r, n_mu, n_phi, 3, 3), symmetrized."""
        g = self.gradient(values)
        H = np.empty(self.shape + (3, 3), dtype=g.dtype)
        for i in range(3):
            H[..., i, :] = self.gradient(g[..., i])
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def interpolation_data(self, pts, phi_stencil: int = 4):
        """Sparse tensor interpolation weights for points inside the shell.

        Returns (r_idx, r_w, mu_w, phi_idx, phi_w): per-point radial panel
        node indices and weights, full-mu weights, and periodic phi stencil.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        r = np.linalg.norm(pts, axis=1)
        r = np.clip(r, self.radial.radii[-1], self.radial.radii[0])
        mu = np.divide(pts[:, 2], r, out=np.zeros_like(r), where=r > 0)
        mu = np.clip(mu, -1.0, 1.0)
        phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * math.pi)

        pan = self.radial.panel_of(r)
        k = self.radial.order
        r_idx = pan[:, None] * k + np.arange(k)[None, :]
        r_w = np.empty((pts.shape[0], k))
        for p in np.unique(pan):
            m = pan == p
            r_w[m] = interp_weights(
                self.radial.log_radii[self.radial.panel_slices[p]], np.log(r[m])
            )
        mu_w = interp_weights(self.sphere.mu, mu)
        dphi = 2.0 * math.pi / self.n_phi
        j0 = np.floor(phi / dphi).astype(int)
        offs = np.arange(phi_stencil) - (phi_stencil // 2 - 1)
        phi_idx = (j0[:, None] + offs[None, :]) % self.n_phi
        base = (j0[:, None] + offs[None, :]) * dphi
        phi_w = interp_weights_nonuniform(base, phi)
        return r_idx, r_w, mu_w, phi_idx, phi_w

    def interpolate(self, values, pts):
        v = self.to_grid(values)
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        out = np.empty(pts.shape[0], dtype=complex)
        # chunked: the gather below holds k_r * n_mu * k_phi values per point
        for lo in range(0, pts.shape[0], 32768):
            out[lo:lo + 32768] = self._interp_chunk(v, pts[lo:lo + 32768])
        return out

    def _interp_chunk(self, v, pts):
        r_idx, r_w, mu_w, phi_idx, phi_w = self.interpolation_data(pts)
        # gather: v[r_idx, :, phi_idx] -> (npts, k_r, n_mu, k_phi)
        got = v[r_idx[:, :, None, None], np.arange(self.n_mu)[None, None, :, None],
                phi_idx[:, None, None, :]]
        return np.einsum("prmf,pr,pm,pf->p", got, r_w, mu_w, phi_w)


def interp_weights_nonuniform(node_rows, x):
    """Row-wise Lagrange weights: node_rows (N, k) nodes for each x (N,)."""
    node_rows = np.asarray(node_rows, dtype=float)
    x = np.asarray(x, dtype=float)
    N, k = node_rows.shape
    w = np.ones((N, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                w[:, i] *= (x - node_rows[:, j]) / (node_rows[:, i] - node_rows[:, j])
    return w


def smoothstep(t):
    """C^2 cutoff: 1 for t <= 0, 0 for t >= 1, quintic in between."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)

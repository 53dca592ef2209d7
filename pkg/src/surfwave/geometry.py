"""Flattening geometry: harmonic extension of the surface function, transform
coefficients, normals, curvature, and the surface / transformed differential
operators.

The moving domain bounded below by the rigid bottom x3 = -L3 and above by the
graph of eta is pulled back to the fixed slab by the map

    Phi(x) = (x1, x2, x3 + eta_bar(x) (1 + x3/L3)),

where eta_bar is the per-mode Poisson extension of eta, sampled exactly:
eta_bar-hat(n, x3) = eta-hat(n) exp(|2 pi nbar| x3) with nbar = (n1/L1, n2/L2).
Writing Ltilde = 1 + x3/L3, the derived coefficients are

    A = Ltilde d1 eta_bar,   B = Ltilde d2 eta_bar,
    J = 1 + eta_bar/L3 + Ltilde d3 eta_bar,   K = 1/J,

and the transform matrix has rows (1, 0, -A K), (0, 1, -B K), (0, 0, K), so
that (grad_A f)_i = Acal_ij dj f pulls back the physical gradient.  On the
surface, g = grad* eta, s = sqrt(1 + |g|^2), N = (-g, 1), nu = N / s, and the
tangential derivatives are

    d_{Gamma,1} = d1 - (g1/s^2) g . grad*,   d_{Gamma,2} = d2 - (g2/s^2) g . grad*,
    d_{Gamma,3} = (g . grad*)/s^2,

which satisfy grad_Gamma f . nu = 0 pointwise by construction.  The mean
curvature is H = div*(g / s).

Coefficient pipelines are evaluated pointwise without intermediate dealiasing,
so algebraic identities (J K = 1, |nu| = 1, grad_Gamma f . nu = 0, and the
boundary flux cancellations used by the mass accounting) hold to rounding
error; only assembled outputs that feed spectral solvers are dealiased by the
callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .discretization import Grid, _vals


class GeometryError(Exception):
    """Raised when the flattening map degenerates (J too small)."""


JACOBIAN_FLOOR = 1e-6


def poisson_extend(grid: Grid, f, derivative: int = 0) -> NDArray:
    """Per-mode Poisson extension of a surface field into the slab.

    Mode n extends as exp(|k_n| x3) (the n = 0 mode as a constant); with
    derivative = m the vertical factor is |k_n|^m exp(|k_n| x3), i.e. the
    exact m-th x3-derivative of the extension.
    """
    hat = grid.to_hat(_vals(f))
    profile = np.exp(grid.k_abs[:, :, None] * grid.x3[None, None, :])
    if derivative:
        profile = profile * grid.k_abs[:, :, None] ** derivative
    return grid.to_vals(hat[:, :, None] * profile)


@dataclass(frozen=True)
class GeometryCache:
    """All coefficients derived from one surface function eta."""

    grid: Grid
    eta: NDArray          # (N1, N2)
    g1: NDArray           # d1 eta
    g2: NDArray           # d2 eta
    sqrt_metric: NDArray  # s = sqrt(1 + |grad* eta|^2)
    N_vec: NDArray        # (3, N1, N2), (-g1, -g2, 1)
    nu: NDArray           # unit normal N / s
    H: NDArray            # mean curvature
    eta_bar: NDArray      # (N1, N2, Nz+1)
    A: NDArray
    B: NDArray
    J: NDArray
    K: NDArray
    Ltilde: NDArray       # (Nz+1,)
    min_J: float

    @cached_property
    def Acal(self) -> NDArray:
        """Dense transform matrix (3, 3, N1, N2, Nz+1); rows of grad_A."""
        g = self.grid
        M = np.zeros((3, 3) + g.shape_bulk)
        M[0, 0] = 1.0
        M[1, 1] = 1.0
        M[0, 2] = -self.A * self.K
        M[1, 2] = -self.B * self.K
        M[2, 2] = self.K
        return M

    def smallness(self) -> float:
        """max|J - 1| + max|A| + max|B|, the monitored small-slope gauge."""
        return float(
            np.max(np.abs(self.J - 1.0)) + np.max(np.abs(self.A)) + np.max(np.abs(self.B))
        )


def build_geometry(grid: Grid, eta, guard: float = JACOBIAN_FLOOR) -> GeometryCache:
    """Assemble the geometry cache; hard error if min J <= guard."""
    ev = _vals(eta)
    g1 = grid.dx1(ev)
    g2 = grid.dx2(ev)
    s = np.sqrt(1.0 + g1**2 + g2**2)
    N_vec = np.stack([-g1, -g2, np.ones_like(ev)])
    nu = N_vec / s

    eta_bar = poisson_extend(grid, ev)
    d1_bar = poisson_extend(grid, g1)
    d2_bar = poisson_extend(grid, g2)
    d3_bar = poisson_extend(grid, ev, derivative=1)
    Ltilde = 1.0 + grid.x3 / grid.L3
    A = Ltilde[None, None, :] * d1_bar
    B = Ltilde[None, None, :] * d2_bar
    J = 1.0 + eta_bar / grid.L3 + Ltilde[None, None, :] * d3_bar
    min_J = float(np.min(J))
    if min_J <= guard:
        idx = np.unravel_index(int(np.argmin(J)), J.shape)
        raise GeometryError(
            f"flattening map degenerates: J = {min_J:.3e} <= {guard:.1e} "
            f"at node (i1, i2, j) = {idx}"
        )
    return GeometryCache(
        grid=grid,
        eta=ev,
        g1=g1,
        g2=g2,
        sqrt_metric=s,
        N_vec=N_vec,
        nu=nu,
        H=mean_curvature(grid, ev),
        eta_bar=eta_bar,
        A=A,
        B=B,
        J=J,
        K=1.0 / J,
        Ltilde=Ltilde,
        min_J=min_J,
    )


def mean_curvature(grid: Grid, eta) -> NDArray:
    """H = div*(grad* eta / sqrt(1 + |grad* eta|^2)), dealiased output."""
    ev = _vals(eta)
    g1 = grid.dx1(ev)
    g2 = grid.dx2(ev)
    s = np.sqrt(1.0 + g1**2 + g2**2)
    return grid.dealias(grid.dx1(g1 / s) + grid.dx2(g2 / s))


@dataclass(frozen=True)
class GeometryRates:
    """Time derivatives of the geometry induced by a surface velocity eta_t."""

    eta_t: NDArray        # (N1, N2)
    g1_t: NDArray
    g2_t: NDArray
    s_t: NDArray          # d_t sqrt_metric = (g . g_t)/s
    N_t: NDArray          # (3, N1, N2) = (-g1_t, -g2_t, 0)
    nu_t: NDArray
    H_t: NDArray
    eta_bar_t: NDArray    # (N1, N2, Nz+1)
    A_t: NDArray
    B_t: NDArray
    J_t: NDArray
    K_t: NDArray          # -K^2 J_t


def build_geometry_rates(grid: Grid, cache: GeometryCache, eta_t) -> GeometryRates:
    et = _vals(eta_t)
    g1_t = grid.dx1(et)
    g2_t = grid.dx2(et)
    s = cache.sqrt_metric
    s_t = (cache.g1 * g1_t + cache.g2 * g2_t) / s
    N_t = np.stack([-g1_t, -g2_t, np.zeros_like(et)])
    nu_t = N_t / s - cache.N_vec * (s_t / s**2)
    # d_t of div*(g/s) with d_t(g_i/s) = g_i_t/s - g_i s_t / s^2
    w1 = g1_t / s - cache.g1 * s_t / s**2
    w2 = g2_t / s - cache.g2 * s_t / s**2
    H_t = grid.dealias(grid.dx1(w1) + grid.dx2(w2))

    eta_bar_t = poisson_extend(grid, et)
    d1_bar_t = poisson_extend(grid, g1_t)
    d2_bar_t = poisson_extend(grid, g2_t)
    d3_bar_t = poisson_extend(grid, et, derivative=1)
    Lt = cache.Ltilde[None, None, :]
    A_t = Lt * d1_bar_t
    B_t = Lt * d2_bar_t
    J_t = eta_bar_t / grid.L3 + Lt * d3_bar_t
    K_t = -cache.K**2 * J_t
    return GeometryRates(
        eta_t=et,
        g1_t=g1_t,
        g2_t=g2_t,
        s_t=s_t,
        N_t=N_t,
        nu_t=nu_t,
        H_t=H_t,
        eta_bar_t=eta_bar_t,
        A_t=A_t,
        B_t=B_t,
        J_t=J_t,
        K_t=K_t,
    )


# ----- surface differential operators -----------------------------------------


def surface_gradient(grid: Grid, cache: GeometryCache, f) -> NDArray:
    """(d_{Gamma,1} f, d_{Gamma,2} f, d_{Gamma,3} f), tangent to the surface."""
    fv = _vals(f)
    d1 = grid.dx1(fv)
    d2 = grid.dx2(fv)
    s2 = cache.sqrt_metric**2
    gdf = (cache.g1 * d1 + cache.g2 * d2) / s2
    return np.stack([d1 - cache.g1 * gdf, d2 - cache.g2 * gdf, gdf])


def surface_divergence(grid: Grid, cache: GeometryCache, X) -> NDArray:
    """sum_i d_{Gamma,i} X_i for a 3-vector of surface fields."""
    Xv = _vals(X)
    return (
        surface_gradient(grid, cache, Xv[0])[0]
        + surface_gradient(grid, cache, Xv[1])[1]
        + surface_gradient(grid, cache, Xv[2])[2]
    )


def surface_laplacian(grid: Grid, cache: GeometryCache, f) -> NDArray:
    """Laplace-Beltrami as the composition div_Gamma(grad_Gamma f)."""
    return surface_divergence(grid, cache, surface_gradient(grid, cache, f))


def surface_laplacian_weighted(grid: Grid, cache: GeometryCache, f) -> NDArray:
    """(Delta_Gamma f) * sqrt_metric in divergence form:

        div*( s grad* f - g (g . grad* f) / s ),

    the form used by the conservative surface transport update: its surface
    integral vanishes exactly in the discretization.
    """
    fv = _vals(f)
    d1 = grid.dx1(fv)
    d2 = grid.dx2(fv)
    s = cache.sqrt_metric
    gdf = cache.g1 * d1 + cache.g2 * d2
    w1 = s * d1 - cache.g1 * gdf / s
    w2 = s * d2 - cache.g2 * gdf / s
    return grid.dx1(w1) + grid.dx2(w2)


# ----- transformed (flattened) operators ---------------------------------------


def grad_A(grid: Grid, cache: GeometryCache, f) -> NDArray:
    """(grad_A f)_i = Acal_ij dj f for a bulk scalar; shape (3, N1, N2, Nz+1)."""
    fv = _vals(f)
    d3 = grid.dx3(fv)
    kd3 = cache.K * d3
    return np.stack(
        [grid.dx1(fv) - cache.A * kd3, grid.dx2(fv) - cache.B * kd3, kd3]
    )


def div_A(grid: Grid, cache: GeometryCache, X) -> NDArray:
    """Acal_jk dk X_j for a bulk 3-vector."""
    Xv = _vals(X)
    return (
        grid.dx1(Xv[0])
        - cache.A * cache.K * grid.dx3(Xv[0])
        + grid.dx2(Xv[1])
        - cache.B * cache.K * grid.dx3(Xv[1])
        + cache.K * grid.dx3(Xv[2])
    )


def lap_A(grid: Grid, cache: GeometryCache, f) -> NDArray:
    """Delta_A = div_A grad_A."""
    return div_A(grid, cache, grad_A(grid, cache, f))


def sym_grad_A(grid: Grid, cache: GeometryCache, u) -> NDArray:
    """(D_A u)_ij = Acal_ik dk u_j + Acal_jk dk u_i; shape (3, 3, ...)."""
    uv = _vals(u)
    G = np.stack([grad_A(grid, cache, uv[i]) for i in range(3)])  # G[j][i] = (grad_A u_j)_i
    D = np.empty((3, 3) + uv.shape[1:])
    for i in range(3):
        for j in range(3):
            D[i, j] = G[j][i] + G[i][j]
    return D


def stress_A(grid: Grid, cache: GeometryCache, p, u) -> NDArray:
    """S_A(p, u) = p I - D_A u."""
    pv = _vals(p)
    S = -sym_grad_A(grid, cache, u)
    for i in range(3):
        S[i, i] += pv
    return S


def div_tensor_A(grid: Grid, cache: GeometryCache, T) -> NDArray:
    """(div_A T)_i = Acal_jk dk T_ij, row-wise transformed divergence."""
    Tv = _vals(T)
    return np.stack([div_A(grid, cache, Tv[i]) for i in range(3)])


# ----- integration-by-parts diagnostics ----------------------------------------


def check_ibp_identities(grid: Grid, cache: GeometryCache, f, g, X) -> dict:
    """Residuals of the weighted surface integration-by-parts identities.

    scalar[i]:  int (d_{Gamma,i} f) g s + int (f d_{Gamma,i} g + f g nu_i H) s
    divergence: int (div_Gamma X) s + int (X . nu) H s

    Both vanish in the continuum; discrete residuals decay spectrally.
    """
    s = cache.sqrt_metric
    fv = _vals(f)
    gv = _vals(g)
    Xv = _vals(X)
    gf = surface_gradient(grid, cache, fv)
    gg = surface_gradient(grid, cache, gv)
    scalar = []
    for i in range(3):
        lhs = grid.int_surface(gf[i] * gv * s)
        rhs = -grid.int_surface((fv * gg[i] + fv * gv * cache.nu[i] * cache.H) * s)
        scalar.append(abs(lhs - rhs))
    div_lhs = grid.int_surface(surface_divergence(grid, cache, Xv) * s)
    div_rhs = -grid.int_surface(
        (Xv[0] * cache.nu[0] + Xv[1] * cache.nu[1] + Xv[2] * cache.nu[2]) * cache.H * s
    )
    return {"scalar": tuple(scalar), "divergence": abs(div_lhs - div_rhs)}

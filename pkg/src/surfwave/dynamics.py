"""Time integration of the perturbation system about the surfactant equilibrum.

The state holds the perturbation fields (u, p, eta, c, b) on the flattened
slab.  Evolution splits linear/stiff from nonlinear/geometric parts:

    E dY/dt = A Y + G(Y),

where (E, A) are the per-horizontal-mode matrices owned by the analysis
module and G collects every geometric and nonlinear remainder (G^1 momentum,
G^2 divergence, G^3 stress, G^4 kinematic, G^5 surface transport, G^6 bulk
transport, G^7 Robin exchange).  The scheme is an IMEX one-step method:
Crank-Nicolson (theta-weighted) on the linear rows with a Heun-style
predictor/corrector average of G on the dynamic rows; algebraic rows carry
the end-of-step forcing.  Surfactant transport rates are computed in
conservative (flux) form and shared verbatim between the forcing assembly and
the diagnostic rate evaluation, so the integrator and the monitors cannot
drift apart; with the spectral quadratures the combined surfactant mass is
conserved to rounding, and a single common rescale factor removes the
remaining drift each step.

Time derivatives of fields are never formed by finite differences: the
diagnostic rates (including the pressure, which is a slaved variable of the
velocity DAE) come from an instantaneous per-mode solve.
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass, replace as dc_replace
from functools import cached_property, lru_cache

import numpy as np
from numpy.typing import NDArray

from . import analysis
from .discretization import Grid, sobolev_norm_surface
from .geometry import (
    GeometryCache,
    GeometryError,
    GeometryRates,
    build_geometry,
    build_geometry_rates,
    div_A,
    grad_A,
    poisson_extend,
    stress_A,
    surface_divergence,
    surface_gradient,
    surface_laplacian_weighted,
    sym_grad_A,
)
from .model import EquilibriumState, IsothermModel

CHECKPOINT_MAGIC = b"SWSF1"
CHECKPOINT_VERSION = 1


class DynamicsError(Exception):
    """Raised on malformed states, incompatible data, or solver failures."""


class GuardError(DynamicsError):
    """Raised when a runtime validity monitor trips (map degeneracy,
    positivity loss, stability heuristic, or non-finite fields)."""


# ----- state and scheme containers --------------------------------------------------


@dataclass(frozen=True)
class FlowState:
    """Perturbation state at one instant.

    u: (3, N1, N2, Nz+1) velocity, p: (N1, N2, Nz+1) pressure, eta: (N1, N2)
    interface height, c: (N1, N2) surface concentration perturbation,
    b: (N1, N2, Nz+1) bulk concentration perturbation.  Full concentrations
    are c0 + c and b0 + b.  The interface average is zero by construction.
    """

    grid: Grid
    eq: EquilibriumState
    model: IsothermModel
    beta: float
    gamma: float
    t: float
    u: NDArray
    p: NDArray
    eta: NDArray
    c: NDArray
    b: NDArray

    def __post_init__(self):
        g = self.grid
        if self.u.shape != (3,) + g.shape_bulk:
            raise DynamicsError(f"u shape {self.u.shape} != {(3,) + g.shape_bulk}")
        for name, arr, shape in (
            ("p", self.p, g.shape_bulk),
            ("eta", self.eta, g.shape_surface),
            ("c", self.c, g.shape_surface),
            ("b", self.b, g.shape_bulk),
        ):
            if arr.shape != shape:
                raise DynamicsError(f"{name} shape {arr.shape} != {shape}")

    @cached_property
    def geometry(self) -> GeometryCache:
        return build_geometry(self.grid, self.eta)

    @property
    def c_tilde(self) -> NDArray:
        return self.eq.c0 + self.c

    @property
    def b_tilde(self) -> NDArray:
        return self.eq.b0 + self.b

    def with_fields(self, **changes) -> "FlowState":
        return dc_replace(self, **changes)


@dataclass(frozen=True)
class ForcingBundle:
    """Nonlinear/geometric forcings, one slot per equation block.

    Shapes: G1 (3, N1, N2, Nz+1), G2 (N1, N2, Nz+1), G3 (3, N1, N2),
    G4/G5/G7 (N1, N2), G6 (N1, N2, Nz+1).  assemble_F returns the
    time-differentiated bundle in the same container (F^i in the G^i slot).
    All components vanish identically at zero perturbation and scale
    quadratically with its amplitude.
    """

    G1: NDArray
    G2: NDArray
    G3: NDArray
    G4: NDArray
    G5: NDArray
    G6: NDArray
    G7: NDArray


@dataclass(frozen=True)
class StateRates:
    """Instantaneous time derivatives (and the slaved pressure diagnostic)."""

    u_t: NDArray
    p: NDArray
    eta_t: NDArray
    c_t: NDArray
    b_t: NDArray


@dataclass(frozen=True)
class SchemeConfig:
    dt: float
    t_end: float
    mode: str = "nonlinear"
    implicit_weight: float = 0.5
    output_interval: float = 0.0
    checkpoint_interval: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise DynamicsError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise DynamicsError(f"t_end must be nonnegative, got {self.t_end}")
        if self.mode not in ("nonlinear", "linear"):
            raise DynamicsError(f"mode must be nonlinear|linear, got {self.mode!r}")
        if not 0.5 <= self.implicit_weight <= 1.0:
            raise DynamicsError(
                f"implicit_weight must lie in [1/2, 1], got {self.implicit_weight}"
            )


@dataclass
class RunSummary:
    steps: int
    t_final: float
    termination: str
    wall_seconds: float
    reports_emitted: int
    checkpoints_emitted: int
    guard_log: tuple[str, ...] = ()


# ----- shared rate kernels -----------------------------------------------------------


def kinematic_rate(state: FlowState, cache: GeometryCache) -> NDArray:
    """d_t eta = u . N at the surface, N = (-d1 eta, -d2 eta, 1)."""
    ut = state.u[:, :, :, 0]
    return -cache.g1 * ut[0] - cache.g2 * ut[1] + ut[2]


def surfactant_mass(state: FlowState, cache: GeometryCache | None = None):
    """(surface mass, bulk mass) of the full concentrations."""
    if cache is None:
        cache = state.geometry
    g = state.grid
    ms = g.int_surface(state.c_tilde * cache.sqrt_metric)
    mb = g.int_bulk(cache.J * state.b_tilde)
    return ms, mb


def _surfactant_rates(
    state: FlowState, cache: GeometryCache, grates: GeometryRates
) -> tuple[NDArray, NDArray]:
    """Conservative-form transport rates (d_t c, d_t b).

    Surface:  d_t(ctilde s) = -div*(ctilde s u*) + gamma div*(s P grad* ctilde)
                              - beta grad_A b . N,
    with P the tangential projector; the diffusive term is the weighted
    surface Laplacian in divergence form.  Bulk:
        d_t(J btilde) = -div(J btilde A^T (u - w)) + beta div(J A^T grad_A b),
    with w the domain velocity (0, 0, d_t etabar Ltilde).  Both divergences
    telescope under the quadrature, so the combined mass rate reduces to the
    (identical) top fluxes and conserves mass to rounding.
    """
    g = state.grid
    beta, gamma = state.beta, state.gamma
    ct = state.c_tilde
    bt = state.b_tilde
    u1, u2, u3 = state.u
    s = cache.sqrt_metric
    A, B, J, K, Lt = cache.A, cache.B, cache.J, cache.K, cache.Ltilde[None, None, :]

    gb = grad_A(g, cache, state.b)

    # surface update
    adv = g.dx1(ct * s * u1[:, :, 0]) + g.dx2(ct * s * u2[:, :, 0])
    diff = gamma * surface_laplacian_weighted(g, cache, ct)
    A_top, B_top = A[:, :, 0], B[:, :, 0]
    flux_top = beta * (
        -A_top * gb[0][:, :, 0] - B_top * gb[1][:, :, 0] + gb[2][:, :, 0]
    )
    c_t = (-adv + diff - flux_top - ct * grates.s_t) / s

    # bulk update
    w3 = grates.eta_bar_t * Lt
    F1 = J * bt * u1
    F2 = J * bt * u2
    F3 = bt * (-A * u1 - B * u2 + (u3 - w3))
    D1 = beta * J * gb[0]
    D2 = beta * J * gb[1]
    D3 = beta * (-A * gb[0] - B * gb[1] + gb[2])
    raw = (
        g.dx1(D1 - F1)
        + g.dx2(D2 - F2)
        + g.dx3(D3 - F3)
    )
    b_t = (raw - bt * grates.J_t) / J
    return c_t, b_t


def _d_bulk(grid: Grid, f: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    return grid.dx1(f), grid.dx2(f), grid.dx3(f)


# ----- forcing bundle G -------------------------------------------------------------


def assemble_G(state: FlowState, cache: GeometryCache | None = None) -> ForcingBundle:
    """Nonlinear/geometric forcings of the perturbation system.

    Every component is the exact equation residual minus its linear part, so
    the bundle vanishes at zero perturbation and scales quadratically.  The
    surfactant slots G5/G6 are derived from the same conservative rate kernel
    the diagnostics use.  Outputs are 2/3-dealiased horizontally.
    """
    g = state.grid
    eq = state.eq
    if cache is None:
        cache = state.geometry
    beta, gamma = state.beta, state.gamma
    u = state.u
    p = state.p
    eta, c, b = state.eta, state.c, state.b
    ct, bt = state.c_tilde, state.b_tilde

    eta_t = kinematic_rate(state, cache)
    grates = build_geometry_rates(g, cache, eta_t)

    A, B, J, K = cache.A, cache.B, cache.J, cache.K
    Lt = cache.Ltilde[None, None, :]
    g1, g2, s = cache.g1, cache.g2, cache.sqrt_metric
    N = cache.N_vec

    d3u = [g.dx3(u[i]) for i in range(3)]
    d1u = [g.dx1(u[i]) for i in range(3)]
    d2u = [g.dx2(u[i]) for i in range(3)]
    d3p = g.dx3(p)

    # G1: momentum remainder
    one_ab = 1.0 + A * A + B * B
    d1J, d2J, d3J = _d_bulk(g, J)
    d3A = g.dx3(A)
    d3B = g.dx3(B)
    coef0 = K * K * one_ab - 1.0
    coef1 = (
        -(K**3) * one_ab * d3J
        + A * K * K * (d1J + d3A)
        + B * K * K * (d2J + d3B)
        - K * (g.dx1(A) + g.dx2(B))
    )
    transport = grates.eta_bar_t * Lt * K
    pterm = (A * K * d3p, B * K * d3p, (1.0 - K) * d3p)
    G1 = np.empty_like(u)
    for i in range(3):
        adv = (
            u[0] * (d1u[i] - A * K * d3u[i])
            + u[1] * (d2u[i] - B * K * d3u[i])
            + u[2] * K * d3u[i]
        )
        lapdiff = (
            coef0 * g.dx3(d3u[i])
            - 2.0 * A * K * g.dx1(d3u[i])
            - 2.0 * B * K * g.dx2(d3u[i])
            + coef1 * d3u[i]
        )
        G1[i] = g.dealias(transport * d3u[i] - adv + lapdiff + pterm[i])

    # G2: divergence remainder (flat minus transformed)
    G2 = g.dealias(A * K * d3u[0] + B * K * d3u[1] + (1.0 - K) * d3u[2])

    # G3: stress remainder at the surface
    top = (slice(None), slice(None), 0)
    pt = p[top]
    flat = np.stack(
        [
            -(d1u[2][top] + d3u[0][top]),
            -(d2u[2][top] + d3u[1][top]),
            pt - 2.0 * d3u[2][top],
        ]
    )
    S = stress_A(g, cache, p, u)
    curved = np.stack(
        [
            S[i, 0][top] * N[0] + S[i, 1][top] * N[1] + S[i, 2][top] * N[2]
            for i in range(3)
        ]
    )
    sig = state.model.sigma(ct)
    dsig = state.model.sigma_d1(ct)
    lap_eta = g.dx1(g.dx1(eta)) + g.dx2(g.dx2(eta))
    gc = surface_gradient(g, cache, ct)
    G3 = np.empty((3,) + g.shape_surface)
    b2 = (eta * (-g1), eta * (-g2), np.zeros_like(eta))
    b3 = (sig * cache.H * g1, sig * cache.H * g2, eq.sigma0 * lap_eta - sig * cache.H)
    b4 = (
        eq.sigma0_d1 * g.dx1(c) - s * dsig * gc[0],
        eq.sigma0_d1 * g.dx2(c) - s * dsig * gc[1],
        -s * dsig * gc[2],
    )
    for i in range(3):
        G3[i] = g.dealias(flat[i] - curved[i] + b2[i] + b3[i] + b4[i])

    # G4: kinematic remainder
    G4 = g.dealias(-u[0][top] * g1 - u[1][top] * g2)

    # G5/G6: transport remainders from the shared conservative rates
    c_t, b_t = _surfactant_rates(state, cache, grates)
    d3b = g.dx3(b)
    div_top = g.dx1(u[0][top]) + g.dx2(u[1][top])
    lap_c = g.dx1(g.dx1(c)) + g.dx2(g.dx2(c))
    G5 = g.dealias(c_t + eq.c0 * div_top - gamma * lap_c + beta * d3b[top])
    lap_b = g.dx1(g.dx1(b)) + g.dx2(g.dx2(b)) + g.dx3(d3b)
    G6 = g.dealias(b_t - beta * lap_b)

    # G7: Robin remainder, flux part plus exchange part
    gb = grad_A(g, cache, b)
    G71 = beta * (
        gb[0][top] * g1 + gb[1][top] * g2 + (1.0 - K[top]) * d3b[top]
    )
    omega = state.model.omega(ct, bt[:, :, 0])
    G72 = beta * s * omega - eq.omega_c0 * c - eq.omega_b0 * b[:, :, 0]
    G7 = g.dealias(G71 + G72)

    return ForcingBundle(G1=G1, G2=G2, G3=G3, G4=G4, G5=G5, G6=G6, G7=G7)


# ----- forcing bundle F (time-differentiated) ----------------------------------------


def _tangential_gradient_rate(grid, cache, grates, f, f_t) -> NDArray:
    """d/dt of the three tangential derivative components of a surface field."""
    d1, d2 = grid.dx1(f), grid.dx2(f)
    d1t, d2t = grid.dx1(f_t), grid.dx2(f_t)
    s = cache.sqrt_metric
    s2 = s * s
    g1, g2 = cache.g1, cache.g2
    gdf = g1 * d1 + g2 * d2
    gdf_t = grates.g1_t * d1 + grates.g2_t * d2 + g1 * d1t + g2 * d2t
    q = gdf / s2
    q_t = gdf_t / s2 - 2.0 * grates.s_t * gdf / (s2 * s)
    return np.stack(
        [d1t - grates.g1_t * q - g1 * q_t, d2t - grates.g2_t * q - g2 * q_t, q_t]
    )


def _surface_divergence_rate(grid, cache, grates, X, X_t) -> NDArray:
    return (
        _tangential_gradient_rate(grid, cache, grates, X[0], X_t[0])[0]
        + _tangential_gradient_rate(grid, cache, grates, X[1], X_t[1])[1]
        + _tangential_gradient_rate(grid, cache, grates, X[2], X_t[2])[2]
    )


def _surface_laplacian_rate(grid, cache, grates, f, f_t) -> NDArray:
    G = surface_gradient(grid, cache, f)
    G_t = _tangential_gradient_rate(grid, cache, grates, f, f_t)
    return _surface_divergence_rate(grid, cache, grates, G, G_t)


def assemble_F(
    state: FlowState,
    rates: StateRates | None = None,
    cache: GeometryCache | None = None,
) -> ForcingBundle:
    """Time-differentiated forcing bundle (F^i in the G^i slots).

    Every time derivative of a field is drawn from the instantaneous rate
    solve (never finite-differenced); geometry rates follow from the
    kinematic relation.  Like G, all components vanish quadratically at zero
    perturbation.
    """
    g = state.grid
    eq = state.eq
    if cache is None:
        cache = state.geometry
    if rates is None:
        rates = evaluate_rhs(state)
    beta, gamma = state.beta, state.gamma
    u, p, eta, c, b = state.u, state.p, state.eta, state.c, state.b
    ct, bt = state.c_tilde, state.b_tilde
    v = rates.u_t
    grates = build_geometry_rates(g, cache, rates.eta_t)

    A, B, J, K = cache.A, cache.B, cache.J, cache.K
    Lt = cache.Ltilde[None, None, :]
    g1, g2, s = cache.g1, cache.g2, cache.sqrt_metric
    N = cache.N_vec
    top = (slice(None), slice(None), 0)

    dA13 = -(grates.A_t * K + A * grates.K_t)
    dA23 = -(grates.B_t * K + B * grates.K_t)
    dA33 = grates.K_t

    d3u = [g.dx3(u[i]) for i in range(3)]
    d3b = g.dx3(b)
    d3p = g.dx3(p)
    gb = grad_A(g, cache, b)
    Du = sym_grad_A(g, cache, u)

    ut, vtop = u[:, :, :, 0], v[:, :, :, 0]
    eta_tt = (-g1 * vtop[0] - g2 * vtop[1] + vtop[2]) + (
        -grates.g1_t * ut[0] - grates.g2_t * ut[1]
    )
    eta_bar_tt = poisson_extend(g, eta_tt)

    # F1
    trans = eta_bar_tt * Lt * K + grates.eta_bar_t * Lt * grates.K_t
    udtA = u[0] * dA13 + u[1] * dA23 + u[2] * dA33
    T = np.empty((3, 3) + g.shape_bulk)
    dtA3 = (dA13, dA23, dA33)
    for i in range(3):
        for j in range(3):
            T[i, j] = dtA3[i] * d3u[j] + dtA3[j] * d3u[i]
    F1 = np.empty_like(u)
    for i in range(3):
        d1ui, d2ui = g.dx1(u[i]), g.dx2(u[i])
        adv_v = (
            v[0] * (d1ui - A * K * d3u[i])
            + v[1] * (d2ui - B * K * d3u[i])
            + v[2] * K * d3u[i]
        )
        f12 = -(adv_v + udtA * d3u[i]) + dtA3[i] * d3p
        f13 = (
            dA13 * g.dx3(Du[i, 0]) + dA23 * g.dx3(Du[i, 1]) + dA33 * g.dx3(Du[i, 2])
        )
        f14 = div_A(g, cache, T[i])
        F1[i] = g.dealias(trans * d3u[i] + f12 + f13 + f14)

    # F2
    F2 = g.dealias(-(dA13 * d3u[0] + dA23 * d3u[1] + dA33 * d3u[2]))

    # F3
    sig = state.model.sigma(ct)
    dsig = state.model.sigma_d1(ct)
    ddsig = state.model.sigma_d2(ct)
    gc = surface_gradient(g, cache, ct)
    nu, nu_t = cache.nu, grates.nu_t
    # nu* = -g/s appears only through (nu* . grad*) f = -(g . grad* f)/s
    d1c, d2c = g.dx1(ct), g.dx2(ct)
    nusc = -(g1 * d1c + g2 * d2c) / s
    nusc_dot = -(g1 * g.dx1(rates.c_t) + g2 * g.dx2(rates.c_t)) / s
    nust_c = (
        -(grates.g1_t * d1c + grates.g2_t * d2c) / s
        + grates.s_t * (g1 * d1c + g2 * d2c) / (s * s)
    )
    lap_eta_t = g.dx1(g.dx1(rates.eta_t)) + g.dx2(g.dx2(rates.eta_t))
    F3 = np.empty((3,) + g.shape_surface)
    for i in range(3):
        f31 = (
            (eta - p[top]) * grates.N_t[i]
            + Du[i, 0][top] * grates.N_t[0]
            + Du[i, 1][top] * grates.N_t[1]
            + Du[i, 2][top] * grates.N_t[2]
            + T[i, 0][top] * N[0]
            + T[i, 1][top] * N[1]
            + T[i, 2][top] * N[2]
        )
        f32 = (
            -dsig * rates.c_t * cache.H * N[i]
            - (sig - eq.sigma0) * grates.H_t * N[i]
            - eq.sigma0 * (grates.H_t - lap_eta_t) * N[i]
            - sig * cache.H * grates.N_t[i]
        )
        f33 = (
            -grates.s_t * dsig * gc[i]
            - s * ddsig * rates.c_t * gc[i]
            + s * dsig * nu[i] * nusc_dot
            - s * dsig * (nu_t[i] * nusc + nu[i] * nust_c)
        )
        F3[i] = g.dealias(f31 + f32 + f33)

    # F4
    F4 = g.dealias(
        -vtop[0] * g1 - vtop[1] * g2 - ut[0] * grates.g1_t - ut[1] * grates.g2_t
    )

    # F5
    u_trace = np.stack([ut[0], ut[1], ut[2]])
    v_trace = np.stack([vtop[0], vtop[1], vtop[2]])
    div_g_u = surface_divergence(g, cache, u_trace)
    div_g_rate = _surface_divergence_rate(g, cache, grates, u_trace, v_trace)
    lap_g_rate = _surface_laplacian_rate(g, cache, grates, ct, rates.c_t)
    lap_c_t = g.dx1(g.dx1(rates.c_t)) + g.dx2(g.dx2(rates.c_t))
    F51 = (
        -(vtop[0] * g.dx1(ct) + vtop[1] * g.dx2(ct))
        - (ut[0] * g.dx1(rates.c_t) + ut[1] * g.dx2(rates.c_t))
        - (rates.c_t * div_g_u + c * div_g_rate)
        + gamma * (lap_g_rate - lap_c_t)
        - eq.c0 * (div_g_rate - (g.dx1(vtop[0]) + g.dx2(vtop[1])))
    )
    F52 = -beta * (
        (-g1 * dA13[top] - g2 * dA23[top] + dA33[top]) * d3b[top]
        + gb[0][top] * grates.N_t[0]
        + gb[1][top] * grates.N_t[1]
    )
    F5 = g.dealias(F51 + F52)

    # F6
    f61 = trans * d3b
    d1b, d2b = g.dx1(b), g.dx2(b)
    adv_vb = v[0] * (d1b - A * K * d3b) + v[1] * (d2b - B * K * d3b) + v[2] * K * d3b
    f62 = -(adv_vb + udtA * d3b)
    Y = (dA13 * d3b, dA23 * d3b, dA33 * d3b)
    f63 = beta * (
        dA13 * g.dx3(gb[0])
        + dA23 * g.dx3(gb[1])
        + dA33 * g.dx3(gb[2])
        + div_A(g, cache, np.stack(Y))
    )
    F6 = g.dealias(f61 + f62 + f63)

    # F7 (separate code path from F52 by construction)
    F71 = -(
        (dA13[top] * (-g1) + dA23[top] * (-g2) + dA33[top]) * d3b[top]
    ) - (gb[0][top] * grates.N_t[0] + gb[1][top] * grates.N_t[1] + gb[2][top] * grates.N_t[2])
    omc = state.model.omega_c(ct, bt[:, :, 0])
    omb = state.model.omega_b(ct, bt[:, :, 0])
    F72 = (omc - eq.omega_c0) * rates.c_t + (omb - eq.omega_b0) * rates.b_t[:, :, 0]
    F7 = g.dealias(F71 + F72)

    return ForcingBundle(G1=F1, G2=F2, G3=F3, G4=F4, G5=F5, G6=F6, G7=F7)


# ----- instantaneous rate solve -------------------------------------------------------


@lru_cache(maxsize=4)
def _rate_matrices(grid: Grid) -> NDArray:
    """Per-mode inverses for the (u_t, p) solve.

    Unknowns per mode: (u1_t, u2_t, u3_t, p), each on Nz+1 nodes.  Rows:
    momentum identity + flat pressure gradient at j = 0..Nz-1 per component,
    no-slip rates at the bottom, the flat divergence rate at j = 0..Nz-1
    (bottom row dropped: with no-slip it is redundant), and the surface
    pressure pin from the normal stress balance.
    """
    nz1 = grid.Nz + 1
    Nz = grid.Nz
    M = grid.N1 * grid.N2
    dim = 4 * nz1
    k1 = grid.k1.reshape(M)
    k2 = grid.k2.reshape(M)
    mats = np.zeros((M, dim, dim), dtype=complex)
    idx = np.arange(Nz)

    for ci, kmul in ((0, 1j * k1), (1, 1j * k2)):
        rows = ci * nz1 + idx
        mats[:, rows, rows] = 1.0
        mats[:, rows, 3 * nz1 + idx] = kmul[:, None]
        r = ci * nz1 + Nz
        mats[:, r, r] = 1.0
    rows = 2 * nz1 + idx
    mats[:, rows, rows] = 1.0
    mats[:, rows[:, None], 3 * nz1 + np.arange(nz1)[None, :]] = grid.Dz[:Nz, :]
    r = 2 * nz1 + Nz
    mats[:, r, r] = 1.0

    rows = 3 * nz1 + idx
    eye = np.eye(nz1)
    mats[:, rows[:, None], np.arange(nz1)[None, :]] = (
        1j * k1[:, None, None] * eye[:Nz, :]
    )
    mats[:, rows[:, None], nz1 + np.arange(nz1)[None, :]] = (
        1j * k2[:, None, None] * eye[:Nz, :]
    )
    mats[:, rows[:, None], 2 * nz1 + np.arange(nz1)[None, :]] = grid.Dz[:Nz, :]
    mats[:, 4 * nz1 - 1, 3 * nz1] = 1.0
    return np.linalg.inv(mats)


def _flat_laplacian(grid: Grid, f: NDArray) -> NDArray:
    return grid.dx1(grid.dx1(f)) + grid.dx2(grid.dx2(f)) + grid.dx3(grid.dx3(f))


def evaluate_rhs(state: FlowState, linear: bool = False) -> StateRates:
    """Instantaneous rates of all fields plus the slaved pressure.

    The kinematic and surfactant rates are pointwise (the latter from the
    conservative kernel); (u_t, p) solve the momentum/divergence-rate system
    per horizontal mode, with the geometric couplings applied by Picard
    iteration (they are strict contractions in the small-slope regime).  With
    linear=True all geometric and nonlinear parts are dropped, which gives
    exactly the rates of the linearized generator.
    """
    g = state.grid
    eq = state.eq
    nz1 = g.Nz + 1
    Nz = g.Nz
    M = g.N1 * g.N2
    inv = _rate_matrices(g)
    u = state.u

    lap_u = np.stack([_flat_laplacian(g, u[i]) for i in range(3)])

    if linear:
        cache = None
        eta_t = u[2, :, :, 0]
        top = (slice(None), slice(None), 0)
        d3b = g.dx3(state.b)
        c_t = (
            -eq.c0 * (g.dx1(u[0][top]) + g.dx2(u[1][top]))
            + state.gamma * (g.dx1(g.dx1(state.c)) + g.dx2(g.dx2(state.c)))
            - state.beta * d3b[top]
        )
        b_t = state.beta * _flat_laplacian(g, state.b)
        pin = g.to_hat(2.0 * g.dx3(u[2])[top] + state.eta)
        pin += eq.sigma0 * g.k_sq * g.to_hat(state.eta)
        rhs = np.zeros((M, 4 * nz1), dtype=complex)
        for ci in range(3):
            rh = g.to_hat(lap_u[ci]).reshape(M, nz1)
            rhs[:, ci * nz1 : ci * nz1 + Nz] = rh[:, :Nz]
        rhs[:, 4 * nz1 - 1] = pin.reshape(M)
        y = (inv @ rhs[:, :, None])[:, :, 0]
        u_t = np.stack(
            [g.to_vals(y[:, ci * nz1 : (ci + 1) * nz1].reshape(g.shape_bulk)) for ci in range(3)]
        )
        p = g.to_vals(y[:, 3 * nz1 : 4 * nz1].reshape(g.shape_bulk))
        return StateRates(u_t=u_t, p=p, eta_t=eta_t, c_t=c_t, b_t=b_t)

    cache = state.geometry
    eta_t = kinematic_rate(state, cache)
    grates = build_geometry_rates(g, cache, eta_t)
    c_t, b_t = _surfactant_rates(state, cache, grates)

    A, B, J, K = cache.A, cache.B, cache.J, cache.K
    Lt = cache.Ltilde[None, None, :]
    g1, g2, s = cache.g1, cache.g2, cache.sqrt_metric
    top = (slice(None), slice(None), 0)
    dA13 = -(grates.A_t * K + A * grates.K_t)
    dA23 = -(grates.B_t * K + B * grates.K_t)
    dA33 = grates.K_t
    d3u = [g.dx3(u[i]) for i in range(3)]

    # state-only parts of the momentum data
    one_ab = 1.0 + A * A + B * B
    d1J, d2J, d3J = _d_bulk(g, J)
    coef0 = K * K * one_ab - 1.0
    coef1 = (
        -(K**3) * one_ab * d3J
        + A * K * K * (d1J + g.dx3(A))
        + B * K * K * (d2J + g.dx3(B))
        - K * (g.dx1(A) + g.dx2(B))
    )
    trans = grates.eta_bar_t * Lt * K
    Q0 = np.empty_like(u)
    for i in range(3):
        adv = (
            u[0] * (g.dx1(u[i]) - A * K * d3u[i])
            + u[1] * (g.dx2(u[i]) - B * K * d3u[i])
            + u[2] * K * d3u[i]
        )
        lapdiff = (
            coef0 * g.dx3(d3u[i])
            - 2.0 * A * K * g.dx1(d3u[i])
            - 2.0 * B * K * g.dx2(d3u[i])
            + coef1 * d3u[i]
        )
        Q0[i] = trans * d3u[i] - adv + lapdiff

    # pressure pin: normal component of the stress balance (the Marangoni
    # term is tangent to the surface and drops out against N)
    Du = sym_grad_A(g, cache, u)
    N = cache.N_vec
    DuNN = sum(
        Du[i, j][top] * N[j] * N[i] for i in range(3) for j in range(3)
    )
    sig = state.model.sigma(state.c_tilde)
    pin_field = g.dealias(DuNN / (s * s) + state.eta - sig * cache.H)
    pin_hat = g.to_hat(pin_field).reshape(M)

    div_data0 = -(dA13 * d3u[0] + dA23 * d3u[1] + dA33 * d3u[2])

    u_t = np.zeros_like(u)
    p = state.p
    scale = max(1.0, float(np.max(np.abs(u))))
    for _ in range(60):
        d3p = g.dx3(p)
        d3ut = [g.dx3(u_t[i]) for i in range(3)]
        rhs = np.zeros((M, 4 * nz1), dtype=complex)
        pgeo = (A * K * d3p, B * K * d3p, (1.0 - K) * d3p)
        for ci in range(3):
            data = lap_u[ci] + g.dealias(Q0[ci] + pgeo[ci])
            rh = g.to_hat(data).reshape(M, nz1)
            rhs[:, ci * nz1 : ci * nz1 + Nz] = rh[:, :Nz]
        div_data = g.dealias(
            div_data0 + A * K * d3ut[0] + B * K * d3ut[1] - (K - 1.0) * d3ut[2]
        )
        dh = g.to_hat(div_data).reshape(M, nz1)
        rhs[:, 3 * nz1 : 3 * nz1 + Nz] = dh[:, :Nz]
        rhs[:, 4 * nz1 - 1] = pin_hat
        y = (inv @ rhs[:, :, None])[:, :, 0]
        u_t_new = np.stack(
            [g.to_vals(y[:, ci * nz1 : (ci + 1) * nz1].reshape(g.shape_bulk)) for ci in range(3)]
        )
        p_new = g.to_vals(y[:, 3 * nz1 : 4 * nz1].reshape(g.shape_bulk))
        delta = max(
            float(np.max(np.abs(u_t_new - u_t))), float(np.max(np.abs(p_new - p)))
        )
        u_t, p = u_t_new, p_new
        if delta <= 1e-12 * scale:
            break
    else:
        raise DynamicsError("rate solve Picard iteration did not converge")

    return StateRates(u_t=u_t, p=p, eta_t=eta_t, c_t=c_t, b_t=b_t)


# ----- time stepper -------------------------------------------------------------------


@lru_cache(maxsize=4)
def _step_matrices(
    grid: Grid, eq: EquilibriumState, beta: float, gamma: float, dt: float, theta: float
):
    """Cached implicit inverses and explicit matrices for every mode.

    For k != 0: M = E/dt - theta A on dynamic rows and A on algebraic rows;
    B = E/dt + (1-theta) A on dynamic rows, zero on algebraic rows.  The
    forcing enters dynamic rows theta-averaged and algebraic rows at the new
    time.  The zero mode gets small dedicated blocks: theta-weighted heat
    updates for the horizontal velocities, a coupled (c, b) exchange block,
    a slaved vertical velocity, and an integrated hydrostatic pressure.
    """
    nz1 = grid.Nz + 1
    Nz = grid.Nz
    lay = analysis.mode_layout(nz1)
    dim = lay["dim"]
    M = grid.N1 * grid.N2
    n1 = np.repeat(grid.n1, grid.N2)
    n2 = np.tile(grid.n2, grid.N1)

    Mimp = np.empty((M - 1, dim, dim), dtype=complex)
    Bexp = np.empty((M - 1, dim, dim), dtype=complex)
    dyn = None
    for m in range(1, M):
        sys = analysis.assemble_linear_operator(
            (int(n1[m]), int(n2[m])), eq, grid, beta=beta, gamma=gamma
        )
        dyn = sys.dynamic
        E = sys.E
        Mimp[m - 1] = np.where(dyn[:, None], E / dt - theta * sys.A, sys.A)
        Bexp[m - 1] = np.where(dyn[:, None], E / dt + (1.0 - theta) * sys.A, 0.0)
    Minv = np.linalg.inv(Mimp)

    Dz, Dz2 = grid.Dz, grid.Dz2
    eye = np.eye(nz1)
    # horizontal velocity heat blocks at the zero mode
    M0u = np.zeros((nz1, nz1))
    M0u[0, :] = -Dz[0, :]
    M0u[1:Nz, :] = eye[1:Nz, :] / dt - theta * Dz2[1:Nz, :]
    M0u[Nz, Nz] = 1.0
    M0u_inv = np.linalg.inv(M0u)
    # coupled (c, b) block: unknown [c, b_0..b_Nz]
    M0cb = np.zeros((nz1 + 1, nz1 + 1))
    M0cb[0, 0] = 1.0 / dt
    M0cb[0, 1:] = theta * beta * Dz[0, :]
    M0cb[1, 0] = -eq.omega_c0
    M0cb[1, 1:] = beta * Dz[0, :]
    M0cb[1, 1] += -eq.omega_b0
    M0cb[2:Nz + 1, 1:] = eye[1:Nz, :] / dt - theta * beta * Dz2[1:Nz, :]
    M0cb[nz1, 1:] = Dz[Nz, :]
    M0cb_inv = np.linalg.inv(M0cb)
    # slaved vertical velocity: Dz rows at j = 0..Nz-1, bottom pin
    M0w = np.zeros((nz1, nz1))
    M0w[:Nz, :] = Dz[:Nz, :]
    M0w[Nz, Nz] = 1.0
    M0w_inv = np.linalg.inv(M0w)
    # integrated pressure: Dz rows at j = 0..Nz-1, surface pin
    M0p = np.zeros((nz1, nz1))
    M0p[:Nz, :] = Dz[:Nz, :]
    M0p[Nz, 0] = 1.0
    M0p_inv = np.linalg.inv(M0p)

    return {
        "lay": lay,
        "dyn": dyn,
        "Minv": Minv,
        "Bexp": Bexp,
        "M0u_inv": M0u_inv,
        "M0cb_inv": M0cb_inv,
        "M0w_inv": M0w_inv,
        "M0p_inv": M0p_inv,
    }


class Stepper:
    """One-step IMEX integrator bound to a fixed grid, model, and scheme."""

    def __init__(
        self,
        grid: Grid,
        eq: EquilibriumState,
        model: IsothermModel,
        beta: float,
        gamma: float,
        cfg: SchemeConfig,
    ):
        self.grid = grid
        self.eq = eq
        self.model = model
        self.beta = beta
        self.gamma = gamma
        self.cfg = cfg
        self.mats = _step_matrices(
            grid, eq, beta, gamma, cfg.dt, cfg.implicit_weight
        )

    # -- packing helpers ---------------------------------------------------------

    def _pack(self, state: FlowState) -> NDArray:
        g = self.grid
        nz1 = g.Nz + 1
        M = g.N1 * g.N2
        lay = self.mats["lay"]
        Y = np.zeros((M, lay["dim"]), dtype=complex)
        for ci, name in enumerate(("u1", "u2", "u3")):
            Y[:, lay[name]] = g.to_hat(state.u[ci]).reshape(M, nz1)
        Y[:, lay["p"]] = g.to_hat(state.p).reshape(M, nz1)
        Y[:, lay["eta"]] = g.to_hat(state.eta).reshape(M)
        Y[:, lay["c"]] = g.to_hat(state.c).reshape(M)
        Y[:, lay["b"]] = g.to_hat(state.b).reshape(M, nz1)
        return Y

    def _gather(self, G: ForcingBundle) -> NDArray:
        g = self.grid
        nz1 = g.Nz + 1
        Nz = g.Nz
        M = g.N1 * g.N2
        lay = self.mats["lay"]
        S = np.zeros((M, lay["dim"]), dtype=complex)
        G3h = [g.to_hat(G.G3[i]).reshape(M) for i in range(3)]
        for ci, name in enumerate(("u1", "u2", "u3")):
            sl = lay[name]
            gh = g.to_hat(G.G1[ci]).reshape(M, nz1)
            S[:, sl.start + 1 : sl.start + Nz] = gh[:, 1:Nz]
            S[:, sl.start] = G3h[ci]
        S[:, lay["p"]] = g.to_hat(G.G2).reshape(M, nz1)
        S[:, lay["eta"]] = g.to_hat(G.G4).reshape(M)
        S[:, lay["c"]] = g.to_hat(G.G5).reshape(M)
        bh = g.to_hat(G.G6).reshape(M, nz1)
        sl = lay["b"]
        S[:, sl.start] = g.to_hat(G.G7).reshape(M)
        S[:, sl.start + 1 : sl.start + Nz] = bh[:, 1:Nz]
        return S

    def _unpack(self, Yk, mode0, t) -> dict:
        g = self.grid
        nz1 = g.Nz + 1
        M = g.N1 * g.N2
        lay = self.mats["lay"]
        fields = {}
        hats = {}
        for name in ("u1", "u2", "u3", "p", "b"):
            h = np.zeros((M, nz1), dtype=complex)
            h[1:] = Yk[:, lay[name]]
            h[0] = mode0[name]
            hats[name] = h.reshape(g.shape_bulk)
        eta_h = np.zeros(M, dtype=complex)
        eta_h[1:] = Yk[:, lay["eta"]]
        c_h = np.zeros(M, dtype=complex)
        c_h[1:] = Yk[:, lay["c"]]
        c_h[0] = mode0["c"]
        fields["u"] = np.stack(
            [g.to_vals(hats[n]) for n in ("u1", "u2", "u3")]
        )
        fields["p"] = g.to_vals(hats["p"])
        fields["eta"] = g.to_vals(eta_h.reshape(g.shape_surface))
        fields["c"] = g.to_vals(c_h.reshape(g.shape_surface))
        fields["b"] = g.to_vals(hats["b"])
        fields["t"] = t
        return fields

    # -- zero-mode solves --------------------------------------------------------

    def _advance_mode0(self, Y0, S_new, S_avg, g13_avg) -> dict:
        """Advance the zero mode.

        S_new/S_avg are the forcing slot vectors at the new time and
        theta-averaged; g13_avg is the theta-averaged vertical momentum
        forcing profile (needed at the surface node for the integrated
        pressure, where the slot vector holds the stress datum instead).
        """
        g = self.grid
        nz1 = g.Nz + 1
        Nz = g.Nz
        dt = self.cfg.dt
        th = self.cfg.implicit_weight
        lay = self.mats["lay"]
        Dz, Dz2 = g.Dz, g.Dz2
        out = {}

        for name in ("u1", "u2"):
            sl = lay[name]
            un = Y0[sl]
            rhs = np.empty(nz1, dtype=complex)
            rhs[0] = S_new[sl.start]
            rhs[1:Nz] = un[1:Nz] / dt + (1.0 - th) * (Dz2 @ un)[1:Nz] + S_avg[
                sl.start + 1 : sl.start + Nz
            ]
            rhs[Nz] = 0.0
            out[name] = self.mats["M0u_inv"] @ rhs

        cn = Y0[lay["c"]]
        bn = Y0[lay["b"]]
        sl = lay["b"]
        rhs = np.empty(nz1 + 1, dtype=complex)
        rhs[0] = cn / dt - (1.0 - th) * self.beta * (Dz[0, :] @ bn) + S_avg[lay["c"]]
        rhs[1] = S_new[sl.start]
        rhs[2 : Nz + 1] = (
            bn[1:Nz] / dt
            + (1.0 - th) * self.beta * (Dz2 @ bn)[1:Nz]
            + S_avg[sl.start + 1 : sl.start + Nz]
        )
        rhs[nz1] = 0.0
        sol = self.mats["M0cb_inv"] @ rhs
        out["c"] = sol[0]
        out["b"] = sol[1:]

        rhs = np.empty(nz1, dtype=complex)
        rhs[:Nz] = S_new[lay["p"]][:Nz]
        rhs[Nz] = 0.0
        w = self.mats["M0w_inv"] @ rhs
        out["u3"] = w

        wn = Y0[lay["u3"]]
        rhs = np.empty(nz1, dtype=complex)
        rhs[:Nz] = (Dz2 @ w)[:Nz] - (w[:Nz] - wn[:Nz]) / dt + g13_avg[:Nz]
        rhs[Nz] = 2.0 * (Dz[0, :] @ w) + S_new[lay["u3"].start]
        out["p"] = self.mats["M0p_inv"] @ rhs
        return out

    # -- main advance --------------------------------------------------------------

    def advance(self, state: FlowState) -> FlowState:
        g = self.grid
        cfg = self.cfg
        th = cfg.implicit_weight
        dyn = self.mats["dyn"]
        linear = cfg.mode == "linear"

        self._check_dt(state)
        Y = self._pack(state)
        t_new = state.t + cfg.dt
        g = self.grid
        nz1 = g.Nz + 1
        M = g.N1 * g.N2

        if linear:
            zero_slots = np.zeros(self.mats["lay"]["dim"], dtype=complex)
            rhs = (self.mats["Bexp"] @ Y[1:][:, :, None])[:, :, 0]
            Yk = (self.mats["Minv"] @ rhs[:, :, None])[:, :, 0]
            mode0 = self._advance_mode0(
                Y[0], zero_slots, zero_slots, np.zeros(nz1, dtype=complex)
            )
            fields = self._unpack(Yk, mode0, t_new)
            return self._build_state(state, fields, rescale=False)

        cache = state.geometry
        Gbn = assemble_G(state, cache)
        Gn = self._gather(Gbn)
        g13_n = g.to_hat(Gbn.G1[2]).reshape(M, nz1)[0]

        # predictor: forcing frozen at the old time on every row
        rhs = (self.mats["Bexp"] @ Y[1:][:, :, None])[:, :, 0] + Gn[1:]
        Y_star = (self.mats["Minv"] @ rhs[:, :, None])[:, :, 0]
        mode0_star = self._advance_mode0(Y[0], Gn[0], Gn[0], g13_n)
        fields = self._unpack(Y_star, mode0_star, t_new)
        star = self._build_state(state, fields, rescale=False, guard=False)

        # corrector: averaged forcing on dynamic rows, end-of-step on algebraic
        Gbs = assemble_G(star, star.geometry)
        Gs = self._gather(Gbs)
        g13_s = g.to_hat(Gbs.G1[2]).reshape(M, nz1)[0]
        S_avg = np.where(dyn[None, :], th * Gs + (1.0 - th) * Gn, Gs)
        rhs = (self.mats["Bexp"] @ Y[1:][:, :, None])[:, :, 0] + S_avg[1:]
        Yk = (self.mats["Minv"] @ rhs[:, :, None])[:, :, 0]
        mode0 = self._advance_mode0(
            Y[0], Gs[0], th * Gs[0] + (1.0 - th) * Gn[0],
            th * g13_s + (1.0 - th) * g13_n,
        )
        fields = self._unpack(Yk, mode0, t_new)
        return self._build_state(state, fields, rescale=True)

    def _build_state(
        self, old: FlowState, fields: dict, rescale: bool, guard: bool = True
    ) -> FlowState:
        g = self.grid
        eta = fields["eta"]
        eta_hat = g.to_hat(eta)
        eta_hat[0, 0] = 0.0
        eta = g.to_vals(eta_hat)
        c, b = fields["c"], fields["b"]

        for name in ("u", "p", "eta", "c", "b"):
            if not np.all(np.isfinite(fields[name])):
                raise GuardError(f"non-finite {name} at t = {fields['t']:.6g}")

        try:
            cache = build_geometry(g, eta)
        except GeometryError as err:
            raise GuardError(f"flattening map degenerated: {err}") from err
        if rescale:
            ms = g.int_surface((self.eq.c0 + c) * cache.sqrt_metric)
            mb = g.int_bulk(cache.J * (self.eq.b0 + b))
            factor = self.eq.M / (ms + mb)
            if not np.isfinite(factor) or abs(factor - 1.0) > 1e-6:
                raise GuardError(
                    f"mass rescale factor {factor!r} out of bounds at t = {fields['t']:.6g}"
                )
            c = factor * c + (factor - 1.0) * self.eq.c0
            b = factor * b + (factor - 1.0) * self.eq.b0

        state = old.with_fields(
            t=fields["t"], u=fields["u"], p=fields["p"], eta=eta, c=c, b=b
        )
        state.__dict__["geometry"] = cache

        if guard:
            self._check_monitors(state, cache)
        return state

    def _check_dt(self, state: FlowState) -> None:
        g = self.grid
        umax = float(np.max(np.sqrt(np.sum(state.u**2, axis=0))))
        kmax = max(float(np.max(g.k_abs)), math.pi * g.Nz**2 / (2.0 * g.L3))
        limit = 0.5 * min(1.0, self.eq.c0) / max(umax * kmax, 1e-300)
        if self.cfg.dt > limit:
            raise GuardError(
                f"dt = {self.cfg.dt:.3e} exceeds advective stability heuristic "
                f"{limit:.3e} at t = {state.t:.6g} (max |u| = {umax:.3e})"
            )

    def _check_monitors(self, state: FlowState, cache: GeometryCache) -> None:
        if sobolev_norm_surface(self.grid, state.eta, 2.5) <= 0.05:
            small = cache.smallness()
            if small > 0.25:
                raise GuardError(
                    f"geometry smallness {small:.3e} > 1/4 inside the small-interface "
                    f"regime at t = {state.t:.6g}"
                )
            cmin = float(np.min(self.eq.c0 + state.c))
            bmin = float(np.min(self.eq.b0 + state.b))
            if cmin <= 0.0 or bmin <= 0.0:
                raise GuardError(
                    f"concentration positivity lost at t = {state.t:.6g} "
                    f"(min ctilde = {cmin:.3e}, min btilde = {bmin:.3e})"
                )


def step(state: FlowState, cfg: SchemeConfig) -> FlowState:
    """Advance one step of length cfg.dt (convenience wrapper over Stepper)."""
    stepper = Stepper(state.grid, state.eq, state.model, state.beta, state.gamma, cfg)
    return stepper.advance(state)


def run(initial: FlowState, cfg: SchemeConfig, sinks=None) -> RunSummary:
    """March from initial.t to initial.t + t_end, emitting reports/checkpoints.

    sinks may define report(state, rates) and checkpoint(state); reports are
    emitted at t = 0, every output_interval (rounded to steps, every step if
    the interval is zero), and at the final time.  A tripped guard terminates
    the run cleanly with the partial outputs flushed and the reason recorded.
    """
    t0 = time.perf_counter()
    nsteps = int(round(cfg.t_end / cfg.dt)) if cfg.t_end > 0 else 0
    if abs(nsteps * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
        raise DynamicsError(
            f"t_end = {cfg.t_end} is not an integer number of steps dt = {cfg.dt}"
        )
    stride = (
        max(1, int(round(cfg.output_interval / cfg.dt)))
        if cfg.output_interval > 0
        else 1
    )
    chk_stride = (
        max(1, int(round(cfg.checkpoint_interval / cfg.dt)))
        if cfg.checkpoint_interval > 0
        else 0
    )
    linear = cfg.mode == "linear"

    stepper = Stepper(
        initial.grid, initial.eq, initial.model, initial.beta, initial.gamma, cfg
    )
    state = initial
    reports = 0
    checkpoints = 0
    guard_log: list[str] = []

    def emit_report(st):
        nonlocal reports
        if sinks is not None and hasattr(sinks, "report"):
            sinks.report(st, evaluate_rhs(st, linear=linear))
        reports += 1

    def emit_checkpoint(st):
        nonlocal checkpoints
        if sinks is not None and hasattr(sinks, "checkpoint"):
            sinks.checkpoint(st)
            checkpoints += 1

    emit_report(state)
    termination = "completed"
    k = 0
    for k in range(1, nsteps + 1):
        try:
            state = stepper.advance(state)
        except GuardError as err:
            guard_log.append(str(err))
            termination = "guard_abort"
            k -= 1
            break
        if k % stride == 0 or k == nsteps:
            emit_report(state)
        if chk_stride and (k % chk_stride == 0 or k == nsteps):
            emit_checkpoint(state)

    return RunSummary(
        steps=k,
        t_final=state.t,
        termination=termination,
        wall_seconds=time.perf_counter() - t0,
        reports_emitted=reports,
        checkpoints_emitted=checkpoints,
        guard_log=tuple(guard_log),
    )


# ----- checkpoints ---------------------------------------------------------------------


def write_checkpoint(path, state: FlowState) -> None:
    """Atomic binary checkpoint: magic, header, then the physical field data
    (u1, u2, u3, p, eta, c, b) as little-endian float64 in C order."""
    g = state.grid
    header = struct.pack(
        "<5sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, g.N1, g.N2, g.Nz
    ) + struct.pack("<dddd", state.t, state.eq.M, state.eq.c0, state.eq.b0)
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (
            state.u[0],
            state.u[1],
            state.u[2],
            state.p,
            state.eta,
            state.c,
            state.b,
        )
    )
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint(
    path,
    grid: Grid,
    eq: EquilibriumState,
    model: IsothermModel,
    beta: float,
    gamma: float,
) -> FlowState:
    """Load a checkpoint, validating grid dimensions and equilibrium data."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<5sIIII")
    magic, version, N1, N2, Nz = struct.unpack("<5sIIII", raw[:head])
    if magic != CHECKPOINT_MAGIC:
        raise DynamicsError(f"not a checkpoint file: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DynamicsError(f"unsupported checkpoint version {version}")
    if (N1, N2, Nz) != (grid.N1, grid.N2, grid.Nz):
        raise DynamicsError(
            f"checkpoint grid ({N1}, {N2}, {Nz}) != configured "
            f"({grid.N1}, {grid.N2}, {grid.Nz})"
        )
    t, M, c0, b0 = struct.unpack("<dddd", raw[head : head + 32])
    for name, got, want in (("M", M, eq.M), ("c0", c0, eq.c0), ("b0", b0, eq.b0)):
        if abs(got - want) > 1e-12 * max(1.0, abs(want)):
            raise DynamicsError(
                f"checkpoint equilibrium {name} = {got!r} != configured {want!r}"
            )
    nb = grid.N1 * grid.N2 * (grid.Nz + 1)
    ns = grid.N1 * grid.N2
    counts = [nb, nb, nb, nb, ns, ns, nb]
    expected = head + 32 + 8 * sum(counts)
    if len(raw) != expected:
        raise DynamicsError(
            f"checkpoint payload length {len(raw)} != expected {expected}"
        )
    off = head + 32
    arrs = []
    for cnt, shape in zip(
        counts,
        [grid.shape_bulk] * 4 + [grid.shape_surface] * 2 + [grid.shape_bulk],
    ):
        arrs.append(
            np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(shape).copy()
        )
        off += 8 * cnt
    u = np.stack(arrs[:3])
    return FlowState(
        grid=grid,
        eq=eq,
        model=model,
        beta=beta,
        gamma=gamma,
        t=t,
        u=u,
        p=arrs[3],
        eta=arrs[4],
        c=arrs[5],
        b=arrs[6],
    )


# ----- initial data projection ------------------------------------------------------------


def project_initial_data(
    grid: Grid,
    eq: EquilibriumState,
    model: IsothermModel,
    beta: float,
    gamma: float,
    u_raw: NDArray,
    eta_raw: NDArray,
    c_tilde_raw: NDArray,
    b_tilde_raw: NDArray,
) -> FlowState:
    """Build an admissible initial state from raw fields.

    The interface mean is removed; the combined surfactant mass must already
    match the equilibrium target to 1e-10 relative (error otherwise).  The
    velocity is projected in the weighted L2 sense onto the constraint set
    {transformed divergence = 0, bottom no-slip, tangential stress balance}
    by a per-mode KKT solve; the geometric parts of the constraints are
    applied by Picard iteration.  The pressure is then recovered from the
    instantaneous rate solve.
    """
    eta = np.asarray(eta_raw, dtype=float)
    eta = eta - float(np.mean(eta))
    cache = build_geometry(grid, eta)
    c = np.asarray(c_tilde_raw, dtype=float) - eq.c0
    b = np.asarray(b_tilde_raw, dtype=float) - eq.b0

    ms = grid.int_surface((eq.c0 + c) * cache.sqrt_metric)
    mb = grid.int_bulk(cache.J * (eq.b0 + b))
    drift = abs(ms + mb - eq.M) / eq.M
    if drift > 1e-10:
        raise DynamicsError(
            f"raw data surfactant mass off target by {drift:.3e} relative "
            "(limit 1e-10); adjust the raw concentrations first"
        )

    nz1 = grid.Nz + 1
    Nz = grid.Nz
    Mm = grid.N1 * grid.N2
    k1 = grid.k1.reshape(Mm)
    k2 = grid.k2.reshape(Mm)
    wz = grid.wz

    # constraint matrices per mode: rows = [divergence (nz1, one fewer at the
    # zero mode), no-slip (3), tangential stress (2)]
    def build_kkt(m):
        zero = m == 0
        ndiv = Nz if zero else nz1
        nc = ndiv + 5
        C = np.zeros((nc, 3 * nz1), dtype=complex)
        r = 0
        rows = np.arange(ndiv)
        C[rows, 0:nz1] = 1j * k1[m] * np.eye(nz1)[:ndiv]
        C[rows, nz1 : 2 * nz1] = 1j * k2[m] * np.eye(nz1)[:ndiv]
        C[rows, 2 * nz1 : 3 * nz1] = grid.Dz[:ndiv, :]
        r = ndiv
        for ci in range(3):
            C[r, ci * nz1 + Nz] = 1.0
            r += 1
        C[r, 0:nz1] = grid.Dz[0, :]
        C[r, 2 * nz1] = 1j * k1[m]
        r += 1
        C[r, nz1 : 2 * nz1] = grid.Dz[0, :]
        C[r, 2 * nz1] = 1j * k2[m]
        K = np.zeros((3 * nz1 + nc, 3 * nz1 + nc), dtype=complex)
        W = np.tile(wz, 3)
        K[np.arange(3 * nz1), np.arange(3 * nz1)] = 2.0 * W
        K[: 3 * nz1, 3 * nz1 :] = C.conj().T
        K[3 * nz1 :, : 3 * nz1] = C
        return np.linalg.inv(K), nc

    kkts = [build_kkt(m) for m in range(Mm)]
    W3 = np.tile(wz, 3)

    u = np.array(u_raw, dtype=float)
    uhat_raw = np.stack([grid.to_hat(u[i]).reshape(Mm, nz1) for i in range(3)])
    scale = max(1.0, float(np.max(np.abs(u))))
    s = cache.sqrt_metric
    g1, g2 = cache.g1, cache.g2
    A, B, K = cache.A, cache.B, cache.K
    nu = cache.nu
    N = cache.N_vec
    dsig0 = model.sigma_d1(eq.c0 + c)
    gc0 = surface_gradient(grid, cache, eq.c0 + c)
    top = (slice(None), slice(None), 0)

    for _ in range(40):
        d3u = [grid.dx3(u[i]) for i in range(3)]
        div_rest = grid.dealias(A * K * d3u[0] + B * K * d3u[1] + (1.0 - K) * d3u[2])
        div_hat = grid.to_hat(div_rest).reshape(Mm, nz1)
        Du = sym_grad_A(grid, cache, u)
        DuN = np.stack(
            [
                Du[i, 0][top] * N[0] + Du[i, 1][top] * N[1] + Du[i, 2][top] * N[2]
                for i in range(3)
            ]
        )
        nuDuN = nu[0] * DuN[0] + nu[1] * DuN[1] + nu[2] * DuN[2]
        rt = []
        for i in range(2):
            full = DuN[i] - nu[i] * nuDuN - s * dsig0 * gc0[i]
            flat = d3u[i][top] + (grid.dx1 if i == 0 else grid.dx2)(u[2][top])
            rt.append(grid.to_hat(grid.dealias(flat - full)).reshape(Mm))
        u_new_hat = np.empty_like(uhat_raw)
        for m in range(Mm):
            inv, nc = kkts[m]
            ndiv = nc - 5
            rhs = np.zeros(3 * nz1 + nc, dtype=complex)
            rhs[: 3 * nz1] = 2.0 * W3 * np.concatenate(
                [uhat_raw[0, m], uhat_raw[1, m], uhat_raw[2, m]]
            )
            rhs[3 * nz1 : 3 * nz1 + ndiv] = div_hat[m, :ndiv]
            rhs[3 * nz1 + ndiv + 3] = rt[0][m]
            rhs[3 * nz1 + ndiv + 4] = rt[1][m]
            sol = inv @ rhs
            for ci in range(3):
                u_new_hat[ci, m] = sol[ci * nz1 : (ci + 1) * nz1]
        u_new = np.stack(
            [grid.to_vals(u_new_hat[i].reshape(grid.shape_bulk)) for i in range(3)]
        )
        delta = float(np.max(np.abs(u_new - u)))
        u = u_new
        if delta <= 1e-12 * scale:
            break
    else:
        raise DynamicsError("initial data projection Picard iteration did not converge")

    state = FlowState(
        grid=grid,
        eq=eq,
        model=model,
        beta=beta,
        gamma=gamma,
        t=0.0,
        u=u,
        p=np.zeros(grid.shape_bulk),
        eta=eta,
        c=c,
        b=b,
    )
    state.__dict__["geometry"] = cache
    rates = evaluate_rhs(state)
    return state.with_fields(p=rates.p)

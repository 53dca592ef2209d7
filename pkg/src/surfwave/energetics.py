"""Energy and dissipation functionals, surfactant-mass monitors, and the
timeseries report machinery.

Three functional families are tracked along a run:

* the *geometric* energy/dissipation pair built from the relative entropies
  ``zeta_r`` (surface) and ``phi_r`` (bulk): this is the pair whose exact
  balance d/dt E_geo = -D_geo holds for the full nonlinear flattened system,
  with the exchange contribution entering the dissipation through the
  pointwise-nonnegative integrand ``(zeta_r'(c) - phi_r'(b)) * omega(c, b)``;
* the *full* Sobolev pair (E_full, D_full) summing the squared norms of the
  perturbation fields and their rates at the regularity levels used for the
  nonlinear stability estimates; and
* the *horizontal* pair (E_bar, D_bar) summing the quadratic linear-mode
  forms over horizontal derivatives up to second order and one time
  derivative.

For a ``--linear`` run the geometric columns are replaced by the quadratic
forms of the linearized problem, so the reported balance residual measures
the time integrator against the exact linear energy identity.  Balance
residuals are computed after the fact from the report series with
fourth-order finite differences; the second-order error of the implicit
midpoint step is then the dominant contribution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .discretization import Grid
from .geometry import (
    GeometryCache,
    build_geometry_rates,
    grad_A,
    surface_gradient,
    sym_grad_A,
)
from .model import AuxFunctions, exchange_integrand

__all__ = [
    "EnergyReport",
    "TIMESERIES_COLUMNS",
    "EnergeticsError",
    "geometric_functionals",
    "linear_functionals",
    "full_functionals",
    "horizontal_functionals",
    "compute_report",
    "balance_residuals",
    "attach_balance",
    "fit_decay",
    "write_timeseries",
]


class EnergeticsError(RuntimeError):
    """Raised for malformed report series or fit windows."""


TIMESERIES_COLUMNS = (
    "t",
    "E_geo",
    "D_geo",
    "E_full",
    "D_full",
    "E_bar",
    "D_bar",
    "mass_surface",
    "mass_bulk",
    "mass_total",
    "exchange_min",
    "balance_residual",
    "ratio_E",
    "ratio_D",
)


@dataclass
class EnergyReport:
    """One timeseries row; balance_residual is attached after the run."""

    t: float
    E_geo: float
    D_geo: float
    E_full: float
    D_full: float
    E_bar: float
    D_bar: float
    mass_surface: float
    mass_bulk: float
    mass_total: float
    exchange_min: float
    balance_residual: float
    ratio_E: float
    ratio_D: float

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in TIMESERIES_COLUMNS)


# ---------------------------------------------------------------------------
# quadratures and Sobolev norms
# ---------------------------------------------------------------------------


def _surface_hs_sq(grid: Grid, f: NDArray, s: float) -> float:
    """Squared H^s norm of a surface field via the Fourier multiplier
    (1 + |k|^2)^s; s may be fractional or negative."""
    fh = grid.to_hat(f)
    mult = (1.0 + grid.k_sq) ** s
    return float(grid.area * np.sum(mult * np.abs(fh) ** 2))


def _bulk_hm_sq(grid: Grid, f: NDArray, m: int) -> float:
    """Squared H^m norm of a bulk scalar, all mixed derivatives up to order m.

    Horizontal derivatives are Fourier multipliers, vertical ones repeated
    applications of the Chebyshev matrix; the vertical integral uses the
    Clenshaw-Curtis weights.
    """
    fh = grid.to_hat(f)
    wz = grid.wz
    total = 0.0
    dz_pow = fh
    for a3 in range(m + 1):
        if a3 > 0:
            dz_pow = dz_pow @ grid.Dz.T
        mag = np.abs(dz_pow) ** 2 @ wz  # (N1, N2) of vertical integrals
        for a1 in range(m - a3 + 1):
            for a2 in range(m - a3 - a1 + 1):
                mult = (grid.k1 ** (2 * a1)) * (grid.k2 ** (2 * a2))
                total += float(np.sum(mult * mag))
    return grid.area * total


def _bulk_l2_sq(grid: Grid, f: NDArray) -> float:
    return grid.int_bulk(f * f)


def _surf_grad_sq(grid: Grid, f: NDArray) -> float:
    """Integral of |horizontal gradient|^2 over the flat surface."""
    fh = grid.to_hat(f)
    return float(grid.area * np.sum(grid.k_sq * np.abs(fh) ** 2))


def _flat_grad_sq(grid: Grid, f: NDArray) -> float:
    """Integral of |flat gradient|^2 over the slab."""
    fh = grid.to_hat(f)
    mag_h = (np.abs(fh) ** 2 @ grid.wz) * grid.k_sq
    d3 = np.abs(fh @ grid.Dz.T) ** 2 @ grid.wz
    return float(grid.area * (np.sum(mag_h) + np.sum(d3)))


def _flat_sym_grad_sq(grid: Grid, u: NDArray) -> float:
    """Integral of |D u|^2 (flat symmetric gradient, both index orders)."""
    du = np.empty((3, 3) + u.shape[1:])
    for i in range(3):
        du[i, 0] = grid.dx1(u[i])
        du[i, 1] = grid.dx2(u[i])
        du[i, 2] = grid.dx3(u[i])
    total = 0.0
    for i in range(3):
        for j in range(3):
            total += grid.int_bulk((du[i, j] + du[j, i]) ** 2)
    return total


# ---------------------------------------------------------------------------
# geometric (entropy) functionals
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def _potential_excess(d1, d2, x0: float, delta: NDArray) -> NDArray:
    """g(x0 + delta) - g(x0) evaluated at the scale of delta.

    Uses Taylor with exact integral remainder,
        g(x0 + d) - g(x0) = g'(x0) d + d^2 int_0^1 (1 - tau) g''(x0 + tau d) dtau,
    with the remainder integral done by Gauss-Legendre.  Differencing two O(1)
    potential values directly would leave ~ulp(g(x0)) noise per node, far above
    the O(delta^2) integrals assembled from the excess.
    """
    slope = float(np.asarray(d1(x0)))
    rem = np.zeros_like(delta)
    for tau, w in zip(_GL_NODES, _GL_WEIGHTS):
        rem += (w * (1.0 - tau)) * d2(x0 + tau * delta)
    return delta * (slope + delta * rem)


def geometric_functionals(state, aux: AuxFunctions) -> dict:
    """Exact energy/dissipation of the flattened nonlinear system.

    Returns E_geo with the equilibrium floor subtracted (the floor itself is
    reported separately), the dissipation D_geo, the nodal minimum of the
    exchange integrand, and the surface/bulk masses.
    """
    grid: Grid = state.grid
    cache: GeometryCache = state.geometry
    eq = state.eq
    ct = state.c_tilde
    bt = state.b_tilde
    s = cache.sqrt_metric
    J = cache.J

    kinetic = 0.5 * grid.int_bulk(J * np.sum(state.u**2, axis=0))
    height = 0.5 * grid.int_surface(state.eta**2)
    # entropy excess over the flat equilibrium, assembled pointwise at the
    # perturbation's own scale: J - 1 is exact (J is stored as 1 + small),
    # s - 1 is rebuilt from the slopes to shed the sqrt roundoff, and the
    # potential excesses avoid differencing O(1) values.  Any ulp-of-O(1)
    # noise left in E_geo is amplified by the 1/dt of the downstream
    # finite-difference balance estimator.
    phi0 = float(aux.phi(eq.b0))
    zeta0 = float(aux.zeta(eq.c0))
    pb = aux.phi(bt)
    zc = aux.zeta(ct)
    ephi = _potential_excess(aux.phi_d1, aux.phi_d2, eq.b0, state.b)
    ezeta = _potential_excess(aux.zeta_d1, aux.zeta_d2, eq.c0, state.c)
    sm1 = (cache.g1**2 + cache.g2**2) / (1.0 + s)
    entropy_bulk = grid.int_bulk((J - 1.0) * pb + ephi)
    entropy_surf = grid.int_surface(sm1 * zc + ezeta)
    floor = grid.volume * phi0 + grid.area * zeta0
    e_excess = kinetic + height + entropy_bulk + entropy_surf

    D = sym_grad_A(grid, cache, state.u)
    visc = 0.5 * grid.int_bulk(J * np.sum(D**2, axis=(0, 1)))
    gb = grad_A(grid, cache, state.b)
    diff_bulk = state.beta * grid.int_bulk(
        J * aux.phi_d2(bt) * np.sum(gb**2, axis=0)
    )
    gc = surface_gradient(grid, cache, ct)
    diff_surf = state.gamma * grid.int_surface(
        aux.zeta_d2(ct) * np.sum(gc**2, axis=0) * s
    )
    xchg = exchange_integrand(ct, bt[:, :, 0], aux)
    exchange = grid.int_surface(xchg * s)

    ms = grid.int_surface(ct * s)
    mb = grid.int_bulk(bt * J)
    return {
        "E_geo": e_excess,
        "E_geo_floor": floor,
        "D_geo": visc + diff_bulk + diff_surf + exchange,
        "exchange_min": float(np.min(xchg)),
        "mass_surface": ms,
        "mass_bulk": mb,
    }


def linear_functionals(state) -> tuple[float, float]:
    """Quadratic energy/dissipation forms of the linearized problem.

    The exchange flux pairs into a complete square through the linearized
    adsorption condition, so the dissipation carries the boundary term
    (-sigma'_0 omega_c0 / c0) * (c - f'(b0) b|top)^2 with no extra beta
    factor.
    """
    grid: Grid = state.grid
    eq = state.eq
    sig0d = eq.sigma0_d1
    fp = eq.f_d1_b0
    c0 = eq.c0
    ce_b = -sig0d * fp / (2.0 * c0)
    ce_c = -sig0d / (2.0 * c0)

    E = (
        0.5 * grid.int_bulk(np.sum(state.u**2, axis=0))
        + 0.5 * grid.int_surface(state.eta**2)
        + 0.5 * eq.sigma0 * _surf_grad_sq(grid, state.eta)
        + ce_b * grid.int_bulk(state.b**2)
        + ce_c * grid.int_surface(state.c**2)
    )
    D = (
        0.5 * _flat_sym_grad_sq(grid, state.u)
        + (-sig0d * fp / c0) * state.beta * _flat_grad_sq(grid, state.b)
        + (-sig0d / c0) * state.gamma * _surf_grad_sq(grid, state.c)
        + (-sig0d * eq.omega_c0 / c0)
        * grid.int_surface((state.c - fp * state.b[:, :, 0]) ** 2)
    )
    return E, D


# ---------------------------------------------------------------------------
# full and horizontal Sobolev functionals
# ---------------------------------------------------------------------------


def _eta_tt(state, rates) -> NDArray:
    """Second time derivative of the interface: d_t(u . N) along the flow."""
    cache: GeometryCache = state.geometry
    grates = build_geometry_rates(state.grid, cache, rates.eta_t)
    utop = state.u[:, :, :, 0]
    udtop = rates.u_t[:, :, :, 0]
    return (
        -udtop[0] * cache.g1
        - udtop[1] * cache.g2
        + udtop[2]
        - utop[0] * grates.g1_t
        - utop[1] * grates.g2_t
    )


def full_functionals(state, rates) -> tuple[float, float]:
    """Sobolev energy/dissipation pair of fields and rates.

    Energy: u in H^2, u_t in L^2, p in H^1, eta in H^3, eta_t in H^{3/2},
    eta_tt in H^{-1/2}, b in H^2, b_t in L^2, c in H^2, c_t in L^2.
    Dissipation: the same list one level higher (u in H^3, ..., eta in
    H^{7/2}, eta_t in H^{5/2}, eta_tt in H^{1/2}, c in H^3, c_t in H^1).
    """
    grid: Grid = state.grid
    etatt = _eta_tt(state, rates)
    E = (
        sum(_bulk_hm_sq(grid, state.u[i], 2) for i in range(3))
        + sum(_bulk_l2_sq(grid, rates.u_t[i]) for i in range(3))
        + _bulk_hm_sq(grid, rates.p, 1)
        + _surface_hs_sq(grid, state.eta, 3.0)
        + _surface_hs_sq(grid, rates.eta_t, 1.5)
        + _surface_hs_sq(grid, etatt, -0.5)
        + _bulk_hm_sq(grid, state.b, 2)
        + _bulk_l2_sq(grid, rates.b_t)
        + _surface_hs_sq(grid, state.c, 2.0)
        + _surface_hs_sq(grid, rates.c_t, 0.0)
    )
    D = (
        sum(_bulk_hm_sq(grid, state.u[i], 3) for i in range(3))
        + sum(_bulk_hm_sq(grid, rates.u_t[i], 1) for i in range(3))
        + _bulk_hm_sq(grid, rates.p, 2)
        + _surface_hs_sq(grid, state.eta, 3.5)
        + _surface_hs_sq(grid, rates.eta_t, 2.5)
        + _surface_hs_sq(grid, etatt, 0.5)
        + _bulk_hm_sq(grid, state.b, 3)
        + _bulk_hm_sq(grid, rates.b_t, 1)
        + _surface_hs_sq(grid, state.c, 3.0)
        + _surface_hs_sq(grid, rates.c_t, 1.0)
    )
    return E, D


def _horizontal_variants(grid: Grid, f: NDArray, f_t: NDArray) -> list[NDArray]:
    """f and its horizontal derivatives up to second order, plus f_t."""
    d1 = grid.dx1(f)
    d2 = grid.dx2(f)
    return [f, d1, d2, grid.dx1(d1), grid.dx2(d1), grid.dx2(d2), f_t]


def horizontal_functionals(state, rates) -> tuple[float, float]:
    """Linear-mode quadratic forms summed over horizontal derivatives.

    The derivative family is {identity, d1, d2, d1^2, d1 d2, d2^2, d_t};
    each member contributes the linear energy/dissipation forms of the
    differentiated fields, with the exchange square carrying a beta factor.
    """
    grid: Grid = state.grid
    eq = state.eq
    sig0d = eq.sigma0_d1
    fp = eq.f_d1_b0
    c0 = eq.c0

    u_vars = [_horizontal_variants(grid, state.u[j], rates.u_t[j]) for j in range(3)]
    u_list = [np.stack([u_vars[j][i] for j in range(3)]) for i in range(7)]
    eta_list = _horizontal_variants(grid, state.eta, rates.eta_t)
    b_list = _horizontal_variants(grid, state.b, rates.b_t)
    c_list = _horizontal_variants(grid, state.c, rates.c_t)

    E = 0.0
    D = 0.0
    for ua, etaa, ba, ca in zip(u_list, eta_list, b_list, c_list):
        E += (
            0.5 * grid.int_bulk(np.sum(ua**2, axis=0))
            + 0.5 * grid.int_surface(etaa**2)
            + 0.5 * eq.sigma0 * _surf_grad_sq(grid, etaa)
            + (-sig0d * fp / (2.0 * c0)) * grid.int_bulk(ba**2)
            + (-sig0d / (2.0 * c0)) * grid.int_surface(ca**2)
        )
        D += (
            0.5 * _flat_sym_grad_sq(grid, ua)
            + (-sig0d * fp / c0) * state.beta * _flat_grad_sq(grid, ba)
            + (-sig0d / c0) * state.gamma * _surf_grad_sq(grid, ca)
            + (-sig0d * eq.omega_c0 / c0) * state.beta
            * grid.int_surface((ca - fp * ba[:, :, 0]) ** 2)
        )
    return E, D


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def compute_report(state, rates, aux: AuxFunctions, mode: str = "nonlinear") -> EnergyReport:
    """Assemble one timeseries row from a state and its rates."""
    geo = geometric_functionals(state, aux)
    if mode == "linear":
        e_geo, d_geo = linear_functionals(state)
    else:
        e_geo, d_geo = geo["E_geo"], geo["D_geo"]
    e_full, d_full = full_functionals(state, rates)
    e_bar, d_bar = horizontal_functionals(state, rates)
    return EnergyReport(
        t=state.t,
        E_geo=e_geo,
        D_geo=d_geo,
        E_full=e_full,
        D_full=d_full,
        E_bar=e_bar,
        D_bar=d_bar,
        mass_surface=geo["mass_surface"],
        mass_bulk=geo["mass_bulk"],
        mass_total=geo["mass_surface"] + geo["mass_bulk"],
        exchange_min=geo["exchange_min"],
        balance_residual=float("nan"),
        ratio_E=e_full / e_bar if e_bar > 0.0 else float("nan"),
        ratio_D=d_full / d_bar if d_bar > 0.0 else float("nan"),
    )


def balance_residuals(ts: NDArray, energies: NDArray, dissipations: NDArray) -> NDArray:
    """|dE/dt + D| / |D| per report from fourth-order finite differences.

    Interior points use the five-point centered stencil; the first and last
    two points use the matching one-sided stencils.  Requires at least seven
    uniformly spaced reports.
    """
    ts = np.asarray(ts, dtype=float)
    E = np.asarray(energies, dtype=float)
    Dv = np.asarray(dissipations, dtype=float)
    n = ts.size
    if n < 7:
        raise EnergeticsError("balance residuals need at least seven reports")
    h = np.diff(ts)
    if not np.allclose(h, h[0], rtol=1e-8, atol=1e-14):
        raise EnergeticsError("balance residuals need uniformly spaced reports")
    dt = float(h[0])

    dE = np.empty(n)
    dE[2:-2] = (-E[4:] + 8.0 * E[3:-1] - 8.0 * E[1:-3] + E[:-4]) / (12.0 * dt)
    onesided = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12.0 * dt)
    dE[0] = float(onesided @ E[:5])
    dE[1] = float(onesided @ E[1:6])
    dE[-1] = -float(onesided @ E[-1:-6:-1])
    dE[-2] = -float(onesided @ E[-2:-7:-1])

    scale = np.maximum(np.abs(Dv), 1e-300)
    return np.abs(dE + Dv) / scale


def attach_balance(rows: list[EnergyReport]) -> None:
    """Fill the balance_residual column in place over a uniform report grid."""
    if len(rows) < 7:
        for r in rows:
            r.balance_residual = float("nan")
        return
    ts = np.array([r.t for r in rows])
    E = np.array([r.E_geo for r in rows])
    Dv = np.array([r.D_geo for r in rows])
    res = balance_residuals(ts, E, Dv)
    for r, val in zip(rows, res):
        r.balance_residual = float(val)


def fit_decay(ts, energies, t_min: float | None = None) -> tuple[float, float]:
    """Least-squares exponential decay rate of an energy series.

    Fits log E = a - lambda t over the window t >= t_min (default: drop the
    first tenth) restricted to strictly positive values; returns
    (lambda_fit, r_squared).
    """
    ts = np.asarray(ts, dtype=float)
    E = np.asarray(energies, dtype=float)
    if t_min is None:
        t_min = ts[0] + 0.1 * (ts[-1] - ts[0])
    mask = (ts >= t_min) & (E > 0.0)
    if int(mask.sum()) < 3:
        raise EnergeticsError("decay fit needs at least three positive samples")
    x = ts[mask]
    y = np.log(E[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0.0 else 1.0
    return -float(slope), r2


def write_timeseries(path, rows: list[EnergyReport]) -> None:
    """Write the report rows as CSV with a fixed column schema."""
    lines = [",".join(TIMESERIES_COLUMNS)]
    for r in rows:
        lines.append(",".join("%.16e" % v for v in r.row()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")

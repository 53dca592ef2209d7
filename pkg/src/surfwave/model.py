"""Constitutive layer: surface tension, surface-bulk flux, isotherm, auxiliary
convex potentials, and the equilibrium / linearization coefficients.

A model couples a surface tension sigma (positive, strictly decreasing in the
surface concentration) with a flux omega(c, b) whose zero set is the graph of
an increasing isotherm c = f(b).  The built-in flux family is the Langmuir
kinetics

    omega(c, b) = -b (k1 - c) + k2 c,      f(b) = k1 b / (k2 + b),

and the built-in tension families are affine sigma(s) = a - b s (valid for
s < a/b) and exponential sigma(s) = a + b exp(-s).

The auxiliary potentials associated with a reference concentration r > 0 are

    zeta_r(s) = sigma(s) - s * int_r^s sigma'(z)/z dz,
    phi_r(s)  = C0 + int_0^s z sigma'(f(z)) f'(z) / f(z) dz
                   - s * int_r^{f(s)} sigma'(z)/z dz,

convex with zeta_r'' = -sigma'(s)/s and phi_r'' = -sigma'(f(s)) f'(s)/f(s).
The shift C0 makes phi_r positive on the sampled range.  The log-weighted
integrals have closed forms for the built-in tension families (logarithms for
affine, exponential integrals E1 for exponential sigma); other models fall
back to adaptive quadrature at relative tolerance quad_tol.  All evaluations
are clamped below at s_min = 1e-8 * r, where the log singularity of the
integrals is irrelevant for equilibrium-centered states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, interpolate, special


class ModelError(Exception):
    """Raised for invalid constitutive parameters or out-of-range evaluation."""


# ----- isotherm model ---------------------------------------------------------


@dataclass(frozen=True)
class IsothermModel:
    """Constitutive bundle: tension sigma, flux omega, isotherm f, derivatives."""

    sigma: Callable
    sigma_d1: Callable
    sigma_d2: Callable
    sigma_d3: Callable
    omega: Callable
    omega_c: Callable
    omega_b: Callable
    f: Callable
    f_d1: Callable
    f_d2: Callable
    validity_range: tuple[float, float]
    sigma_family: str
    omega_family: str
    params: dict

    def omega_deriv(self, ic: int, ib: int) -> Callable:
        """Partial derivative d^ic_c d^ib_b omega as a callable, total order <= 4."""
        if ic < 0 or ib < 0 or ic + ib > 4:
            raise ModelError("omega derivatives supported up to total order 4")
        if self.omega_family != "langmuir":
            raise ModelError(f"unknown flux family {self.omega_family!r}")
        # omega = c*b + k2*c - k1*b is bilinear
        if (ic, ib) == (0, 0):
            return self.omega
        if (ic, ib) == (1, 0):
            return self.omega_c
        if (ic, ib) == (0, 1):
            return self.omega_b
        if (ic, ib) == (1, 1):
            return lambda c, b: np.ones_like(np.asarray(c, dtype=float) + np.asarray(b, dtype=float))
        return lambda c, b: np.zeros_like(np.asarray(c, dtype=float) + np.asarray(b, dtype=float))


def _affine_sigma(a: float, b: float):
    zero = lambda s: np.zeros_like(np.asarray(s, dtype=float))
    return (
        lambda s: a - b * np.asarray(s, dtype=float),
        lambda s: np.full_like(np.asarray(s, dtype=float), -b),
        zero,
        zero,
    )


def _exponential_sigma(a: float, b: float):
    return (
        lambda s: a + b * np.exp(-np.asarray(s, dtype=float)),
        lambda s: -b * np.exp(-np.asarray(s, dtype=float)),
        lambda s: b * np.exp(-np.asarray(s, dtype=float)),
        lambda s: -b * np.exp(-np.asarray(s, dtype=float)),
    )


def build_model(spec: Mapping) -> IsothermModel:
    """Construct an IsothermModel from a nested configuration mapping.

    Expected keys: omega.type ("langmuir"), omega.k1, omega.k2;
    sigma.type ("affine", "exponential", or "tabulated"), sigma.a, sigma.b
    (or sigma.s / sigma.values arrays for tabulated data).
    """
    om = spec.get("omega", {})
    sg = spec.get("sigma", {})
    om_type = om.get("type", "langmuir")
    sg_type = sg.get("type", "affine")

    if om_type != "langmuir":
        raise ModelError(f"unknown flux family {om_type!r}")
    k1 = float(om.get("k1", 1.0))
    k2 = float(om.get("k2", 1.0))
    if k1 <= 0 or k2 <= 0:
        raise ModelError("Langmuir constants k1, k2 must be positive")

    def omega(c, b):
        c = np.asarray(c, dtype=float)
        b = np.asarray(b, dtype=float)
        return -b * (k1 - c) + k2 * c

    omega_c = lambda c, b: np.asarray(b, dtype=float) + k2 + 0.0 * np.asarray(c, dtype=float)
    omega_b = lambda c, b: np.asarray(c, dtype=float) - k1 + 0.0 * np.asarray(b, dtype=float)
    f = lambda b: k1 * np.asarray(b, dtype=float) / (k2 + np.asarray(b, dtype=float))
    f_d1 = lambda b: k1 * k2 / (k2 + np.asarray(b, dtype=float)) ** 2
    f_d2 = lambda b: -2.0 * k1 * k2 / (k2 + np.asarray(b, dtype=float)) ** 3
    params: dict = {"k1": k1, "k2": k2}

    if sg_type == "affine":
        a = float(sg.get("a", 2.0))
        b = float(sg.get("b", 1.0))
        if a <= 0 or b <= 0:
            raise ModelError("affine tension requires a, b > 0")
        sigma, s1, s2, s3 = _affine_sigma(a, b)
        validity = (0.0, a / b)
        params.update(a=a, b=b)
    elif sg_type == "exponential":
        a = float(sg.get("a", 1.0))
        b = float(sg.get("b", 1.0))
        if a <= 0 or b <= 0:
            raise ModelError("exponential tension requires a, b > 0")
        sigma, s1, s2, s3 = _exponential_sigma(a, b)
        validity = (0.0, np.inf)
        params.update(a=a, b=b)
    elif sg_type == "tabulated":
        if sg.get("s") is None or sg.get("values") is None:
            raise ModelError("tabulated tension requires 's' and 'values' arrays")
        s_tab = np.asarray(sg["s"], dtype=float)
        v_tab = np.asarray(sg["values"], dtype=float)
        if s_tab.ndim != 1 or s_tab.shape != v_tab.shape:
            raise ModelError("tabulated tension requires matching 's' and 'values' arrays")
        if np.any(v_tab <= 0):
            raise ModelError("tabulated tension must be positive")
        if v_tab[-1] >= v_tab[0]:
            raise ModelError("tabulated tension shows no overall decrease")
        spl = interpolate.CubicSpline(s_tab, v_tab)
        sigma = lambda s: spl(np.asarray(s, dtype=float))
        s1 = spl.derivative(1)
        s2 = spl.derivative(2)
        s3 = spl.derivative(3)
        validity = (float(s_tab[0]), float(s_tab[-1]))
        params.update(s=s_tab.tolist(), values=v_tab.tolist())
    else:
        raise ModelError(f"unknown tension family {sg_type!r}")

    # coarse sanity of f' on a sample grid (exact positivity is rechecked by
    # validate_assumptions)
    bs = np.linspace(0.0, 4.0, 33)
    if np.any(f_d1(bs) <= 0):
        raise ModelError("isotherm slope f' is not positive on the sample grid")

    return IsothermModel(
        sigma=sigma,
        sigma_d1=s1,
        sigma_d2=s2,
        sigma_d3=s3,
        omega=omega,
        omega_c=omega_c,
        omega_b=omega_b,
        f=f,
        f_d1=f_d1,
        f_d2=f_d2,
        validity_range=validity,
        sigma_family=sg_type,
        omega_family=om_type,
        params=params,
    )


# ----- auxiliary potentials ---------------------------------------------------


@dataclass(frozen=True)
class AuxFunctions:
    """zeta_r / phi_r potentials with derivatives; vectorized over arrays."""

    model: IsothermModel
    r: float
    C0: float
    quad_tol: float
    s_min: float

    def _clamp(self, s) -> np.ndarray:
        a = np.asarray(s, dtype=float)
        return np.maximum(a, self.s_min)

    def sigma_log_integral(self, lo, hi) -> np.ndarray:
        """int_lo^hi sigma'(z)/z dz, elementwise; closed form when available."""
        lo = self._clamp(lo)
        hi = self._clamp(hi)
        fam = self.model.sigma_family
        if fam == "affine":
            b = self.model.params["b"]
            return -b * (np.log(hi) - np.log(lo))
        if fam == "exponential":
            b = self.model.params["b"]
            return -b * (special.exp1(lo) - special.exp1(hi))
        tol = self.quad_tol
        s1 = self.model.sigma_d1

        def one(a: float, c: float) -> float:
            if a == c:
                return 0.0
            val, _ = integrate.quad(
                lambda z: float(s1(z)) / z, a, c, epsrel=tol, epsabs=0.0, limit=200
            )
            return val

        return np.vectorize(one, otypes=[float])(lo, hi)

    def _phi_first_integral(self, s) -> np.ndarray:
        """int_0^s z sigma'(f(z)) f'(z)/f(z) dz; Langmuir gives the smooth
        integrand sigma'(f(z)) k2/(k2+z)."""
        s = np.asarray(s, dtype=float)
        k2 = self.model.params["k2"]
        if self.model.sigma_family == "affine":
            b = self.model.params["b"]
            return -b * k2 * np.log1p(s / k2)
        s1, f = self.model.sigma_d1, self.model.f
        tol = self.quad_tol

        def one(upper: float) -> float:
            if upper == 0.0:
                return 0.0
            val, _ = integrate.quad(
                lambda z: float(s1(f(z))) * k2 / (k2 + z),
                0.0,
                upper,
                epsrel=tol,
                epsabs=0.0,
                limit=200,
            )
            return val

        return np.vectorize(one, otypes=[float])(s)

    # zeta_r and derivatives -------------------------------------------------

    def zeta(self, s):
        sc = self._clamp(s)
        return self.model.sigma(sc) - sc * self.sigma_log_integral(self.r, sc)

    def zeta_d1(self, s):
        return -self.sigma_log_integral(self.r, self._clamp(s))

    def zeta_d2(self, s):
        sc = self._clamp(s)
        return -self.model.sigma_d1(sc) / sc

    # phi_r and derivatives ----------------------------------------------------

    def phi(self, s):
        sc = self._clamp(s)
        fs = self.model.f(sc)
        return self.C0 + self._phi_first_integral(sc) - sc * self.sigma_log_integral(self.r, fs)

    def phi_d1(self, s):
        return -self.sigma_log_integral(self.r, self.model.f(self._clamp(s)))

    def phi_d2(self, s):
        sc = self._clamp(s)
        fs = self.model.f(sc)
        return -self.model.sigma_d1(fs) * self.model.f_d1(sc) / fs


def build_aux_functions(
    model: IsothermModel,
    r: float,
    quad_tol: float = 1e-10,
    s_max: float = 10.0,
) -> AuxFunctions:
    """Build the auxiliary potentials for reference concentration r.

    C0 = 1 + max(0, -min of the shift-free part of phi_r) over 256 log-spaced
    samples in [s_min, s_max], which guarantees phi_r > 0 there.
    """
    lo, hi = model.validity_range
    if not (lo < r < hi):
        raise ModelError(f"reference concentration r={r} outside validity range {model.validity_range}")
    s_min = 1e-8 * r
    aux = AuxFunctions(model=model, r=float(r), C0=0.0, quad_tol=float(quad_tol), s_min=s_min)
    grid = np.logspace(np.log10(s_min), np.log10(s_max), 256)
    free_part = aux.phi(grid)  # C0 = 0 here
    C0 = 1.0 + max(0.0, -float(np.min(free_part)))
    return AuxFunctions(model=model, r=float(r), C0=C0, quad_tol=float(quad_tol), s_min=s_min)


# ----- equilibrium -------------------------------------------------------------


@dataclass(frozen=True)
class EquilibriumState:
    """Linearization point: equilibrium concentrations and coefficients."""

    c0: float
    b0: float
    M: float
    omega_c0: float
    omega_b0: float
    sigma0: float
    sigma0_d1: float
    area_Sigma: float
    vol_Omega: float
    f_d1_b0: float

    def __post_init__(self) -> None:
        if self.c0 <= 0 or self.b0 <= 0:
            raise ModelError("equilibrium concentrations must be positive")
        if self.omega_c0 <= 0 or self.omega_b0 >= 0:
            raise ModelError("equilibrium flux coefficients have the wrong sign")
        if self.sigma0 <= 0 or self.sigma0_d1 >= 0:
            raise ModelError("equilibrium tension must be positive and decreasing")


def solve_equilibrium(
    model: IsothermModel, M: float, area_Sigma: float, vol_Omega: float
) -> EquilibriumState:
    """Solve area*f(b0) + vol*b0 = M for the unique flat equilibrium.

    The map b -> area*f(b) + vol*b is strictly increasing (f' > 0), so the
    root is bracketed in [0, M/vol]; bisection to 1e-8 is polished by Newton
    to relative 1e-14.
    """
    if area_Sigma <= 0 or vol_Omega <= 0:
        raise ModelError("area and volume must be positive")
    f0 = float(model.f(0.0))
    if M <= area_Sigma * f0:
        raise ModelError("total mass below the admissible threshold area*f(0)")

    def g(b: float) -> float:
        return area_Sigma * float(model.f(b)) + vol_Omega * b - M

    lo, hi = 0.0, M / vol_Omega
    if g(lo) > 0 or g(hi) < 0:
        raise ModelError("equilibrium root not bracketed in [0, M/vol]")
    while hi - lo > 1e-8:
        mid = 0.5 * (lo + hi)
        if g(mid) <= 0:
            lo = mid
        else:
            hi = mid
    b0 = 0.5 * (lo + hi)
    for _ in range(50):
        gb = g(b0)
        dg = area_Sigma * float(model.f_d1(b0)) + vol_Omega
        step = gb / dg
        b0 -= step
        if abs(step) <= 1e-14 * max(abs(b0), 1e-300):
            break

    c0 = float(model.f(b0))
    vlo, vhi = model.validity_range
    if not (vlo < c0 < vhi):
        raise ModelError(f"equilibrium c0={c0} outside tension validity range")
    return EquilibriumState(
        c0=c0,
        b0=b0,
        M=float(M),
        omega_c0=float(model.omega_c(c0, b0)),
        omega_b0=float(model.omega_b(c0, b0)),
        sigma0=float(model.sigma(c0)),
        sigma0_d1=float(model.sigma_d1(c0)),
        area_Sigma=float(area_Sigma),
        vol_Omega=float(vol_Omega),
        f_d1_b0=float(model.f_d1(b0)),
    )


# ----- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    min_sigma: float
    max_sigma_d1: float
    min_f_d1: float
    worst_sign_violation: float
    isotherm_residual: float
    failures: tuple[str, ...]


def validate_assumptions(
    model: IsothermModel,
    c_range: tuple[float, float] | None = None,
    b_range: tuple[float, float] = (1e-4, 2.0),
    n_samples: int = 64,
) -> ValidationReport:
    """Sample the structural assumptions on a grid and report the worst cases.

    Checks: sigma > 0 and sigma' < 0 on c_range; f' > 0 on b_range;
    sign(omega(c, b)) = sign(c - f(b)) away from the isotherm; omega(f(b), b)
    vanishes to arithmetic tolerance.
    """
    if c_range is None:
        lo, hi = model.validity_range
        c_hi = min(1.0, 0.99 * hi) if np.isfinite(hi) else 1.0
        c_range = (max(1e-4, lo + 1e-12), c_hi)
    cs = np.linspace(c_range[0], c_range[1], n_samples)
    bs = np.linspace(b_range[0], b_range[1], n_samples)
    failures: list[str] = []

    sig = np.asarray(model.sigma(cs), dtype=float)
    dsig = np.asarray(model.sigma_d1(cs), dtype=float)
    min_sigma = float(np.min(sig))
    max_sigma_d1 = float(np.max(dsig))
    if min_sigma <= 0:
        failures.append(f"sigma <= 0 at c = {cs[int(np.argmin(sig))]:.6g}")
    if max_sigma_d1 >= 0:
        failures.append(f"sigma' >= 0 at c = {cs[int(np.argmax(dsig))]:.6g}")

    df = np.asarray(model.f_d1(bs), dtype=float)
    min_f_d1 = float(np.min(df))
    if min_f_d1 <= 0:
        failures.append(f"f' <= 0 at b = {bs[int(np.argmin(df))]:.6g}")

    C, B = np.meshgrid(cs, bs, indexing="ij")
    delta = C - np.asarray(model.f(B), dtype=float)
    om = np.asarray(model.omega(C, B), dtype=float)
    off = np.abs(delta) > 1e-10
    viol = np.where(off, np.maximum(0.0, -np.sign(delta) * om), 0.0)
    worst = float(np.max(viol)) if np.any(off) else 0.0
    if worst > 1e-12:
        i, j = np.unravel_index(int(np.argmax(viol)), viol.shape)
        failures.append(
            f"sign(omega) != sign(c - f(b)) at (c, b) = ({C[i, j]:.6g}, {B[i, j]:.6g})"
        )

    iso = float(np.max(np.abs(model.omega(model.f(bs), bs))))
    if iso > 1e-10:
        failures.append(f"omega(f(b), b) residual {iso:.3e}")

    return ValidationReport(
        passed=not failures,
        min_sigma=min_sigma,
        max_sigma_d1=max_sigma_d1,
        min_f_d1=min_f_d1,
        worst_sign_violation=worst,
        isotherm_residual=iso,
        failures=tuple(failures),
    )


def exchange_integrand(c, b, aux: AuxFunctions):
    """(zeta_r'(c) - phi_r'(b)) * omega(c, b) = (int_c^{f(b)} sigma'/z dz) * omega(c, b).

    Analytically nonnegative: sigma' < 0 makes the integral and omega(c, b)
    carry opposite signs exactly when c != f(b).
    """
    model = aux.model
    fb = model.f(np.asarray(b, dtype=float))
    integral = aux.sigma_log_integral(c, fb)
    return integral * model.omega(c, b)

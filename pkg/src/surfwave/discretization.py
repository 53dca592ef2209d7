"""Mixed Fourier-Chebyshev discretization of the slab Omega = T^2 x (-L3, 0).

Horizontal directions are periodic with periods L1, L2 and are sampled on a
uniform N1 x N2 grid; fields are represented by their nodal values and, when
needed, by Fourier coefficients normalized so that

    f(x) = sum_n fhat(n) exp(2 pi i (n1 x1 / L1 + n2 x2 / L2)),

i.e. fhat = fft2(f) / (N1 N2) and Parseval reads
int_Sigma |f|^2 = L1 L2 sum_n |fhat(n)|^2.

The vertical direction uses Chebyshev-Gauss-Lobatto collocation on [-L3, 0]
with nodes x3_j = (cos(pi j / Nz) - 1) * L3 / 2, strictly decreasing from the
free surface x3 = 0 (j = 0) to the bottom x3 = -L3 (j = Nz).  Differentiation
is the standard dense collocation matrix; integration uses Clenshaw-Curtis
weights, which pair with the differentiation matrix to give exact summation by
parts on polynomials of degree <= Nz.

Per-horizontal-mode vertical boundary value problems (Neumann scalar, monolithic
velocity-pressure) are assembled as dense collocation systems and solved with
LAPACK.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import NDArray


class DiscretizationError(Exception):
    """Raised when grid construction or a per-mode solve is ill-posed."""


def chebyshev_lobatto(n: int) -> tuple[NDArray, NDArray]:
    """Nodes s_j = cos(pi j / n) on [-1, 1] and the collocation derivative matrix.

    Returns (s, D) with s of shape (n+1,) descending from +1 to -1 and
    D @ f giving the derivative of the degree-n interpolant of f at the nodes.
    """
    if n < 2:
        raise DiscretizationError("need at least 3 Chebyshev nodes")
    j = np.arange(n + 1)
    s = np.cos(np.pi * j / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** j
    ds = s[:, None] - s[None, :]
    D = np.outer(c, 1.0 / c) / (ds + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    return s, D


def clenshaw_curtis(n: int) -> NDArray:
    """Clenshaw-Curtis quadrature weights on [-1, 1] for n+1 Lobatto nodes."""
    if n < 2:
        raise DiscretizationError("need at least 3 quadrature nodes")
    w = np.zeros(n + 1)
    jj = np.arange(1, n)
    v = np.ones(n - 1)
    for k in range(1, n // 2 + 1):
        v -= 2.0 * np.cos(2.0 * k * np.pi * jj / n) / (4.0 * k * k - 1.0) \
            * (1.0 if 2 * k < n else 0.5)
    w[1:-1] = 2.0 * v / n
    w[0] = w[-1] = 1.0 / (n * n - 1.0 + (n % 2))
    return w


@dataclass(frozen=True)
class Grid:
    """Tensor grid for the slab: uniform Fourier x1, x2 and Chebyshev x3.

    N1, N2 must be even (real FFT symmetry); Nz+1 vertical nodes run from the
    free surface (index 0) down to the bottom (index Nz).
    """

    L1: float
    L2: float
    L3: float
    N1: int
    N2: int
    Nz: int

    def __post_init__(self) -> None:
        if min(self.L1, self.L2, self.L3) <= 0.0:
            raise DiscretizationError("box lengths must be positive")
        if self.N1 % 2 or self.N2 % 2 or self.N1 < 4 or self.N2 < 4:
            raise DiscretizationError("N1, N2 must be even and >= 4")
        if self.Nz < 4:
            raise DiscretizationError("Nz must be >= 4")

    # ----- geometry of the index space -------------------------------------

    @cached_property
    def x1(self) -> NDArray:
        return np.arange(self.N1) * (self.L1 / self.N1)

    @cached_property
    def x2(self) -> NDArray:
        return np.arange(self.N2) * (self.L2 / self.N2)

    @cached_property
    def x3(self) -> NDArray:
        s, _ = chebyshev_lobatto(self.Nz)
        return (s - 1.0) * (self.L3 / 2.0)

    @cached_property
    def Dz(self) -> NDArray:
        _, D = chebyshev_lobatto(self.Nz)
        return D * (2.0 / self.L3)

    @cached_property
    def Dz2(self) -> NDArray:
        return self.Dz @ self.Dz

    @cached_property
    def wz(self) -> NDArray:
        return clenshaw_curtis(self.Nz) * (self.L3 / 2.0)

    @cached_property
    def n1(self) -> NDArray:
        return np.fft.fftfreq(self.N1, 1.0 / self.N1).astype(int)

    @cached_property
    def n2(self) -> NDArray:
        return np.fft.fftfreq(self.N2, 1.0 / self.N2).astype(int)

    @cached_property
    def k1(self) -> NDArray:
        """2 pi n1 / L1 broadcast to (N1, N2)."""
        return np.broadcast_to(
            (2.0 * np.pi * self.n1 / self.L1)[:, None], (self.N1, self.N2)
        ).copy()

    @cached_property
    def k2(self) -> NDArray:
        return np.broadcast_to(
            (2.0 * np.pi * self.n2 / self.L2)[None, :], (self.N1, self.N2)
        ).copy()

    @cached_property
    def k_sq(self) -> NDArray:
        return self.k1**2 + self.k2**2

    @cached_property
    def k_abs(self) -> NDArray:
        return np.sqrt(self.k_sq)

    @cached_property
    def dealias_keep(self) -> NDArray:
        """2/3-rule retention mask: |n_i| <= N_i // 3."""
        m1 = np.abs(self.n1) <= self.N1 // 3
        m2 = np.abs(self.n2) <= self.N2 // 3
        return m1[:, None] & m2[None, :]

    @property
    def area(self) -> float:
        return self.L1 * self.L2

    @property
    def volume(self) -> float:
        return self.L1 * self.L2 * self.L3

    @property
    def shape_surface(self) -> tuple[int, int]:
        return (self.N1, self.N2)

    @property
    def shape_bulk(self) -> tuple[int, int, int]:
        return (self.N1, self.N2, self.Nz + 1)

    # ----- transforms -------------------------------------------------------

    def to_hat(self, vals: NDArray) -> NDArray:
        """Nodal values -> Fourier coefficients in the horizontal directions."""
        return np.fft.fft2(vals, axes=(0, 1)) / (self.N1 * self.N2)

    def to_vals(self, hat: NDArray) -> NDArray:
        """Fourier coefficients -> real nodal values."""
        return np.fft.ifft2(hat * (self.N1 * self.N2), axes=(0, 1)).real

    def _kbands(self, arr_ndim: int, base: NDArray) -> NDArray:
        return base if arr_ndim == 2 else base[:, :, None]

    def dx1(self, vals: NDArray) -> NDArray:
        hat = self.to_hat(vals)
        return self.to_vals(1j * self._kbands(vals.ndim, self.k1) * hat)

    def dx2(self, vals: NDArray) -> NDArray:
        hat = self.to_hat(vals)
        return self.to_vals(1j * self._kbands(vals.ndim, self.k2) * hat)

    def dx3(self, vals: NDArray) -> NDArray:
        return vals @ self.Dz.T

    def dealias(self, vals: NDArray) -> NDArray:
        hat = self.to_hat(vals)
        hat *= self._kbands(vals.ndim, self.dealias_keep)
        return self.to_vals(hat)

    # ----- quadrature -------------------------------------------------------

    def int_surface(self, vals: NDArray) -> float:
        return float(np.mean(vals, axis=(0, 1)) * self.area)

    def int_bulk(self, vals: NDArray) -> float:
        return float(np.mean(vals @ self.wz, axis=(0, 1)) * self.area)

    def surface_mean(self, vals: NDArray) -> float:
        return float(np.mean(vals, axis=(0, 1)))


def quadrature_surface(grid: Grid, vals: NDArray, weight: NDArray | None = None) -> float:
    """Trapezoidal (spectrally exact) surface integral of vals (optionally weighted)."""
    v = vals if weight is None else vals * weight
    return grid.int_surface(v)


# ----- field containers ------------------------------------------------------


def _vals(f) -> NDArray:
    return f.vals if hasattr(f, "vals") else np.asarray(f)


@dataclass(frozen=True)
class SurfaceField:
    """Real doubly periodic field on the reference surface, nodal values (N1, N2)."""

    grid: Grid
    vals: NDArray

    def __post_init__(self) -> None:
        v = np.asarray(self.vals, dtype=float)
        if v.shape != self.grid.shape_surface:
            raise DiscretizationError(
                f"surface field shape {v.shape} != {self.grid.shape_surface}"
            )
        object.__setattr__(self, "vals", v)

    @property
    def hat(self) -> NDArray:
        return self.grid.to_hat(self.vals)

    @classmethod
    def from_hat(cls, grid: Grid, hat: NDArray) -> "SurfaceField":
        return cls(grid, grid.to_vals(hat))

    @classmethod
    def zeros(cls, grid: Grid) -> "SurfaceField":
        return cls(grid, np.zeros(grid.shape_surface))

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm_surface(self.grid, self.vals, s)


@dataclass(frozen=True)
class BulkField:
    """Real field on the reference slab, nodal values (N1, N2, Nz+1)."""

    grid: Grid
    vals: NDArray

    def __post_init__(self) -> None:
        v = np.asarray(self.vals, dtype=float)
        if v.shape != self.grid.shape_bulk:
            raise DiscretizationError(
                f"bulk field shape {v.shape} != {self.grid.shape_bulk}"
            )
        object.__setattr__(self, "vals", v)

    @property
    def hat(self) -> NDArray:
        return self.grid.to_hat(self.vals)

    @classmethod
    def from_hat(cls, grid: Grid, hat: NDArray) -> "BulkField":
        return cls(grid, grid.to_vals(hat))

    @classmethod
    def zeros(cls, grid: Grid) -> "BulkField":
        return cls(grid, np.zeros(grid.shape_bulk))

    @property
    def top(self) -> NDArray:
        """Trace on the free surface x3 = 0."""
        return self.vals[:, :, 0]

    def norm(self, k: int = 0) -> float:
        return sobolev_norm_bulk(self.grid, self.vals, k)


@dataclass(frozen=True)
class SobolevSpec:
    """Norm selector: fractional order on the surface, integer order in the bulk."""

    order: float
    domain: str  # "surface" | "bulk"

    def __post_init__(self) -> None:
        if self.domain not in ("surface", "bulk"):
            raise DiscretizationError("domain must be 'surface' or 'bulk'")
        if self.domain == "bulk" and (
            self.order < 0 or self.order != int(self.order) or self.order > 3
        ):
            raise DiscretizationError("bulk norms support integer order 0..3")

    def norm(self, grid: Grid, f) -> float:
        v = _vals(f)
        if self.domain == "surface":
            return sobolev_norm_surface(grid, v, self.order)
        return sobolev_norm_bulk(grid, v, int(self.order))


def sobolev_norm_surface(grid: Grid, f, s: float) -> float:
    """H^s(Sigma) norm via the Fourier multiplier (1 + |2 pi nbar|^2)^s."""
    hat = grid.to_hat(_vals(f))
    mult = (1.0 + grid.k_sq) ** s
    return float(np.sqrt(grid.area * np.sum(mult * np.abs(hat) ** 2)))


def sobolev_norm_bulk(grid: Grid, f, k: int) -> float:
    """H^k(Omega) norm, k = 0..3, summing all mixed derivatives up to order k."""
    if k < 0 or k > 3:
        raise DiscretizationError("bulk norms support integer order 0..3")
    hat = grid.to_hat(_vals(f))
    # vertical derivatives of the interpolant, reused across multi-indices
    dzs = [hat]
    for _ in range(k):
        dzs.append(dzs[-1] @ grid.Dz.T)
    wk1 = grid.k1[:, :, None] ** 2
    wk2 = grid.k2[:, :, None] ** 2
    total = 0.0
    for a in range(k + 1):
        for b in range(k + 1 - a):
            for c in range(k + 1 - a - b):
                dens = (wk1**a) * (wk2**b) * np.abs(dzs[c]) ** 2
                total += float(np.sum(dens @ grid.wz))
    return float(np.sqrt(grid.area * total))


# ----- per-mode vertical solvers ---------------------------------------------


def neumann_solve(grid: Grid, phi, psi) -> BulkField:
    """Solve -Delta b = phi with d3 b = psi on top, d3 b = 0 on the bottom.

    Per horizontal mode:  -(Dz^2 - |k|^2) bhat = phihat with Neumann rows at
    both ends.  The n = 0 mode is compatible only if int phi_0 dx3 + psi_0 = 0;
    the data is projected onto that constraint and the constant fixed by a
    zero-mean gauge.  The returned field is normalized to zero volume mean.
    """
    phi_hat = grid.to_hat(_vals(phi))
    psi_hat = grid.to_hat(_vals(psi))
    nz1 = grid.Nz + 1
    nmodes = grid.N1 * grid.N2
    ksq = grid.k_sq.reshape(nmodes)
    eye = np.eye(nz1)

    mats = np.broadcast_to(-grid.Dz2, (nmodes, nz1, nz1)).copy()
    mats += ksq[:, None, None] * eye
    rhs = phi_hat.reshape(nmodes, nz1).astype(complex).copy()

    # boundary Neumann rows
    mats[:, 0, :] = grid.Dz[0, :]
    mats[:, -1, :] = grid.Dz[-1, :]
    rhs[:, 0] = psi_hat.reshape(nmodes)
    rhs[:, -1] = 0.0

    # n = 0: project the data onto the compatibility constraint
    # int phi dx3 + psi = 0, keep both Neumann rows exact, and spend one
    # interior row on a zero-mean gauge that fixes the free constant.
    i0 = 0  # fft layout puts n = (0, 0) first
    wz = grid.wz
    defect = np.dot(wz, phi_hat[0, 0, :]).real + psi_hat[0, 0].real
    rhs[i0, 1:-1] = phi_hat[0, 0, 1:-1] - defect / grid.L3
    jg = nz1 // 2
    mats[i0, jg, :] = wz
    rhs[i0, jg] = 0.0

    sol = np.linalg.solve(mats, rhs[:, :, None])[:, :, 0].reshape(grid.shape_bulk)
    out = grid.to_vals(sol)
    out -= grid.int_bulk(out) / grid.volume
    return BulkField(grid, out)


@dataclass(frozen=True)
class StokesModeSolution:
    u_hat: NDArray  # (3, Nz+1) complex
    p_hat: NDArray  # (Nz+1,) complex
    stress_residual: float
    divergence_residual: float


def stokes_mode_index(nz1: int) -> dict[str, slice]:
    return {
        "u1": slice(0, nz1),
        "u2": slice(nz1, 2 * nz1),
        "u3": slice(2 * nz1, 3 * nz1),
        "p": slice(3 * nz1, 4 * nz1),
    }


def stokes_mode_matrix(grid: Grid, kx: float, ky: float, alpha: float) -> NDArray:
    """Monolithic collocation matrix for one horizontal mode of the flat problem

        (alpha - Delta_n) u + grad_n p = r,   div_n u = g2,
        free-surface stress rows at j = 0, no-slip at j = Nz,

    with grad_n = (i kx, i ky, Dz) and Delta_n = Dz^2 - |k|^2.  Row layout:
    momentum at j = 1..Nz-1 per component, three stress rows at j = 0, three
    no-slip rows at j = Nz, and the divergence at every node.  The stress rows
    carry only the velocity/pressure parts; surface-tension and Marangoni data
    belong to the right-hand side.
    """
    nz1 = grid.Nz + 1
    ix = stokes_mode_index(nz1)
    dim = 4 * nz1
    ksq = kx * kx + ky * ky
    lap = grid.Dz2 - ksq * np.eye(nz1)
    helm = alpha * np.eye(nz1) - lap
    A = np.zeros((dim, dim), dtype=complex)
    interior = slice(1, grid.Nz)

    for comp, kmult in (("u1", 1j * kx), ("u2", 1j * ky)):
        sl = ix[comp]
        rows = slice(sl.start + 1, sl.start + grid.Nz)
        A[rows, sl] = helm[interior, :]
        A[rows, ix["p"]] = kmult * np.eye(nz1)[interior, :]
    sl = ix["u3"]
    rows = slice(sl.start + 1, sl.start + grid.Nz)
    A[rows, sl] = helm[interior, :]
    A[rows, ix["p"]] = grid.Dz[interior, :]

    # stress rows at the surface node j = 0
    r = ix["u1"].start
    A[r, ix["u1"]] = -grid.Dz[0, :]
    A[r, ix["u3"].start] = -1j * kx
    r = ix["u2"].start
    A[r, ix["u2"]] = -grid.Dz[0, :]
    A[r, ix["u3"].start] = -1j * ky
    r = ix["u3"].start
    A[r, ix["u3"]] = -2.0 * grid.Dz[0, :]
    A[r, ix["p"].start] = 1.0

    # no-slip rows at the bottom node j = Nz
    for comp in ("u1", "u2", "u3"):
        r = ix[comp].stop - 1
        A[r, r] = 1.0

    # divergence rows paired with the pressure unknowns
    A[ix["p"], ix["u1"]] = 1j * kx * np.eye(nz1)
    A[ix["p"], ix["u2"]] = 1j * ky * np.eye(nz1)
    A[ix["p"], ix["u3"]] = grid.Dz

    return A


def stokes_mode_solve(
    grid: Grid,
    n: tuple[int, int],
    rhs: NDArray,
    bc: dict,
    eq=None,
    alpha: float = 0.0,
    div_rhs: NDArray | None = None,
) -> StokesModeSolution:
    """Solve one horizontal mode of the flat free-surface Stokes problem.

    rhs: (3, Nz+1) complex momentum data.  bc keys (all optional, default 0):
    'eta', 'c' (surface unknown data entering the stress rows with the
    equilibrium coefficients sigma0 = sigma(c0), dsigma0 = sigma'(c0) drawn
    from eq) and 'extra' (3,) raw stress data.  div_rhs: (Nz+1,) divergence
    data.  alpha >= 0 is the implicit time-stepping shift.

    The n = 0 mode is reduced: the vertical velocity is slaved to the
    divergence constraint and no-slip, the pressure is integrated from the
    vertical momentum row and pinned by the normal stress condition, and the
    horizontal components solve decoupled 1-D problems.
    """
    n1, n2 = n
    kx = 2.0 * np.pi * n1 / grid.L1
    ky = 2.0 * np.pi * n2 / grid.L2
    nz1 = grid.Nz + 1
    sigma0 = float(eq.sigma0) if eq is not None else 0.0
    dsigma0 = float(eq.sigma0_d1) if eq is not None else 0.0
    eta_hat = complex(bc.get("eta", 0.0))
    c_hat = complex(bc.get("c", 0.0))
    extra = np.asarray(bc.get("extra", np.zeros(3, dtype=complex)), dtype=complex)
    g_div = (
        np.zeros(nz1, dtype=complex)
        if div_rhs is None
        else np.asarray(div_rhs, dtype=complex)
    )
    rhs = np.asarray(rhs, dtype=complex)

    ksq = kx * kx + ky * ky
    g_t1 = -dsigma0 * 1j * kx * c_hat + extra[0]
    g_t2 = -dsigma0 * 1j * ky * c_hat + extra[1]
    g_n = (1.0 + sigma0 * ksq) * eta_hat + extra[2]

    if n1 == 0 and n2 == 0:
        return _stokes_mode_zero(grid, rhs, g_t1, g_t2, g_n, g_div, alpha)

    A = stokes_mode_matrix(grid, kx, ky, alpha)
    ix = stokes_mode_index(nz1)
    b = np.zeros(4 * nz1, dtype=complex)
    for ci, comp in enumerate(("u1", "u2", "u3")):
        sl = ix[comp]
        b[sl.start + 1 : sl.start + grid.Nz] = rhs[ci, 1 : grid.Nz]
    b[ix["u1"].start] = g_t1
    b[ix["u2"].start] = g_t2
    b[ix["u3"].start] = g_n
    b[ix["p"]] = g_div

    y = np.linalg.solve(A, b)
    u_hat = np.stack([y[ix["u1"]], y[ix["u2"]], y[ix["u3"]]])
    p_hat = y[ix["p"]]
    return _mode_solution(grid, kx, ky, u_hat, p_hat, g_t1, g_t2, g_n, g_div)


def _stokes_mode_zero(grid, rhs, g_t1, g_t2, g_n, g_div, alpha) -> StokesModeSolution:
    nz1 = grid.Nz + 1
    # vertical velocity slaved to the divergence constraint + bottom no-slip
    M = grid.Dz.copy().astype(complex)
    M[-1, :] = 0.0
    M[-1, -1] = 1.0
    d = g_div.astype(complex).copy()
    d[-1] = 0.0
    u3 = np.linalg.solve(M, d)
    # pressure from vertical momentum, pinned by the normal stress row
    lap = grid.Dz2
    P = grid.Dz.copy().astype(complex)
    P[0, :] = 0.0
    P[0, 0] = 1.0
    pr = rhs[2].astype(complex) - (alpha * u3 - lap @ u3)
    pr[0] = 2.0 * (grid.Dz[0, :] @ u3) + g_n
    p = np.linalg.solve(P, pr)
    # horizontal components: 1-D Helmholtz with stress row on top, no-slip below
    u12 = []
    for ci, g_t in ((0, g_t1), (1, g_t2)):
        H = alpha * np.eye(nz1) - lap
        H = H.astype(complex)
        H[0, :] = -grid.Dz[0, :]
        H[-1, :] = 0.0
        H[-1, -1] = 1.0
        r = rhs[ci].astype(complex).copy()
        r[0] = g_t
        r[-1] = 0.0
        u12.append(np.linalg.solve(H, r))
    u_hat = np.stack([u12[0], u12[1], u3])
    return _mode_solution(grid, 0.0, 0.0, u_hat, p, g_t1, g_t2, g_n, g_div)


def _mode_solution(grid, kx, ky, u_hat, p_hat, g_t1, g_t2, g_n, g_div):
    div = 1j * kx * u_hat[0] + 1j * ky * u_hat[1] + grid.Dz @ u_hat[2]
    div_res = float(np.max(np.abs(div - g_div)))
    s1 = -(grid.Dz[0, :] @ u_hat[0]) - 1j * kx * u_hat[2, 0] - g_t1
    s2 = -(grid.Dz[0, :] @ u_hat[1]) - 1j * ky * u_hat[2, 0] - g_t2
    s3 = p_hat[0] - 2.0 * (grid.Dz[0, :] @ u_hat[2]) - g_n
    stress_res = float(max(abs(s1), abs(s2), abs(s3)))
    return StokesModeSolution(u_hat, p_hat, stress_res, div_res)

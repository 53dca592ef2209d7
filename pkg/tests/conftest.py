"""Shared fixtures: the unit-box reference problem and state factories."""

import numpy as np
import pytest

from surfwave.analysis import mode_layout
from surfwave.discretization import Grid
from surfwave.dynamics import FlowState, project_initial_data
from surfwave.geometry import build_geometry
from surfwave.model import build_aux_functions, build_model, solve_equilibrium

GOLDEN_B0 = (np.sqrt(5.0) - 1.0) / 2.0
GOLDEN_C0 = (3.0 - np.sqrt(5.0)) / 2.0


@pytest.fixture(scope="session")
def box_model():
    return build_model({})  # langmuir k1 = k2 = 1, affine sigma = 2 - c


@pytest.fixture(scope="session")
def grid8():
    return Grid(1.0, 1.0, 1.0, 8, 8, 8)


@pytest.fixture(scope="session")
def grid16():
    return Grid(1.0, 1.0, 1.0, 16, 16, 16)


@pytest.fixture(scope="session")
def box_eq(box_model):
    # unit box: area = volume = 1, M = 1
    return solve_equilibrium(box_model, 1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def box_aux(box_model, box_eq):
    return build_aux_functions(box_model, box_eq.c0)


def trig_shapes(grid):
    """Fixed low-mode shapes with every field family populated.

    Gentle spectral content keeps the geometric expansion parameter small so
    quadratic scaling of the forcing bundles is observable at eps = 1e-2.
    """
    s1 = grid.x1[:, None] * np.ones((1, grid.N2))
    s2 = grid.x2[None, :] * np.ones((grid.N1, 1))
    tp = 2.0 * np.pi
    zc = grid.x3[None, None, :]
    ones_b = np.ones(grid.shape_bulk)
    zpr = (zc + grid.L3) ** 2 * (1.0 + 0.5 * zc) * ones_b
    bprof = np.cos(np.pi * (zc + grid.L3) / grid.L3) * ones_b

    eta = 0.5 * (np.sin(tp * s1) + 0.5 * np.cos(tp * s2) + 0.3 * np.sin(tp * (s1 + s2)))
    c = np.cos(tp * s1) + 0.4 * np.sin(tp * s2)
    b = (np.cos(tp * s1) + 0.5 * np.sin(tp * s2))[:, :, None] * bprof
    u = np.stack([
        np.sin(tp * s1)[:, :, None] * zpr,
        np.cos(tp * s2)[:, :, None] * zpr,
        np.sin(tp * (s1 + s2))[:, :, None] * zpr,
    ])
    return u, eta, c, b


def make_trig_state(grid, model, eq, eps, beta=1.0, gamma=1.0):
    """Admissible state at amplitude eps from the fixed trig shapes."""
    u, eta, c, b = trig_shapes(grid)
    eta_s = eps * eta
    cache = build_geometry(grid, eta_s - float(np.mean(eta_s)))
    c_t = eq.c0 + eps * c
    b_t = eq.b0 + eps * b
    ms = grid.int_surface(c_t * cache.sqrt_metric)
    mb = grid.int_bulk(cache.J * b_t)
    vol = grid.int_bulk(cache.J * np.ones(grid.shape_bulk))
    b_t = b_t + (eq.M - ms - mb) / vol
    return project_initial_data(grid, eq, model, beta, gamma, eps * u, eta_s, c_t, b_t)


def embed_mode_zero(grid, eq, model, vec, scale, beta=1.0, gamma=1.0):
    """FlowState carrying a (0, 0) per-mode eigenvector at the given scale.

    The generalized eigenvector of a real pencil with real eigenvalue is real
    up to a complex phase, which is normalized away before embedding.
    """
    lay = mode_layout(grid.Nz + 1)
    pivot = vec[np.argmax(np.abs(vec))]
    v = np.real(vec / pivot) * scale
    ones_b = np.ones(grid.shape_bulk)
    ones_s = np.ones(grid.shape_surface)
    u = np.stack([v[lay[f"u{i}"]][None, None, :] * ones_b for i in (1, 2, 3)])
    p = v[lay["p"]][None, None, :] * ones_b
    eta = float(v[lay["eta"]]) * ones_s
    c = float(v[lay["c"]]) * ones_s
    b = v[lay["b"]][None, None, :] * ones_b
    return FlowState(grid, eq, model, beta, gamma, 0.0, u, p, eta - eta.mean(), c, b)

"""Independent reference computations used by the self-test and the suite.

Everything here deliberately avoids the spectral/entropic code paths it is
meant to check: dense operator matrices, exact-LP transport, and a
projected-gradient minimizer over the discrete simplex.
"""

from __future__ import annotations

import numpy as np

from .grid import DensityView, Field, GridSpec
from .params import ModelParams
from .transport import lp_exact_w2


def dense_laplacian_matrix(grid: GridSpec) -> np.ndarray:
    """Exact dense matrix of the spectral Laplacian (DFT diagonalization)."""
    n = grid.n
    k = grid.wavenumbers()
    j = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(j, j) / n)
    Finv = np.conj(F) / n
    lap1 = np.real(Finv @ np.diag(-(k ** 2)) @ F)
    eye = np.eye(n)
    total = np.zeros((grid.num_cells, grid.num_cells))
    for axis in range(grid.d):
        mats = [lap1 if a == axis else eye for a in range(grid.d)]
        term = mats[0]
        for m in mats[1:]:
            term = np.kron(term, m)
        total += term
    return total


def dense_helmholtz_solve(alpha: float, kappa: float, rhs: Field) -> np.ndarray:
    A = alpha * np.eye(rhs.grid.num_cells) - kappa * dense_laplacian_matrix(rhs.grid)
    return np.linalg.solve(A, rhs.values)


def dense_biharmonic_solve(rhs: Field) -> np.ndarray:
    """Solve the squared-Laplacian problem on the mean-zero subspace."""
    grid = rhs.grid
    N = grid.num_cells
    lap = dense_laplacian_matrix(grid)
    A = lap @ lap
    # pin the mean to zero instead of the singular zero mode
    A_aug = np.vstack([A, np.ones((1, N)) / N])
    b_aug = np.concatenate([rhs.values, [0.0]])
    sol, *_ = np.linalg.lstsq(A_aug, b_aug, rcond=None)
    return sol


def centered_difference_gradient(f: Field, axis: int) -> np.ndarray:
    """Second-order periodic finite difference, the low-tech cross-check."""
    arr = f.array
    h = f.grid.spacing
    return (np.roll(arr, -1, axis=axis) - np.roll(arr, 1, axis=axis)) / (2 * h)


def project_simplex(vals: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total}."""
    srt = np.sort(vals)[::-1]
    csum = np.cumsum(srt) - total
    idx = np.arange(1, len(vals) + 1)
    cond = srt - csum / idx > 0
    rho = idx[cond][-1]
    theta = csum[cond][-1] / rho
    return np.maximum(vals - theta, 0.0)


def jko_objective_exact(u: DensityView, prev: DensityView, v: Field,
                        p: ModelParams) -> float:
    """Sub-step objective with the exact LP distance, no entropic smoothing."""
    from .energy import eval_E

    return eval_E(u, v, p) + lp_exact_w2(u, prev).cost / (2.0 * p.tau)


def jko_bruteforce(prev: DensityView, v: Field, p: ModelParams,
                   iters: int = 400, step0: float = 0.5) -> DensityView:
    """Projected gradient with exact LP distances over the mass simplex.

    Small instances only: every gradient needs one LP solve for the dual
    potential on the moving marginal, and every backtrack another.  Meant
    for strictly positive iterates, where the LP duals cover every cell.
    """
    grid = prev.grid
    hw = grid.cell_volume
    target = prev.mass / hw
    vals = prev.clamped().copy()
    vals = project_simplex(vals, target)

    def objective(x: np.ndarray) -> float:
        return jko_objective_exact(DensityView(Field(grid, x)), prev, v, p)

    cur = objective(vals)
    best_vals, best_obj = vals.copy(), cur
    step = step0
    for _ in range(iters):
        plan = lp_exact_w2(DensityView(Field(grid, vals)), prev)
        dual = np.zeros(grid.num_cells)
        dual[plan.src_support] = plan.src_potential
        grad = hw * (p.m / (p.m - 1.0) * np.maximum(vals, 0.0) ** (p.m - 1.0)
                     - v.values + dual / (2.0 * p.tau))
        improved = False
        while step > 1e-12:
            cand = project_simplex(vals - step * grad, target)
            obj = objective(cand)
            if obj < cur - 1e-15:
                vals, cur = cand, obj
                improved = True
                step *= 1.3
                break
            step *= 0.5
        if cur < best_obj:
            best_vals, best_obj = vals.copy(), cur
        if not improved and step <= 1e-12:
            break
    return DensityView(Field(grid, best_vals))
